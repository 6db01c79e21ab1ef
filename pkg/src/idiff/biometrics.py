"""Genuine/imposter comparison scores and verification metrics.

Scores are similarities (higher = more alike).  At threshold τ a pair is
accepted when its score is >= τ, so

    FMR(τ)  = fraction of imposter scores >= τ
    FNMR(τ) = fraction of genuine scores  <  τ
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        for name in ("genuine", "imposter"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} scores contain non-finite values")
            object.__setattr__(self, name, arr)

    def require_nonempty(self) -> None:
        if self.genuine.size == 0 or self.imposter.size == 0:
            raise ValueError("genuine and imposter score sets must both be nonempty")


@dataclass(frozen=True)
class EvalReport:
    eer: float
    fmr100: float
    fmr1000: float
    genuine_mean: float
    genuine_std: float
    imposter_mean: float
    imposter_std: float
    fdr: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


REPORT_FIELDS = tuple(f.name for f in fields(EvalReport))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _pair_cosines(emb: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms <= 1e-12):
        raise ValueError("cosine similarity of a zero vector")
    unit = emb / norms[:, None]
    return np.clip(np.einsum("ij,ij->i", unit[i], unit[j]), -1.0, 1.0)


def build_score_sets(embeddings, labels, rng: np.random.Generator) -> ScoreSet:
    """All intra-label pairs as genuine; an equal number of inter-label pairs
    sampled without replacement as imposters (all of them if fewer exist)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise ValueError("embeddings and labels disagree in length")
    iu, ju = np.triu_indices(labels.shape[0], k=1)
    same = labels[iu] == labels[ju]
    if not same.any():
        raise ValueError("no genuine pair: every label occurs at most once")
    if same.all():
        raise ValueError("no imposter pair: only one label present")
    gi, gj = iu[same], ju[same]
    ii, ij = iu[~same], ju[~same]
    k = min(gi.size, ii.size)
    pick = np.sort(rng.choice(ii.size, size=k, replace=False))
    return ScoreSet(_pair_cosines(emb, gi, gj), _pair_cosines(emb, ii[pick], ij[pick]))


def error_rates(s: ScoreSet, thresholds) -> Tuple[np.ndarray, np.ndarray]:
    """(FMR, FNMR) at each threshold."""
    s.require_nonempty()
    th = np.asarray(thresholds, dtype=np.float64)
    gen = np.sort(s.genuine)
    imp = np.sort(s.imposter)
    fmr_counts = imp.size - np.searchsorted(imp, th, side="left")
    fnmr_counts = np.searchsorted(gen, th, side="left")
    return fmr_counts / imp.size, fnmr_counts / gen.size


def _thresholds(s: ScoreSet) -> np.ndarray:
    return np.unique(np.concatenate([s.genuine, s.imposter]))


def eer(s: ScoreSet) -> float:
    """Mean of FMR and FNMR at the threshold where they are closest.

    Thresholds are the distinct observed scores; ties go to the smaller one.
    """
    th = _thresholds(s)
    fmr, fnmr = error_rates(s, th)
    best = int(np.argmin(np.abs(fmr - fnmr)))  # argmin returns the first (smallest τ)
    return float((fmr[best] + fnmr[best]) / 2.0)


def fnmr_at_fmr(s: ScoreSet, fmr_cap: float) -> float:
    """Lowest FNMR over thresholds with FMR <= ``fmr_cap``.

    Besides the observed scores, τ=+inf (reject everything) is a candidate,
    so the result is always defined.
    """
    if not 0.0 < fmr_cap < 1.0:
        raise ValueError("fmr_cap must lie in (0, 1)")
    th = np.append(_thresholds(s), np.inf)
    fmr, fnmr = error_rates(s, th)
    return float(fnmr[fmr <= fmr_cap].min())


def fdr(s: ScoreSet) -> float:
    """Fisher discriminant ratio with population variances."""
    if s.genuine.size < 2 or s.imposter.size < 2:
        raise ValueError("FDR needs at least two scores per set")
    var = s.genuine.var() + s.imposter.var()
    if var == 0.0:
        raise ValueError("FDR undefined: both score sets are constant")
    return float((s.genuine.mean() - s.imposter.mean()) ** 2 / var)


def fdr_from_moments(gen_mean: float, gen_std: float, imp_mean: float, imp_std: float) -> float:
    return (gen_mean - imp_mean) ** 2 / (gen_std ** 2 + imp_std ** 2)


def report_from_scores(s: ScoreSet) -> EvalReport:
    s.require_nonempty()
    return EvalReport(
        eer=eer(s),
        fmr100=fnmr_at_fmr(s, 0.01),
        fmr1000=fnmr_at_fmr(s, 0.001),
        genuine_mean=float(s.genuine.mean()),
        genuine_std=float(s.genuine.std()),
        imposter_mean=float(s.imposter.mean()),
        imposter_std=float(s.imposter.std()),
        fdr=fdr(s),
    )


def eval_report(embeddings, labels, rng: np.random.Generator) -> EvalReport:
    return report_from_scores(build_score_sets(embeddings, labels, rng))


# -- file formats ---------------------------------------------------------

def save_scores(s: ScoreSet, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["set", "score"])
        for name in ("genuine", "imposter"):
            for v in getattr(s, name):
                w.writerow([name, repr(float(v))])


def load_scores(path: PathLike) -> ScoreSet:
    gen, imp = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["set", "score"]:
            raise ValueError(f"{path}: expected header 'set,score'")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[0] not in ("genuine", "imposter"):
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                v = float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric score {row[1]!r}") from None
            (gen if row[0] == "genuine" else imp).append(v)
    return ScoreSet(np.array(gen), np.array(imp))


def save_report(report: EvalReport, path: PathLike) -> None:
    with open(path, "w") as fh:
        for k, v in report.as_dict().items():
            fh.write(f"{k}={float(v)!r}\n")


def load_report(path: PathLike) -> EvalReport:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep or key.strip() not in REPORT_FIELDS:
                raise ValueError(f"{path}:{lineno}: unexpected line {line!r}")
            try:
                values[key.strip()] = float(val)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value {val!r}") from None
    missing = [f for f in REPORT_FIELDS if f not in values]
    if missing:
        raise ValueError(f"{path}: missing fields {missing}")
    return EvalReport(**values)


def histogram(s: ScoreSet, bins: int = 100, lo: float = -1.0, hi: float = 1.0):
    """Counts per bin for both sets over a fixed grid."""
    edges = np.linspace(lo, hi, bins + 1)
    g, _ = np.histogram(s.genuine, bins=edges)
    i, _ = np.histogram(s.imposter, bins=edges)
    return edges, g, i


def save_histogram(s: ScoreSet, path: PathLike, bins: int = 100) -> None:
    edges, g, i = histogram(s, bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "genuine", "imposter"])
        for k in range(bins):
            w.writerow([f"{edges[k]:.2f}", f"{edges[k + 1]:.2f}", int(g[k]), int(i[k])])
