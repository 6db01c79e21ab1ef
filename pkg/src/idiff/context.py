"""Identity contexts: toy encoder, contextual partial dropout and synthetic contexts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffusion
from .denoiser import DenoiserParams
from .schedule import VarianceSchedule

PROVENANCES = ("authentic", "uniform", "two_stage")
_DEGENERATE = 1e-12


class DegenerateSampleError(ValueError):
    """The encoder projection of a sample is (numerically) zero."""


@dataclass(frozen=True)
class IdentityContext:
    embedding: np.ndarray
    provenance: str = "authentic"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.embedding.setflags(write=False)


@dataclass(frozen=True)
class ToyEncoder:
    """Frozen random projection followed by L2 normalisation.

    Stands in for a pretrained face-recognition network: it maps data
    vectors to unit-norm identity embeddings.
    """

    projection: np.ndarray  # [d, n]
    seed: int

    @property
    def context_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def data_dim(self) -> int:
        return self.projection.shape[1]


def make_encoder(context_dim: int, data_dim: int, seed: int) -> ToyEncoder:
    rng = np.random.default_rng(seed)
    full_rank = min(context_dim, data_dim)
    for _ in range(100):
        proj = rng.standard_normal((context_dim, data_dim)) / np.sqrt(data_dim)
        if np.linalg.matrix_rank(proj) == full_rank:
            proj.setflags(write=False)
            return ToyEncoder(proj, seed)
    raise RuntimeError("could not draw a full-rank projection")


def encode_many(enc: ToyEncoder, x: np.ndarray) -> np.ndarray:
    """Encode rows of ``x`` ([N, n]) into unit embeddings ([N, d])."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = x @ enc.projection.T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms <= _DEGENERATE):
        bad = int(np.argmax(norms[:, 0] <= _DEGENERATE))
        raise DegenerateSampleError(f"row {bad} projects to a near-zero embedding")
    return z / norms


def encode(enc: ToyEncoder, x) -> IdentityContext:
    return IdentityContext(encode_many(enc, x)[0], "authentic")


def apply_cpd(c, p: float, rng: np.random.Generator, training: bool = True,
              rescale: bool = True) -> np.ndarray:
    """Contextual partial dropout.

    Each component is kept with probability 1-p.  Kept components are
    scaled by 1/(1-p) when ``rescale`` is set, so the expected context equals
    the full context used at sampling time.  Works on [d] or [B, d] input.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1]")
    c = np.asarray(c, dtype=np.float64)
    if not training or p == 0.0:
        return c
    if p == 1.0:
        return np.zeros_like(c)
    keep = rng.random(c.shape) >= p
    return dropout_with_mask(c, keep, p, rescale)


def dropout_with_mask(c, keep, p: float, rescale: bool = True) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    out = np.where(keep, c, 0.0)
    if rescale and p < 1.0:
        out = out / (1.0 - p)
    return out


def uniform_direction(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    return raw / np.linalg.norm(raw)


def sample_uniform_context(d: int, rng: np.random.Generator) -> IdentityContext:
    """Uniform point on S^{d-1}: normalise an isotropic Gaussian draw."""
    if d < 1:
        raise ValueError("d must be >= 1")
    while True:
        g = rng.standard_normal(d)
        if np.linalg.norm(g) >= _DEGENERATE:
            return IdentityContext(uniform_direction(g), "uniform")


def sample_uniform_contexts(count: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([sample_uniform_context(d, rng).embedding for _ in range(count)]) \
        if count else np.zeros((0, d))


def two_stage_context(uncond_params: DenoiserParams, s: VarianceSchedule, enc: ToyEncoder,
                      seed: int, max_attempts: int = 8) -> IdentityContext:
    """Sample a reference from the unconditional model and encode it."""
    if uncond_params.config.conditional:
        raise ValueError("two-stage contexts need an unconditional model")
    for attempt in range(max_attempts):
        x_ref = diffusion.sample(uncond_params, s, None, seed + attempt)
        try:
            emb = encode_many(enc, x_ref)[0]
        except DegenerateSampleError:
            continue
        return IdentityContext(emb, "two_stage")
    raise DegenerateSampleError(f"{max_attempts} consecutive degenerate references from seed {seed}")


def two_stage_contexts(uncond_params: DenoiserParams, s: VarianceSchedule, enc: ToyEncoder,
                       seeds: Sequence[int]) -> np.ndarray:
    """Batched :func:`two_stage_context`; degenerate rows fall back to the scalar path."""
    refs = diffusion.sample_batch(uncond_params, s, None, seeds)
    z = refs @ enc.projection.T
    norms = np.linalg.norm(z, axis=1)
    out = np.empty((len(seeds), enc.context_dim))
    for i, sd in enumerate(seeds):
        if norms[i] > _DEGENERATE:
            out[i] = z[i] / norms[i]
        else:
            out[i] = two_stage_context(uncond_params, s, enc, int(sd) + 1).embedding
    return out


def generate_identity_sets(params: DenoiserParams, s: VarianceSchedule, contexts: np.ndarray,
                           m: int, base_seeds: Sequence[int]) -> np.ndarray:
    """``m`` samples for each context row, all chains run as one batch.

    Returns ``[K*m, n]`` grouped by identity; identity k uses seeds
    ``base_seeds[k] .. base_seeds[k] + m - 1``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    seeds = [int(b) + j for b in base_seeds for j in range(m)]
    rows = np.repeat(contexts, m, axis=0)
    return diffusion.sample_batch(params, s, rows, seeds)


def generate_identity_set(params: DenoiserParams, s: VarianceSchedule, c, m: int,
                          base_seed: int) -> np.ndarray:
    if isinstance(c, IdentityContext):
        c = c.embedding
    return generate_identity_sets(params, s, np.asarray(c)[None, :], m, [base_seed])
