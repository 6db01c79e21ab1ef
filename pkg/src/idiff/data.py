"""Toy identity data and every on-disk format.

Datasets and embeddings are CSV with floats written at 17 significant
digits (exact float64 round trip).  Checkpoints are a single binary file::

    b"IDFK" | u32 version | section* | b"END\\0" u64(0)
    section = 4-byte tag | u64 payload length | payload

``CONF`` holds ``key=value`` lines; each ``TENS`` section holds one tensor
(u16 path length, utf-8 path, u8 rank, u64 dims, little-endian f64 data).
All integers are little-endian.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams
from .numerics import ParamSet, Tensor
from .optim import AdamState, EmaState
from .schedule import VarianceSchedule, linear_schedule

PathLike = Union[str, Path]

MAGIC = b"IDFK"
FORMAT_VERSION = 1
_FLOAT_FMT = "%.17g"


class DataFormatError(ValueError):
    """A data file could not be parsed; the message names the line."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated or of an unsupported version."""


# -- toy dataset -------------------------------------------------------------

@dataclass(frozen=True)
class ToyIdentityDataset:
    samples: np.ndarray    # [K*m, n]
    labels: np.ndarray     # [K*m]
    centroids: Optional[np.ndarray] = None
    K: int = 0
    m: int = 0
    intra_std: float = 0.0
    radius: float = 0.0
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return self.samples.shape[0]


def _min_pairwise_distance(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return np.inf
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return float(dist[np.triu_indices(points.shape[0], 1)].min())


def make_toy_dataset(K: int = 50, m: int = 16, n: int = 16, s: float = 0.1, R: float = 1.0,
                     seed: int = 0) -> ToyIdentityDataset:
    """K identity clusters with centroids on the radius-R sphere.

    Centroids are redrawn (up to 100 times) until every pair is more than
    4·s apart; samples are ``centroid + s·N(0, I)``, grouped by identity.
    """
    if min(K, m, n) < 1 or s <= 0 or R <= 0:
        raise ValueError("need K, m, n >= 1 and s, R > 0")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        g = rng.standard_normal((K, n))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            continue
        centroids = R * g / norms
        if _min_pairwise_distance(centroids) > 4.0 * s:
            break
    else:
        raise ValueError(f"could not separate {K} centroids by 4*s={4 * s} in 100 attempts")
    labels = np.repeat(np.arange(K), m)
    samples = centroids[labels] + s * rng.standard_normal((K * m, n))
    return ToyIdentityDataset(samples, labels, centroids, K, m, float(s), float(R), seed)


def _write_labelled_csv(path: PathLike, prefix: str, labels, rows: np.ndarray, dim: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"{prefix}{i}" for i in range(dim)])
        for lab, row in zip(labels, rows):
            w.writerow([int(lab)] + [_FLOAT_FMT % v for v in row])


def _read_labelled_csv(path: PathLike, prefix: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataFormatError(f"{path}: no header")
        dim = len(header) - 1
        expected = ["label"] + [f"{prefix}{i}" for i in range(dim)]
        if header != expected:
            raise DataFormatError(f"{path}:1: malformed header, expected 'label,{prefix}0,...'")
        labels: List[int] = []
        rows: List[List[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {dim + 1} columns, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell") from None
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return np.array(labels, dtype=np.int64), arr


def save_dataset(ds: ToyIdentityDataset, path: PathLike) -> None:
    _write_labelled_csv(path, "x", ds.labels, ds.samples, ds.n)


def load_dataset(path: PathLike) -> ToyIdentityDataset:
    labels, samples = _read_labelled_csv(path, "x")
    return ToyIdentityDataset(samples, labels, K=len(np.unique(labels)))


def export_embeddings(embeddings, labels, path: PathLike) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim == 1:
        emb = emb.reshape(0, 0) if emb.size == 0 else emb[None, :]
    if emb.shape[0] != labels.shape[0]:
        raise ValueError(f"{emb.shape[0]} embeddings but {labels.shape[0]} labels")
    _write_labelled_csv(path, "c", labels, emb, emb.shape[1] if emb.ndim == 2 else 0)


def load_embeddings(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """(labels, embeddings)"""
    return _read_labelled_csv(path, "c")


# -- checkpoints -------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    params: DenoiserParams
    ema: EmaState
    adam: AdamState
    schedule: VarianceSchedule
    cpd_p: float = 0.0
    global_step: int = 0
    seeds: Dict[str, int] = field(default_factory=dict)
    meta: Dict[str, str] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def config(self) -> DenoiserConfig:
        return self.params.config

    def inference_params(self) -> DenoiserParams:
        """EMA weights, which are the ones used for sampling."""
        return self.params.with_tensors(self.ema.shadow)


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _tensor_payload(path: str, arr: np.ndarray) -> bytes:
    name = path.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(name)) + name + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _conf_lines(ck: ModelCheckpoint) -> Dict[str, str]:
    conf: Dict[str, str] = {}
    for f in fields(DenoiserConfig):
        conf[f"model.{f.name}"] = str(getattr(ck.config, f.name))
    for k, v in ck.schedule.config().items():
        conf[f"schedule.{k}"] = repr(v)
    conf["cpd_p"] = repr(float(ck.cpd_p))
    conf["global_step"] = str(ck.global_step)
    conf["adam.step"] = str(ck.adam.step)
    conf["adam.beta1"] = repr(ck.adam.beta1)
    conf["adam.beta2"] = repr(ck.adam.beta2)
    conf["adam.eps"] = repr(ck.adam.eps)
    conf["ema.power"] = repr(ck.ema.power)
    conf["ema.step"] = str(ck.ema.step)
    for k, v in ck.seeds.items():
        conf[f"seed.{k}"] = str(int(v))
    for k, v in ck.meta.items():
        conf[f"meta.{k}"] = str(v)
    for k, v in conf.items():
        if "\n" in k or "\n" in v or "=" in k:
            raise ValueError(f"config entry {k!r} cannot be serialised")
    return conf


def save_checkpoint(ck: ModelCheckpoint, path: PathLike) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ck.format_version))
    conf = "".join(f"{k}={v}\n" for k, v in _conf_lines(ck).items())
    buf.write(_section(b"CONF", conf.encode("utf-8")))
    groups = (("params", ck.params.tensors), ("ema", ck.ema.shadow),
              ("adam.m", ck.adam.m), ("adam.v", ck.adam.v))
    for prefix, tensors in groups:
        for name in sorted(tensors):
            t = tensors[name]
            arr = t.data if isinstance(t, Tensor) else np.asarray(t)
            buf.write(_section(b"TENS", _tensor_payload(f"{prefix}/{name}", arr)))
    buf.write(_section(b"END\0", b""))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_tensor(payload: bytes) -> Tuple[str, np.ndarray]:
    r = _Reader(payload)
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    (rank,) = r.unpack("<B")
    shape = r.unpack(f"<{rank}Q") if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(payload):
        raise CheckpointError(f"tensor section {name!r} has trailing bytes")
    return name, data


def load_checkpoint(path: PathLike) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version} (this build reads {FORMAT_VERSION})")
    conf: Dict[str, str] = {}
    tensors: Dict[str, Dict[str, np.ndarray]] = {"params": {}, "ema": {}, "adam.m": {}, "adam.v": {}}
    ended = False
    while r.pos < len(raw):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        if tag == b"CONF":
            for line in payload.decode("utf-8").splitlines():
                k, _, v = line.partition("=")
                conf[k] = v
        elif tag == b"TENS":
            name, arr = _parse_tensor(payload)
            group, _, sub = name.partition("/")
            if group not in tensors:
                raise CheckpointError(f"unknown tensor group {group!r}")
            tensors[group][sub] = arr
        elif tag == b"END\0":
            ended = True
            break
        else:
            raise CheckpointError(f"unknown section tag {tag!r}")
    if not ended:
        raise CheckpointError("truncated checkpoint: missing end marker")
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after end marker")
    try:
        return _assemble(conf, tensors, version)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent checkpoint: {exc}") from exc


def _assemble(conf: Dict[str, str], tensors, version: int) -> ModelCheckpoint:
    kwargs = {}
    for f in fields(DenoiserConfig):
        raw = conf[f"model.{f.name}"]
        kwargs[f.name] = raw if f.name == "conditioning_mode" else int(raw)
    cfg = DenoiserConfig(**kwargs)
    sched = linear_schedule(int(conf["schedule.T"]), float(conf["schedule.beta_start"]),
                            float(conf["schedule.beta_end"]), conf["schedule.sigma"].strip("'\""))
    params = DenoiserParams(cfg, ParamSet(tensors["params"]))
    ema = EmaState(ParamSet(tensors["ema"]), float(conf["ema.power"]), int(conf["ema.step"]))
    adam = AdamState(dict(sorted(tensors["adam.m"].items())), dict(sorted(tensors["adam.v"].items())),
                     int(conf["adam.step"]), float(conf["adam.beta1"]), float(conf["adam.beta2"]),
                     float(conf["adam.eps"]))
    seeds = {k[5:]: int(v) for k, v in conf.items() if k.startswith("seed.")}
    meta = {k[5:]: v for k, v in conf.items() if k.startswith("meta.")}
    if set(params.tensors) != set(ema.shadow):
        raise ValueError("EMA paths differ from parameter paths")
    return ModelCheckpoint(params, ema, adam, sched, float(conf["cpd_p"]), int(conf["global_step"]),
                           seeds, meta, version)
