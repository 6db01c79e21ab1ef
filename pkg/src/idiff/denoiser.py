"""MLP noise-prediction network with identity conditioning.

The trunk is a residual MLP over ``[x_t, time_embedding(t)]``.  Identity
contexts enter every block through one of two mechanisms:

* ``adagn`` - the block activation ``u`` becomes ``u * (1 + s(c)) + b(c)``
  with linear scale/shift projections of the context;
* ``xattn`` - single-token cross-attention: queries from the hidden state,
  keys and values projected from the context, added residually.

Conditioning output layers start at zero so an untrained model ignores ``c``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Sequence, Union

import numpy as np

from . import numerics as nx
from .numerics import ParamSet, Tensor

MODES = ("adagn", "xattn", "unconditional")


@dataclass(frozen=True)
class DenoiserConfig:
    data_dim: int = 16
    hidden_dim: int = 128
    depth: int = 2
    time_embed_dim: int = 32
    context_dim: int = 16
    conditioning_mode: str = "xattn"
    attention_heads: int = 4

    def __post_init__(self):
        for name in ("data_dim", "hidden_dim", "depth", "time_embed_dim", "context_dim", "attention_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.hidden_dim % self.attention_heads:
            raise ValueError("attention_heads must divide hidden_dim")
        if self.conditioning_mode not in MODES:
            raise ValueError(f"conditioning_mode must be one of {MODES}")

    @property
    def conditional(self) -> bool:
        return self.conditioning_mode != "unconditional"


@dataclass(frozen=True)
class DenoiserParams:
    config: DenoiserConfig
    tensors: ParamSet

    def with_tensors(self, tensors) -> "DenoiserParams":
        return replace(self, tensors=ParamSet(tensors))


def time_embedding(t: Union[int, Sequence[int], np.ndarray], dim: int) -> np.ndarray:
    """Sinusoidal embedding: ``[sin(t·ω_k), cos(t·ω_k)]`` with ω_k from 1 to 1e-4.

    Scalar ``t`` gives shape ``[dim]``, a sequence gives ``[len(t), dim]``.
    """
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = np.power(1e-4, np.arange(half) / (half - 1))
    ts = np.asarray(t, dtype=np.float64)
    angles = ts[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def param_shapes(config: DenoiserConfig) -> Dict[str, tuple]:
    n, H, d = config.data_dim, config.hidden_dim, config.context_dim
    shapes = {"in.w": (n + config.time_embed_dim, H), "in.b": (H,),
              "out.w": (H, n), "out.b": (n,)}
    for i in range(config.depth):
        p = f"block{i}"
        shapes[f"{p}.w"] = (H, H)
        shapes[f"{p}.b"] = (H,)
        if config.conditioning_mode == "adagn":
            shapes[f"{p}.scale.w"] = (d, H)
            shapes[f"{p}.scale.b"] = (H,)
            shapes[f"{p}.shift.w"] = (d, H)
            shapes[f"{p}.shift.b"] = (H,)
        elif config.conditioning_mode == "xattn":
            shapes[f"{p}.attn.q.w"] = (H, H)
            shapes[f"{p}.attn.k.w"] = (d, H)
            shapes[f"{p}.attn.v.w"] = (d, H)
            shapes[f"{p}.attn.o.w"] = (H, H)
            shapes[f"{p}.attn.o.b"] = (H,)
    return shapes


def _zero_init(path: str) -> bool:
    # biases, adagn projections and the attention output layer
    return (path.endswith(".b") or ".scale." in path or ".shift." in path
            or ".attn.o." in path)


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    # iterate in a fixed (sorted) order so draws do not depend on dict layout
    for path, shape in sorted(param_shapes(config).items()):
        if _zero_init(path):
            tensors[path] = np.zeros(shape)
        else:
            tensors[path] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return DenoiserParams(config, ParamSet(tensors))


def param_count(config: DenoiserConfig) -> int:
    """Closed-form parameter count."""
    n, H, d, L = config.data_dim, config.hidden_dim, config.context_dim, config.depth
    total = (n + config.time_embed_dim) * H + H + L * (H * H + H) + H * n + n
    if config.conditioning_mode == "adagn":
        total += L * 2 * (d * H + H)
    elif config.conditioning_mode == "xattn":
        total += L * (H * H + 2 * d * H + H * H + H)
    return total


def _cross_attention(ps: ParamSet, prefix: str, h: Tensor, c: Tensor, heads: int) -> Tensor:
    B, H = h.shape
    dh = H // heads
    q = nx.reshape(nx.matmul(h, ps[f"{prefix}.q.w"]), (B * heads, dh))
    k = nx.reshape(nx.matmul(c, ps[f"{prefix}.k.w"]), (B * heads, dh))
    v = nx.reshape(nx.matmul(c, ps[f"{prefix}.v.w"]), (B * heads, dh))
    # one context token per item: scores have a token axis of length 1
    scores = nx.mul(nx.sum_axis(nx.mul(q, k), 1), 1.0 / np.sqrt(dh))
    weights = nx.softmax(scores, axis=1)
    attended = nx.reshape(nx.mul(nx.expand(weights, 1, dh), v), (B, H))
    return nx.linear(attended, ps[f"{prefix}.o.w"], ps[f"{prefix}.o.b"])


def forward(params: DenoiserParams, x_t, t, c=None) -> Tensor:
    """Predict the noise in ``x_t``.

    ``x_t`` may be a single vector ``[n]`` (with scalar ``t``) or a batch
    ``[B, n]`` with ``t`` a scalar or length-B sequence; ``c`` follows the
    same convention and is ignored in unconditional mode.
    """
    cfg = params.config
    ps = params.tensors
    x_t = nx.as_tensor(x_t)
    single = x_t.ndim == 1
    if single:
        x_t = nx.reshape(x_t, (1, x_t.shape[0]))
    B, n = x_t.shape
    if n != cfg.data_dim:
        raise nx.ShapeError(f"x_t has {n} features, model expects {cfg.data_dim}")
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if np.any(ts < 1):
        raise ValueError("t must be >= 1")

    if cfg.conditional:
        if c is None:
            raise ValueError(f"{cfg.conditioning_mode} model requires a context")
        c = nx.as_tensor(c)
        if c.ndim == 1:
            c = nx.expand(nx.reshape(c, (1, c.shape[0])), 0, B)
        if c.shape != (B, cfg.context_dim):
            raise nx.ShapeError(f"context shape {c.shape} != {(B, cfg.context_dim)}")

    temb = Tensor._wrap(time_embedding(ts, cfg.time_embed_dim))
    h = nx.linear(nx.concat([x_t, temb], axis=1), ps["in.w"], ps["in.b"])
    for i in range(cfg.depth):
        p = f"block{i}"
        u = nx.silu(nx.linear(h, ps[f"{p}.w"], ps[f"{p}.b"]))
        if cfg.conditioning_mode == "adagn":
            scale = nx.linear(c, ps[f"{p}.scale.w"], ps[f"{p}.scale.b"])
            shift = nx.linear(c, ps[f"{p}.shift.w"], ps[f"{p}.shift.b"])
            u = nx.add(nx.mul(u, nx.add(scale, 1.0)), shift)
        h = nx.add(h, u)
        if cfg.conditioning_mode == "xattn":
            h = nx.add(h, _cross_attention(ps, f"{p}.attn", h, c, cfg.attention_heads))
    out = nx.linear(h, ps["out.w"], ps["out.b"])
    return nx.reshape(out, (n,)) if single else out

