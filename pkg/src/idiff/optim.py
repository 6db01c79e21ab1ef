"""Adam, cosine annealing with warm restarts, and power-law EMA weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple

import numpy as np

from .numerics import ParamSet, Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, **hyper) -> "AdamState":
        return cls({k: np.zeros(t.shape) for k, t in params.items()},
                   {k: np.zeros(t.shape) for k, t in params.items()}, **hyper)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> Tuple[ParamSet, AdamState]:
    """Bias-corrected Adam update; returns new params and a new state."""
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {path!r} at step {state.step + 1}")
    if set(grads) != set(params):
        raise KeyError("gradient paths do not match parameters")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for path, p in params.items():
        g = np.asarray(grads[path], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {path!r}")
        m = b1 * state.m[path] + (1.0 - b1) * g
        v = b2 * state.v[path] + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[path] = Tensor._wrap(p.data - update)
        new_m[path], new_v[path] = m, v
    return ParamSet(new_params), AdamState(new_m, new_v, step, b1, b2, state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing restarted at the start of each phase.

    Phase k (k = 0, 1, ...) lasts ``first_phase_len * growth_factor**k`` steps.
    """

    gamma_max: float = 1e-3
    gamma_min: float = 0.0
    first_phase_len: int = 200
    growth_factor: int = 2

    def __post_init__(self):
        if self.gamma_min > self.gamma_max:
            raise ValueError("gamma_min must not exceed gamma_max")
        if self.first_phase_len < 1:
            raise ValueError("first_phase_len must be >= 1")

    def phase_of(self, global_step: int) -> Tuple[int, int, int]:
        """(phase index, offset within phase, phase length)."""
        if global_step < 0:
            raise ValueError("global_step must be >= 0")
        k, start, length = 0, 0, self.first_phase_len
        while global_step >= start + length:
            start += length
            length *= self.growth_factor
            k += 1
        return k, global_step - start, length

    def steps_for_phases(self, phases: int) -> int:
        return sum(self.first_phase_len * self.growth_factor ** k for k in range(phases))


def lr_at(sched: LrSchedule, global_step: int) -> float:
    _, offset, length = sched.phase_of(global_step)
    span = sched.gamma_max - sched.gamma_min
    return sched.gamma_min + 0.5 * span * (1.0 + math.cos(math.pi * offset / length))


def ema_decay(step: int, power: float = 0.75) -> float:
    """1 - (step+1)^(-power), clipped into [0, 1)."""
    d = 1.0 - (step + 1) ** (-power)
    return min(max(d, 0.0), math.nextafter(1.0, 0.0))


@dataclass
class EmaState:
    shadow: ParamSet
    power: float = 0.75
    step: int = 0

    @classmethod
    def from_params(cls, params: ParamSet, power: float = 0.75) -> "EmaState":
        return cls(ParamSet(params), power, 0)


def ema_update(ema: EmaState, params: ParamSet) -> EmaState:
    decay = ema_decay(ema.step, ema.power)
    shadow = {}
    for path, live in params.items():
        old = ema.shadow[path]
        if old.shape != live.shape:
            raise ValueError(f"EMA shape mismatch for {path!r}")
        if decay == 0.0:
            shadow[path] = live  # exact copy on the first update
        else:
            # shadow + (1-d)(live - shadow): a fixed point stays bit-exact
            shadow[path] = Tensor._wrap(old.data + (1.0 - decay) * (live.data - old.data))
    return EmaState(ParamSet(shadow), ema.power, ema.step + 1)
