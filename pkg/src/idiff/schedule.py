"""Discrete DDPM variance schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
SIGMA_KINDS = ("beta", "posterior")


class StepValues(NamedTuple):
    beta: float
    alpha: float
    alpha_bar: float
    sigma: float


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step tables, 1-indexed through :meth:`query`.

    ``alpha_bars[t-1]`` is the running product of ``alphas[:t]``.  ``sigma``
    selects the reverse-process noise scale: ``"beta"`` uses sqrt(β_t),
    ``"posterior"`` uses sqrt(β̃_t) with β̃_t = β_t(1-ᾱ_{t-1})/(1-ᾱ_t).
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    sigma: str = "beta"

    def query(self, t: int) -> StepValues:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        i = t - 1
        return StepValues(float(self.betas[i]), float(self.alphas[i]),
                          float(self.alpha_bars[i]), float(self.sigmas[i]))

    @property
    def sigmas(self) -> np.ndarray:
        if self.sigma == "beta":
            return np.sqrt(self.betas)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        return np.sqrt(self.betas * (1.0 - prev) / (1.0 - self.alpha_bars))

    def config(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "sigma": self.sigma}


def linear_schedule(T: int = 1000, beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END, sigma: str = "beta") -> VarianceSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if sigma not in SIGMA_KINDS:
        raise ValueError(f"sigma must be one of {SIGMA_KINDS}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return VarianceSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars, sigma)


def query(s: VarianceSchedule, t: int) -> StepValues:
    return s.query(t)
