"""Forward noising, the ε-prediction objective and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import context as ctx
from . import numerics as nx
from .denoiser import DenoiserParams, forward
from .schedule import VarianceSchedule


@dataclass(frozen=True)
class TrainBatch:
    x0: np.ndarray                  # [B, n]
    contexts: Optional[np.ndarray]  # [B, d], unit rows, before CPD
    t: np.ndarray                   # [B] ints in [1, T]
    eps: np.ndarray                 # [B, n]

    def __len__(self) -> int:
        return self.x0.shape[0]


def draw_batch(x0: np.ndarray, contexts: Optional[np.ndarray], s: VarianceSchedule,
               rng: np.random.Generator) -> TrainBatch:
    """Attach t ~ U{1..T} and ε ~ N(0, I) to a batch of clean samples."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(1, s.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return TrainBatch(x0, contexts, t, eps)


def _alpha_bar(s: VarianceSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > s.T):
        raise ValueError(f"t outside [1, {s.T}]")
    return s.alpha_bars[t - 1]


def forward_diffuse(x0, t, eps, s: VarianceSchedule) -> np.ndarray:
    """x_t = sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε, row-wise when ``t`` is an array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise nx.ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = _alpha_bar(s, t)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


Predictor = Callable[[nx.Tensor, np.ndarray, Optional[nx.Tensor]], nx.Tensor]


def loss_tensor(params: DenoiserParams, batch: TrainBatch, s: VarianceSchedule,
                contexts: Optional[np.ndarray], predictor: Optional[Predictor] = None) -> nx.Tensor:
    """Mean over the batch of ‖ε - ε_θ(x_t, t, c)‖², as a recorded scalar.

    ``contexts`` are the (already dropped-out) contexts fed to the network.
    """
    x_t = nx.Tensor._wrap(forward_diffuse(batch.x0, batch.t, batch.eps, s))
    c = None
    if params.config.conditional:
        if contexts is None:
            raise ValueError("conditional model needs contexts")
        c = nx.Tensor._wrap(np.asarray(contexts, dtype=np.float64))
    if predictor is None:
        pred = forward(params, x_t, batch.t, c)
    else:
        pred = predictor(x_t, batch.t, c)
    diff = nx.sub(nx.Tensor._wrap(batch.eps), pred)
    return nx.mul(nx.sum_all(nx.mul(diff, diff)), 1.0 / len(batch))


def training_loss(params: DenoiserParams, batch: TrainBatch, s: VarianceSchedule,
                  cpd_p: float, rng: np.random.Generator, rescale: bool = True,
                  predictor: Optional[Predictor] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Apply CPD, evaluate the loss and backpropagate to every parameter."""
    contexts = batch.contexts
    if params.config.conditional:
        contexts = ctx.apply_cpd(contexts, cpd_p, rng, training=True, rescale=rescale)
    with nx.Tape() as tape:
        tape.watch(params.tensors)
        loss = loss_tensor(params, batch, s, contexts, predictor)
    grads = nx.backward(tape, loss)
    return loss.item(), grads


def reverse_step(x_t, t: int, c, params: DenoiserParams, s: VarianceSchedule, zeta,
                 eps_hat: Optional[np.ndarray] = None) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; rows are independent samples.

    ``eps_hat`` bypasses the network (used by oracle tests).
    """
    beta, alpha, alpha_bar, sigma = s.query(t)
    zeta = np.asarray(zeta, dtype=np.float64)
    if t == 1 and np.any(zeta != 0.0):
        raise ValueError("the final step (t=1) takes no noise")
    x_t = np.asarray(x_t, dtype=np.float64)
    if eps_hat is None:
        eps_hat = forward(params, x_t, t, c).data
    mean = (x_t - ((1.0 - alpha) / np.sqrt(1.0 - alpha_bar)) * eps_hat) / np.sqrt(alpha)
    return mean + sigma * zeta


def sample_batch(params: DenoiserParams, s: VarianceSchedule, contexts: Optional[np.ndarray],
                 seeds: Sequence[int]) -> np.ndarray:
    """Run the reverse chain for several samples at once.

    Row ``i`` draws x_T and then ζ_T..ζ_2 from ``default_rng(seeds[i])``, so
    its randomness is identical to ``sample(params, s, contexts[i], seeds[i])``.
    """
    n = params.config.data_dim
    gens = [np.random.default_rng(int(sd)) for sd in seeds]
    x = np.stack([g.standard_normal(n) for g in gens]) if gens else np.zeros((0, n))
    c = None
    if params.config.conditional:
        if contexts is None:
            raise ValueError("conditional model needs contexts to sample")
        c = np.asarray(contexts, dtype=np.float64).reshape(len(gens), -1)
    for t in range(s.T, 0, -1):
        if t > 1:
            zeta = np.stack([g.standard_normal(n) for g in gens])
        else:
            zeta = np.zeros_like(x)
        x = reverse_step(x, t, c, params, s, zeta)
    return x


def sample(params: DenoiserParams, s: VarianceSchedule, c, seed: int) -> np.ndarray:
    """Draw one x_0 from the model; bit-deterministic in (params, c, seed)."""
    contexts = None if c is None or not params.config.conditional else np.asarray(c)[None, :]
    return sample_batch(params, s, contexts, [seed])[0]
