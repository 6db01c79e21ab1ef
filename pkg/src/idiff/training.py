"""Batch training loop: sample batch -> CPD -> loss -> Adam -> EMA."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import diffusion
from .data import ModelCheckpoint
from .denoiser import DenoiserConfig, init_params
from .optim import AdamState, EmaState, LrSchedule, adam_step, ema_decay, ema_update, lr_at
from .schedule import VarianceSchedule

log = logging.getLogger(__name__)

BatchSource = Callable[[np.random.Generator, int], Tuple[np.ndarray, Optional[np.ndarray]]]


class NumericalAbort(FloatingPointError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class LogRow:
    step: int
    lr: float
    loss: float
    ema_decay: float


def epoch_batches(samples: np.ndarray, contexts: Optional[np.ndarray]) -> BatchSource:
    """Shuffle once per epoch and walk the permutation in order."""
    N = samples.shape[0]
    state = {"perm": np.empty(0, dtype=np.int64), "pos": 0}

    def draw(rng: np.random.Generator, batch_size: int):
        idx = []
        while len(idx) < batch_size:
            if state["pos"] >= state["perm"].size:
                state["perm"] = rng.permutation(N)
                state["pos"] = 0
            take = min(batch_size - len(idx), state["perm"].size - state["pos"])
            idx.extend(state["perm"][state["pos"]:state["pos"] + take])
            state["pos"] += take
        idx = np.asarray(idx)
        return samples[idx], (None if contexts is None else contexts[idx])

    return draw


def gaussian_batches(n: int) -> BatchSource:
    """Fresh standard-normal data each step (no contexts)."""
    return lambda rng, b: (rng.standard_normal((b, n)), None)


def new_checkpoint(config: DenoiserConfig, schedule: VarianceSchedule, init_seed: int,
                   cpd_p: float = 0.0, ema_power: float = 0.75) -> ModelCheckpoint:
    params = init_params(config, init_seed)
    return ModelCheckpoint(
        params=params,
        ema=EmaState.from_params(params.tensors, ema_power),
        adam=AdamState.zeros_like(params.tensors),
        schedule=schedule,
        cpd_p=cpd_p,
        seeds={"init": init_seed},
    )


def train(ck: ModelCheckpoint, source: BatchSource, total_steps: int, batch_size: int,
          lr_sched: LrSchedule, seed: int, cpd_rescale: bool = True,
          on_step: Optional[Callable[[LogRow, ModelCheckpoint], None]] = None) -> Tuple[ModelCheckpoint, List[LogRow]]:
    """Run ``total_steps`` optimisation steps starting from ``ck``.

    All randomness (batch order, t, ε, CPD masks) comes from one generator
    seeded with ``seed``, so a run is reproducible bit for bit.
    """
    rng = np.random.default_rng(seed)
    params, adam, ema = ck.params, ck.adam, ck.ema
    rows: List[LogRow] = []
    step = ck.global_step
    for _ in range(total_steps):
        x0, contexts = source(rng, batch_size)
        batch = diffusion.draw_batch(x0, contexts, ck.schedule, rng)
        try:
            loss, grads = diffusion.training_loss(params, batch, ck.schedule, ck.cpd_p, rng,
                                                  rescale=cpd_rescale)
        except FloatingPointError as exc:
            raise NumericalAbort(step, str(exc)) from exc
        if not math.isfinite(loss):
            raise NumericalAbort(step, "loss is not finite")
        lr = lr_at(lr_sched, step)
        try:
            tensors, adam = adam_step(params.tensors, grads, adam, lr)
        except FloatingPointError as exc:
            raise NumericalAbort(step, str(exc)) from exc
        params = params.with_tensors(tensors)
        decay = ema_decay(ema.step, ema.power)
        ema = ema_update(ema, params.tensors)
        step += 1
        row = LogRow(step, lr, loss, decay)
        rows.append(row)
        if on_step is not None:
            on_step(row, ModelCheckpoint(params, ema, adam, ck.schedule, ck.cpd_p, step,
                                         dict(ck.seeds, train=seed), dict(ck.meta)))
    out = ModelCheckpoint(params, ema, adam, ck.schedule, ck.cpd_p, step,
                          dict(ck.seeds, train=seed), dict(ck.meta))
    return out, rows
