"""Masked v-objective training for :class:`TrackDenoiser`.

Each step draws a shared noise level from U([tau_min, 1]), one of the four
track patterns per item, fresh Gaussian noise, and drops each track's
condition independently. The loss is the mean squared velocity error over
noised (tau > 0) tracks only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from ..schedule import NUM_TRACKS, TAU_MIN, pattern_taus, sample_training_tau
from ..vcalc import perturb, velocity_target
from .conditions import ConditionSet
from .network import NetConfig, backward, forward

__all__ = [
    "TrainingError",
    "Hyper",
    "TrainingBatch",
    "sample_batch",
    "masked_loss",
    "loss_and_grad",
    "train_step",
    "line_search_step",
    "grad_check",
    "Trainer",
    "evaluation_batch",
    "predictor_loss",
]

Params = Dict[str, np.ndarray]


class TrainingError(FloatingPointError):
    """The training loss or its gradient became non-finite."""


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.05
    momentum: float = 0.9
    dropout: float = 0.1
    tau_min: float = TAU_MIN
    pattern_weights: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    grad_clip: Optional[float] = 10.0


@dataclass
class TrainingBatch:
    """A fully drawn training batch; evaluating it is deterministic."""

    z0: np.ndarray
    eps: np.ndarray
    taus: np.ndarray  # (B, 3)
    cond: ConditionSet
    z_tau: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.z_tau = perturb(self.z0, self.eps, self.taus)
        self.v = velocity_target(self.z0, self.eps, self.taus)

    @property
    def mask(self) -> np.ndarray:
        """Noised-track indicator, shaped ``(B, 3, 1, 1)``."""
        return (self.taus > 0.0)[..., None, None]


def sample_batch(
    z0: np.ndarray,
    cond: Optional[ConditionSet],
    rng: np.random.Generator,
    hyper: Hyper,
    cond_dim: int,
) -> TrainingBatch:
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 4 or z0.shape[0] == 0:
        raise ValueError(f"batch must be a non-empty (B, 3, C, L) array, got shape {z0.shape}")
    B = z0.shape[0]
    tau = sample_training_tau(rng, size=B, tau_min=hyper.tau_min)
    w = np.asarray(hyper.pattern_weights, dtype=np.float64)
    patterns = rng.choice(4, size=B, p=w / w.sum())
    taus = pattern_taus(tau, patterns)
    eps = rng.standard_normal(z0.shape)
    if cond is None:
        cond = ConditionSet.null(cond_dim, (B,))
    else:
        cond = ConditionSet(
            np.broadcast_to(cond.values, (B, NUM_TRACKS, cond.dim)).copy(),
            np.broadcast_to(cond.present, (B, NUM_TRACKS)).copy(),
        )
    cond = cond.dropout(rng, hyper.dropout)
    return TrainingBatch(z0, eps, taus, cond)


def masked_loss(pred: np.ndarray, batch: TrainingBatch) -> float:
    mask = np.broadcast_to(batch.mask, pred.shape)
    count = mask.sum()
    if count == 0:
        return 0.0
    return float(np.sum(mask * (pred - batch.v) ** 2) / count)


def loss_and_grad(params: Params, config: NetConfig, batch: TrainingBatch) -> Tuple[float, Params]:
    pred, cache = forward(params, config, batch.z_tau, batch.taus, batch.cond, keep_cache=True)
    mask = np.broadcast_to(batch.mask, pred.shape).astype(np.float64)
    count = mask.sum()
    resid = mask * (pred - batch.v)
    loss = float(np.sum(resid * resid) / max(count, 1.0))
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss on batch of {batch.z0.shape[0]} items "
            f"(max |z_tau| {np.max(np.abs(batch.z_tau)):.3e}, max |pred| {np.nanmax(np.abs(pred)):.3e})"
        )
    grads = backward(params, config, cache, 2.0 * resid / max(count, 1.0))
    return loss, grads


def _clip(grads: Params, limit: Optional[float]) -> Params:
    if limit is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not np.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if norm <= limit:
        return grads
    return {k: g * (limit / norm) for k, g in grads.items()}


def train_step(
    params: Params,
    config: NetConfig,
    z0: np.ndarray,
    cond: Optional[ConditionSet],
    rng: np.random.Generator,
    hyper: Hyper,
    velocity: Optional[Params] = None,
):
    """One momentum-SGD step on a freshly drawn batch.

    Returns ``(new_params, loss, new_velocity)``; inputs are not mutated.
    """
    batch = sample_batch(z0, cond, rng, hyper, config.cond_dim)
    loss, grads = loss_and_grad(params, config, batch)
    grads = _clip(grads, hyper.grad_clip)
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
    new_velocity = {k: hyper.momentum * velocity[k] + grads[k] for k in params}
    new_params = {k: params[k] - hyper.lr * new_velocity[k] for k in params}
    return new_params, loss, new_velocity


def line_search_step(
    params: Params,
    config: NetConfig,
    batch: TrainingBatch,
    lr0: float = 1.0,
    shrink: float = 0.5,
    max_tries: int = 30,
):
    """Backtracking gradient step on a fixed batch; the loss never increases.

    Returns ``(new_params, new_loss)``. If no trial step lowers the loss the
    parameters are returned unchanged.
    """
    loss, grads = loss_and_grad(params, config, batch)
    gnorm2 = sum(float(np.sum(g * g)) for g in grads.values())
    lr = lr0
    for _ in range(max_tries):
        trial = {k: params[k] - lr * grads[k] for k in params}
        pred = forward(trial, config, batch.z_tau, batch.taus, batch.cond)
        trial_loss = masked_loss(pred, batch)
        if np.isfinite(trial_loss) and trial_loss <= loss - 1e-4 * lr * gnorm2:
            return trial, trial_loss
        lr *= shrink
    return params, loss


def grad_check(
    params: Params,
    config: NetConfig,
    probe: TrainingBatch,
    rng: np.random.Generator,
    n_params: int = 200,
    step: float = 1e-3,
    grad_fn: Optional[Callable] = None,
) -> float:
    """Max relative error of analytic vs five-point finite-difference gradients.

    The fourth-order stencil lets ``step`` stay large enough that round-off
    does not swamp entries with tiny gradients.

    ``n_params`` scalar parameters are drawn uniformly over all entries.
    ``grad_fn(params, config, batch) -> (loss, grads)`` defaults to
    :func:`loss_and_grad` and can be swapped to test the checker itself.
    """
    if n_params <= 0:
        return 0.0
    grad_fn = grad_fn or loss_and_grad
    _, grads = grad_fn(params, config, probe)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    flat_idx = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    work = {k: v.copy() for k, v in params.items()}
    for fi in flat_idx:
        j = int(np.searchsorted(offsets, fi, side="right") - 1)
        name, local = names[j], int(fi - offsets[j])
        arr = work[name].reshape(-1)
        orig = arr[local]
        f = {}
        for k in (-2, -1, 1, 2):
            arr[local] = orig + k * step
            f[k] = masked_loss(forward(work, config, probe.z_tau, probe.taus, probe.cond), probe)
        arr[local] = orig
        numeric = (8.0 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12.0 * step)
        analytic = float(grads[name].reshape(-1)[local])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


class Trainer:
    """Holds parameters plus momentum across steps."""

    def __init__(self, params: Params, config: NetConfig, hyper: Hyper, velocity: Optional[Params] = None):
        self.params = params
        self.config = config
        self.hyper = hyper
        self.velocity = velocity or {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, z0, cond, rng) -> float:
        self.params, loss, self.velocity = train_step(
            self.params, self.config, z0, cond, rng, self.hyper, self.velocity
        )
        return loss


def evaluation_batch(
    z0: np.ndarray, cond: Optional[ConditionSet], rng: np.random.Generator, hyper: Hyper, cond_dim: int
) -> TrainingBatch:
    """Like :func:`sample_batch` but without condition dropout."""
    return sample_batch(z0, cond, rng, Hyper(**{**hyper.__dict__, "dropout": 0.0}), cond_dim)


def predictor_loss(predict: Callable, batch: TrainingBatch) -> float:
    """Masked loss of any ``predict(z_tau, taus, cond)`` on ``batch``."""
    return masked_loss(np.asarray(predict(batch.z_tau, batch.taus, batch.cond)), batch)
