"""Deterministic DDIM reverse process over three-track latents."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .denoiser.conditions import ConditionSet, cfg_combine
from .schedule import NUM_TRACKS, alpha_beta

__all__ = ["SamplingError", "ddim_step", "guided_v", "sample", "CountingDenoiser"]


class SamplingError(FloatingPointError):
    """A reverse trajectory produced non-finite values."""

    def __init__(self, step: int, message: str = "non-finite latent"):
        super().__init__(f"{message} at step {step}")
        self.step = step


def ddim_step(z_tau, v_hat, tau: float, tau_next: float) -> np.ndarray:
    """One deterministic DDIM update from ``tau`` to ``tau_next < tau``."""
    if not tau_next < tau:
        raise ValueError(f"tau_next ({tau_next}) must be below tau ({tau})")
    a, b = alpha_beta(tau)
    a_next, b_next = alpha_beta(tau_next)
    z0_hat = a * z_tau - b * v_hat
    if b_next == 0.0:
        return z0_hat
    eps_hat = b * z_tau + a * v_hat
    return a_next * z0_hat + b_next * eps_hat


def guided_v(denoiser, z, taus, cond: Optional[ConditionSet], cfg_scale: float) -> np.ndarray:
    """Denoiser output with classifier-free guidance applied in v-space.

    The unconditional branch nulls every track. It is skipped when guidance
    is inactive or the condition is already fully null.
    """
    v = denoiser(z, taus, cond)
    if cfg_scale == 1.0 or cond is None or cond.is_null:
        return v
    return cfg_combine(v, denoiser(z, taus, cond.unconditional()), cfg_scale)


def _check_finite(z: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(z)):
        raise SamplingError(step)


def sample(
    denoiser,
    cond: Optional[ConditionSet],
    grid,
    cfg_scale: float,
    rng: np.random.Generator,
    n: Optional[int] = None,
) -> np.ndarray:
    """Draw latents from the model by running DDIM along ``grid``.

    Returns an array of shape ``(n, 3, C, L)`` when ``n`` is given, else
    one sample per item of the condition's batch shape (``(3, C, L)`` for
    an unbatched or absent condition).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if n is not None:
        batch = (int(n),)
    else:
        batch = () if cond is None else tuple(cond.values.shape[:-2])
    z = rng.standard_normal(batch + (NUM_TRACKS,) + tuple(denoiser.latent_shape))
    for i in range(len(grid) - 1):
        tau, tau_next = grid[i], grid[i + 1]
        taus = np.full(NUM_TRACKS, tau)
        v = guided_v(denoiser, z, taus, cond, cfg_scale)
        z = ddim_step(z, v, tau, tau_next)
        _check_finite(z, i)
    return z


class CountingDenoiser:
    """Wraps a denoiser and counts its invocations."""

    def __init__(self, inner):
        self.inner = inner
        self.latent_shape = inner.latent_shape
        self.calls = 0

    def __call__(self, z, taus, cond=None):
        self.calls += 1
        return self.inner(z, taus, cond)
