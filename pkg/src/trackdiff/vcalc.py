"""v-objective algebra for stacked three-track latents.

Latents are arrays of shape ``(..., 3, C, L)``; noise levels are arrays of
shape ``(..., 3)`` (or a :class:`~trackdiff.schedule.TimestepVector`) that
broadcast over the leading batch axes.
"""

from __future__ import annotations

import numpy as np

from .schedule import NUM_TRACKS, TAU_MIN, alpha_beta

__all__ = [
    "track_coefficients",
    "perturb",
    "velocity_target",
    "recover_z0",
    "recover_eps",
    "score_from_v",
]


def _as_taus(taus) -> np.ndarray:
    t = np.asarray(taus, dtype=np.float64)
    if t.ndim == 0 or t.shape[-1] != NUM_TRACKS:
        raise ValueError(f"noise levels must have trailing dimension {NUM_TRACKS}, got {t.shape}")
    return t


def track_coefficients(taus):
    """Per-track ``(alpha, beta)`` shaped ``(..., 3, 1, 1)`` for broadcasting."""
    alpha, beta = alpha_beta(_as_taus(taus))
    alpha = np.asarray(alpha)[..., None, None]
    beta = np.asarray(beta)[..., None, None]
    return alpha, beta


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 3 or a.shape[-3] != NUM_TRACKS:
        raise ValueError(f"expected latent of shape (..., {NUM_TRACKS}, C, L), got {a.shape}")


def perturb(z0, eps, taus) -> np.ndarray:
    """Track-wise forward kernel ``alpha_k z0_k + beta_k eps_k``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_pair(z0, eps)
    alpha, beta = track_coefficients(taus)
    out = alpha * z0 + beta * eps
    # clamped tracks must come back bit-identical (avoids -0.0 + 0.0 drift)
    return np.where(beta == 0.0, z0, out)


def velocity_target(z0, eps, taus) -> np.ndarray:
    """Track-wise velocity ``alpha_k eps_k - beta_k z0_k``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_pair(z0, eps)
    alpha, beta = track_coefficients(taus)
    return alpha * eps - beta * z0


def recover_z0(z_tau, v, taus) -> np.ndarray:
    z_tau = np.asarray(z_tau, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_pair(z_tau, v)
    alpha, beta = track_coefficients(taus)
    return np.where(beta == 0.0, z_tau, alpha * z_tau - beta * v)


def recover_eps(z_tau, v, taus) -> np.ndarray:
    z_tau = np.asarray(z_tau, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_pair(z_tau, v)
    alpha, beta = track_coefficients(taus)
    return beta * z_tau + alpha * v


def score_from_v(z_tau, v_hat, taus, tau_min: float = TAU_MIN):
    """Convert a velocity prediction into a score estimate.

    Returns ``(score, clamped)`` where ``clamped`` flags tracks with noise
    level zero; their score plane is set to zero.

    Raises:
        ValueError: a noised track has ``0 < tau < tau_min``.
    """
    z_tau = np.asarray(z_tau, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    _check_pair(z_tau, v_hat)
    t = _as_taus(taus)
    clamped = t == 0.0
    if np.any(~clamped & (t < tau_min)):
        raise ValueError(f"noise level below tau_min={tau_min} on a noised track: {t}")
    alpha, beta = track_coefficients(t)
    safe_beta = np.where(beta == 0.0, 1.0, beta)
    score = -z_tau - (alpha / safe_beta) * v_hat
    score = np.where(beta == 0.0, 0.0, score)
    return score, np.broadcast_to(clamped, z_tau.shape[:-2])
