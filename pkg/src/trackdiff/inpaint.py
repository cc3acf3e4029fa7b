"""Track-mask inpainting: canonical replacement, RePaint resampling and
adaptive (clamped-timestep) conditioning.

Masks are whole-track booleans ordered (mixture, submixture, source);
``True`` marks an observed track.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .denoiser.conditions import ConditionSet
from .sampler import _check_finite, ddim_step, guided_v
from .schedule import NUM_TRACKS, alpha_beta

__all__ = ["TrackMask", "canonical_inpaint", "repaint", "adaptive_inpaint"]


class TrackMask(tuple):
    """Immutable triple of per-track 'known' flags."""

    def __new__(cls, known: Sequence[bool]):
        known = tuple(bool(k) for k in known)
        if len(known) != NUM_TRACKS:
            raise ValueError(f"mask needs {NUM_TRACKS} entries, got {len(known)}")
        return super().__new__(cls, known)

    def validate(self) -> "TrackMask":
        if all(self) or not any(self):
            raise ValueError(f"mask needs at least one known and one unknown track, got {tuple(self)}")
        return self

    @property
    def planes(self) -> np.ndarray:
        """Boolean array shaped ``(3, 1, 1)`` for broadcasting over latents."""
        return np.asarray(self, dtype=bool)[:, None, None]


def _prepare(mask, z0_known, grid):
    mask = mask if isinstance(mask, TrackMask) else TrackMask(mask)
    z0_known = np.asarray(z0_known, dtype=np.float64)
    if z0_known.ndim < 3 or z0_known.shape[-3] != NUM_TRACKS:
        raise ValueError(f"known latent must be (..., 3, C, L), got {z0_known.shape}")
    return mask, z0_known, np.asarray(grid, dtype=np.float64)


def repaint(
    denoiser,
    mask,
    z0_known,
    cond: Optional[ConditionSet],
    grid,
    U: int,
    cfg_scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """RePaint-style inpainting with ``U`` reverse/forward cycles per step.

    The denoiser is always called with a uniform timestep vector; guidance
    (if any) is applied at every call, including inner cycles.
    """
    if int(U) != U or U < 1:
        raise ValueError(f"U must be a positive integer, got {U!r}")
    mask, z0_known, grid = _prepare(mask, z0_known, grid)
    mask.validate()
    known = mask.planes
    T = len(grid) - 1
    z = rng.standard_normal(z0_known.shape)
    for step in range(T):
        i = T - step  # grid index counting down T..1
        tau, tau_prev = grid[step], grid[step + 1]
        a, _ = alpha_beta(tau)
        a_prev, b_prev = alpha_beta(tau_prev)
        taus = np.full(NUM_TRACKS, tau)
        for u in range(1, U + 1):
            v = guided_v(denoiser, z, taus, cond, cfg_scale)
            unknown = ddim_step(z, v, tau, tau_prev)
            if i > 1:
                known_noised = a_prev * z0_known + b_prev * rng.standard_normal(z0_known.shape)
            else:
                known_noised = z0_known
            z_prev = np.where(known, known_noised, unknown)
            _check_finite(z_prev, step)
            if u < U and i > 1:
                if a_prev == 0.0:
                    raise FloatingPointError(f"zero signal scale at tau={tau_prev} in re-noising")
                ratio = a / a_prev
                z = ratio * z_prev + np.sqrt(max(1.0 - ratio * ratio, 0.0)) * rng.standard_normal(z.shape)
            else:
                z = z_prev
    return z


def canonical_inpaint(
    denoiser,
    mask,
    z0_known,
    cond: Optional[ConditionSet],
    grid,
    cfg_scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Single-sample replacement inpainting.

    Known tracks are replaced by a freshly noised copy of the observation at
    every step; unknown tracks follow DDIM with a joint (uniform-level) call.
    """
    mask, z0_known, grid = _prepare(mask, z0_known, grid)
    mask.validate()
    known = mask.planes
    T = len(grid) - 1
    z = rng.standard_normal(z0_known.shape)
    for step in range(T):
        tau, tau_prev = grid[step], grid[step + 1]
        v = guided_v(denoiser, z, np.full(NUM_TRACKS, tau), cond, cfg_scale)
        unknown = ddim_step(z, v, tau, tau_prev)
        if step < T - 1:
            a_prev, b_prev = alpha_beta(tau_prev)
            known_noised = a_prev * z0_known + b_prev * rng.standard_normal(z0_known.shape)
        else:
            known_noised = z0_known
        z = np.where(known, known_noised, unknown)
        _check_finite(z, step)
    return z


def adaptive_inpaint(
    denoiser,
    mask,
    z0_known,
    cond: Optional[ConditionSet],
    grid,
    cfg_scale: float,
    rng: np.random.Generator,
    *,
    check_mask: bool = True,
) -> np.ndarray:
    """Inpainting with observed tracks clamped at noise level zero.

    The denoiser sees ``taus = tau_i * (1 - mask)``, so it predicts the
    conditional velocity of the unknown tracks directly; no re-noising of
    the observation takes place.
    """
    mask, z0_known, grid = _prepare(mask, z0_known, grid)
    if check_mask:
        mask.validate()
    known = mask.planes
    unknown_tracks = ~np.asarray(mask, dtype=bool)
    if not unknown_tracks.any():
        return z0_known.copy()
    z = np.where(known, z0_known, rng.standard_normal(z0_known.shape))
    for step in range(len(grid) - 1):
        tau, tau_prev = grid[step], grid[step + 1]
        taus = tau * unknown_tracks.astype(np.float64)
        v = guided_v(denoiser, z, taus, cond, cfg_scale)
        unknown = ddim_step(z, v, tau, tau_prev)
        z = np.where(known, z0_known, unknown)
        _check_finite(z, step)
    return z
