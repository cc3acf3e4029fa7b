r"""Cosine noise schedule, inference time grids and track-wise timestep patterns.

The perturbation kernel is

.. math:: z_\tau = \alpha_\tau z_0 + \beta_\tau \epsilon,
    \quad \alpha_\tau = \cos(\pi\tau/2), \quad \beta_\tau = \sin(\pi\tau/2).

Tracks are ordered (mixture, submixture, source) everywhere in this package.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "TAU_MIN",
    "NUM_TRACKS",
    "Pattern",
    "TimestepVector",
    "alpha_beta",
    "make_time_grid",
    "sample_training_tau",
    "sample_pattern",
]

TAU_MIN = 0.02
NUM_TRACKS = 3


class Pattern(enum.IntEnum):
    """Which track (if any) is clamped to noise level zero."""

    ALL_NOISED = 0
    MIX_CLAMPED = 1
    SUB_CLAMPED = 2
    SRC_CLAMPED = 3

    @property
    def clamped_track(self) -> Optional[int]:
        return None if self is Pattern.ALL_NOISED else int(self) - 1


@dataclass(frozen=True)
class TimestepVector:
    """Per-track noise levels together with the pattern that produced them."""

    taus: tuple
    pattern: Pattern

    def __post_init__(self):
        if len(self.taus) != NUM_TRACKS:
            raise ValueError(f"expected {NUM_TRACKS} noise levels, got {len(self.taus)}")
        clamped = [k for k, t in enumerate(self.taus) if t == 0.0]
        expected = self.pattern.clamped_track
        if clamped != ([] if expected is None else [expected]):
            raise ValueError(f"taus {self.taus} inconsistent with pattern {self.pattern.name}")
        noised = {t for t in self.taus if t != 0.0}
        if len(noised) > 1:
            raise ValueError(f"noised tracks must share one level, got {self.taus}")

    @classmethod
    def from_pattern(cls, tau: float, pattern: Pattern) -> "TimestepVector":
        taus = [float(tau)] * NUM_TRACKS
        if pattern.clamped_track is not None:
            taus[pattern.clamped_track] = 0.0
        return cls(tuple(taus), pattern)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.taus, dtype=dtype or np.float64)


def _check_tau(tau: np.ndarray) -> None:
    if not np.all(np.isfinite(tau)) or np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError(f"noise level outside [0, 1]: {tau}")


def alpha_beta(tau):
    """Return ``(alpha, beta)`` for scalar or array ``tau`` in [0, 1].

    Endpoints are exact: tau=0 gives (1, 0) and tau=1 gives (0, 1).
    """
    t = np.asarray(tau, dtype=np.float64)
    _check_tau(t)
    phi = 0.5 * np.pi * t
    alpha = np.where(t == 1.0, 0.0, np.cos(phi))
    beta = np.where(t == 1.0, 1.0, np.sin(phi))
    if alpha.ndim == 0:
        return float(alpha), float(beta)
    return alpha, beta


def make_time_grid(T: int) -> np.ndarray:
    """Uniform decreasing grid ``[1, (T-1)/T, ..., 0]`` with ``T + 1`` entries."""
    if int(T) != T or T < 1:
        raise ValueError(f"number of steps must be a positive integer, got {T!r}")
    T = int(T)
    return np.arange(T, -1, -1, dtype=np.float64) / T


def sample_training_tau(rng: np.random.Generator, size=None, tau_min: float = TAU_MIN):
    """Draw noise levels from U([tau_min, 1])."""
    return rng.uniform(tau_min, 1.0, size=size)


def sample_pattern(
    rng: np.random.Generator,
    tau: float,
    weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    forced: Optional[Pattern] = None,
) -> TimestepVector:
    """Pick one of the four timestep patterns and apply it to ``tau``."""
    if forced is None:
        w = np.asarray(weights, dtype=np.float64)
        forced = Pattern(int(rng.choice(4, p=w / w.sum())))
    return TimestepVector.from_pattern(tau, forced)


def pattern_taus(tau: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Vectorised pattern application: ``(B,)`` levels and pattern ids to ``(B, 3)``."""
    tau = np.asarray(tau, dtype=np.float64)
    patterns = np.asarray(patterns)
    taus = np.repeat(tau[:, None], NUM_TRACKS, axis=1)
    rows = np.nonzero(patterns > 0)[0]
    taus[rows, patterns[rows] - 1] = 0.0
    return taus
