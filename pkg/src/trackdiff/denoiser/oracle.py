"""Closed-form velocity predictors for jointly Gaussian track priors.

For ``z = A x + B eps`` with ``x ~ N(mu, Sigma)`` and diagonal ``A``, ``B``
(per-track alpha/beta expanded over coordinates), Gaussian conditioning gives

    E[x | z]   = mu + Sigma A S^-1 (z - A mu)
    E[eps | z] = B S^-1 (z - A mu),        S = A Sigma A + B^2

and the optimal v-predictor is ``A E[eps|z] - B E[x|z]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import linalg

from ..schedule import NUM_TRACKS, alpha_beta
from .conditions import ConditionSet

__all__ = [
    "OracleError",
    "GaussianWorld",
    "oracle_v",
    "oracle_conditional_moments",
    "OracleDenoiser",
    "ClassConditionalOracle",
]


class OracleError(ArithmeticError):
    """Raised when a Gaussian conditioning system is numerically singular."""


@dataclass(eq=False)
class GaussianWorld:
    """Gaussian prior over the flattened ``(3, C, L)`` latent."""

    mean: np.ndarray
    cov: np.ndarray
    latent_shape: tuple
    _maps: Dict[tuple, tuple] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        self.latent_shape = tuple(int(s) for s in self.latent_shape)
        n = NUM_TRACKS * int(np.prod(self.latent_shape))
        if self.mean.shape != (n,) or self.cov.shape != (n, n):
            raise ValueError(
                f"world of latent shape {self.latent_shape} needs mean ({n},) and cov ({n}, {n}); "
                f"got {self.mean.shape} and {self.cov.shape}"
            )
        if np.max(np.abs(self.cov - self.cov.T), initial=0.0) > 1e-12:
            raise ValueError("covariance is not symmetric")
        min_eig = np.linalg.eigvalsh(self.cov).min()
        if min_eig < -1e-10:
            raise ValueError(f"covariance is not PSD (min eigenvalue {min_eig:.3e})")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def per_track(self) -> int:
        return self.dim // NUM_TRACKS

    def track_slice(self, k: int) -> slice:
        return slice(k * self.per_track, (k + 1) * self.per_track)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draw ``n`` clean latents shaped ``(n, 3, C, L)``."""
        flat = rng.multivariate_normal(self.mean, self.cov, size=n, method="eigh")
        return flat.reshape((n, NUM_TRACKS) + self.latent_shape)

    def velocity_map(self, taus) -> tuple:
        """Affine map ``(M, c)`` with ``E[v | z] = M (z - A mu) + c``; cached per ``taus``."""
        key = tuple(float(t) for t in np.asarray(taus, dtype=np.float64))
        cached = self._maps.get(key)
        if cached is not None:
            return cached
        alpha, beta = alpha_beta(np.asarray(key))
        a = np.repeat(alpha, self.per_track)
        b = np.repeat(beta, self.per_track)
        S = a[:, None] * self.cov * a[None, :] + np.diag(b * b)
        try:
            factor = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError as exc:
            eig = np.linalg.eigvalsh(S)
            raise OracleError(
                f"singular posterior system at taus={key}: eigenvalues in [{eig.min():.3e}, {eig.max():.3e}]"
            ) from exc
        S_inv = linalg.cho_solve(factor, np.eye(self.dim))
        # E[v|z] = (a b) S^-1 r - b (mu + Sigma a S^-1 r)
        M = (a * b)[:, None] * S_inv - b[:, None] * (self.cov * a[None, :]) @ S_inv
        c = -b * self.mean
        clamped = b == 0.0
        M[clamped] = 0.0
        c = np.where(clamped, 0.0, c)
        result = (M, c, a)
        if len(self._maps) < 4096:
            self._maps[key] = result
        return result


def oracle_v(world: GaussianWorld, z_tau, taus) -> np.ndarray:
    """Exact ``E[v | z_tau]`` under ``world``; clamped tracks return zero.

    ``taus`` may be a single ``(3,)`` vector or per-item ``(B, 3)``.
    """
    z = np.asarray(z_tau, dtype=np.float64)
    batch_shape = z.shape[:-3]
    flat = z.reshape((-1, world.dim))
    t = np.asarray(taus, dtype=np.float64)
    out = np.empty_like(flat)
    if t.ndim == 1:
        groups = {tuple(t): np.arange(flat.shape[0])}
    else:
        t = np.broadcast_to(t, batch_shape + (NUM_TRACKS,)).reshape((-1, NUM_TRACKS))
        uniq, inverse = np.unique(t, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        groups = {tuple(u): np.nonzero(inverse == i)[0] for i, u in enumerate(uniq)}
    for key, rows in groups.items():
        M, c, a = world.velocity_map(key)
        r = flat[rows] - a * world.mean
        out[rows] = r @ M.T + c
    return out.reshape(z.shape)


def oracle_conditional_moments(world: GaussianWorld, known_mask: Sequence[bool], known_values):
    """Gaussian conditional moments of the unknown tracks given the known ones.

    Returns ``(mean, cov)``: ``mean`` has shape ``(..., n_unknown)`` and
    ``cov`` shape ``(n_unknown, n_unknown)``; coordinates are ordered by
    track, then row-major within the track.
    """
    known = np.asarray(known_mask, dtype=bool)
    if known.shape != (NUM_TRACKS,) or known.all() or not known.any():
        raise ValueError(f"mask needs at least one known and one unknown track, got {known_mask}")
    coord_known = np.repeat(known, world.per_track)
    ko, uo = np.nonzero(coord_known)[0], np.nonzero(~coord_known)[0]
    x = np.asarray(known_values, dtype=np.float64)
    x = x.reshape(x.shape[:-3] + (world.dim,))[..., ko]
    S_kk = world.cov[np.ix_(ko, ko)]
    S_uk = world.cov[np.ix_(uo, ko)]
    try:
        factor = linalg.cho_factor(S_kk, lower=True)
    except linalg.LinAlgError as exc:
        raise OracleError(
            f"singular conditioning block (min eigenvalue {np.linalg.eigvalsh(S_kk).min():.3e})"
        ) from exc
    gain = linalg.cho_solve(factor, S_uk.T).T
    mean = world.mean[uo] + (x - world.mean[ko]) @ gain.T
    cov = world.cov[np.ix_(uo, uo)] - gain @ S_uk.T
    return mean, 0.5 * (cov + cov.T)


class OracleDenoiser:
    """Callable denoiser backed by :func:`oracle_v`; ignores conditions."""

    def __init__(self, world: GaussianWorld):
        self.world = world
        self.latent_shape = world.latent_shape

    def __call__(self, z_tau, taus, cond: Optional[ConditionSet] = None) -> np.ndarray:
        return oracle_v(self.world, z_tau, taus)


class ClassConditionalOracle:
    """Oracle that switches world according to the source-track prompt.

    An item whose source slot is present and has cosine similarity above
    ``threshold`` with class embedding ``k`` is denoised under
    ``worlds[k]``; every other item uses ``null_world``.
    """

    def __init__(self, worlds, class_embeddings, null_world: GaussianWorld, threshold: float = 0.5):
        self.worlds = list(worlds)
        emb = np.asarray(class_embeddings, dtype=np.float64)
        self.class_embeddings = emb / np.linalg.norm(emb, axis=-1, keepdims=True)
        self.null_world = null_world
        self.threshold = threshold
        self.latent_shape = null_world.latent_shape
        self.cond_dim = emb.shape[1]

    def select(self, cond: Optional[ConditionSet], batch_shape: tuple) -> np.ndarray:
        """World index per item; ``-1`` selects the null world."""
        idx = np.full(batch_shape, -1, dtype=int)
        if cond is None or cond.is_null:
            return idx
        src = cond.values[..., 2, :]
        norm = np.linalg.norm(src, axis=-1, keepdims=True)
        sims = (src / np.where(norm == 0, 1.0, norm)) @ self.class_embeddings.T
        best = np.argmax(sims, axis=-1)
        ok = cond.present[..., 2] & (np.max(sims, axis=-1) > self.threshold)
        return np.broadcast_to(np.where(ok, best, -1), batch_shape).copy()

    def __call__(self, z_tau, taus, cond: Optional[ConditionSet] = None) -> np.ndarray:
        z = np.asarray(z_tau, dtype=np.float64)
        if z.ndim == 3:
            return self(z[None], taus, cond)[0]
        batch_shape = z.shape[:-3]
        idx = self.select(cond, batch_shape)
        t = np.asarray(taus, dtype=np.float64)
        out = np.empty_like(z)
        for k in np.unique(idx):
            rows = idx == k
            world = self.null_world if k < 0 else self.worlds[k]
            tk = t if t.ndim == 1 else np.broadcast_to(t, batch_shape + (NUM_TRACKS,))[rows]
            out[rows] = oracle_v(world, z[rows], tk)
        return out
