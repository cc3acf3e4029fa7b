"""Oracle inpainting benchmark: RePaint (T, U) sweep against adaptive inpainting.

Every cell inpaints the unknown tracks of a Gaussian world given an
observed mixture plane, then compares the empirical moments of the
imputed coordinates with the exact Gaussian conditional.
"""

from __future__ import annotations

from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .denoiser.oracle import GaussianWorld, OracleDenoiser, oracle_conditional_moments
from .inpaint import TrackMask, adaptive_inpaint, canonical_inpaint, repaint
from .sampler import CountingDenoiser
from .schedule import NUM_TRACKS, make_time_grid

__all__ = ["REPAINT_CELLS", "BENCH_COLUMNS", "moment_error", "known_latent", "run_cell", "run_benchmark"]

REPAINT_CELLS: Tuple[Tuple[int, int], ...] = ((250, 1), (125, 2), (50, 5), (25, 10), (250, 2), (250, 4))
BENCH_COLUMNS = ("algorithm", "T", "U", "moment_error", "denoiser_calls")


def moment_error(samples, mean, cov) -> float:
    """Squared sigma-normalised moment mismatch.

    ``samples`` is ``(n, d)``; the result is the mean squared standardised
    mean error plus the mean squared correlation-scaled covariance error.
    """
    x = np.asarray(samples, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    sd = np.sqrt(np.diag(cov))
    if np.any(sd <= 0):
        raise ValueError("reference covariance has a zero variance")
    emp_cov = np.atleast_2d(np.cov(x, rowvar=False))
    mean_err = (x.mean(axis=0) - mean) / sd
    cov_err = (emp_cov - cov) / np.outer(sd, sd)
    return float(np.mean(mean_err**2) + np.mean(cov_err**2))


def known_latent(world: GaussianWorld, mask: Sequence[bool], value: float, runs: int) -> np.ndarray:
    """Batch of ``runs`` identical latents whose known tracks hold ``value``."""
    z = np.zeros((runs, NUM_TRACKS) + world.latent_shape)
    for k, known in enumerate(mask):
        if known:
            z[:, k] = value
    return z


def run_cell(
    world: GaussianWorld,
    algorithm: str,
    T: int,
    U: int,
    runs: int,
    rng: np.random.Generator,
    known_value: float = 1.5,
    mask: Sequence[bool] = (True, False, False),
) -> dict:
    """One benchmark row; ``denoiser_calls`` counts calls per batched trajectory."""
    mask = TrackMask(mask).validate()
    z_known = known_latent(world, mask, known_value, runs)
    den = CountingDenoiser(OracleDenoiser(world))
    grid = make_time_grid(T)
    if algorithm == "adaptive":
        z = adaptive_inpaint(den, mask, z_known, None, grid, 1.0, rng)
    elif algorithm == "repaint":
        z = repaint(den, mask, z_known, None, grid, U, 1.0, rng)
    elif algorithm == "canonical":
        z = canonical_inpaint(den, mask, z_known, None, grid, 1.0, rng)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    mean, cov = oracle_conditional_moments(world, mask, z_known[0])
    unknown = ~np.asarray(mask)
    imputed = z[:, unknown].reshape(runs, -1)
    return {
        "algorithm": algorithm,
        "T": int(T),
        "U": int(U),
        "moment_error": moment_error(imputed, mean, cov),
        "denoiser_calls": den.calls,
    }


def run_benchmark(
    world: GaussianWorld,
    runs: int,
    seed: int,
    cells: Iterable[Tuple[int, int]] = REPAINT_CELLS,
    adaptive_T: int = 250,
    known_value: float = 1.5,
) -> List[dict]:
    """RePaint rows for ``cells`` followed by one adaptive row.

    Cell ``i`` draws from ``SeedSequence([seed, i])`` so rows are
    independent of the order and number of other cells.
    """
    rows = []
    cells = list(cells) + [("adaptive", adaptive_T, 1)]
    for i, cell in enumerate(cells):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if cell[0] == "adaptive":
            rows.append(run_cell(world, "adaptive", cell[1], 1, runs, rng, known_value))
        else:
            T, U = cell
            rows.append(run_cell(world, "repaint", T, U, runs, rng, known_value))
    return rows
