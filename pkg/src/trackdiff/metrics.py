"""Evaluation metrics on synthetic features.

* :func:`featurize` frames a signal (Hann window, 50 % overlap) and sums the
  one-sided power spectrum into contiguous bands.
* :func:`frechet_distance` is the squared 2-Wasserstein distance between two
  Gaussians fitted with :func:`fit_gaussian`.
* :func:`sub_fd` composes observed parts with generated sources before
  measuring the distance to reference mixtures.
* :func:`log_feature_l1` is the mean absolute difference of ``log(1 + E)``
  band energies.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable, Iterable, Sequence, Tuple

import numpy as np

__all__ = [
    "FRAME_SIZE",
    "NUM_BANDS",
    "featurize",
    "fit_gaussian",
    "frechet_distance",
    "sub_fd",
    "log_feature_l1",
    "write_metric_rows",
]

FRAME_SIZE = 64
NUM_BANDS = 8
METRIC_COLUMNS = ("metric", "dataset", "config_hash", "value", "n")


def _band_edges(frame_size: int, num_bands: int) -> np.ndarray:
    n_bins = frame_size // 2 + 1
    per_band = (frame_size // 2) // num_bands
    edges = np.arange(num_bands + 1) * per_band
    edges[-1] = n_bins  # the Nyquist bin joins the top band
    return edges


def featurize(x, frame_size: int = FRAME_SIZE, num_bands: int = NUM_BANDS) -> np.ndarray:
    """Band energies per frame, shaped ``(..., n_frames, num_bands)``.

    Band energies of a frame sum to the energy of the windowed frame.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if L < frame_size:
        raise ValueError(f"signal of length {L} is shorter than one frame ({frame_size})")
    hop = frame_size // 2
    n_frames = 1 + (L - frame_size) // hop
    idx = np.arange(frame_size)[None, :] + hop * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame_size) / frame_size)
    frames = x[..., idx] * window
    spec = np.fft.rfft(frames, axis=-1)
    power = np.abs(spec) ** 2 / frame_size
    weights = np.full(power.shape[-1], 2.0)
    weights[0] = 1.0
    if frame_size % 2 == 0:
        weights[-1] = 1.0
    power = power * weights
    edges = _band_edges(frame_size, num_bands)
    return np.add.reduceat(power, edges[:-1], axis=-1)


def fit_gaussian(features, shrinkage: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and (unbiased) covariance plus ``shrinkage * I``."""
    f = np.asarray(features, dtype=np.float64)
    if f.size == 0:
        raise ValueError("cannot fit a Gaussian to an empty feature set")
    if f.ndim == 1:
        f = f[:, None]
    f = f.reshape(-1, f.shape[-1])
    mean = f.mean(axis=0)
    if f.shape[0] > 1:
        centred = f - mean
        cov = centred.T @ centred / (f.shape[0] - 1)
    else:
        cov = np.zeros((f.shape[1], f.shape[1]))
    return mean, cov + shrinkage * np.eye(f.shape[1])


def _psd_sqrt(m: np.ndarray, name: str) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, V = np.linalg.eigh(m)
    tol = 1e-9 * max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise ArithmeticError(f"{name} is not PSD (min eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(ga, gb) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``, clipped at 0."""
    mu_a, s_a = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in ga)
    mu_b, s_b = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in gb)
    s_a, s_b = np.atleast_2d(s_a), np.atleast_2d(s_b)
    if mu_a.shape != mu_b.shape or s_a.shape != s_b.shape:
        raise ValueError("Gaussians have different dimensions")
    root_a = _psd_sqrt(s_a, "first covariance")
    _psd_sqrt(s_b, "second covariance")
    inner = root_a @ s_b @ root_a
    inner = 0.5 * (inner + inner.T)
    w = np.linalg.eigvalsh(inner)
    cross = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * cross)
    return max(value, 0.0)


def _pooled(featurizer: Callable, signals: np.ndarray) -> np.ndarray:
    f = np.asarray(featurizer(signals))
    return f.reshape(-1, f.shape[-1])


def sub_fd(
    reference_mixes,
    observed_parts,
    generated_sources: Sequence,
    featurizer: Callable = featurize,
    shrinkage: float = 1e-6,
) -> float:
    """Frechet distance between references and ``observed + sum(generated)``.

    ``reference_mixes`` and ``observed_parts`` are ``(n, L)``;
    ``generated_sources`` is a sequence of ``(n, L)`` arrays (possibly empty).
    """
    ref = np.asarray(reference_mixes, dtype=np.float64)
    cand = np.array(observed_parts, dtype=np.float64)
    if ref.shape != cand.shape:
        raise ValueError(f"length mismatch: references {ref.shape} vs observed {cand.shape}")
    for j, g in enumerate(generated_sources):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != cand.shape:
            raise ValueError(f"length mismatch: generated source {j} {g.shape} vs {cand.shape}")
        cand = cand + g
    ga = fit_gaussian(_pooled(featurizer, ref), shrinkage)
    gb = fit_gaussian(_pooled(featurizer, cand), shrinkage)
    return frechet_distance(ga, gb)


def log_feature_l1(a, b, featurizer: Callable = featurize) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    fa = np.log1p(np.abs(featurizer(a)))
    fb = np.log1p(np.abs(featurizer(b)))
    return float(np.mean(np.abs(fa - fb)))


def write_metric_rows(path, rows: Iterable[dict]) -> None:
    """Write metric records with the stable column set ``METRIC_COLUMNS``."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
