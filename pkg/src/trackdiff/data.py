"""Synthetic data: Gaussian oracle worlds and class-structured sinusoid stems.

Dataset layout on disk::

    <root>/index.json            {"format": 1, "signal_length": L, "songs": [...]}
    <root>/song_00000.bin        stems of one song, shape (n_stems, L)

Each ``songs`` entry is ``{"id", "file", "labels", "num_stems"}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .denoiser.oracle import GaussianWorld
from .schedule import NUM_TRACKS
from .tensorio import read_tensors, write_tensors

__all__ = [
    "make_gaussian_world",
    "StemLibrary",
    "make_stem_library",
    "make_triplet",
    "Song",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "library_from_index",
]

INDEX_FORMAT = 1


def make_gaussian_world(
    dim_per_track: int,
    cross_correlation: float,
    seed: int = 0,
    mean=None,
    latent_shape: Tuple[int, int] = None,
) -> GaussianWorld:
    """Three-track Gaussian world with identity within-track covariance.

    Matching coordinates of different tracks share a latent factor with
    loading ``sqrt(rho)``, giving cross-track correlation ``rho`` and a PSD
    covariance for every ``rho`` in [0, 1).

    ``mean`` may be a scalar, a ``(3,)`` per-track value or a full vector;
    when omitted a small random mean is drawn from ``seed``.
    """
    if dim_per_track < 1:
        raise ValueError(f"dim_per_track must be >= 1, got {dim_per_track}")
    rho = float(cross_correlation)
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"cross_correlation must lie in [0, 1), got {rho}")
    if latent_shape is None:
        latent_shape = (1, dim_per_track)
    if int(np.prod(latent_shape)) != dim_per_track:
        raise ValueError(f"latent_shape {latent_shape} does not hold {dim_per_track} values")
    d = dim_per_track
    loading = np.vstack([np.sqrt(rho) * np.eye(d)] * NUM_TRACKS)
    cov = loading @ loading.T + (1.0 - rho) * np.eye(NUM_TRACKS * d)
    cov = 0.5 * (cov + cov.T)
    if mean is None:
        mu = 0.5 * np.random.default_rng(seed).standard_normal(NUM_TRACKS * d)
    else:
        m = np.asarray(mean, dtype=np.float64)
        if m.ndim == 0:
            mu = np.full(NUM_TRACKS * d, float(m))
        elif m.shape == (NUM_TRACKS,):
            mu = np.repeat(m, d)
        else:
            mu = m.reshape(NUM_TRACKS * d)
    return GaussianWorld(mu, cov, latent_shape)


@dataclass(frozen=True)
class StemLibrary:
    """Class templates: each class is a bank of sinusoid partials.

    Frequencies are in cycles per sample. ``partial_amps`` is the fixed
    per-class amplitude envelope over the partials.
    """

    frequencies: np.ndarray  # (num_classes, partials)
    partial_amps: np.ndarray  # (num_classes, partials)
    signal_length: int
    amp_jitter: float = 0.2
    min_energy: float = 1e-3

    @property
    def num_classes(self) -> int:
        return self.frequencies.shape[0]

    @property
    def max_amplitude(self) -> float:
        return float(np.max(self.partial_amps.sum(axis=1)) * (1.0 + self.amp_jitter))

    def template(self, k: int, phases=None, gains=None) -> np.ndarray:
        t = np.arange(self.signal_length)
        phases = np.zeros(self.frequencies.shape[1]) if phases is None else phases
        gains = np.ones(self.frequencies.shape[1]) if gains is None else gains
        amps = self.partial_amps[k] * gains
        waves = np.cos(2 * np.pi * self.frequencies[k][:, None] * t[None, :] + phases[:, None])
        return amps @ waves

    def sample_stem(self, k: int, rng: np.random.Generator, max_retries: int = 10) -> np.ndarray:
        """Stem of class ``k`` with random phases and jittered partial gains.

        Near-silent draws (energy per sample below ``min_energy``) are
        redrawn up to ``max_retries`` times, after which the last draw is
        accepted.
        """
        n = self.frequencies.shape[1]
        for _ in range(max_retries + 1):
            phases = rng.uniform(0.0, 2 * np.pi, size=n)
            gains = rng.uniform(1.0 - self.amp_jitter, 1.0 + self.amp_jitter, size=n)
            stem = self.template(k, phases, gains)
            if np.mean(stem * stem) >= self.min_energy:
                break
        return stem


def make_stem_library(
    num_classes: int,
    signal_length: int,
    seed: int = 0,
    frame_size: int = 64,
    num_bands: int = 8,
    amplitude: float = 0.35,
) -> StemLibrary:
    """Spectrally disjoint classes aligned with the featuriser's bands.

    Every partial sits on an integer bin of the analysis frame (so it is
    periodic within each frame) and at least one bin away from its band
    edges. Class ``k`` owns a contiguous block of bands; classes never share
    a band.
    """
    if num_classes < 2:
        raise ValueError(f"need at least two classes, got {num_classes}")
    if signal_length % frame_size:
        raise ValueError("signal_length must be a multiple of frame_size")
    bins_per_band = (frame_size // 2) // num_bands
    if bins_per_band < 3 or num_bands < num_classes:
        raise ValueError("frame too short for the requested number of classes")
    rng = np.random.default_rng(seed)
    bands_per_class = num_bands // num_classes
    freqs = np.empty((num_classes, 3))
    for k in range(num_classes):
        bands = np.arange(k * bands_per_class, (k + 1) * bands_per_class)
        candidates = [b * bins_per_band + j for b in bands for j in range(1, bins_per_band - 1)]
        candidates = [c for c in candidates if c > 0]
        chosen = np.sort(rng.choice(candidates, size=3, replace=len(candidates) < 3))
        freqs[k] = chosen / frame_size
    amps = amplitude * rng.uniform(0.6, 1.0, size=(num_classes, 3))
    return StemLibrary(freqs, amps, signal_length)


def make_triplet(stems: Sequence[np.ndarray], rng: np.random.Generator):
    """Return ``(mix, sub, src, j)`` with ``src = stems[j]`` for uniform ``j``.

    ``sub`` is the sum of the other stems, so ``mix == sub + src`` holds
    exactly (``mix`` is computed as that sum).
    """
    if len(stems) == 0:
        raise ValueError("need at least one stem")
    stems = [np.asarray(s, dtype=np.float64) for s in stems]
    j = int(rng.integers(len(stems)))
    src = stems[j]
    sub = np.zeros_like(src)
    for i, s in enumerate(stems):
        if i != j:
            sub = sub + s
    return sub + src, sub, src, j


@dataclass
class Song:
    id: int
    stems: np.ndarray  # (n_stems, L)
    labels: List[int]


def build_dataset(
    library: StemLibrary,
    num_songs: int,
    stems_per_song: Tuple[int, int],
    rng: np.random.Generator,
) -> List[Song]:
    """Songs made of distinct random classes, one stem per class."""
    lo, hi = stems_per_song
    if not 1 <= lo <= hi <= library.num_classes:
        raise ValueError(f"stems_per_song {stems_per_song} incompatible with {library.num_classes} classes")
    songs = []
    for sid in range(num_songs):
        n = int(rng.integers(lo, hi + 1))
        labels = sorted(int(c) for c in rng.choice(library.num_classes, size=n, replace=False))
        stems = np.stack([library.sample_stem(k, rng) for k in labels])
        songs.append(Song(sid, stems, labels))
    return songs


def write_dataset(songs: Sequence[Song], root, library: StemLibrary = None, extra: dict = None) -> Path:
    """Write one tensor file per song plus ``index.json``; ``extra`` keys are merged into the index."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for song in songs:
            name = f"song_{song.id:05d}.bin"
            write_tensors(root / name, {"stems": song.stems})
            entries.append({"id": song.id, "file": name, "labels": song.labels, "num_stems": len(song.labels)})
        index = {"format": INDEX_FORMAT, "signal_length": int(songs[0].stems.shape[1]) if songs else 0, "songs": entries}
        if library is not None:
            index["library"] = {
                "frequencies": library.frequencies.tolist(),
                "partial_amps": library.partial_amps.tolist(),
                "amp_jitter": library.amp_jitter,
                "min_energy": library.min_energy,
            }
        if extra:
            index.update(extra)
        (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset under {root}: {exc}") from exc
    return root


def read_dataset(root) -> Tuple[List[Song], dict]:
    """Load songs and the raw index; tensors come back bit-identical."""
    root = Path(root)
    index_path = root / "index.json"
    try:
        index = json.loads(index_path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset index {index_path}: {exc}") from exc
    if index.get("format") != INDEX_FORMAT:
        raise ValueError(f"{index_path}: unsupported dataset format {index.get('format')!r}")
    songs = []
    for entry in index["songs"]:
        path = root / entry["file"]
        try:
            stems = read_tensors(path)["stems"]
        except OSError as exc:
            raise OSError(f"cannot read song file {path}: {exc}") from exc
        if stems.shape[0] != entry["num_stems"]:
            raise ValueError(f"{path}: expected {entry['num_stems']} stems, found {stems.shape[0]}")
        songs.append(Song(entry["id"], stems, list(entry["labels"])))
    return songs, index


def library_from_index(index: dict) -> StemLibrary:
    lib = index["library"]
    return StemLibrary(
        np.asarray(lib["frequencies"]),
        np.asarray(lib["partial_amps"]),
        int(index["signal_length"]),
        float(lib["amp_jitter"]),
        float(lib["min_energy"]),
    )
