"""Generation, imputation and extraction pipelines over a pluggable codec.

Signals are float arrays shaped ``(..., L_sig)``; every pipeline accepts
leading batch axes. Signal-space sums are accumulated left to right
(``x_u0 + s_1 + s_2 + ...``) so that returned mixtures equal the observed
part plus the generated sources bit-for-bit.
"""

from __future__ import annotations

import time
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import StemLibrary
from .denoiser.conditions import ConditionSet
from .inpaint import adaptive_inpaint, canonical_inpaint, repaint
from .sampler import sample
from .schedule import NUM_TRACKS

__all__ = [
    "IdentityCodec",
    "LossyLinearCodec",
    "PromptEmbedder",
    "interp_condition",
    "total_generation",
    "partial_generation",
    "source_extraction",
    "iterative_generation",
    "TripletBatcher",
    "ALGORITHMS",
]

ALGORITHMS = ("canonical", "repaint", "adaptive")
MIX, SUB, SRC = range(NUM_TRACKS)


class IdentityCodec:
    """Reshape ``(..., L_sig)`` signals into ``(..., C, L)`` latents and back.

    ``scale`` multiplies latents (and divides on decode); keep it a power of
    two for an exact round trip.
    """

    def __init__(self, latent_shape: Tuple[int, int], scale: float = 1.0):
        self.latent_shape = tuple(int(s) for s in latent_shape)
        self.signal_length = self.latent_shape[0] * self.latent_shape[1]
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = float(scale)

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.signal_length:
            raise ValueError(f"expected signals of length {self.signal_length}, got {x.shape[-1]}")
        z = x.reshape(x.shape[:-1] + self.latent_shape)
        return z * self.scale if self.scale != 1.0 else z

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        x = z.reshape(z.shape[:-2] + (self.signal_length,))
        return x / self.scale if self.scale != 1.0 else x

    def roundtrip_bound(self, x) -> np.ndarray:
        return np.zeros(np.shape(x)[:-1])


class LossyLinearCodec:
    """Fixed random orthogonal projection, truncated and uniformly quantised.

    Decoding applies the transpose, so ``decode(encode(x))`` is ``x``
    projected onto a ``C*L``-dimensional subspace plus quantisation error.
    The declared bound per signal is
    ``|x - P^T P x| + 0.5 * step * sqrt(C*L)``.
    """

    def __init__(self, signal_length: int, latent_shape: Tuple[int, int], seed: int = 0, step: float = 1e-3):
        self.latent_shape = tuple(int(s) for s in latent_shape)
        k = self.latent_shape[0] * self.latent_shape[1]
        if k > signal_length:
            raise ValueError("latent cannot be larger than the signal")
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((signal_length, signal_length)))
        q = q * np.sign(np.diag(r))
        self.projection = q[:, :k].T  # (k, L_sig), orthonormal rows
        self.signal_length = int(signal_length)
        self.step = float(step)

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.signal_length:
            raise ValueError(f"expected signals of length {self.signal_length}, got {x.shape[-1]}")
        coeffs = x @ self.projection.T
        if self.step > 0:
            coeffs = self.step * np.round(coeffs / self.step)
        return coeffs.reshape(x.shape[:-1] + self.latent_shape)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        flat = z.reshape(z.shape[:-2] + (-1,))
        return flat @ self.projection

    def roundtrip_bound(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        resid = x - (x @ self.projection.T) @ self.projection
        k = self.projection.shape[0]
        return np.linalg.norm(resid, axis=-1) + 0.5 * self.step * np.sqrt(k)


class PromptEmbedder:
    """Shared text/audio embedding space for a :class:`StemLibrary`.

    Each class gets a fixed random unit vector (its "text" embedding). The
    audio embedding of a signal is the energy-weighted combination of class
    vectors, where class weights are the signal's power on that class's
    partial frequencies.
    """

    def __init__(self, library: StemLibrary, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        rng = np.random.default_rng(seed)
        vecs = rng.standard_normal((library.num_classes, dim))
        self.class_vectors = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        self.library = library
        self.dim = dim
        L = library.signal_length
        self._bins = [np.rint(library.frequencies[k] * L).astype(int) for k in range(library.num_classes)]

    def text_embed(self, label) -> np.ndarray:
        k = int(str(label).rsplit("_", 1)[-1]) if isinstance(label, str) else int(label)
        if not 0 <= k < self.library.num_classes:
            raise ValueError(f"unknown class label {label!r}")
        return self.class_vectors[k].copy()

    def class_weights(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        power = np.abs(np.fft.rfft(x, axis=-1)) ** 2
        return np.stack([power[..., b].sum(axis=-1) for b in self._bins], axis=-1)

    def audio_embed(self, x) -> np.ndarray:
        """Unit-norm embedding; raises on signals with no class energy."""
        w = self.class_weights(x)
        total = w.sum(axis=-1, keepdims=True)
        if np.any(total <= 1e-12):
            raise ValueError("cannot embed a silent signal")
        v = (w / total) @ self.class_vectors
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def audio_embed_or_null(self, x, floor: float = 1e-12):
        """Batched variant: ``(embeddings, present)`` with silent rows null."""
        w = self.class_weights(x)
        total = w.sum(axis=-1, keepdims=True)
        present = total[..., 0] > floor
        v = (w / np.where(present[..., None], total, 1.0)) @ self.class_vectors
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        v = np.where(present[..., None], v / np.where(norm > 0, norm, 1.0), 0.0)
        return v, present


def interp_condition(text_emb, audio_emb, rng: np.random.Generator, weight=None, normalize: bool = True):
    """Random convex mix ``a * text + (1 - a) * audio`` with ``a ~ U([0, 1])``.

    With leading batch axes one weight is drawn per item.
    """
    t = np.asarray(text_emb, dtype=np.float64)
    a_ = np.asarray(audio_emb, dtype=np.float64)
    if t.shape[-1] != a_.shape[-1]:
        raise ValueError(f"embedding dimensions differ: {t.shape[-1]} vs {a_.shape[-1]}")
    batch = np.broadcast_shapes(t.shape[:-1], a_.shape[:-1])
    a = rng.uniform(0.0, 1.0, size=batch) if weight is None else np.broadcast_to(weight, batch)
    a = np.asarray(a)[..., None]
    v = a * t + (1.0 - a) * a_
    if not normalize:
        return v
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TripletBatcher:
    """Vectorised :func:`~trackdiff.data.make_triplet` over a song collection.

    Each draw picks songs uniformly, a source stem uniformly within each
    song, encodes ``(mix, sub, src)`` and builds the training condition
    ``(audio(mix), audio(sub) or null, interp(text(src), audio(src)))``.
    """

    def __init__(self, songs, embedder: PromptEmbedder, codec):
        if len(songs) == 0:
            raise ValueError("need at least one song")
        n_max = max(len(s.labels) for s in songs)
        L = songs[0].stems.shape[1]
        self.stems = np.zeros((len(songs), n_max, L))
        self.labels = np.zeros((len(songs), n_max), dtype=int)
        self.counts = np.array([len(s.labels) for s in songs])
        for i, s in enumerate(songs):
            self.stems[i, : len(s.labels)] = s.stems
            self.labels[i, : len(s.labels)] = s.labels
        self.embedder = embedder
        self.codec = codec

    def draw(self, rng: np.random.Generator, batch_size: int):
        """Return ``(z0 (B, 3, C, L), ConditionSet)``."""
        i = rng.integers(len(self.counts), size=batch_size)
        j = rng.integers(self.counts[i])
        stems = self.stems[i]
        others = np.arange(stems.shape[1])[None, :] != j[:, None]
        src = stems[np.arange(batch_size), j]
        sub = np.sum(stems * others[..., None], axis=1)
        mix = sub + src
        text = self.embedder.class_vectors[self.labels[i, j]]
        audio_src, _ = self.embedder.audio_embed_or_null(src)
        audio_mix, mix_ok = self.embedder.audio_embed_or_null(mix)
        audio_sub, sub_ok = self.embedder.audio_embed_or_null(sub)
        c_src = interp_condition(text, audio_src, rng)
        values = np.stack([audio_mix, audio_sub, c_src], axis=1)
        present = np.stack([mix_ok, sub_ok, np.ones(batch_size, dtype=bool)], axis=1)
        z0 = np.stack([self.codec.encode(x) for x in (mix, sub, src)], axis=1)
        return z0, ConditionSet(values, present)


def _cond_dim(denoiser, *embs) -> int:
    for e in embs:
        if e is not None:
            return int(np.shape(e)[-1])
    dim = getattr(denoiser, "cond_dim", None)
    return int(dim) if dim else 1


def _conditions(denoiser, mix=None, sub=None, src=None) -> ConditionSet:
    return ConditionSet.of(mix, sub, src, dim=_cond_dim(denoiser, mix, sub, src))


def _inpaint(algorithm: str, denoiser, mask, z_known, cond, grid, cfg_scale, rng, U: int):
    if algorithm == "adaptive":
        return adaptive_inpaint(denoiser, mask, z_known, cond, grid, cfg_scale, rng)
    if algorithm == "canonical":
        return canonical_inpaint(denoiser, mask, z_known, cond, grid, cfg_scale, rng)
    if algorithm == "repaint":
        return repaint(denoiser, mask, z_known, cond, grid, U, cfg_scale, rng)
    raise ValueError(f"unknown inpainting algorithm {algorithm!r}; choose from {ALGORITHMS}")


def _record(timings: Optional[list], stage: str, start: float) -> None:
    if timings is not None:
        timings.append({"stage": stage, "seconds": time.perf_counter() - start})


def total_generation(
    denoiser, codec, c_m, grid, cfg_scale: float, rng: np.random.Generator, n: Optional[int] = None, timings=None
) -> np.ndarray:
    """Sample all three tracks conditioned on the mixture prompt only; decode the mixture."""
    start = time.perf_counter()
    cond = _conditions(denoiser, mix=c_m)
    z = sample(denoiser, cond, grid, cfg_scale, rng, n=n)
    _record(timings, "total_generation", start)
    return codec.decode(z[..., MIX, :, :])


def partial_generation(
    denoiser,
    codec,
    x_u0,
    prompts: Sequence,
    grid,
    cfg_scale: float,
    rng: np.random.Generator,
    algorithm: str = "adaptive",
    U: int = 1,
    timings=None,
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Impute one source per prompt, growing the observed submixture each time.

    Step ``j`` observes ``encode(x_u0 + s_1 + ... + s_{j-1})`` on the
    submixture track and samples the mixture and source tracks with
    condition ``(null, null, c_j)``. Returns ``(sources, mix)`` with
    ``mix = x_u0 + s_1 + ... + s_J`` in signal space.
    """
    if len(prompts) == 0:
        raise ValueError("need at least one prompt")
    x_u0 = np.asarray(x_u0, dtype=np.float64)
    accumulated = x_u0
    sources = []
    mask = (False, True, False)
    for j, c in enumerate(prompts, start=1):
        start = time.perf_counter()
        z_sub = codec.encode(accumulated)
        z_known = np.zeros(z_sub.shape[:-2] + (NUM_TRACKS,) + z_sub.shape[-2:])
        z_known[..., SUB, :, :] = z_sub
        cond = _conditions(denoiser, src=c)
        z = _inpaint(algorithm, denoiser, mask, z_known, cond, grid, cfg_scale, rng, U)
        source = codec.decode(z[..., SRC, :, :])
        sources.append(source)
        accumulated = accumulated + source
        _record(timings, f"partial_generation[{j}]", start)
    return sources, accumulated


def source_extraction(
    denoiser,
    codec,
    x_m,
    c_s,
    grid,
    cfg_scale: float,
    rng: np.random.Generator,
    algorithm: str = "adaptive",
    U: int = 1,
    timings=None,
) -> np.ndarray:
    """Observe the mixture, inpaint submixture and source, decode the source."""
    start = time.perf_counter()
    z_mix = codec.encode(x_m)
    z_known = np.zeros(z_mix.shape[:-2] + (NUM_TRACKS,) + z_mix.shape[-2:])
    z_known[..., MIX, :, :] = z_mix
    cond = _conditions(denoiser, src=c_s)
    z = _inpaint(algorithm, denoiser, (True, False, False), z_known, cond, grid, cfg_scale, rng, U)
    _record(timings, "source_extraction", start)
    return codec.decode(z[..., SRC, :, :])


def iterative_generation(
    denoiser,
    codec,
    prompts: Sequence,
    grid,
    cfg_scale: float,
    rng: np.random.Generator,
    n: Optional[int] = None,
    algorithm: str = "adaptive",
    U: int = 1,
    timings=None,
) -> Tuple[List[np.ndarray], np.ndarray]:
    """Stem-by-stem generation: sample the first source from its prompt alone,
    then impute the rest with :func:`partial_generation`.

    Returns ``(sources, mix)`` with ``mix = s_1 + s_2 + ...``.
    """
    if len(prompts) == 0:
        raise ValueError("need at least one prompt")
    start = time.perf_counter()
    cond = _conditions(denoiser, src=prompts[0])
    z = sample(denoiser, cond, grid, cfg_scale, rng, n=n)
    first = codec.decode(z[..., SRC, :, :])
    _record(timings, "iterative_generation[1]", start)
    if len(prompts) == 1:
        return [first], first
    rest, mix = partial_generation(
        denoiser, codec, first, prompts[1:], grid, cfg_scale, rng, algorithm=algorithm, U=U, timings=timings
    )
    return [first] + rest, mix
