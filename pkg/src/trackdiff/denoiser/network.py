"""Small track-aware velocity network with hand-written gradients.

Architecture (per batch item, tracks k = m, u, s)::

    h_k   = z_k W_in[k] + b_in[k] + fourier(tau_k) W_time[k]
    a_k   = silu(h_k) * (1 + scale_k) + shift_k          # pre-mix activations
    scale_k, shift_k = affine_k([c_k or null_k, fourier(tau_k)])
    A     = concat_k a_k
    H1    = A  + silu(A  W_1 + b_1)                       # track-mixing layers
    H2    = H1 + silu(H1 W_2 + b_2)
    out_k = H2[k] W_out[k] + b_out[k]

Only the two mixing layers move information between tracks; the
per-track modulation never touches another track's pre-mix activations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from ..schedule import NUM_TRACKS
from .conditions import ConditionSet

__all__ = ["NetConfig", "TrackDenoiser", "init_params", "forward", "backward", "PARAM_NAMES"]

PARAM_NAMES = (
    "in_w",
    "in_b",
    "time_w",
    "scale_w",
    "scale_b",
    "shift_w",
    "shift_b",
    "null_emb",
    "mix1_w",
    "mix1_b",
    "mix2_w",
    "mix2_b",
    "out_w",
    "out_b",
)


@dataclass(frozen=True)
class NetConfig:
    latent_shape: tuple
    hidden: int = 64
    cond_dim: int = 8
    num_freqs: int = 8
    freq_min: float = 0.25
    freq_max: float = 16.0

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(int(s) for s in self.latent_shape))
        if self.hidden < 1:
            raise ValueError(f"hidden width must be positive, got {self.hidden}")
        if self.cond_dim < 1 or self.num_freqs < 1:
            raise ValueError("cond_dim and num_freqs must be positive")
        if len(self.latent_shape) != 2 or min(self.latent_shape) < 1:
            raise ValueError(f"latent_shape must be (C, L) with positive sizes, got {self.latent_shape}")

    @property
    def track_dim(self) -> int:
        return self.latent_shape[0] * self.latent_shape[1]

    @property
    def freqs(self) -> np.ndarray:
        return np.geomspace(self.freq_min, self.freq_max, self.num_freqs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_shape"] = list(self.latent_shape)
        return d


def init_params(config: NetConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    d, H, D, F = config.track_dim, config.hidden, config.cond_dim, 2 * config.num_freqs
    K = NUM_TRACKS
    return {
        "in_w": rng.normal(0.0, 1.0 / np.sqrt(d), (K, d, H)),
        "in_b": np.zeros((K, H)),
        "time_w": rng.normal(0.0, 1.0 / np.sqrt(F), (K, F, H)),
        "scale_w": rng.normal(0.0, 0.1 / np.sqrt(D + F), (K, D + F, H)),
        "scale_b": np.zeros((K, H)),
        "shift_w": rng.normal(0.0, 0.1 / np.sqrt(D + F), (K, D + F, H)),
        "shift_b": np.zeros((K, H)),
        "null_emb": np.zeros((K, D)),
        "mix1_w": rng.normal(0.0, 0.5 / np.sqrt(K * H), (K * H, K * H)),
        "mix1_b": np.zeros(K * H),
        "mix2_w": rng.normal(0.0, 0.5 / np.sqrt(K * H), (K * H, K * H)),
        "mix2_b": np.zeros(K * H),
        "out_w": rng.normal(0.0, 0.1 / np.sqrt(H), (K, H, d)),
        "out_b": np.zeros((K, d)),
    }


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    s = _sigmoid(x)
    return x * s, s


def _dsilu(x, s):
    return s * (1.0 + x * (1.0 - s))


def _tmm(x, w):
    """Per-track product: ``(B, K, m) x (K, m, n) -> (B, K, n)``."""
    return np.matmul(x.transpose(1, 0, 2), w).transpose(1, 0, 2)


def _touter(x, y):
    """Per-track outer sum over the batch: ``(B, K, m), (B, K, n) -> (K, m, n)``."""
    return np.matmul(x.transpose(1, 2, 0), y.transpose(1, 0, 2))


def fourier_features(taus: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """``(..., 3)`` noise levels to ``(..., 3, 2F)`` sin/cos features."""
    ang = 2 * np.pi * taus[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _broadcast_inputs(config: NetConfig, z, taus, cond: Optional[ConditionSet]):
    z = np.asarray(z, dtype=np.float64)
    expected = (NUM_TRACKS,) + config.latent_shape
    if z.shape[-3:] != expected:
        raise ValueError(f"latent shape {z.shape[-3:]} does not match network {expected}")
    batch_shape = z.shape[:-3]
    B = int(np.prod(batch_shape, dtype=np.int64))
    x = z.reshape(B, NUM_TRACKS, config.track_dim)
    t = np.broadcast_to(np.asarray(taus, dtype=np.float64), batch_shape + (NUM_TRACKS,)).reshape(B, NUM_TRACKS)
    if cond is None:
        cond = ConditionSet.null(config.cond_dim)
    if cond.dim != config.cond_dim:
        raise ValueError(f"condition dimension {cond.dim} does not match network {config.cond_dim}")
    values = np.broadcast_to(cond.values, batch_shape + (NUM_TRACKS, cond.dim)).reshape(B, NUM_TRACKS, cond.dim)
    present = np.broadcast_to(cond.present, batch_shape + (NUM_TRACKS,)).reshape(B, NUM_TRACKS)
    return x, t, values, present, batch_shape


def forward(params, config: NetConfig, z, taus, cond: Optional[ConditionSet] = None, *, keep_cache: bool = False):
    """Network output shaped like ``z``; optionally the activation cache."""
    x, t, values, present, batch_shape = _broadcast_inputs(config, z, taus, cond)
    B, K, H = x.shape[0], NUM_TRACKS, config.hidden
    tf = fourier_features(t, config.freqs)
    h = _tmm(x, params["in_w"]) + params["in_b"]
    h += _tmm(tf, params["time_w"])
    g, sg = _silu(h)
    ce = np.where(present[..., None], values, params["null_emb"][None])
    mi = np.concatenate([ce, tf], axis=-1)
    sc = _tmm(mi, params["scale_w"]) + params["scale_b"]
    sh = _tmm(mi, params["shift_w"]) + params["shift_b"]
    a = g * (1.0 + sc) + sh
    A = a.reshape(B, K * H)
    p1 = A @ params["mix1_w"] + params["mix1_b"]
    q1, s1 = _silu(p1)
    h1 = A + q1
    p2 = h1 @ params["mix2_w"] + params["mix2_b"]
    q2, s2 = _silu(p2)
    h2 = h1 + q2
    o = _tmm(h2.reshape(B, K, H), params["out_w"]) + params["out_b"]
    out = o.reshape(batch_shape + (K,) + config.latent_shape)
    if not keep_cache:
        return out
    cache = dict(x=x, tf=tf, h=h, sg=sg, g=g, present=present, mi=mi, sc=sc, a=a, A=A,
                 p1=p1, s1=s1, h1=h1, p2=p2, s2=s2, h2=h2, batch_shape=batch_shape)
    return out, cache


def backward(params, config: NetConfig, cache, d_out) -> Dict[str, np.ndarray]:
    """Parameter gradients given ``d_out`` = dLoss/d(output)."""
    B, K, H = cache["x"].shape[0], NUM_TRACKS, config.hidden
    D = config.cond_dim
    do = np.asarray(d_out, dtype=np.float64).reshape(B, K, config.track_dim)
    grads = {}
    h2r = cache["h2"].reshape(B, K, H)
    grads["out_w"] = _touter(h2r, do)
    grads["out_b"] = do.sum(axis=0)
    dh2 = _tmm(do, params["out_w"].transpose(0, 2, 1)).reshape(B, K * H)
    dp2 = dh2 * _dsilu(cache["p2"], cache["s2"])
    grads["mix2_w"] = cache["h1"].T @ dp2
    grads["mix2_b"] = dp2.sum(axis=0)
    dh1 = dh2 + dp2 @ params["mix2_w"].T
    dp1 = dh1 * _dsilu(cache["p1"], cache["s1"])
    grads["mix1_w"] = cache["A"].T @ dp1
    grads["mix1_b"] = dp1.sum(axis=0)
    dA = dh1 + dp1 @ params["mix1_w"].T
    da = dA.reshape(B, K, H)
    dsc = da * cache["g"]
    dg = da * (1.0 + cache["sc"])
    mi = cache["mi"]
    grads["scale_w"] = _touter(mi, dsc)
    grads["scale_b"] = dsc.sum(axis=0)
    grads["shift_w"] = _touter(mi, da)
    grads["shift_b"] = da.sum(axis=0)
    dmi = _tmm(dsc, params["scale_w"].transpose(0, 2, 1)) + _tmm(da, params["shift_w"].transpose(0, 2, 1))
    dce = dmi[..., :D]
    grads["null_emb"] = np.where(cache["present"][..., None], 0.0, dce).sum(axis=0)
    dh = dg * _dsilu(cache["h"], cache["sg"])
    grads["in_w"] = _touter(cache["x"], dh)
    grads["in_b"] = dh.sum(axis=0)
    grads["time_w"] = _touter(cache["tf"], dh)
    return grads


class TrackDenoiser:
    """Callable wrapper ``(z, taus, cond) -> v_hat`` around fixed parameters."""

    def __init__(self, config: NetConfig, params: Dict[str, np.ndarray]):
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, value in params.items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"parameter {name} has non-finite entries")
        self.config = config
        self.params = params
        self.latent_shape = config.latent_shape
        self.cond_dim = config.cond_dim

    @classmethod
    def initialize(cls, config: NetConfig, rng: np.random.Generator) -> "TrackDenoiser":
        return cls(config, init_params(config, rng))

    def __call__(self, z_tau, taus, cond: Optional[ConditionSet] = None) -> np.ndarray:
        return forward(self.params, self.config, z_tau, taus, cond)
