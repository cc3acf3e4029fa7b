"""Flat JSON run configuration, its defaults table, hashing and seed streams.

A config file is one JSON object whose keys all appear in :data:`DEFAULTS`.
Unknown keys, wrong types and missing required keys raise
:class:`ConfigError` naming the field (and its line when it is in the file).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "REQUIRED",
    "STREAMS",
    "OUTPUT_ROOT_ENV",
    "load_config",
    "parse_config",
    "config_hash",
    "stream",
    "resolve_path",
]

OUTPUT_ROOT_ENV = "TRACKDIFF_OUTPUT_ROOT"

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "out": "run",
    # dataset generation
    "dataset": None,
    "library_seed": 0,
    "num_songs": 10,
    "num_classes": 4,
    "signal_length": 128,
    "stems_min": 1,
    "stems_max": 4,
    "amplitude": 0.35,
    "amp_jitter": 0.2,
    "min_energy": 1e-3,
    # model and codec
    "latent_channels": 2,
    "codec": "identity",
    "codec_scale": 2.0,
    "hidden": 128,
    "cond_dim": 8,
    "num_freqs": 8,
    # training
    "train_data": "dataset",
    "checkpoint": None,
    "steps": 25000,
    "batch_size": 64,
    "lr": 0.15,
    "momentum": 0.9,
    "dropout": 0.1,
    "tau_min": 0.02,
    "pattern_weights": [0.25, 0.25, 0.25, 0.25],
    "grad_clip": 10.0,
    "grad_check": False,
    "resume": False,
    "world_dim": 2,
    "world_rho": 0.6,
    "world_mean": 0.0,
    # tasks
    "grid_steps": 50,
    "cfg_scale": 2.0,
    "algorithm": "adaptive",
    "resample_u": 1,
    "prompts": ["class_0", "class_1"],
    "num_samples": 8,
    # inpainting benchmark
    "bench_runs": 5000,
    "bench_world_dim": 1,
    "bench_rho": 0.8,
    "bench_known_value": 1.5,
    "bench_adaptive_T": 250,
    "bench_cells": [[250, 1], [125, 2], [50, 5], [25, 10], [250, 2], [250, 4]],
}

_NULLABLE_STR = ("dataset", "checkpoint")
_CHOICES = {
    "codec": ("identity", "lossy"),
    "train_data": ("dataset", "gaussian"),
    "algorithm": ("canonical", "repaint", "adaptive"),
}

REQUIRED: Dict[str, tuple] = {
    "gen-data": ("dataset",),
    "train": ("checkpoint",),
    "run-task": ("checkpoint", "dataset"),
    "bench-inpaint": (),
}

# Stream ids for SeedSequence([seed, stream, ...]).
STREAMS = {
    "library": 1,
    "songs": 2,
    "embedder": 3,
    "init": 4,
    "train": 5,
    "task": 6,
    "bench": 7,
    "world": 8,
    "grad_check": 9,
    "codec": 10,
}


class ConfigError(ValueError):
    """Invalid configuration file or value."""


def _key_line(text: Optional[str], key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return f" (line {text.count(chr(10), 0, m.start()) + 1})" if m else ""


def _check_type(key: str, value: Any, text: Optional[str]) -> Any:
    default = DEFAULTS[key]
    where = _key_line(text, key)
    if key in _NULLABLE_STR:
        ok = value is None or isinstance(value, str)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list)
    if not ok:
        raise ConfigError(f"field '{key}'{where}: expected {type(default).__name__}, got {value!r}")
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"field '{key}'{where}: must be one of {list(_CHOICES[key])}, got {value!r}")
    return value


def parse_config(
    text: Optional[str],
    command: str,
    overrides: Optional[Dict[str, Any]] = None,
    source: str = "<config>",
) -> Dict[str, Any]:
    """Merge ``text`` (JSON object or ``None``) and ``overrides`` over the defaults."""
    raw: Dict[str, Any] = {}
    if text is not None:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
    cfg = dict(DEFAULTS)
    for key, value in list(raw.items()) + list((overrides or {}).items()):
        if key not in DEFAULTS:
            raise ConfigError(f"{source}: unknown field '{key}'{_key_line(text, key)}")
        cfg[key] = _check_type(key, value, text if key in raw else None)
    required = list(REQUIRED.get(command, ()))
    if command == "train" and cfg["train_data"] == "dataset":
        required.append("dataset")
    for key in required:
        if cfg[key] is None:
            raise ConfigError(f"{source}: missing required field '{key}' for command {command}")
    return cfg


def load_config(path, command: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    if path is None:
        return parse_config(None, command, overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, command, overrides, source=str(p))


def config_hash(cfg: Dict[str, Any], keys: Optional[Iterable[str]] = None) -> str:
    """First 16 hex digits of SHA-256 over canonical JSON (``out`` excluded)."""
    keys = sorted(keys) if keys is not None else sorted(k for k in cfg if k != "out")
    blob = json.dumps({k: cfg[k] for k in keys}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def stream(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    """Independent seed sequence for a named stream of a 64-bit run seed."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[name], *extra])


def resolve_path(path: str) -> Path:
    """Relative paths are taken against ``$TRACKDIFF_OUTPUT_ROOT`` (default: cwd)."""
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
