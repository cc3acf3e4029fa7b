"""Command-line front end: ``trackdiff {gen-data,train,run-task,bench-inpaint}``.

Every command reads a flat JSON config (see :mod:`trackdiff.config`),
derives all randomness from one seed and writes its artifacts under
``--out``. Relative paths resolve against ``$TRACKDIFF_OUTPUT_ROOT``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .bench import BENCH_COLUMNS, run_benchmark
from .config import ConfigError, config_hash, load_config, resolve_path, stream
from .data import build_dataset, library_from_index, make_gaussian_world, make_stem_library, read_dataset, write_dataset
from .denoiser.network import PARAM_NAMES, NetConfig, TrackDenoiser, init_params
from .denoiser.training import Hyper, TrainingError, grad_check, sample_batch, train_step
from .metrics import log_feature_l1, write_metric_rows
from .schedule import make_time_grid
from .tasks import (
    IdentityCodec,
    LossyLinearCodec,
    PromptEmbedder,
    TripletBatcher,
    iterative_generation,
    partial_generation,
    source_extraction,
    total_generation,
)
from .tensorio import read_tensors, write_tensors

__all__ = ["main", "CLIError", "TASKS"]

TASKS = ("total", "partial", "extract", "iterative")
CHECKPOINT_FORMAT = 1


class CLIError(RuntimeError):
    """Fatal command error reported as ``error: ...`` with exit status 1."""


def _seed_int(seed: int, name: str) -> int:
    return int(stream(seed, name).generate_state(1, dtype=np.uint32)[0])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _library_digest(library) -> str:
    blob = np.ascontiguousarray(library.frequencies, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(library.partial_amps, dtype="<f8").tobytes()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- components


def build_library(cfg):
    lib = make_stem_library(
        cfg["num_classes"], cfg["signal_length"], seed=_seed_int(cfg["library_seed"], "library"),
        amplitude=cfg["amplitude"],
    )
    return dataclasses.replace(lib, amp_jitter=cfg["amp_jitter"], min_energy=cfg["min_energy"])


def build_embedder(cfg, library) -> PromptEmbedder:
    return PromptEmbedder(library, cfg["cond_dim"], seed=_seed_int(cfg["library_seed"], "embedder"))


def model_spec(cfg) -> dict:
    """Everything that fixes the meaning of a checkpoint's parameters."""
    if cfg["train_data"] == "gaussian":
        latent = (1, cfg["world_dim"])
        codec = {"kind": "identity", "scale": 1.0}
        extra = {"world_dim": cfg["world_dim"], "world_rho": cfg["world_rho"], "world_mean": cfg["world_mean"],
                 "world_seed": cfg["seed"]}
    else:
        C = cfg["latent_channels"]
        if C < 1 or cfg["signal_length"] % C:
            raise ConfigError(f"signal_length {cfg['signal_length']} is not divisible by latent_channels {C}")
        latent = (C, cfg["signal_length"] // C)
        codec = {"kind": cfg["codec"], "scale": cfg["codec_scale"]}
        extra = {"library_seed": cfg["library_seed"]}
    net = NetConfig(latent, hidden=cfg["hidden"], cond_dim=cfg["cond_dim"], num_freqs=cfg["num_freqs"])
    return {"net": net.to_dict(), "codec": codec, "train_data": cfg["train_data"], **extra}


def model_hash(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def build_codec(spec: dict, cfg):
    latent = tuple(spec["net"]["latent_shape"])
    if spec["codec"]["kind"] == "lossy":
        return LossyLinearCodec(latent[0] * latent[1], latent, seed=_seed_int(cfg["library_seed"], "codec"))
    return IdentityCodec(latent, scale=spec["codec"]["scale"])


def _net_config(spec: dict) -> NetConfig:
    return NetConfig(**{**spec["net"], "latent_shape": tuple(spec["net"]["latent_shape"])})


def save_checkpoint(path: Path, params, velocity, meta: dict) -> None:
    tensors = {name: params[name] for name in PARAM_NAMES}
    tensors.update({f"velocity.{name}": velocity[name] for name in PARAM_NAMES})
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, tensors)
    _write_json(_sidecar(path), meta)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def load_checkpoint(path: Path):
    try:
        meta = json.loads(_sidecar(path).read_text())
        tensors = read_tensors(path)
    except OSError as exc:
        raise CLIError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CLIError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    params = {name: tensors[name] for name in PARAM_NAMES}
    velocity = {name: tensors[f"velocity.{name}"] for name in PARAM_NAMES}
    return params, velocity, meta


def _load_dataset(cfg):
    root = resolve_path(cfg["dataset"])
    try:
        songs, index = read_dataset(root)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot load dataset {root}: {exc}") from exc
    if "library" not in index:
        raise CLIError(f"dataset {root} has no library description")
    return songs, index, library_from_index(index)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, out: Path) -> Dict:
    library = build_library(cfg)
    rng = np.random.default_rng(stream(cfg["seed"], "songs"))
    songs = build_dataset(library, cfg["num_songs"], (cfg["stems_min"], cfg["stems_max"]), rng)
    root = resolve_path(cfg["dataset"])
    extra = {"generator": {"seed": cfg["seed"], "library_seed": cfg["library_seed"],
                           "config_hash": config_hash(cfg), "library_digest": _library_digest(library)}}
    write_dataset(songs, root, library, extra=extra)
    return {"dataset": str(root), "num_songs": len(songs)}


def cmd_train(cfg, out: Path) -> Dict:
    spec = model_spec(cfg)
    mhash = model_hash(spec)
    net = _net_config(spec)
    hyper = Hyper(
        lr=cfg["lr"], momentum=cfg["momentum"], dropout=cfg["dropout"], tau_min=cfg["tau_min"],
        pattern_weights=tuple(cfg["pattern_weights"]), grad_clip=cfg["grad_clip"],
    )
    ckpt = resolve_path(cfg["checkpoint"])
    start = 0
    if cfg["resume"] and _sidecar(ckpt).exists():
        params, velocity, meta = load_checkpoint(ckpt)
        if meta["model_hash"] != mhash:
            raise CLIError(f"checkpoint {ckpt} was trained with model hash {meta['model_hash']}, config gives {mhash}")
        start = int(meta["step"])
    else:
        params = init_params(net, np.random.default_rng(stream(cfg["seed"], "init")))
        velocity = {k: np.zeros_like(v) for k, v in params.items()}

    if cfg["train_data"] == "dataset":
        songs, _, library = _load_dataset(cfg)
        if _library_digest(library) != _library_digest(build_library(cfg)):
            raise CLIError("dataset library does not match library_seed/num_classes/signal_length in the config")
        batcher = TripletBatcher(songs, build_embedder(cfg, library), build_codec(spec, cfg))

        def draw(rng):
            return batcher.draw(rng, cfg["batch_size"])
    else:
        world = make_gaussian_world(cfg["world_dim"], cfg["world_rho"], seed=_seed_int(cfg["seed"], "world"),
                                    mean=cfg["world_mean"])

        def draw(rng):
            return world.sample(rng, cfg["batch_size"]), None

    result = {"model_hash": mhash, "start_step": start, "steps": cfg["steps"]}
    if cfg["grad_check"]:
        rng = np.random.default_rng(stream(cfg["seed"], "grad_check"))
        z0, cond = draw(rng)
        probe_cond = None if cond is None else dataclasses.replace(cond, values=cond.values[:1], present=cond.present[:1])
        probe = sample_batch(z0[:1], probe_cond, rng, hyper, net.cond_dim)
        err = grad_check(params, net, probe, rng, n_params=200)
        print(f"grad_check max_relative_error={err:.3e}")
        result["grad_check_max_relative_error"] = err

    out.mkdir(parents=True, exist_ok=True)
    loss_path = out / "loss.csv"
    mode = "a" if start > 0 and loss_path.exists() else "w"
    with loss_path.open(mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            writer.writerow(["step", "loss"])
        for step in range(start, cfg["steps"]):
            rng = np.random.default_rng(stream(cfg["seed"], "train", step))
            z0, cond = draw(rng)
            try:
                params, loss, velocity = train_step(params, net, z0, cond, rng, hyper, velocity)
            except TrainingError as exc:
                raise CLIError(f"training aborted at step {step}: {exc}") from exc
            writer.writerow([step, repr(loss)])
    meta = {
        "format": CHECKPOINT_FORMAT,
        "step": max(cfg["steps"], start),
        "config_hash": config_hash(cfg),
        "model_hash": mhash,
        "model": spec,
    }
    if cfg["train_data"] == "dataset":
        meta["library_digest"] = _library_digest(library)
    save_checkpoint(ckpt, params, velocity, meta)
    result.update(checkpoint=str(ckpt), loss_csv=str(loss_path))
    return result


def _prompt_matrix(embedder, labels: Sequence, n: int) -> List[np.ndarray]:
    return [np.tile(embedder.text_embed(lab), (n, 1)) for lab in labels]


def cmd_run_task(cfg, out: Path, task: str) -> Dict:
    spec = model_spec(cfg)
    mhash = model_hash(spec)
    ckpt = resolve_path(cfg["checkpoint"])
    params, _, meta = load_checkpoint(ckpt)
    if meta["model_hash"] != mhash:
        raise CLIError(
            f"checkpoint {ckpt} (model hash {meta['model_hash']}) does not match this config (model hash {mhash})"
        )
    if spec["train_data"] != "dataset":
        raise CLIError("tasks need a checkpoint trained on a stem dataset (train_data = 'dataset')")
    songs, _, library = _load_dataset(cfg)
    if meta.get("library_digest") != _library_digest(library):
        raise CLIError("dataset library differs from the one the checkpoint was trained on")
    denoiser = TrackDenoiser(_net_config(spec), params)
    codec = build_codec(spec, cfg)
    embedder = build_embedder(cfg, library)
    rng = np.random.default_rng(stream(cfg["seed"], "task"))
    grid = make_time_grid(cfg["grid_steps"])
    n = min(cfg["num_samples"], len(songs))
    if n < 1:
        raise CLIError("dataset has no songs")
    songs = songs[:n]
    algo, U, cfg_scale = cfg["algorithm"], cfg["resample_u"], cfg["cfg_scale"]
    timings: List[dict] = []
    outputs: List[str] = []
    out.mkdir(parents=True, exist_ok=True)

    def save(name, **tensors):
        write_tensors(out / name, tensors)
        outputs.append(name)

    if task == "total":
        prompts = _prompt_matrix(embedder, cfg["prompts"], n)
        c_m = None
        if prompts:
            s = np.sum(prompts, axis=0)
            c_m = s / np.linalg.norm(s, axis=-1, keepdims=True)
        mix = total_generation(denoiser, codec, c_m, grid, cfg_scale, rng, n=n if c_m is None else None,
                               timings=timings)
        save("total.bin", mix=mix)
    elif task in ("partial", "iterative"):
        prompts = _prompt_matrix(embedder, cfg["prompts"], n)
        if not prompts:
            raise CLIError(f"task {task} needs at least one prompt")
        if task == "partial":
            observed = np.stack([s.stems[0] for s in songs])
            sources, mix = partial_generation(denoiser, codec, observed, prompts, grid, cfg_scale, rng,
                                              algorithm=algo, U=U, timings=timings)
            save("observed.bin", signal=observed)
        else:
            sources, mix = iterative_generation(denoiser, codec, prompts, grid, cfg_scale, rng,
                                                algorithm=algo, U=U, timings=timings)
        for j, src in enumerate(sources, start=1):
            save(f"source_{j}.bin", signal=src)
        save("mix.bin", signal=mix)
    elif task == "extract":
        mixes = np.stack([s.stems.sum(axis=0) for s in songs])
        extracted = {}
        for k in range(library.num_classes):
            c = np.tile(embedder.text_embed(k), (n, 1))
            extracted[k] = source_extraction(denoiser, codec, mixes, c, grid, cfg_scale, rng,
                                             algorithm=algo, U=U, timings=timings)
        save("extract.bin", **{f"class_{k}": v for k, v in extracted.items()})
        rows, hits, trials = [], 0, 0
        chash = config_hash(cfg)
        name = Path(cfg["dataset"]).name
        for k in range(library.num_classes):
            vals = [log_feature_l1(extracted[k][i], s.stems[s.labels.index(k)])
                    for i, s in enumerate(songs) if k in s.labels]
            rows.append({"metric": f"log_feature_l1[class_{k}]", "dataset": name, "config_hash": chash,
                         "value": repr(float(np.mean(vals))) if vals else "nan", "n": len(vals)})
        for i, s in enumerate(songs):
            for k, stem in zip(s.labels, s.stems):
                d = [log_feature_l1(extracted[j][i], stem) for j in range(library.num_classes)]
                hits += int(np.argmin(d) == k)
                trials += 1
        rows.append({"metric": "ranking_accuracy", "dataset": name, "config_hash": chash,
                     "value": repr(hits / trials), "n": trials})
        write_metric_rows(out / "metrics.csv", rows)
        outputs.append("metrics.csv")
    else:  # argparse restricts choices; kept for direct callers
        raise CLIError(f"unknown task {task!r}; choose from {TASKS}")
    return {"task": task, "model_hash": mhash, "checkpoint": str(ckpt), "T": cfg["grid_steps"],
            "cfg_scale": cfg_scale, "algorithm": algo, "resample_u": U, "outputs": outputs, "timings": timings}


def cmd_bench_inpaint(cfg, out: Path) -> Dict:
    world = make_gaussian_world(cfg["bench_world_dim"], cfg["bench_rho"], seed=_seed_int(cfg["seed"], "world"),
                                mean=0.0)
    cells = [tuple(int(v) for v in c) for c in cfg["bench_cells"]]
    bench_seed = _seed_int(cfg["seed"], "bench")
    rows = run_benchmark(world, cfg["bench_runs"], bench_seed, cells, adaptive_T=cfg["bench_adaptive_T"],
                         known_value=cfg["bench_known_value"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "bench_inpaint.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "moment_error": repr(row["moment_error"])})
    return {"csv": str(out / "bench_inpaint.csv"), "rows": len(rows)}


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackdiff", description="Track-wise latent diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"trackdiff {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--seed", type=int, help="64-bit run seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")

    common(sub.add_parser("gen-data", help="generate a synthetic stem dataset"))
    tr = sub.add_parser("train", help="train the toy denoiser")
    common(tr)
    tr.add_argument("--steps", type=int, help="total training steps")
    tr.add_argument("--grad-check", action="store_true", help="run a finite-difference gradient check first")
    tr.add_argument("--resume", action="store_true", help="continue from the checkpoint if it exists")
    rt = sub.add_parser("run-task", help="run a generation/extraction pipeline")
    rt.add_argument("task", choices=TASKS)
    common(rt)
    for sp in (rt,):
        sp.add_argument("--algorithm", choices=("canonical", "repaint", "adaptive"))
        sp.add_argument("--steps", type=int, help="number of sampling grid steps T")
        sp.add_argument("--resample-u", type=int, help="RePaint inner cycles U")
        sp.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale")
    bi = sub.add_parser("bench-inpaint", help="RePaint vs adaptive oracle benchmark")
    common(bi)
    return p


def _overrides(args) -> Dict:
    o = {}
    for flag, key in (("seed", "seed"), ("out", "out"), ("algorithm", "algorithm"),
                      ("resample_u", "resample_u"), ("cfg_scale", "cfg_scale")):
        value = getattr(args, flag, None)
        if value is not None:
            o[key] = value
    steps = getattr(args, "steps", None)
    if steps is not None:
        o["grid_steps" if args.command == "run-task" else "steps"] = steps
    if getattr(args, "grad_check", False):
        o["grad_check"] = True
    if getattr(args, "resume", False):
        o["resume"] = True
    return o


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command, _overrides(args))
        out = resolve_path(cfg["out"])
        start = time.perf_counter()
        if args.command == "gen-data":
            info = cmd_gen_data(cfg, out)
        elif args.command == "train":
            info = cmd_train(cfg, out)
        elif args.command == "run-task":
            info = cmd_run_task(cfg, out, args.task)
        else:
            info = cmd_bench_inpaint(cfg, out)
        manifest = {"command": args.command, "seed": cfg["seed"], "config_hash": config_hash(cfg),
                    "config": cfg, "version": __version__, **info}
        manifest.setdefault("timings", []).append({"stage": "total", "seconds": time.perf_counter() - start})
        _write_json(out / f"manifest-{args.command}{'-' + args.task if args.command == 'run-task' else ''}.json",
                    manifest)
    except (ConfigError, CLIError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
