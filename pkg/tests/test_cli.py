"""End-to-end CLI runs on tiny configs, plus config parsing."""

import csv
import json

import numpy as np
import pytest

from trackdiff.cli import main
from trackdiff.config import DEFAULTS, ConfigError, config_hash, parse_config, stream
from trackdiff.data import read_dataset
from trackdiff.tensorio import read_tensors

TINY_MODEL = {"hidden": 16, "num_songs": 12, "batch_size": 16}


def run(tmp_path, command, cfg, *args, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=1))
    return main([*command.split(), "--config", str(path), *args])


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("TRACKDIFF_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


@pytest.fixture
def trained(root):
    """Dataset plus a 30-step checkpoint; returns the shared config."""
    cfg = {**TINY_MODEL, "dataset": "ds", "checkpoint": "ckpt/model.bin", "steps": 30, "out": "train",
           "grid_steps": 6, "num_samples": 3}
    assert run(root, "gen-data", cfg) == 0
    assert run(root, "train", cfg) == 0
    return cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_only(self):
        cfg = parse_config(None, "bench-inpaint")
        assert cfg == DEFAULTS

    def test_missing_required_field(self):
        with pytest.raises(ConfigError, match="'dataset'"):
            parse_config("{}", "gen-data")
        with pytest.raises(ConfigError, match="'checkpoint'"):
            parse_config('{"dataset": "d"}', "train")

    def test_json_error_line(self):
        with pytest.raises(ConfigError, match="line 4, column 1"):
            parse_config('{\n "seed": 1,\n "out": \n}', "bench-inpaint")

    def test_unknown_field_line(self):
        with pytest.raises(ConfigError, match=r"unknown field 'colour' \(line 2\)"):
            parse_config('{"seed": 1,\n "colour": 3}', "bench-inpaint")

    @pytest.mark.parametrize("text, field", [('{"seed": "x"}', "seed"), ('{"lr": true}', "lr"),
                                             ('{"algorithm": "fast"}', "algorithm")])
    def test_bad_values(self, text, field):
        with pytest.raises(ConfigError, match=f"'{field}' \\(line 1\\)"):
            parse_config(text, "bench-inpaint")

    def test_int_promoted_for_float_fields(self):
        assert parse_config('{"lr": 1}', "bench-inpaint")["lr"] == 1.0

    def test_hash_ignores_out(self):
        a = parse_config('{"out": "a"}', "bench-inpaint")
        b = parse_config('{"out": "b"}', "bench-inpaint")
        c = parse_config('{"seed": 1}', "bench-inpaint")
        assert config_hash(a) == config_hash(b) != config_hash(c)

    def test_streams_are_independent(self):
        a = np.random.default_rng(stream(0, "train", 0)).random()
        assert a != np.random.default_rng(stream(0, "train", 1)).random()
        assert a != np.random.default_rng(stream(0, "task")).random()
        assert a == np.random.default_rng(stream(0, "train", 0)).random()


class TestGenData:
    def test_minimal_config(self, root):
        assert run(root, "gen-data", {"dataset": "ds"}) == 0
        songs, index = read_dataset(root / "ds")
        assert len(songs) == 10 and index["signal_length"] == 128
        manifest = json.loads((root / "run" / "manifest-gen-data.json").read_text())
        assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 16

    def test_missing_field_exits(self, root, capsys):
        assert run(root, "gen-data", {}) == 1
        assert "'dataset'" in capsys.readouterr().err

    def test_same_seed_same_bytes(self, root):
        run(root, "gen-data", {"dataset": "a"})
        first = {p.name: p.read_bytes() for p in (root / "a").iterdir()}
        run(root, "gen-data", {"dataset": "a"})
        assert {p.name: p.read_bytes() for p in (root / "a").iterdir()} == first
        run(root, "gen-data", {"dataset": "c"}, "--seed", "5")
        assert (root / "c" / "song_00000.bin").read_bytes() != first["song_00000.bin"]


class TestTrain:
    GAUSS = {"train_data": "gaussian", "checkpoint": "g/model.bin", "hidden": 32, "batch_size": 128, "lr": 0.02,
             "world_dim": 2}

    def test_loss_decreases(self, root):
        assert run(root, "train", {**self.GAUSS, "steps": 200, "out": "g"}) == 0
        losses = [float(r["loss"]) for r in read_csv(root / "g" / "loss.csv")]
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_resume_matches_uninterrupted(self, root):
        run(root, "train", {**self.GAUSS, "steps": 60, "checkpoint": "full/m.bin", "out": "full"})
        run(root, "train", {**self.GAUSS, "steps": 30, "checkpoint": "part/m.bin", "out": "part"})
        run(root, "train", {**self.GAUSS, "steps": 60, "checkpoint": "part/m.bin", "out": "part"}, "--resume")
        assert (root / "full" / "m.bin").read_bytes() == (root / "part" / "m.bin").read_bytes()
        assert (root / "full" / "loss.csv").read_text() == (root / "part" / "loss.csv").read_text()

    def test_grad_check_flag(self, root, capsys):
        assert run(root, "train", {**self.GAUSS, "steps": 1}, "--grad-check") == 0
        line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("grad_check"))
        assert float(line.split("=")[1]) < 1e-4

    def test_resume_refuses_other_model(self, root, capsys):
        run(root, "train", {**self.GAUSS, "steps": 2})
        assert run(root, "train", {**self.GAUSS, "steps": 4, "hidden": 8}, "--resume") == 1
        assert "model hash" in capsys.readouterr().err

    def test_dataset_training(self, trained, root):
        rows = read_csv(root / "train" / "loss.csv")
        assert [int(r["step"]) for r in rows] == list(range(30))
        meta = json.loads((root / "ckpt" / "model.bin.json").read_text())
        assert meta["step"] == 30 and "library_digest" in meta


class TestRunTask:
    def test_partial_two_prompts(self, trained, root):
        assert run(root, "run-task partial", {**trained, "out": "p"}) == 0
        t = {n: read_tensors(root / "p" / f"{n}.bin")["signal"] for n in ("observed", "source_1", "source_2", "mix")}
        assert t["mix"].shape == (3, 128)
        assert np.array_equal(t["mix"], t["observed"] + t["source_1"] + t["source_2"])
        manifest = json.loads((root / "p" / "manifest-run-task-partial.json").read_text())
        assert manifest["T"] == 6 and manifest["algorithm"] == "adaptive" and manifest["cfg_scale"] == 2.0

    def test_iterative_and_total(self, trained, root):
        assert run(root, "run-task iterative", {**trained, "out": "i"}) == 0
        s1, s2, mix = (read_tensors(root / "i" / f"{n}.bin")["signal"] for n in ("source_1", "source_2", "mix"))
        assert np.array_equal(mix, s1 + s2)
        assert run(root, "run-task total", {**trained, "out": "t"}) == 0
        assert read_tensors(root / "t" / "total.bin")["mix"].shape == (3, 128)

    def test_extract_metrics_csv(self, trained, root):
        assert run(root, "run-task extract", {**trained, "out": "e"}, "--algorithm", "repaint",
                   "--resample-u", "2", "--steps", "3") == 0
        rows = read_csv(root / "e" / "metrics.csv")
        assert list(rows[0]) == ["metric", "dataset", "config_hash", "value", "n"]
        assert [r["metric"] for r in rows] == [f"log_feature_l1[class_{k}]" for k in range(4)] + ["ranking_accuracy"]
        assert 0.0 <= float(rows[-1]["value"]) <= 1.0
        assert set(read_tensors(root / "e" / "extract.bin")) == {f"class_{k}" for k in range(4)}

    def test_refuses_mismatched_checkpoint(self, trained, root, capsys):
        assert run(root, "run-task total", {**trained, "hidden": 32, "out": "x"}) == 1
        assert "does not match" in capsys.readouterr().err

    def test_missing_checkpoint(self, root, capsys):
        run(root, "gen-data", {"dataset": "ds"})
        assert run(root, "run-task total", {"dataset": "ds", "checkpoint": "none.bin"}) == 1
        assert "none.bin" in capsys.readouterr().err

    def test_unknown_task_is_usage_error(self, root):
        with pytest.raises(SystemExit) as info:
            main(["run-task", "remix"])
        assert info.value.code == 2


class TestBenchInpaint:
    def test_small_sweep(self, root):
        cfg = {"bench_runs": 300, "bench_cells": [[10, 1], [5, 2], [4, 3]], "bench_adaptive_T": 10, "out": "b"}
        assert run(root, "bench-inpaint", cfg) == 0
        rows = read_csv(root / "b" / "bench_inpaint.csv")
        assert list(rows[0]) == ["algorithm", "T", "U", "moment_error", "denoiser_calls"]
        for r in rows:
            assert int(r["denoiser_calls"]) == int(r["T"]) * int(r["U"])
            assert float(r["moment_error"]) >= 0.0
        assert [r["algorithm"] for r in rows] == ["repaint"] * 3 + ["adaptive"]
