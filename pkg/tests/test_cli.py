import json
import os

import numpy as np
import pytest

from exitwise.cli import main
from exitwise.pipeline import RunConfig


def base_config(**overrides):
    cfg = {
        "model": {
            "synthetic": {
                "num_layers": 4, "dim": 16, "num_patches": 8, "num_heads": 4,
                "embed_dim": 8,
                "noise": {"kind": "superlinear", "strength": 60.0},
            },
        },
        "dataset": {
            "synthetic": {
                "num_classes": 5, "num_samples": 80, "token_noise": 1.5,
            },
        },
        "exit_candidates": [2, 3],
        "head": {"lr": 2e-3, "epochs": 30, "batch_size": 64},
        "gate": {"lr": 0.5, "epochs": 300},
        "seed": 0,
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    with open(path, "w") as f:
        json.dump(cfg, f)
    return str(path)


def run(command, cfg_path, out, extra=()):
    return main(["--command", command, "--config", cfg_path,
                 "--out", str(out), *extra])


class TestGenSynthetic:
    def test_deterministic_bytes(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run("gen-synthetic", cfg, out1) == 0
        assert run("gen-synthetic", cfg, out2) == 0
        for name in ("model.tarc", "dataset.tarc"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_seed_changes_model(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run("gen-synthetic", cfg, out1) == 0
        assert run("gen-synthetic", cfg, out2, extra=("--seed", "7")) == 0
        assert (out1 / "model.tarc").read_bytes() != (out2 / "model.tarc").read_bytes()


class TestProfile:
    def test_zero_noise_profile_is_clean(self, tmp_path):
        cfg_d = base_config()
        cfg_d["model"]["synthetic"]["noise"] = {"kind": "zero"}
        cfg = write_config(tmp_path, cfg_d)
        out = tmp_path / "run"
        assert run("profile", cfg, out) == 0
        with open(out / "profile.json") as f:
            payload = json.load(f)
        for row in payload["layers"]:
            assert row["delta_quant"] == 0.0
            assert row["cosine"] == 1.0
            assert row["inr"] == "inf"
        assert (out / "profile.csv").exists()

    def test_noisy_profile_reports_positive_quant_delta(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "run"
        assert run("profile", cfg, out) == 0
        with open(out / "profile.json") as f:
            payload = json.load(f)
        assert any(row["delta_quant"] > 0 for row in payload["layers"])


class TestFullChain:
    def test_end_to_end_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "run"
        for command in ("gen-synthetic", "profile", "train-heads",
                        "train-gate", "sweep", "evaluate", "analyze"):
            assert run(command, cfg, out) == 0, command
        for name in ("model.tarc", "dataset.tarc", "profile.json",
                     "heads.tarc", "heads_manifest.json", "gate.json",
                     "sweep.csv", "sweep.json", "eval_records.json",
                     "analysis.json", "quadrant.csv"):
            assert (out / name).exists(), name
        with open(out / "analysis.json") as f:
            report = json.load(f)
        counts = report["quadrants"]["counts"]
        with open(out / "eval_records.json") as f:
            n_records = len(json.load(f)["records"])
        assert sum(counts.values()) == n_records
        assert report["config_hash"] == RunConfig.from_dict(
            base_config()).config_hash()

    def test_shared_tau_one_never_exits(self, tmp_path):
        cfg_d = base_config(shared_tau=1.0, use_optimized_thresholds=False)
        cfg = write_config(tmp_path, cfg_d)
        out = tmp_path / "run"
        for command in ("gen-synthetic", "train-heads", "train-gate", "evaluate"):
            assert run(command, cfg, out) == 0
        with open(out / "eval_records.json") as f:
            payload = json.load(f)
        assert payload["meta"]["flops_saving"] == 0.0
        layers = {r["exit_layer"] for r in payload["records"]}
        assert layers == {4}

    def test_embed_writes_archive(self, tmp_path):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "run"
        assert run("embed", cfg, out) == 0
        from exitwise.archive import read_archive
        emb = read_archive(out / "embeddings.tarc")["embeddings"]
        assert emb.shape == (80, 8)
        assert np.all(np.isfinite(emb))


class TestErrorPaths:
    def test_missing_heads_artifact(self, tmp_path, capsys):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "run"
        assert run("gen-synthetic", cfg, out) == 0
        assert run("train-gate", cfg, out) == 1
        assert "trained heads" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, base_config(bogus_key=1))
        assert run("profile", cfg, tmp_path / "run") == 1
        assert "bogus_key" in capsys.readouterr().err

    def test_missing_config_flag(self, capsys):
        assert main(["--command", "profile"]) == 2

    def test_validate_archive(self, tmp_path, capsys):
        cfg = write_config(tmp_path, base_config())
        out = tmp_path / "run"
        assert run("gen-synthetic", cfg, out) == 0
        rc = main(["--command", "validate-archive",
                   "--archive", str(out / "model.tarc")])
        assert rc == 0
        assert "config/dims" in capsys.readouterr().out
        assert main(["--command", "validate-archive"]) == 2

    def test_validate_archive_bad_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.tarc"
        bad.write_bytes(b"garbage")
        assert main(["--command", "validate-archive", "--archive", str(bad)]) == 1


class TestRunConfig:
    def test_zero_noise_switches_to_lossless(self):
        d = base_config()
        d["model"]["synthetic"]["noise"] = {"kind": "zero"}
        cfg = RunConfig.from_dict(d)
        assert cfg.quantization == "lossless"

    def test_explicit_quantization_wins(self):
        d = base_config(quantization="per_channel")
        d["model"]["synthetic"]["noise"] = {"kind": "zero"}
        cfg = RunConfig.from_dict(d)
        assert cfg.quantization == "per_channel"

    def test_hash_stable_and_seed_sensitive(self):
        d = base_config()
        assert RunConfig.from_dict(d).config_hash() == \
            RunConfig.from_dict(d).config_hash()
        assert RunConfig.from_dict(d).config_hash() != \
            RunConfig.from_dict(d, seed_override=9).config_hash()
