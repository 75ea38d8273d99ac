import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from noisegauge.cli import main
from noisegauge.config import config_hash, dump_config, load_config
from noisegauge.io import load_checkpoint, load_loss_curve, sha256_file


SMALL = [
    "--set", "data.n_samples=256", "--set", "data.n_classes=2",
    "--set", "schedule.timesteps=50",
    "--set", "model.denoiser_hidden=[16,16]", "--set", "model.rater_hidden=[8,8]",
    "--set", "model.t_emb_dim=4", "--set", "model.c_emb_dim=4",
    "--set", "training.pretrain_steps=40", "--set", "training.select_steps=30",
    "--set", "training.eval_every=20",
    "--set", "meta.outer_steps=3", "--set", "meta.inner_steps=2",
    "--set", "meta.group_size=2", "--set", "meta.inner_batch_size=4",
    "--set", "meta.val_batch_size=8",
    "--set", "evaluation.n_samples=64", "--set", "evaluation.n_projections=16",
    "--set", "sampling.ddim_steps=10",
    "--set", "analysis.n_images=6", "--set", "analysis.n_noise=4",
    "--set", "analysis.n_timesteps=3", "--set", "analysis.rater_train_steps=2",
]


def run(out, *args):
    return main([*args, "--out", str(out), *SMALL])


class TestConfig:
    def test_round_trip_is_fixed_point(self, tmp_path):
        cfg = load_config(overrides=["training.lr=0.002"])
        path = tmp_path / "cfg.yaml"
        path.write_text(dump_config(cfg))
        reparsed = load_config(str(path))
        assert reparsed == cfg
        assert config_hash(reparsed) == config_hash(cfg)

    def test_hash_stable_under_key_reordering(self):
        a = load_config()
        b = {k: a[k] for k in reversed(list(a))}
        assert config_hash(a) == config_hash(b)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("nonsense: {key: 1}\n")
        from noisegauge.errors import ConfigError
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestPipelineCommands:
    def test_full_three_stage_flow(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain") == 0
        assert (out / "pretrain" / "ckpt_final.blob").exists()
        assert (out / "pretrain" / "losses.csv").exists()
        manifest = json.loads((out / "pretrain" / "manifest.json").read_text())
        for path in manifest["outputs"].values():
            assert Path(path).exists()

        assert run(out, "train-rater") == 0
        assert (out / "rater" / "rater_final.blob").exists()

        assert run(out, "train-select") == 0
        ckpt = out / "select" / "ckpt_final.blob"
        assert ckpt.exists()
        _, _, header = load_checkpoint(ckpt)
        assert header["step"] == 70  # 40 pretrain + 30 select

        assert run(out, "baseline", "vanilla") == 0
        assert run(out, "baseline", "naive-max") == 0

        assert run(out, "eval") == 0
        metric = (out / "eval" / "metric.csv").read_text().splitlines()
        assert metric[0] == "run,step,swd"
        swd = float(metric[1].split(",")[2])
        assert np.isfinite(swd)
        assert (out / "eval" / "metric.png").exists()

        assert run(out, "analyze", "rater-stats") == 0
        stats = out / "analysis" / "stats.csv"
        assert stats.exists()
        assert len(stats.read_text().splitlines()) == 1 + 6 * 3
        for name in ("rho_by_stage.png", "std_by_t.png"):
            assert (out / "analysis" / name).exists()

        assert run(out, "analyze", "stage-sweep") == 0
        assert run(out, "analyze", "match-checkpoint",
                   "--set", "analysis.match_target=10.0",
                   "--set", "analysis.match_smooth_window=1",
                   "--set", "analysis.match_stability_window=5") == 0
        match = json.loads((out / "analysis" / "match.json").read_text())
        assert match["matched_step"] == 1

    def test_eval_on_fresh_init_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain", "--set", "training.pretrain_steps=0") == 0
        assert run(out, "eval") == 0
        rows = (out / "eval" / "metric.csv").read_text().splitlines()
        assert len(rows) == 2
        assert np.isfinite(float(rows[1].split(",")[2]))

    def test_selection_with_singleton_pool_matches_vanilla_bitwise(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain") == 0
        assert run(out, "train-rater") == 0
        assert run(out, "train-select", "--set", "selection.pool_size=1") == 0
        assert run(out, "baseline", "vanilla") == 0
        a = load_checkpoint(out / "select" / "ckpt_final.blob")[1]
        b = load_checkpoint(out / "baseline-vanilla" / "ckpt_final.blob")[1]
        assert np.array_equal(a.values, b.values)
        sa, la = load_loss_curve(out / "select" / "losses.csv")
        sb, lb = load_loss_curve(out / "baseline-vanilla" / "losses.csv")
        assert np.array_equal(la, lb)

    def test_identical_invocations_produce_identical_artifacts(self, tmp_path):
        h = {}
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert run(out, "pretrain") == 0
            h[tag] = (sha256_file(out / "pretrain" / "ckpt_final.blob"),
                      sha256_file(out / "pretrain" / "losses.csv"),
                      sha256_file(out / "dataset.blob"))
        assert h["a"] == h["b"]

    def test_seed_offset_changes_artifacts(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run(out_a, "pretrain") == 0
        assert run(out_b, "pretrain", "--seed-offset", "13") == 0
        assert (sha256_file(out_a / "pretrain" / "ckpt_final.blob")
                != sha256_file(out_b / "pretrain" / "ckpt_final.blob"))

    def test_env_var_overrides_out(self, tmp_path, monkeypatch):
        env_dir = tmp_path / "env_out"
        monkeypatch.setenv("NOISEGAUGE_OUT", str(env_dir))
        assert run(tmp_path / "ignored", "pretrain") == 0
        assert (env_dir / "pretrain" / "ckpt_final.blob").exists()
        assert not (tmp_path / "ignored").exists()


class TestExitCodes:
    def test_invalid_config_exits_2(self, tmp_path, capsys):
        assert run(tmp_path, "pretrain", "--set", "bogus.key=1") == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_artifact_exits_3(self, tmp_path, capsys):
        assert run(tmp_path, "train-rater") == 3
        assert "missing artifact" in capsys.readouterr().err

    def test_missing_rater_exits_3(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain") == 0
        assert run(out, "train-select") == 3

    def test_match_without_target_exits_2(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain") == 0
        assert run(out, "analyze", "match-checkpoint") == 2

    def test_numerical_abort_exits_4(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain") == 0
        # rewrite the checkpoint with non-finite parameters, then resume
        from noisegauge.io import save_checkpoint
        model, params, header = load_checkpoint(out / "pretrain" / "ckpt_final.blob")
        from noisegauge.models import ParamVector
        broken = ParamVector(np.full(params.size, np.nan), params.layout)
        save_checkpoint(out / "pretrain" / "ckpt_final.blob", "denoiser", model.arch,
                        broken, header["step"], header["seed"])
        assert run(out, "baseline", "vanilla") == 4


class TestManifest:
    def test_manifest_lists_real_hashes_and_inputs(self, tmp_path):
        out = tmp_path / "run"
        assert run(out, "pretrain") == 0
        assert run(out, "train-rater") == 0
        manifest = json.loads((out / "rater" / "manifest.json").read_text())
        assert manifest["command"] == "train-rater"
        assert manifest["inputs"]["denoiser_checkpoint"].endswith("ckpt_final.blob")
        assert manifest["inputs"]["denoiser_step"] == 40
        for name, path in manifest["outputs"].items():
            assert Path(path).exists()
            assert manifest["output_hashes"][name] == sha256_file(path)
        assert manifest["config_hash"] == config_hash(manifest["config"])
