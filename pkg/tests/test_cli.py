"""Command-level behavior: determinism, exit codes, file contracts."""

import json
import os

import numpy as np
import pytest

from auroracast.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def _dir_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            out[name] = fh.read()
    return out


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.cfg"
    path.write_text(
        "\n".join(
            [
                "# small fast settings for command tests",
                "world.n_sats = 1",
                "world.obs_cadence_s = 120",
                "arch.hidden = 8,4",
                "train.max_epochs = 2",
                "train.batch_size = 1024",
                "train.seed = 5",
            ]
        )
        + "\n"
    )
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--config", config_file, "--out-dir", out, "--days", 1.0, "--seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def features_file(tmp_path_factory, synth_dir, config_file):
    out = tmp_path_factory.mktemp("feat") / "table.aft"
    assert (
        run(
            "features",
            "--drivers",
            synth_dir / "drivers.csv",
            "--obs",
            synth_dir / "observations.csv",
            "--config",
            config_file,
            "--out",
            out,
        )
        == 0
    )
    return out


class TestSynth:
    def test_deterministic_bytes(self, tmp_path, config_file):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("synth", "--config", config_file, "--out-dir", a, "--days", 0.2, "--seed", 11) == 0
        assert run("synth", "--config", config_file, "--out-dir", b, "--days", 0.2, "--seed", 11) == 0
        assert _dir_bytes(a) == _dir_bytes(b)

    def test_zero_days_config_error(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path / "x", "--days", 0) == 2

    def test_row_count_arithmetic(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("world.n_sats = 2\nworld.obs_cadence_s = 60\n")
        out = tmp_path / "synth30"
        assert run("synth", "--config", cfg, "--out-dir", out, "--days", 30, "--seed", 1) == 0
        with open(out / "observations.csv") as fh:
            n_rows = sum(1 for _ in fh) - 1
        assert n_rows == 2 * 43200 + 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("world.unknown_thing = 1\n")
        assert run("synth", "--config", cfg, "--out-dir", tmp_path / "x", "--days", 1) == 2

    def test_manifest_written(self, synth_dir):
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3
        assert set(manifest["outputs"]) == {"drivers.csv", "observations.csv"}


class TestFeatures:
    def test_rerun_identical(self, tmp_path, synth_dir, config_file):
        out1 = tmp_path / "t1.aft"
        out2 = tmp_path / "t2.aft"
        for out in (out1, out2):
            assert (
                run(
                    "features",
                    "--drivers",
                    synth_dir / "drivers.csv",
                    "--obs",
                    synth_dir / "observations.csv",
                    "--config",
                    config_file,
                    "--out",
                    out,
                )
                == 0
            )
        assert out1.read_bytes() == out2.read_bytes()

    def test_missing_column_is_data_error(self, tmp_path, synth_dir):
        broken = tmp_path / "broken.csv"
        lines = (synth_dir / "drivers.csv").read_text().splitlines()
        header = lines[0].split(",")
        drop = header.index("PC")
        rows = [",".join(v for i, v in enumerate(l.split(",")) if i != drop) for l in lines]
        broken.write_text("\n".join(rows) + "\n")
        code = run(
            "features",
            "--drivers",
            broken,
            "--obs",
            synth_dir / "observations.csv",
            "--out",
            tmp_path / "t.aft",
        )
        assert code == 3

    def test_cleaning_report_counts(self, features_file, synth_dir):
        report = (str(features_file) + ".cleaning.csv")
        with open(report) as fh:
            header = fh.readline().strip().split(",")
            values = fh.readline().strip().split(",")
        row = dict(zip(header, values))
        with open(synth_dir / "observations.csv") as fh:
            n_obs = sum(1 for _ in fh) - 1
        assert int(row["n_in"]) == n_obs
        assert int(row["n_dropped_outlier"]) >= 0


class TestTrain:
    def test_tail_with_baseline_runs(self, tmp_path, features_file, config_file):
        cfg = tmp_path / "t.cfg"
        cfg.write_text(config_file.read_text() + "loss = tail\n")
        out = tmp_path / "run"
        assert run("train", "--features", features_file, "--config", cfg, "--out-dir", out) == 0
        assert (out / "checkpoint.aur").exists()
        assert (out / "history.csv").exists()
        assert (out / "manifest.json").exists()
        header = (out / "history.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,val_loss"

    def test_sparse_masked_with_baseline_is_config_error(self, tmp_path, features_file, config_file):
        cfg = tmp_path / "t.cfg"
        cfg.write_text(config_file.read_text() + "loss = sparse_masked\n")
        assert (
            run("train", "--features", features_file, "--config", cfg, "--out-dir", tmp_path / "x")
            == 2
        )

    def test_same_seed_identical_history(self, tmp_path, features_file, config_file):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert (
                run("train", "--features", features_file, "--config", config_file, "--out-dir", out)
                == 0
            )
            outs.append(out)
        assert (outs[0] / "history.csv").read_bytes() == (outs[1] / "history.csv").read_bytes()
        assert (outs[0] / "checkpoint.aur").read_bytes() == (outs[1] / "checkpoint.aur").read_bytes()

    def test_conv_from_sparse_dir(self, tmp_path, synth_dir, config_file):
        cfg = tmp_path / "conv.cfg"
        cfg.write_text(
            "arch = conv\narch.grid = 32\narch.hidden = 16,8\n"
            "loss = sparse_masked\ntrain.max_epochs = 2\ntrain.seed = 5\n"
        )
        out = tmp_path / "convrun"
        assert run("train", "--sparse", synth_dir, "--config", cfg, "--out-dir", out) == 0
        assert (out / "checkpoint.aur").exists()


@pytest.fixture(scope="module")
def trained(tmp_path_factory, features_file, config_file):
    out = tmp_path_factory.mktemp("trained")
    assert run("train", "--features", features_file, "--config", config_file, "--out-dir", out) == 0
    return out / "checkpoint.aur"


class TestEvalAndMap:
    def test_eval_self_baseline_zero_reduction(self, tmp_path, trained, features_file):
        out = tmp_path / "eval"
        assert (
            run(
                "eval",
                "--checkpoint",
                trained,
                "--features",
                features_file,
                "--baseline-checkpoint",
                trained,
                "--out-dir",
                out,
            )
            == 0
        )
        lines = (out / "tail_reduction.csv").read_text().splitlines()
        assert lines[0] == "percentile,threshold_log10,n,baseline_mae_log10,candidate_mae_log10,reduction_pct"
        for line in lines[1:]:
            assert float(line.split(",")[-1]) == 0.0

    def test_eval_headers(self, tmp_path, trained, features_file):
        out = tmp_path / "eval2"
        assert run("eval", "--checkpoint", trained, "--features", features_file, "--out-dir", out) == 0
        assert (out / "binned_errors.csv").read_text().splitlines()[0] == (
            "bin_lo,bin_hi,count,mae_log10,bias_log10,mae_linear_factor"
        )
        assert (out / "histograms.csv").read_text().splitlines()[0] == (
            "bin_lo,bin_hi,true_count,pred_count,true_frac,pred_frac"
        )
        assert (out / "summary.txt").exists()
        assert (out / "manifest.json").exists()

    def test_eval_missing_checkpoint(self, tmp_path, features_file):
        assert (
            run(
                "eval",
                "--checkpoint",
                tmp_path / "nope.aur",
                "--features",
                features_file,
                "--out-dir",
                tmp_path / "x",
            )
            == 3
        )

    def test_map_deterministic(self, tmp_path, trained, synth_dir):
        a = tmp_path / "ma"
        b = tmp_path / "mb"
        for out in (a, b):
            assert (
                run(
                    "map",
                    "--checkpoint",
                    trained,
                    "--drivers",
                    synth_dir / "drivers.csv",
                    "--at",
                    43200,
                    "--out",
                    out,
                )
                == 0
            )
        assert (tmp_path / "ma.csv").read_bytes() == (tmp_path / "mb.csv").read_bytes()
        assert (tmp_path / "ma.pgm").read_bytes() == (tmp_path / "mb.pgm").read_bytes()

    def test_map_out_of_range(self, tmp_path, trained, synth_dir):
        assert (
            run(
                "map",
                "--checkpoint",
                trained,
                "--drivers",
                synth_dir / "drivers.csv",
                "--at",
                9e9,
                "--out",
                tmp_path / "m",
            )
            == 3
        )

    def test_map_conv_model(self, tmp_path, synth_dir):
        cfg = tmp_path / "conv.cfg"
        cfg.write_text(
            "arch = conv\narch.grid = 32\narch.hidden = 16,8\n"
            "loss = sparse_masked\ntrain.max_epochs = 1\ntrain.seed = 2\n"
        )
        out = tmp_path / "convrun"
        assert run("train", "--sparse", synth_dir, "--config", cfg, "--out-dir", out) == 0
        assert (
            run(
                "map",
                "--checkpoint",
                out / "checkpoint.aur",
                "--drivers",
                synth_dir / "drivers.csv",
                "--at",
                43200,
                "--out",
                tmp_path / "cm",
            )
            == 0
        )
        grid = [l.split(",") for l in (tmp_path / "cm.csv").read_text().splitlines()]
        assert len(grid) == 32 and len(grid[0]) == 32
