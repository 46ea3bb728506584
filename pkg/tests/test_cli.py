import json

import numpy as np
import pytest
from click.testing import CliRunner

import momentprop as mp
from momentprop.cli import cli
from momentprop.data import gen_tabular_regression, write_regression_csv


@pytest.fixture
def runner():
    return CliRunner()


def toy_train_config(tmp_path, epochs=3, lr=1e-3, n=64, optimizer="adam"):
    cfg = {
        "name": "toy-tiny",
        "dataset": {"kind": "toy", "n": n, "seed": 1},
        "model": {"kind": "mlp", "hidden": [8], "dropout_rate": 0.2, "tau": 25.0},
        "train": {"epochs": epochs, "batch_size": 16, "loss": "mse",
                  "learning_rate": lr, "optimizer": optimizer, "seed": 3},
        "model_out": "model.mpmdl",
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestTrainCommand:
    def test_trains_and_saves(self, runner, tmp_path):
        cfg = toy_train_config(tmp_path)
        out = tmp_path / "run"
        result = runner.invoke(cli, ["--out", str(out), "train", str(cfg)])
        assert result.exit_code == 0, result.output
        model = mp.load_model(out / "model.mpmdl")
        assert model.task == "regression"
        report = json.loads((out / "train_report.json").read_text())
        assert len(report["report"]["val_loss"]) == 3

    def test_fixed_seed_rerun_identical_model_file(self, runner, tmp_path):
        cfg = toy_train_config(tmp_path)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert runner.invoke(cli, ["--out", str(out1), "train", str(cfg)]).exit_code == 0
        assert runner.invoke(cli, ["--out", str(out2), "train", str(cfg)]).exit_code == 0
        assert (out1 / "model.mpmdl").read_bytes() == (out2 / "model.mpmdl").read_bytes()

    def test_missing_config_is_usage_error(self, runner):
        result = runner.invoke(cli, ["train"])
        assert result.exit_code == 2

    def test_nonexistent_config_is_data_error(self, runner, tmp_path):
        result = runner.invoke(cli, ["train", str(tmp_path / "absent.json")])
        assert result.exit_code == 3

    def test_data_dir_resolves_relative_paths(self, runner, tmp_path):
        data_dir = tmp_path / "datasets"
        data_dir.mkdir()
        x, y = gen_tabular_regression(60, n_features=3, seed=0)
        write_regression_csv(data_dir / "d.csv", x, y)
        cfg = {
            "dataset": {"kind": "csv", "path": "d.csv", "target_column": "y"},
            "model": {"kind": "mlp", "hidden": [4]},
            "train": {"epochs": 1, "loss": "mse"},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        result = runner.invoke(cli, ["--data-dir", str(data_dir),
                                     "--out", str(tmp_path / "o"), "train", str(path)])
        assert result.exit_code == 0, result.output

    def test_missing_csv_is_data_error(self, runner, tmp_path):
        cfg = {
            "dataset": {"kind": "csv", "path": str(tmp_path / "nope.csv"), "target_column": "y"},
            "model": {"kind": "mlp"},
            "train": {"epochs": 1, "loss": "mse"},
        }
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        result = runner.invoke(cli, ["--out", str(tmp_path / "o"), "train", str(path)])
        assert result.exit_code == 3

    def test_divergence_is_numeric_failure(self, runner, tmp_path):
        cfg = toy_train_config(tmp_path, epochs=30, lr=1e9, optimizer="sgd")
        result = runner.invoke(cli, ["--out", str(tmp_path / "o"), "train", str(cfg)])
        assert result.exit_code == 4


@pytest.fixture
def trained_model_path(tmp_path_factory):
    base = tmp_path_factory.mktemp("model")
    runner = CliRunner()
    cfg = toy_train_config(base, epochs=4)
    out = base / "run"
    assert runner.invoke(cli, ["--out", str(out), "train", str(cfg)]).exit_code == 0
    return out / "model.mpmdl"


class TestCompareCommand:
    def test_compare_with_npy(self, runner, trained_model_path, tmp_path):
        xs = np.random.default_rng(0).uniform(-1, 1, (12, 1))
        npy = tmp_path / "x.npy"
        np.save(npy, xs)
        out = tmp_path / "cmp"
        result = runner.invoke(cli, [
            "--out", str(out), "compare", str(trained_model_path),
            "--input", str(npy), "--t", "500",
        ])
        assert result.exit_code == 0, result.output
        lines = (out / "per_example.csv").read_text().splitlines()
        assert lines[0].startswith("example,e_mp,v_mp,mean_mc")
        assert len(lines) == 13

    def test_requires_some_input(self, runner, trained_model_path):
        result = runner.invoke(cli, ["compare", str(trained_model_path)])
        assert result.exit_code == 2


class TestPredictCommand:
    def test_predict_modes(self, runner, trained_model_path, tmp_path):
        xs = np.zeros((3, 1))
        npy = tmp_path / "x.npy"
        np.save(npy, xs)
        for mode in ("det", "mp", "mc"):
            out = tmp_path / f"pred-{mode}"
            result = runner.invoke(cli, [
                "--out", str(out), "predict", str(trained_model_path),
                "--input", str(npy), "--mode", mode, "--t", "16",
            ])
            assert result.exit_code == 0, result.output
            rows = (out / "predictions.csv").read_text().splitlines()
            assert len(rows) == 4
            assert rows[0] == "example,mean,variance,total_variance"

    def test_corrupt_model_is_data_error(self, runner, tmp_path):
        bad = tmp_path / "bad.mpmdl"
        bad.write_bytes(b"garbage")
        xs = tmp_path / "x.npy"
        np.save(xs, np.zeros((1, 1)))
        result = runner.invoke(cli, ["predict", str(bad), "--input", str(xs)])
        assert result.exit_code == 3


class TestExperimentCommands:
    def test_uci_on_handmade_csv(self, runner, tmp_path):
        x, y = gen_tabular_regression(50, n_features=3, seed=0)
        csv_path = tmp_path / "hand.csv"
        write_regression_csv(csv_path, x, y)
        over = {"uci": {"epochs": 5, "t": 50,
                        "datasets": [{"name": "hand", "path": str(csv_path),
                                      "target_column": "y"}]}}
        cfg = tmp_path / "over.json"
        cfg.write_text(json.dumps(over))
        out = tmp_path / "uci"
        result = runner.invoke(cli, ["--out", str(out), "--config", str(cfg),
                                     "experiment", "uci"])
        assert result.exit_code == 0, result.output
        header = (out / "benchmark.csv").read_text().splitlines()[0].split(",")
        for col in ("dataset", "n", "q", "rmse_mc", "nll_mc", "rt_mc_s",
                    "rmse_mp", "nll_mp", "rt_mp_s"):
            assert col in header

    def test_uci_without_datasets_is_usage_error(self, runner):
        assert runner.invoke(cli, ["experiment", "uci"]).exit_code == 2

    def test_toy_small(self, runner, tmp_path):
        over = {"toy": {"epochs": 3, "t": 100, "n": 64, "hidden": [8], "batch_size": 32}}
        cfg = tmp_path / "over.json"
        cfg.write_text(json.dumps(over))
        out = tmp_path / "toy"
        result = runner.invoke(cli, ["--out", str(out), "--config", str(cfg),
                                     "experiment", "toy"])
        assert result.exit_code == 0, result.output
        assert (out / "curves.csv").exists()

    def test_ood_small_and_seed_reproducible(self, runner, tmp_path):
        over = {"ood": {"n_per_class": 20, "epochs": 2, "conv_channels": [4],
                        "dense_units": [8], "t": 3}}
        cfg = tmp_path / "over.json"
        cfg.write_text(json.dumps(over))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(cli, [
                "--seed", "5", "--out", str(out), "--config", str(cfg),
                "experiment", "ood", "--ensemble", "1",
            ])
            assert result.exit_code == 0, result.output
            outs.append((out / "ood_metrics.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_auc_vs_t_row_count(self, runner, tmp_path):
        over = {"auc_vs_t": {"n_per_class": 20, "epochs": 2, "conv_channels": [4],
                             "dense_units": [8]}}
        cfg = tmp_path / "over.json"
        cfg.write_text(json.dumps(over))
        out = tmp_path / "avt"
        result = runner.invoke(cli, [
            "--out", str(out), "--config", str(cfg),
            "experiment", "auc-vs-t", "--t-list", "1,2", "--repeats", "3",
        ])
        assert result.exit_code == 0, result.output
        lines = (out / "auc_vs_t.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 3

    def test_filter_small(self, runner, tmp_path):
        over = {"filter": {"n_per_class": 20, "epochs": 2, "conv_channels": [4],
                           "dense_units": [8], "t": 3}}
        cfg = tmp_path / "over.json"
        cfg.write_text(json.dumps(over))
        out = tmp_path / "filt"
        result = runner.invoke(cli, ["--out", str(out), "--config", str(cfg),
                                     "experiment", "filter", "--ensemble", "2"])
        assert result.exit_code == 0, result.output
        assert (out / "filter.csv").exists()


class TestBenchmarkCommand:
    def test_benchmark_runs(self, runner, trained_model_path, tmp_path):
        out = tmp_path / "bench"
        result = runner.invoke(cli, [
            "--out", str(out), "benchmark", "--model", str(trained_model_path),
            "--batch", "16", "--t-list", "2,5", "--repeats", "3",
        ])
        assert result.exit_code == 0, result.output
        summary = json.loads((out / "summary.json").read_text())
        assert summary["experiment"] == "benchmark"
        assert (out / "ratios.csv").exists()
