"""End-to-end command behavior: artifacts, determinism, exit codes."""

import json

import numpy as np
import pytest

from krigenet.cli import main


def run(args):
    return main(args)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    code = run(["synth", "--synth-nodes", "16", "--synth-steps", "400",
                "--seed", "3", "--scale", "40", "--offset", "50", "--out", str(out)])
    assert code == 0
    return out


TRAIN_FLAGS = [
    "--window", "6", "--epochs", "2", "--patience", "2", "--batch-size", "4",
    "--dim", "6", "--max-batches-per-epoch", "2",
]


class TestSynthCommand:
    def test_writes_three_files(self, synth_dir):
        for name in ("readings.csv", "edges.csv", "coords.csv"):
            assert (synth_dir / name).exists()

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--synth-nodes", "10", "--synth-steps", "50",
                        "--seed", "9", "--out", str(out)]) == 0
        assert (a / "readings.csv").read_bytes() == (b / "readings.csv").read_bytes()


class TestTrainCommand:
    def test_writes_three_artifacts(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        code = run(["train", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"),
                    "--alpha", "0.5", "--strategy", "increment", "--seed", "1",
                    *TRAIN_FLAGS, "--out", str(out)])
        assert code == 0
        for name in ("metrics.json", "history.jsonl", "model.ckpt"):
            assert (out / name).exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert np.isfinite(metrics["mae"])
        lines = (out / "history.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        record = json.loads(lines[0])
        assert set(record) == {"epoch", "train_loss", "val_mae", "lr"}

    def test_decrement_strategy_runs(self, synth_dir, tmp_path):
        out = tmp_path / "dec"
        code = run(["train", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"),
                    "--strategy", "decrement", "--seed", "1", *TRAIN_FLAGS,
                    "--out", str(out)])
        assert code == 0
        assert (out / "metrics.json").exists()

    def test_determinism_byte_identical(self, synth_dir, tmp_path):
        outs = [tmp_path / "r1", tmp_path / "r2"]
        for out in outs:
            code = run(["train", "--dataset", str(synth_dir / "readings.csv"),
                        "--topology", str(synth_dir / "edges.csv"),
                        "--seed", "2", *TRAIN_FLAGS, "--out", str(out)])
            assert code == 0
        assert (outs[0] / "metrics.json").read_bytes() == (outs[1] / "metrics.json").read_bytes()
        assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()

    def test_synth_shortcut_dataset(self, tmp_path):
        out = tmp_path / "shortcut"
        code = run(["train", "--dataset", "synth", "--synth-nodes", "12",
                    "--synth-steps", "300", "--alpha", "0.5", "--strategy",
                    "increment", *TRAIN_FLAGS, "--out", str(out)])
        assert code == 0


class TestEvaluateAndTransfer:
    def test_evaluate_reproduces_training_metrics(self, synth_dir, tmp_path):
        train_out = tmp_path / "train"
        code = run(["train", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"), "--seed", "1",
                    *TRAIN_FLAGS, "--out", str(train_out)])
        assert code == 0
        eval_out = tmp_path / "eval"
        code = run(["evaluate", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"), "--seed", "1",
                    "--window", "6",
                    "--checkpoint", str(train_out / "model.ckpt"), "--out", str(eval_out)])
        assert code == 0
        trained = json.loads((train_out / "metrics.json").read_text())
        evaluated = json.loads((eval_out / "metrics.json").read_text())
        assert trained == evaluated  # transfer with A == B reduces to evaluate

    def test_transfer_to_other_dataset(self, synth_dir, tmp_path):
        train_out = tmp_path / "train"
        run(["train", "--dataset", str(synth_dir / "readings.csv"),
             "--topology", str(synth_dir / "edges.csv"), "--seed", "1",
             *TRAIN_FLAGS, "--out", str(train_out)])
        other = tmp_path / "other"
        assert run(["synth", "--synth-nodes", "13", "--synth-steps", "300",
                    "--seed", "8", "--out", str(other)]) == 0
        out = tmp_path / "transfer"
        code = run(["transfer", "--dataset", str(other / "readings.csv"),
                    "--topology", str(other / "edges.csv"), "--seed", "1",
                    "--window", "6",
                    "--checkpoint", str(train_out / "model.ckpt"), "--out", str(out)])
        assert code == 0
        assert np.isfinite(json.loads((out / "metrics.json").read_text())["mae"])

    def test_missing_checkpoint_is_config_error(self, synth_dir, tmp_path):
        code = run(["evaluate", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"),
                    "--checkpoint", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "o")])
        assert code == 1


class TestBaselineCommand:
    @pytest.mark.parametrize("method", ["mean", "knn", "okriging"])
    def test_baseline_metrics(self, synth_dir, tmp_path, method):
        out = tmp_path / method
        code = run(["baseline", "--method", method,
                    "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "coords.csv"),
                    "--seed", "1", "--out", str(out)])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) >= {"mae", "mape", "mre", "rmse", "r2", "n_points"}
        assert np.isfinite(metrics["mae"])


class TestGraphGapCommand:
    def test_report_structure_and_ordering(self, synth_dir, tmp_path):
        out = tmp_path / "gap"
        code = run(["graph-gap", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"),
                    "--batches", "50", "--seed", "1", "--out", str(out)])
        assert code == 0
        payload = json.loads((out / "graph_gap.json").read_text())
        for key in ("increment", "decrement", "inference"):
            assert set(payload[key]) == {"avg", "median", "min", "max", "mean_degree", "n_graphs"}
        # the decrement training graph is a subgraph of the inference graph
        assert payload["decrement"]["max"] <= payload["inference_largest_degree"]
        assert payload["increment"]["avg"] > payload["decrement"]["avg"]

    def test_single_batch_collapses_stats(self, synth_dir, tmp_path):
        out = tmp_path / "gap1"
        code = run(["graph-gap", "--dataset", str(synth_dir / "readings.csv"),
                    "--topology", str(synth_dir / "edges.csv"),
                    "--batches", "1", "--seed", "1", "--out", str(out)])
        assert code == 0
        stats = json.loads((out / "graph_gap.json").read_text())["increment"]
        assert stats["avg"] == stats["median"] == stats["min"] == stats["max"]


class TestConfigAndErrors:
    def test_config_file_with_flag_override(self, synth_dir, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({
            "dataset": str(synth_dir / "readings.csv"),
            "topology": str(synth_dir / "edges.csv"),
            "train.epochs": 1,
            "train.window": 6,
            "train.batch_size": 4,
            "train.dim": 6,
            "train.patience": 1,
            "train.max_batches_per_epoch": 2,
            "seed": 4,
        }))
        out = tmp_path / "cfgrun"
        code = run(["train", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        lines = (out / "history.jsonl").read_text().strip().splitlines()
        assert len(lines) == 1  # epochs came from the config file

    def test_missing_dataset_is_config_error(self, tmp_path):
        assert run(["train", "--out", str(tmp_path / "x")]) == 1

    def test_malformed_readings_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n3,oops\n")
        assert run(["train", "--dataset", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_bad_flag_is_config_error(self):
        assert run(["train", "--no-such-flag"]) == 1
