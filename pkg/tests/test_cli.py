"""Tests for the command line interface."""

import json

import pandas as pd
import pytest
from click.testing import CliRunner

from flow_monitor.cli import cli
from flow_monitor.events import read_log


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


class TestSimulate:
    def test_writes_log(self, runner, tmp_path):
        out = tmp_path / "clean.jsonl"
        result = invoke(runner, "simulate", "--n", 5, "--seed", 3, "--out", out)
        assert result.exit_code == 0
        log = read_log(out)
        assert len(log) == 5
        assert all(len(t) == 20 for t in log)

    def test_zero_traces_is_a_usage_error(self, runner, tmp_path):
        result = runner.invoke(cli, ["simulate", "--n", "0", "--out", str(tmp_path / "x.jsonl")])
        assert result.exit_code == 2

    def test_invalid_rho_exits_two(self, runner, tmp_path):
        result = runner.invoke(
            cli, ["simulate", "--n", "3", "--rho", "1.5", "--out", str(tmp_path / "x.jsonl")]
        )
        assert result.exit_code == 2
        assert "rho" in result.output

    def test_csv_output(self, runner, tmp_path):
        out = tmp_path / "clean.csv"
        assert invoke(runner, "simulate", "--n", 2, "--out", out).exit_code == 0
        assert out.read_text().startswith("trace_id,")


class TestPipeline:
    """Simulate, discover, inject, check, cluster, localize and evaluate through the CLI."""

    def test_offline_pipeline(self, runner, tmp_path):
        clean = tmp_path / "clean.jsonl"
        net = tmp_path / "net.pnml"
        base = tmp_path / "base.jsonl"
        faulty = tmp_path / "rtm.jsonl"
        matrix = tmp_path / "d.csv"
        model = tmp_path / "model.json"
        found = tmp_path / "found.csv"

        assert invoke(runner, "simulate", "--n", 40, "--out", clean).exit_code == 0
        result = invoke(runner, "discover", "--in", clean, "--out-pnml", net, "--out-json", tmp_path / "net.json")
        assert result.exit_code == 0
        assert json.loads((tmp_path / "net.json").read_text())["name"] == "dfg_net"

        result = invoke(runner, "soundness", "--pnml", net)
        assert result.exit_code == 0
        assert '"dead_transitions": []' in result.output

        assert invoke(runner, "simulate", "--n", 12, "--seed", 9, "--out", base).exit_code == 0
        result = invoke(runner, "inject", "--in", base, "--component", "RTM", "--seed", 1, "--out", faulty)
        assert result.exit_code == 0
        assert {t.ground_truth for t in read_log(faulty)} == {"RTM"}

        result = invoke(runner, "check", "--pnml", net, "--in", faulty, "--window", 5, "--out-csv", matrix)
        assert result.exit_code == 0
        frame = pd.read_csv(matrix)
        assert list(frame.columns[:2]) == ["trace_id", "ground_truth"]
        assert len(frame) == 12

        result = invoke(
            runner,
            "cluster",
            "--in-csv",
            matrix,
            "--algo",
            "kmeans",
            "--k",
            2,
            "--labeling",
            "majority",
            "--out-model",
            model,
            "--out-explanations",
            tmp_path / "explanations.json",
        )
        assert result.exit_code == 0
        assert set(json.loads(model.read_text())["labels"].values()) == {"RTM"}

        assert invoke(runner, "localize", "--model", model, "--in-csv", matrix, "--out", found).exit_code == 0
        localized = pd.read_csv(found)
        assert list(localized.columns) == ["trace_id", "label", "cluster", "distance", "ground_truth"]
        assert set(localized["label"]) == {"RTM"}

        metrics = tmp_path / "metrics.json"
        assert invoke(runner, "evaluate", "--pred", found, "--truth", found, "--out", metrics).exit_code == 0
        assert json.loads(metrics.read_text())["balanced_accuracy"] == 1.0

    def test_alpha_on_short_loop_exits_one(self, runner, tmp_path):
        log = tmp_path / "loop.jsonl"
        log.write_text(
            "".join(
                json.dumps({"trace_id": "t", "label": label, "component": "ARBC", "seq": i}) + "\n"
                for i, label in enumerate(["P0", "P1", "P1", "P2"])
            )
        )
        result = runner.invoke(
            cli, ["discover", "--in", str(log), "--algo", "alpha", "--out-pnml", str(tmp_path / "n.pnml")]
        )
        assert result.exit_code == 1
        assert "dfg_net" in result.output


class TestEvaluate:
    def test_perfect_predictions(self, runner, tmp_path):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        pred.write_text("trace_id,label\na,ARBC\nb,EVC\nc,RTM\n")
        truth.write_text("trace_id,ground_truth\nc,RTM\nb,EVC\na,ARBC\n")
        out = tmp_path / "metrics.json"
        assert invoke(runner, "evaluate", "--pred", pred, "--truth", truth, "--out", out).exit_code == 0
        metrics = json.loads(out.read_text())
        assert metrics["balanced_accuracy"] == 1.0
        assert metrics["v_measure"] == 1.0

    def test_missing_traces(self, runner, tmp_path):
        pred = tmp_path / "pred.csv"
        truth = tmp_path / "truth.csv"
        pred.write_text("trace_id,label\na,ARBC\nb,EVC\n")
        truth.write_text("trace_id,ground_truth\na,ARBC\n")
        result = runner.invoke(cli, ["evaluate", "--pred", str(pred), "--truth", str(truth)])
        assert result.exit_code == 2


class TestConfigOption:
    def test_config_file_values_apply(self, runner, tmp_path):
        """Test that rho from a config file reaches the simulator."""
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("scenario:\n  rho: 0.0\n")
        out = tmp_path / "noisy.jsonl"
        assert invoke(runner, "--config", cfg, "simulate", "--n", 1, "--out", out).exit_code == 0
        assert len(read_log(out)) == 1


class TestExperiment:
    def test_small_grid(self, runner, tmp_path):
        grid = tmp_path / "grid.yaml"
        grid.write_text(
            "seeds: [0]\nn_clean: 30\nn_anomalous: 8\nwindow_lengths: [10]\n"
            "algorithms: [kmeans]\ncluster_counts: [2]\n"
        )
        out = tmp_path / "report"
        assert invoke(runner, "experiment", "--config", grid, "--out", out).exit_code == 0
        assert (out / "table1.csv").exists()
        assert json.loads((out / "manifest.json").read_text())["failures"] == []

    def test_unknown_grid_key_exits_two(self, runner, tmp_path):
        grid = tmp_path / "grid.yaml"
        grid.write_text("clusters: [2]\n")
        result = runner.invoke(cli, ["experiment", "--config", str(grid), "--out", str(tmp_path / "r")])
        assert result.exit_code == 2
