import json

import numpy as np
import pytest

from suturekit.cli import build_parser, config_hash, main


def run_cli(args):
    return main(args)


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


class TestParsing:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["frobnicate"])

    def test_config_hash_stable_and_order_free(self):
        a = config_hash({"a": 1, "b": 2})
        b = config_hash({"b": 2, "a": 1})
        assert a == b
        assert len(a) == 12
        assert a != config_hash({"a": 1, "b": 3})


class TestExitCodes:
    def test_missing_config_file_is_usage_error(self, tmp_path):
        code = run_cli(
            ["control-sim", "--config", str(tmp_path / "nope.json"),
             "--out-dir", str(tmp_path)]
        )
        assert code == 2

    def test_invalid_json_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = run_cli(["control-sim", "--config", str(bad), "--out-dir", str(tmp_path)])
        assert code == 2

    def test_train_without_dataset_is_usage_error(self, tmp_path):
        code = run_cli(["calib", "train", "--out-dir", str(tmp_path)])
        assert code == 2

    def test_eval_without_model_is_usage_error(self, tmp_path):
        code = run_cli(["calib", "eval", "--out-dir", str(tmp_path)])
        assert code == 2

    def test_runtime_failure_is_exit_one(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"shape": {"radius_mm": -1.0}})
        code = run_cli(["pose-bench", "--config", cfg, "--out-dir", str(tmp_path),
                        "--scenes", "1"])
        assert code == 1


class TestControlSim:
    def test_outputs_and_header(self, tmp_path):
        code = run_cli(["control-sim", "--out-dir", str(tmp_path)])
        assert code == 0
        trace = tmp_path / "control_trace.csv"
        summary = tmp_path / "control_summary.json"
        assert trace.exists() and summary.exists()
        first = trace.read_text().splitlines()[0]
        assert first.startswith("# config_hash=") and "units=deg_mm" in first
        payload = json.loads(summary.read_text())
        assert "config_hash" in payload
        reduction = np.array(payload["reduction_percent"])
        assert np.all(reduction >= 98.0)

    def test_byte_identical_across_runs(self, tmp_path):
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            assert run_cli(["control-sim", "--out-dir", str(d)]) == 0
        for name in ("control_trace.csv", "control_summary.json"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("calib")
    cfg = write_config(
        d / "cfg.json",
        {"count": 300, "epochs": 3, "hidden_sizes": [32, 16], "test_count": 100},
    )
    for args in (["calib", "gen"], ["calib", "train"], ["calib", "eval"]):
        assert run_cli(args + ["--config", cfg, "--out-dir", str(d)]) == 0
    return d


class TestCalibFlow:
    def test_artifacts_exist(self, workdir):
        for name in (
            "calib_dataset.csv", "calib_model.json", "calib_loss_curve.csv",
            "calib_eval.csv",
        ):
            assert (workdir / name).exists()

    def test_dataset_row_count(self, workdir):
        lines = (workdir / "calib_dataset.csv").read_text().splitlines()
        assert len(lines) == 302  # header comment + column row + 300 samples

    def test_eval_table_shape(self, workdir):
        lines = (workdir / "calib_eval.csv").read_text().splitlines()
        assert len(lines) == 8  # comment + columns + 6 joints
        assert lines[2].startswith("q1,deg,")
        assert lines[4].startswith("q3,mm,")

    def test_seed_override_changes_dataset(self, workdir, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", {"count": 50})
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli(["calib", "gen", "--config", cfg, "--out-dir", str(a)]) == 0
        assert run_cli(["calib", "gen", "--config", cfg, "--seed", "5",
                        "--out-dir", str(b)]) == 0
        assert (a / "calib_dataset.csv").read_text() != (b / "calib_dataset.csv").read_text()


class TestPoseBench:
    def test_small_run_outputs(self, tmp_path):
        code = run_cli(["pose-bench", "--scenes", "1", "--out-dir", str(tmp_path)])
        assert code == 0
        rows = (tmp_path / "pose_bench.csv").read_text().splitlines()
        assert rows[1].split(",")[0] == "scene_id"
        assert len(rows) == 3
        summary = json.loads((tmp_path / "pose_bench_summary.json").read_text())
        agg = summary["by_occlusion"]["0.00"]
        assert agg["scenes"] == 1
        assert agg["pos_err_mm_mean"] < 1.0
