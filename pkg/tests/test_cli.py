"""End-to-end CLI behavior over real files."""

import json

import pytest

from bsmsentinel.cli import main
from bsmsentinel.detectors import DetectorConfig
from bsmsentinel.evaluate import read_decisions_csv, run_pipeline
from bsmsentinel.simulate import (
    KIND_DOS,
    LabeledTrace,
    read_labels,
)
from bsmsentinel.trace import read_trace

SCENARIO_KV = """
# short scenario with one DoS attacker
duration = 30
seed = 11
attack.1.kind = DOS
attack.1.target_vehicle = {target}
attack.1.onset = 15
attack.1.duration = 5
attack.1.rate = 200
"""

NO_ATTACK_KV = "duration = 20\nseed = 11\n"


def pick_target(tmp_path):
    """Simulate once without attacks to find a vehicle covering [15, 20)."""
    from bsmsentinel.simulate import ScenarioConfig, generate_baseline, vehicles_covering

    trace = generate_baseline(ScenarioConfig(duration=30.0, seed=11))
    return min(vehicles_covering(trace, 15.0, 20.0))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    target = pick_target(out)
    cfg = out / "scenario.kv"
    cfg.write_text(SCENARIO_KV.format(target=target))
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    return out


class TestSimulate:
    def test_outputs_exist_with_manifest(self, sim_dir):
        assert (sim_dir / "trace.csv").exists()
        assert (sim_dir / "labels.csv").exists()
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["subcommand"] == "simulate"
        assert str(sim_dir / "trace.csv") in manifest["outputs"]

    def test_labels_contain_only_dos(self, sim_dir):
        kinds = {k for _, _, k in read_labels(sim_dir / "labels.csv") if k}
        assert kinds == {KIND_DOS}

    def test_no_attacks_all_normal(self, tmp_path):
        cfg = tmp_path / "scenario.kv"
        cfg.write_text(NO_ATTACK_KV)
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert all(k is None for _, _, k in read_labels(tmp_path / "labels.csv"))

    def test_fixed_seed_reproduces_bytes(self, sim_dir, tmp_path):
        target = pick_target(tmp_path)
        cfg = tmp_path / "scenario.kv"
        cfg.write_text(SCENARIO_KV.format(target=target))
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "trace.csv").read_bytes() == (sim_dir / "trace.csv").read_bytes()
        assert (tmp_path / "labels.csv").read_bytes() == (sim_dir / "labels.csv").read_bytes()

    def test_seed_flag_changes_output(self, sim_dir, tmp_path):
        target = pick_target(tmp_path)
        cfg = tmp_path / "scenario.kv"
        cfg.write_text(NO_ATTACK_KV)
        assert main(["simulate", "--config", str(cfg), "--seed", "99",
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "trace.csv").read_bytes() != (sim_dir / "trace.csv").read_bytes()

    def test_unknown_scenario_key_fails(self, tmp_path, capsys):
        cfg = tmp_path / "scenario.kv"
        cfg.write_text("durationn = 20\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        assert "durationn" in capsys.readouterr().err


class TestDetect:
    def test_decisions_written(self, sim_dir, tmp_path):
        assert main(["detect", "--trace", str(sim_dir / "trace.csv"),
                     "--out", str(tmp_path)]) == 0
        detections = read_decisions_csv(tmp_path / "decisions.csv")
        assert detections
        assert any(d.decision == "D" for d in detections)

    def test_empty_trace_zero_exit(self, tmp_path):
        trace = tmp_path / "trace.csv"
        trace.write_text("timestamp,vehicle_id,latitude,longitude,speed\n")
        assert main(["detect", "--trace", str(trace), "--out", str(tmp_path)]) == 0
        assert read_decisions_csv(tmp_path / "decisions.csv") == []

    def test_corrupted_row_names_line(self, tmp_path, capsys):
        trace = tmp_path / "trace.csv"
        trace.write_text(
            "timestamp,vehicle_id,latitude,longitude,speed\n"
            "0.0,1,34.68,-82.85,10\n"
            "0.1,1,bogus,-82.85,10\n"
        )
        assert main(["detect", "--trace", str(trace), "--out", str(tmp_path)]) == 1
        assert "line 3" in capsys.readouterr().err

    def test_missing_trace_io_exit(self, tmp_path, capsys):
        assert main(["detect", "--trace", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path)]) == 2
        assert capsys.readouterr().err

    def test_table1_style_dos_fragment_flags_vehicle_6(self, tmp_path):
        # vehicle 6 floods at 10x the nominal rate after t=1.0
        rows = ["timestamp,vehicle_id,latitude,longitude,speed"]
        entries = []
        for vid in (5, 6, 7):
            for n in range(20):
                entries.append((n / 10.0, vid, 15.65))
        for n in range(100):
            entries.append((1.0 + n / 100.0, 6, 0.0))
        entries.sort()
        for t, vid, speed in entries:
            rows.append(f"{t},{vid},34.68,-82.85,{speed}")
        trace = tmp_path / "trace.csv"
        trace.write_text("\n".join(rows) + "\n")
        cfg = tmp_path / "detector.kv"
        cfg.write_text("calibration_window_seconds = 1.0\n")
        assert main(["detect", "--trace", str(trace), "--config", str(cfg),
                     "--out", str(tmp_path)]) == 0
        detections = read_decisions_csv(tmp_path / "decisions.csv")
        flagged = {d.vehicle_id for d in detections if d.decision == "D"}
        assert 6 in flagged
        assert all(
            d.decision == "ND" for d in detections
            if d.vehicle_id != 6 and d.feature_name in ("MVS", "MVT")
        )


@pytest.fixture(scope="module")
def eval_inputs(sim_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("det")
    assert main(["detect", "--trace", str(sim_dir / "trace.csv"),
                 "--out", str(out)]) == 0
    return sim_dir, out


class TestEvaluate:
    def test_metrics_files_written(self, eval_inputs, tmp_path, capsys):
        sim_dir, det_dir = eval_inputs
        assert main(["evaluate",
                     "--detections", str(det_dir / "decisions.csv"),
                     "--labels", str(sim_dir / "labels.csv"),
                     "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "DOS" in out
        assert (tmp_path / "metrics.txt").exists()
        machine = (tmp_path / "metrics.kv").read_text()
        assert "DOS.CUSUM.MVS.accuracy" in machine

    def test_machine_format_stdout(self, eval_inputs, tmp_path, capsys):
        sim_dir, det_dir = eval_inputs
        assert main(["evaluate",
                     "--detections", str(det_dir / "decisions.csv"),
                     "--labels", str(sim_dir / "labels.csv"),
                     "--format", "machine", "--out", str(tmp_path)]) == 0
        assert "DOS.CUSUM.MVS.tp = " in capsys.readouterr().out

    def test_shuffled_detections_same_report(self, eval_inputs, tmp_path):
        import random

        sim_dir, det_dir = eval_inputs
        lines = (det_dir / "decisions.csv").read_text().splitlines()
        body = lines[1:]
        random.Random(0).shuffle(body)
        shuffled = tmp_path / "shuffled.csv"
        shuffled.write_text("\n".join([lines[0]] + body) + "\n")
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for det, out in ((det_dir / "decisions.csv", out_a), (shuffled, out_b)):
            assert main(["evaluate", "--detections", str(det),
                         "--labels", str(sim_dir / "labels.csv"),
                         "--out", str(out)]) == 0
        assert (out_a / "metrics.kv").read_text() == (out_b / "metrics.kv").read_text()

    def test_mismatched_labels_nonzero_exit(self, eval_inputs, tmp_path, capsys):
        sim_dir, det_dir = eval_inputs
        labels = tmp_path / "labels.csv"
        labels.write_text("timestamp,vehicle_id,label,attack_kind\n0.0,1,normal,\n")
        assert main(["evaluate",
                     "--detections", str(det_dir / "decisions.csv"),
                     "--labels", str(labels), "--out", str(tmp_path)]) == 1
        assert "unknown" in capsys.readouterr().err


class TestCalibrate:
    def test_calibration_kv(self, sim_dir, tmp_path, capsys):
        assert main(["calibrate", "--trace", str(sim_dir / "trace.csv"),
                     "--out", str(tmp_path)]) == 0
        text = (tmp_path / "calibration.kv").read_text()
        for feature in ("MVS", "MVT", "DISTANCE"):
            assert f"{feature}.mu0 = " in text
            assert f"{feature}.mixture.w = " in text


class TestComposition:
    def test_cli_stages_equal_run_pipeline(self, sim_dir, tmp_path):
        assert main(["detect", "--trace", str(sim_dir / "trace.csv"),
                     "--out", str(tmp_path)]) == 0
        via_cli = read_decisions_csv(tmp_path / "decisions.csv")
        records = read_trace(sim_dir / "trace.csv")
        log, _ = run_pipeline(LabeledTrace(records, [None] * len(records)),
                              DetectorConfig())
        assert via_cli == list(log)


class TestEnvOverrides:
    def test_detector_env_override(self, sim_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("BSMSENTINEL_EM_THRESHOLD", "0.999999")
        assert main(["detect", "--trace", str(sim_dir / "trace.csv"),
                     "--out", str(tmp_path)]) == 0
        detections = read_decisions_csv(tmp_path / "decisions.csv")
        em_flagged = [d for d in detections
                      if d.detector == "EM" and d.decision == "D"]
        # near-unreachable threshold silences almost everything but the flood
        assert all(d.score > 0.999999 for d in em_flagged)

    def test_seed_env_fallback(self, tmp_path, monkeypatch):
        cfg = tmp_path / "scenario.kv"
        cfg.write_text(NO_ATTACK_KV)
        monkeypatch.setenv("BSMSENTINEL_SEED", "11")
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["simulate", "--config", str(cfg), "--out", str(a)]) == 0
        monkeypatch.delenv("BSMSENTINEL_SEED")
        assert main(["simulate", "--config", str(cfg), "--out", str(b)]) == 0
        assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()


class TestVersion:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
