import csv
import json

import numpy as np
import pytest

from sonoloc.cli import EvalReport, EvalRow, main, run_eval, summarize
from sonoloc.config import RunConfig, load_config, parse_config
from sonoloc.errors import InvalidSpec
from sonoloc.pll import PhaseTrack, displacements_at_steps


def write_cfg(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"schema": 1} | data))
    return str(path)


def run(argv, capsys):
    rc = main(argv)
    out, err = capsys.readouterr()
    return rc, (json.loads(out) if out.strip() else None), err


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.schema_version == 1 and cfg.eval.runs == 35 and cfg.eval.grid == [2.0, 4.0, 6.0, 8.0]

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidSpec, match="typo"):
            parse_config({"schema": 1, "pll": {"typo": 1}})

    def test_schema_required(self):
        with pytest.raises(InvalidSpec):
            parse_config({"seed": 3})
        with pytest.raises(InvalidSpec):
            parse_config({"schema": 2})

    def test_override(self):
        cfg = parse_config({"schema": 1}).override(7, 18000.0)
        assert cfg.seed == 7 and cfg.params().carrier_freq == 18000.0


class TestCommands:
    def test_eval_grid_has_560_rows(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"eval": {"workers": 2}})
        rc, res, _ = run(["eval", "--config", cfg, "--out", str(tmp_path / "o")], capsys)
        assert rc == 0 and res["rows"] == 560
        rows = read_rows(tmp_path / "o" / "report.csv")
        assert len(rows) == 560
        assert {(float(r["X"]), float(r["Y"])) for r in rows} == {(x, y) for x in (2, 4, 6, 8) for y in (2, 4, 6, 8)}
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        s = report["summary"]["ranging_error_m"]
        assert 0 <= s["p50"] <= s["p80"] <= s["p90"]

    def test_simulate_static_truth_is_constant(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"scenario": {"speaker": [3.0, 4.0, 0.0], "walk": {"kind": "steps"}}})
        rc, res, _ = run(["simulate", "--config", cfg, "--out", str(tmp_path)], capsys)
        assert rc == 0
        rows = read_rows(res["truth"])
        dist = np.array([float(r["distance"]) for r in rows])
        assert dist.size > 10 and np.allclose(dist, 5.0)

    def test_loopback_demod_has_no_displacement(self, tmp_path, capsys):
        rc, res, _ = run(["synth", "--duration", "3", "--out", str(tmp_path)], capsys)
        assert rc == 0
        rc, res, _ = run(["demod", res["tx"], "--out", str(tmp_path)], capsys)
        assert rc == 0 and res["detections"] >= 10
        trk = PhaseTrack.read_csv(res["phase"])
        d = displacements_at_steps(trk, np.arange(0.5, 2.6, 0.25))
        assert np.max(np.abs(d.d)) < 0.002

    def test_round_trip_locate(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"scenario": {"speaker": [4.0, 4.0, 0.0]}})
        o = str(tmp_path)
        assert run(["simulate", "--config", cfg, "--out", o], capsys)[0] == 0
        rc, res, _ = run(["demod", str(tmp_path / "rx.wav"), "--config", cfg, "--out", o], capsys)
        assert rc == 0
        rc, res, _ = run(["locate", "--config", cfg, "--phase", res["phase"],
                          "--steps", str(tmp_path / "steps.json"), "--out", o], capsys)
        assert rc == 0 and res["count"] == 1
        fix = read_rows(res["fixes"])[0]
        assert float(fix["X"]) == pytest.approx(4.0, abs=0.02)
        assert float(fix["Y"]) == pytest.approx(4.0, abs=0.02)

    def test_turning_walk_adds_pooled_fix(self, tmp_path, capsys):
        walk = {"n_steps": 12, "turns": [[6, 1.5707963267948966]]}
        cfg = write_cfg(tmp_path, {"scenario": {"speaker": [2.0, 5.0, 0.0], "walk": walk}})
        o = str(tmp_path)
        run(["simulate", "--config", cfg, "--out", o], capsys)
        _, res, _ = run(["demod", str(tmp_path / "rx.wav"), "--config", cfg, "--out", o], capsys)
        rc, res, _ = run(["locate", "--config", cfg, "--phase", res["phase"],
                          "--steps", str(tmp_path / "steps.json"), "--out", o], capsys)
        assert rc == 0
        pooled = read_rows(res["fixes"])[-1]
        assert float(pooled["X"]) == pytest.approx(2.0, abs=0.05)
        assert float(pooled["Y"]) == pytest.approx(5.0, abs=0.05)

    def test_repeated_runs_are_byte_identical(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"seed": 9, "channel": {"snr_db": 10.0}, "eval": {"runs": 2}})
        for name in ("a", "b"):
            o = str(tmp_path / name)
            assert run(["simulate", "--config", cfg, "--out", o], capsys)[0] == 0
            assert run(["eval", "--config", cfg, "--out", o], capsys)[0] == 0
        for f in ("rx.wav", "truth.csv", "steps.json", "report.json", "report.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_seed_changes_noise(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"channel": {"snr_db": 10.0}, "scenario": {"walk": {"kind": "static"}}})
        for seed in ("1", "2"):
            run(["simulate", "--config", cfg, "--seed", seed, "--out", str(tmp_path / seed)], capsys)
        assert (tmp_path / "1" / "rx.wav").read_bytes() != (tmp_path / "2" / "rx.wav").read_bytes()

    def test_channel_flag(self, tmp_path, capsys):
        rc, res, _ = run(["synth", "--duration", "0.5", "--channel", "18000", "--out", str(tmp_path)], capsys)
        assert rc == 0 and res["carrier_freq"] == 18000.0


class TestErrors:
    def test_unknown_key_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"scenario": {"speeker": [1, 2, 3]}})
        rc, res, err = run(["synth", "--config", cfg, "--out", str(tmp_path)], capsys)
        assert rc != 0 and res is None
        payload = json.loads(err)
        assert payload["error"] == "InvalidSpec" and "speeker" in payload["message"]

    def test_missing_config(self, tmp_path, capsys):
        rc, _, err = run(["synth", "--config", str(tmp_path / "nope.json")], capsys)
        assert rc == 1 and json.loads(err)["error"] == "InvalidSpec"

    def test_bad_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        rc, _, err = run(["eval", "--config", str(path)], capsys)
        assert rc == 1 and json.loads(err)["error"] == "InvalidSpec"

    def test_demod_of_silence(self, tmp_path, capsys):
        from sonoloc.audio_io import write_wav
        from sonoloc.streams import SampleStream
        path = write_wav(SampleStream(np.zeros(44100), 44100.0), tmp_path / "z.wav")
        rc, _, err = run(["demod", str(path), "--out", str(tmp_path)], capsys)
        assert rc == 1 and json.loads(err)["error"] == "NoDetection"

    def test_missing_steps(self, tmp_path, capsys):
        rc, res, _ = run(["synth", "--duration", "1", "--out", str(tmp_path)], capsys)
        _, res, _ = run(["demod", res["tx"], "--out", str(tmp_path)], capsys)
        rc, _, err = run(["locate", "--phase", res["phase"], "--steps", str(tmp_path / "x.json")], capsys)
        assert rc == 1 and json.loads(err)["error"] == "InvalidSpec"


class TestReport:
    def test_summary_percentiles(self):
        rows = [EvalRow(2, 2, i, i, float(i), float(2 * i), True) for i in range(10)]
        rows.append(EvalRow(2, 2, 10, 10, float("nan"), float("nan"), False))
        s = summarize(rows)
        assert s["runs"] == 11 and s["detection_rate"] == pytest.approx(10 / 11)
        assert s["ranging_error_m"]["p50"] == pytest.approx(np.percentile(np.arange(10.0), 50))
        assert s["direction_error_deg"]["mean"] == pytest.approx(9.0)

    def test_report_roundtrip(self, tmp_path):
        report = EvalReport((EvalRow(2, 4, 0, 1, 0.1, 0.5, True),), "displacement")
        data = json.loads(report.write_json(tmp_path / "r.json").read_text())
        assert data["rows"][0]["ranging_error"] == 0.1 and data["mode"] == "displacement"
        assert read_rows(report.write_csv(tmp_path / "r.csv"))[0]["detected"] in ("True", "1", "true")

    def test_audio_mode_small(self):
        cfg = RunConfig.model_validate({"schema": 1, "eval": {"mode": "audio", "grid": [4.0], "runs": 1}})
        report = run_eval(cfg)
        assert len(report.rows) == 1 and report.rows[0].detected
        assert report.rows[0].ranging_error < 0.05
