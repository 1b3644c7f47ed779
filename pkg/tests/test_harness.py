import csv
import json
import math

import numpy as np
import pytest

from ob2i import ConfigError
from ob2i import harness
from ob2i.harness import (
    emit_bonus_trace, main, parse_config, read_final_relative_lengths, rise_then_fall, run_lsvi_verify,
    run_maze_suite, smooth,
)

TINY_MAZE = ["total_frames=400", "eval_every=200", "eval_episodes=2", "max_steps=40", "trunk_widths=[8]",
             "n_heads=3", "width=5", "height=5"]


def tiny_maze_cfg(*extra, seeds=2):
    return parse_config(overrides=[*TINY_MAZE, f"seeds={seeds}", *extra], section="maze")


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config()
        m = cfg.maze
        assert (m["n_heads"], m["gamma"], m["beta"], m["lr"], m["alpha1"], m["alpha2"]) == (10, 0.9, 1.0, 0.001, 0.01, 0.01)
        assert (m["total_frames"], m["learning_starts"], m["train_frequency"], m["target_sync_period"]) == (50_000, 2500, 12, 500)
        assert cfg.seeds == 10

    def test_fixed_schedule(self):
        m = parse_config(overrides=["schedule=fixed"]).maze
        assert (m["learning_starts"], m["train_frequency"], m["target_sync_period"]) == (10_000, 50, 2000)

    def test_explicit_schedule_value_wins(self):
        m = parse_config(overrides=["learning_starts=7"]).maze
        assert m["learning_starts"] == 7 and m["train_frequency"] == 12

    def test_beta_range_names_key(self):
        with pytest.raises(ConfigError) as err:
            parse_config(overrides=["beta=1.5"])
        assert err.value.key == "beta"

    def test_beta_range_from_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"maze": {"beta": 1.5}}))
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert err.value.key == "beta"

    @pytest.mark.parametrize("doc,key", [({"bogus": 1}, "bogus"), ({"maze": {"betaa": 0.5}}, "betaa"),
                                         ({"maze": {"n_heads": "ten"}}, "n_heads"), ({"seeds": 0}, "seeds")])
    def test_rejects(self, doc, key):
        with pytest.raises(ConfigError) as err:
            parse_config(document=doc)
        assert err.value.key == key

    def test_unknown_override(self):
        with pytest.raises(ConfigError) as err:
            parse_config(overrides=["nonsense=3"])
        assert err.value.key == "nonsense"

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError) as err:
            parse_config(path)
        assert err.value.key == "config"

    def test_ambiguous_key_uses_section(self):
        with pytest.raises(ConfigError):
            parse_config(overrides=["lr=0.5"])
        assert parse_config(overrides=["lr=0.5"], section="regress").regress["lr"] == 0.5
        assert parse_config(overrides=["maze.lr=0.5"]).maze["lr"] == 0.5

    def test_round_trip(self, tmp_path):
        cfg = parse_config(overrides=["beta=0.5", "densities=[0.3, 0.4]", "seed=9", "regress.hidden=[4]"])
        path = tmp_path / "resolved.json"
        path.write_text(json.dumps(cfg.to_dict()))
        again = parse_config(path)
        assert again.to_dict() == cfg.to_dict()
        assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(cfg.to_dict(), sort_keys=True)

    def test_int_promoted_to_float(self):
        assert parse_config(overrides=["gamma=0"]).maze["gamma"] == 0.0


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


class TestMazeSuite:
    def test_untrained_run(self, tmp_path):
        cfg = tiny_maze_cfg("total_frames=0", seeds=1)
        summary = run_maze_suite(cfg, tmp_path)
        for variant in ("BEBU", "OB2I"):
            entry = summary["relative_length"][variant]["0.30"]
            assert entry["n"] == 1 and entry["mean"] >= 1.0
        assert summary["status"] == "complete"

    def test_deterministic_and_recomputable(self, tmp_path):
        cfg = tiny_maze_cfg()
        a = run_maze_suite(cfg, tmp_path / "a")
        run_maze_suite(cfg, tmp_path / "b")
        assert _files(tmp_path / "a") == _files(tmp_path / "b")
        finals = read_final_relative_lengths(tmp_path / "a")
        for variant in ("BEBU", "OB2I"):
            vals = [finals[harness.run_tag(variant, 0.3, j)] for j in range(2)]
            entry = a["relative_length"][variant]["0.30"]
            assert entry["per_seed"] == vals
            assert entry["mean"] == float(np.mean(vals)) and entry["std"] == float(np.std(vals))
        with open(tmp_path / "a" / "evals" / "OB2I_d0.30_s000.csv") as fh:
            frames = [int(r["frame"]) for r in csv.DictReader(fh)]
        assert frames == [200, 400]

    def test_paired_seeds_share_maze(self):
        jobs = harness.maze_jobs(tiny_maze_cfg())
        by_index = {}
        for job in jobs:
            by_index.setdefault(job["index"], []).append(job["seeds"])
        assert all(s[0] == s[1] for s in by_index.values())
        assert by_index[0] != by_index[1]

    def test_workers_match_serial(self, tmp_path):
        cfg = tiny_maze_cfg("total_frames=100", seeds=1)
        run_maze_suite(cfg, tmp_path / "serial")
        cfg.workers = 2
        run_maze_suite(cfg, tmp_path / "pool")
        assert _files(tmp_path / "serial") == _files(tmp_path / "pool")

    def test_partial_results_flushed(self, tmp_path, monkeypatch):
        real = harness.run_maze_job
        calls = []

        def flaky(cfg_dict, job, out_dir):
            calls.append(job)
            if len(calls) == 2:
                raise RuntimeError("boom")
            return real(cfg_dict, job, out_dir)

        monkeypatch.setattr(harness, "run_maze_job", flaky)
        with pytest.raises(RuntimeError):
            run_maze_suite(tiny_maze_cfg("total_frames=50"), tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["status"] == "aborted"
        assert summary["relative_length"]["BEBU"]["0.30"]["n"] == 1

    def test_manifest_reproduces(self, tmp_path):
        assert main(["maze-run", "--out", str(tmp_path / "a"), "--seeds", "1", "--seed", "5",
                     *sum((["--set", s] for s in TINY_MAZE), [])]) == 0
        assert main(["maze-run", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "a" / "manifest.json")]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")


class TestLsviVerify:
    def test_report(self, tmp_path):
        cfg = parse_config(overrides=["n_designs=3", "n_samples=20000", "bootstrap_designs=1"], section="lsvi")
        report = run_lsvi_verify(cfg, tmp_path)
        with open(tmp_path / "lsvi_verify.csv") as fh:
            rows = {r["design_id"]: r for r in csv.DictReader(fh)}
        assert float(rows["prior_only"]["closed_form_std"]) == pytest.approx(math.sqrt(5.25), rel=1e-14)
        assert float(rows["scalar"]["closed_form_std"]) == pytest.approx(1 / math.sqrt(2), rel=1e-14)
        assert report["passed"] and report["rows"] == 2 + 3 * 3 + 1
        assert all(float(r["rel_error"]) <= 0.05 for r in rows.values() if r["mode"] == "gaussian")


class TestBonusTrace:
    def test_smooth(self):
        np.testing.assert_allclose(smooth([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
        assert smooth([1, 2], 3).size == 0

    def test_zero_trace_not_applicable(self):
        stat = rise_then_fall(np.arange(50), np.zeros(50), 5, 0)
        assert stat["status"] == "not_applicable" and stat["passed"] is None

    def test_short_trace_warns(self):
        stat = rise_then_fall(np.arange(3), [0.1, 0.2, 0.3], 5, 0)
        assert stat["status"].startswith("warning") and stat["passed"] is None

    def test_rise_then_fall(self):
        frames = np.arange(100, 300)
        curve = np.concatenate([np.linspace(0.1, 1.0, 40), np.linspace(1.0, 0.2, 160)])
        stat = rise_then_fall(frames, curve, 10, 100)
        assert stat["passed"] and stat["peak_frame"] > 100 and stat["final"] < 0.5 * stat["peak"]

    def test_monotone_decay_has_no_rise(self):
        stat = rise_then_fall(np.arange(100), np.linspace(1.0, 0.1, 100), 10, 0)
        assert stat["passed"] is False

    def test_no_fall(self):
        stat = rise_then_fall(np.arange(100), np.linspace(0.1, 1.0, 100), 10, 0)
        assert stat["passed"] is False

    def test_emit_csv(self, tmp_path):
        rows = emit_bonus_trace([(10, 1.0), (20, 3.0), (30, 5.0)], tmp_path / "t.csv", 2)
        assert rows == [(10, 1.0, None), (20, 3.0, 2.0), (30, 5.0, 4.0)]
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines == ["frame,mean_batch_bonus,smoothed", "10,1.0,", "20,3.0,2.0", "30,5.0,4.0"]

    def test_cli_from_trace_files(self, tmp_path):
        src = tmp_path / "traces"
        src.mkdir()
        (src / "flat.csv").write_text("frame,episode_return,mean_batch_bonus,loss,epsilon\n"
                                      + "".join(f"{f},,0.0,1.0,0.5\n" for f in range(20)))
        (src / "short.csv").write_text("frame,episode_return,mean_batch_bonus,loss,epsilon\n1,,0.3,1.0,0.5\n")
        assert main(["bonus-trace", "--out", str(tmp_path / "o"), "--set", f"input={src}", "--set", "window=5"]) == 0
        with open(tmp_path / "o" / "bonus_summary.csv") as fh:
            status = {r["run"]: r["status"] for r in csv.DictReader(fh)}
        assert status == {"flat": "not_applicable", "short": "warning_trace_shorter_than_window"}


class TestCli:
    def test_config_error_line(self, tmp_path, capsys):
        assert main(["maze-run", "--out", str(tmp_path), "--set", "beta=1.5"]) == 2
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "config" and err["key"] == "beta"

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
        assert "error" in json.loads(capsys.readouterr().err.strip())

    def test_eval_checkpoint(self, tmp_path, capsys):
        args = sum((["--set", s] for s in TINY_MAZE), [])
        assert main(["maze-run", "--out", str(tmp_path / "m"), "--seeds", "1", *args]) == 0
        ckpt = tmp_path / "m" / "checkpoints" / "OB2I_d0.30_s000"
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e"), "--set", "eval_episodes=3"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["variant"] == "OB2I" and report["relative_length"] >= 1.0
        assert json.loads((tmp_path / "e" / "eval.json").read_text()) == report

    @pytest.mark.parametrize("command,args", [
        ("maze-run", ["--seeds", "1", *sum((["--set", s] for s in TINY_MAZE), [])]),
        ("lsvi-verify", ["--set", "n_designs=2", "--set", "n_samples=2000", "--set", "bootstrap_designs=1"]),
        ("regress-demo", ["--seeds", "2", "--set", "epochs=20", "--set", "n_nets=3"]),
        ("bonus-trace", ["--seeds", "1", *sum((["--set", s] for s in TINY_MAZE), []), "--set", "window=5"]),
    ])
    def test_byte_identical(self, tmp_path, command, args):
        for name in ("a", "b"):
            assert main([command, "--out", str(tmp_path / name), "--seed", "3", *args]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")
        assert _files(tmp_path / "a")
