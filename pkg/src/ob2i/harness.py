"""Configuration, seeded experiment orchestration and the ``ob2i`` command line."""

import argparse
import copy
import csv
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ConfigError, Ob2iError, __version__
from .bebu import (
    TRACE_COLUMNS, VARIANTS, TrainedAgent, TrainerConfig, evaluate_relative_length, run_training,
)
from .ensemble import load_checkpoint, save_checkpoint
from .envs import MazeEnv, MazeSpec, generate_maze
from .lsvi import posterior_variance_oracle
from .regress_demo import emit_bands, fit_ensemble, gap_and_support_std, make_gap_dataset

# Reference schedule for a 200k-frame run; "scaled" keeps these ratios to total_frames.
REFERENCE_FRAMES = 200_000
REFERENCE_SCHEDULE = {"learning_starts": 10_000, "train_frequency": 50, "target_sync_period": 2000}

_TRAINER_DEFAULTS = {k: v for k, v in TrainerConfig().to_dict().items() if k != "variant"}
for _key in REFERENCE_SCHEDULE:
    _TRAINER_DEFAULTS[_key] = None

MAZE_DEFAULTS = {
    **_TRAINER_DEFAULTS,
    "variants": ["BEBU", "OB2I"],
    "densities": [0.3],
    "width": 10,
    "height": 10,
    "slip_prob": 0.1,
    "max_steps": 1000,
    "noise_scale": 0.1,
    "eval_episodes": 20,
    "eval_every": 10_000,
    "eval_mode": "variant",
    "schedule": "scaled",
    "save_checkpoints": True,
}

LSVI_DEFAULTS = {
    "n_designs": 20,
    "max_dim": 8,
    "max_points": 100,
    "lambdas": [0.1, 1.0, 10.0],
    "probes": 3,
    "n_samples": 100_000,
    "tolerance": 0.05,
    "bootstrap_designs": 5,
    "bootstrap_points": 500,
    "bootstrap_lambdas": [0.1, 1.0],
    "bootstrap_samples": 4000,
    "bootstrap_tolerance": 0.15,
    "bootstrap_mode": "bootstrap",
}

REGRESS_DEFAULTS = {
    "n_nets": 20,
    "epochs": 2000,
    "hidden": [32, 32],
    "lr": 0.01,
    "n_points": 60,
    "noise": 0.1,
    "grid_points": 201,
}

TRACE_DEFAULTS = {
    "window": 100,
    "input": "",
}

SECTIONS = {"maze": MAZE_DEFAULTS, "lsvi": LSVI_DEFAULTS, "regress": REGRESS_DEFAULTS, "trace": TRACE_DEFAULTS}
TOP_LEVEL = {"seed": 0, "seeds": 10, "workers": 1}
COMMAND_SECTION = {"maze-run": "maze", "lsvi-verify": "lsvi", "regress-demo": "regress", "bonus-trace": "trace",
                   "eval": "maze"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: int = 10
    workers: int = 1
    maze: dict = field(default_factory=lambda: copy.deepcopy(MAZE_DEFAULTS))
    lsvi: dict = field(default_factory=lambda: copy.deepcopy(LSVI_DEFAULTS))
    regress: dict = field(default_factory=lambda: copy.deepcopy(REGRESS_DEFAULTS))
    trace: dict = field(default_factory=lambda: copy.deepcopy(TRACE_DEFAULTS))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "seeds": self.seeds, "workers": self.workers,
                **{name: copy.deepcopy(getattr(self, name)) for name in SECTIONS}}

    def trainer_config(self, variant: str) -> TrainerConfig:
        kw = {k: self.maze[k] for k in TrainerConfig.field_names() if k != "variant"}
        return TrainerConfig(variant=variant, **kw)


def _coerce(key: str, value, default):
    """Check ``value`` against the type of its default, allowing int -> float."""
    if default is None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if default and all(isinstance(x, float) for x in default):
            return [float(_coerce(key, x, 0.0)) for x in value]
        if default and all(isinstance(x, int) for x in default):
            return [_coerce(key, x, 0) for x in value]
        if default and all(isinstance(x, str) for x in default):
            return [_coerce(key, x, "") for x in value]
        return list(value)
    return value


def _merge_section(name: str, current: dict, values) -> dict:
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be a mapping")
    defaults = SECTIONS[name]
    out = dict(current)
    for key, value in values.items():
        if key not in defaults:
            raise ConfigError(key, f"unknown key in section '{name}'")
        out[key] = _coerce(key, value, defaults[key])
    return out


def _resolve_schedule(maze: dict):
    H = maze["total_frames"]
    for key, ref in REFERENCE_SCHEDULE.items():
        if maze[key] is not None:
            continue
        if maze["schedule"] == "fixed":
            maze[key] = ref
        else:
            scaled = round(ref * H / REFERENCE_FRAMES)
            maze[key] = scaled if key == "learning_starts" else max(1, scaled)


def validate_config(cfg: ExperimentConfig):
    if cfg.seed < 0:
        raise ConfigError("seed", "must be non-negative")
    if cfg.seeds < 1:
        raise ConfigError("seeds", "must be at least 1")
    if cfg.workers < 1:
        raise ConfigError("workers", "must be at least 1")
    m = cfg.maze
    if m["schedule"] not in ("scaled", "fixed"):
        raise ConfigError("schedule", "must be 'scaled' or 'fixed'")
    if m["eval_mode"] not in ("variant", "vote"):
        raise ConfigError("eval_mode", "must be 'variant' or 'vote'")
    if not m["variants"] or any(v not in VARIANTS for v in m["variants"]):
        raise ConfigError("variants", f"each entry must be one of {VARIANTS}")
    if not m["densities"] or any(not 0.0 <= d <= 0.6 for d in m["densities"]):
        raise ConfigError("densities", "each density must be in [0, 0.6]")
    if m["width"] < 2 or m["height"] < 2:
        raise ConfigError("width" if m["width"] < 2 else "height", "must be at least 2")
    if not 0.0 <= m["slip_prob"] <= 0.5:
        raise ConfigError("slip_prob", "must be in [0, 0.5]")
    if not 0.0 <= m["noise_scale"] < 0.5:
        raise ConfigError("noise_scale", "must be in [0, 0.5)")
    for key in ("max_steps", "eval_episodes"):
        if m[key] < 1:
            raise ConfigError(key, "must be at least 1")
    if m["eval_every"] < 0:
        raise ConfigError("eval_every", "must be non-negative")
    cfg.trainer_config(m["variants"][0])

    s = cfg.lsvi
    for key in ("n_designs", "bootstrap_designs"):
        if s[key] < 0:
            raise ConfigError(key, "must be non-negative")
    for key in ("max_dim", "max_points", "probes", "bootstrap_points"):
        if s[key] < 1:
            raise ConfigError(key, "must be at least 1")
    for key in ("n_samples", "bootstrap_samples"):
        if s[key] < 2:
            raise ConfigError(key, "must be at least 2")
    for key in ("lambdas", "bootstrap_lambdas"):
        if not s[key] or any(not lam > 0 for lam in s[key]):
            raise ConfigError(key, "entries must be positive")
    for key in ("tolerance", "bootstrap_tolerance"):
        if not s[key] > 0:
            raise ConfigError(key, "must be positive")
    if s["bootstrap_mode"] not in ("bootstrap", "pairs"):
        raise ConfigError("bootstrap_mode", "must be 'bootstrap' or 'pairs'")

    r = cfg.regress
    if r["n_nets"] < 2:
        raise ConfigError("n_nets", "must be at least 2")
    for key in ("epochs", "n_points", "grid_points"):
        if r[key] < 1:
            raise ConfigError(key, "must be at least 1")
    if any(h < 1 for h in r["hidden"]):
        raise ConfigError("hidden", "layer widths must be positive")
    if not r["lr"] > 0:
        raise ConfigError("lr", "must be positive")
    if r["noise"] < 0:
        raise ConfigError("noise", "must be non-negative")

    if cfg.trace["window"] < 1:
        raise ConfigError("window", "must be at least 1")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _locate(key: str, section: str | None):
    """Map an override key to ``(section_or_None, field)``."""
    if "." in key:
        head, name = key.split(".", 1)
        if head not in SECTIONS:
            raise ConfigError(key, "unknown section")
        return head, name
    if key in TOP_LEVEL:
        return None, key
    if section and key in SECTIONS[section]:
        return section, key
    owners = [name for name, defaults in SECTIONS.items() if key in defaults]
    if len(owners) == 1:
        return owners[0], key
    if not owners:
        raise ConfigError(key, "unknown key")
    raise ConfigError(key, f"ambiguous key, prefix with one of {owners}")


def parse_config(path=None, overrides=(), section: str | None = None, document: dict | None = None) -> ExperimentConfig:
    """Build a validated config from a JSON file (or manifest) plus ``key=value`` overrides.

    Keys in overrides may be qualified (``maze.beta``) or bare; bare keys are
    looked up in ``section`` first.  Unset fields keep their defaults.
    """
    if document is None and path is not None:
        try:
            document = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"malformed JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
    document = document or {}
    if not isinstance(document, dict):
        raise ConfigError("config", "top level must be a mapping")
    if "artifact_version" in document and "config" in document:
        document = document["config"]
    raw = {**TOP_LEVEL, **{name: copy.deepcopy(d) for name, d in SECTIONS.items()}}
    for key, value in document.items():
        if key in TOP_LEVEL:
            raw[key] = _coerce(key, value, TOP_LEVEL[key])
        elif key in SECTIONS:
            raw[key] = _merge_section(key, raw[key], value)
        else:
            raise ConfigError(key, "unknown top-level key")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, text = item.split("=", 1)
        sec, name = _locate(key.strip(), section)
        value = _parse_value(text.strip())
        if sec is None:
            raw[name] = _coerce(name, value, TOP_LEVEL[name])
        else:
            raw[sec] = _merge_section(sec, raw[sec], {name: value})
    cfg = ExperimentConfig(**raw)
    _resolve_schedule(cfg.maze)
    validate_config(cfg)
    return cfg


@dataclass
class RunManifest:
    command: str
    config: dict
    sub_seeds: dict
    artifact_version: str = __version__
    started: str = ""
    finished: str = ""
    python: str = field(default_factory=platform.python_version)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "sub_seeds": self.sub_seeds,
                "artifact_version": self.artifact_version, "started": self.started,
                "finished": self.finished, "python": self.python}

    def write(self, out_dir):
        _write_json(Path(out_dir) / "manifest.json", self.to_dict())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def sub_seed(master: int, *path) -> int:
    """Stable 32-bit seed for a position in the run tree, independent of run size."""
    return int(np.random.SeedSequence(master, spawn_key=tuple(int(p) for p in path)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# maze-run
# ---------------------------------------------------------------------------


def run_tag(variant: str, density: float, index: int) -> str:
    return f"{variant}_d{density:.2f}_s{index:03d}"


def maze_jobs(cfg: ExperimentConfig) -> list:
    jobs = []
    for di, density in enumerate(cfg.maze["densities"]):
        for j in range(cfg.seeds):
            seeds = {"maze": sub_seed(cfg.seed, di, j, 0), "train": sub_seed(cfg.seed, di, j, 1),
                     "eval": sub_seed(cfg.seed, di, j, 2)}
            for variant in cfg.maze["variants"]:
                jobs.append({"variant": variant, "density": density, "index": j, "seeds": seeds})
    return jobs


def build_maze(cfg: ExperimentConfig, density: float, maze_seed: int) -> MazeSpec:
    m = cfg.maze
    return generate_maze(maze_seed, density, width=m["width"], height=m["height"],
                         slip_prob=m["slip_prob"], max_steps=m["max_steps"])


def _eval_agent(agent, spec, cfg: ExperimentConfig, eval_seed: int, frame: int) -> float:
    rng = np.random.default_rng([eval_seed, frame])
    noise = cfg.maze["noise_scale"]
    return evaluate_relative_length(agent, spec, cfg.maze["eval_episodes"], rng,
                                    env_factory=lambda r: MazeEnv(spec, r, noise))


def run_maze_job(cfg_dict: dict, job: dict, out_dir: str) -> dict:
    """Train and evaluate one (variant, density, seed) cell; writes its own files."""
    cfg = parse_config(document=cfg_dict)
    spec = build_maze(cfg, job["density"], job["seeds"]["maze"])
    tcfg = cfg.trainer_config(job["variant"])
    noise = cfg.maze["noise_scale"]
    eval_mode = cfg.maze["eval_mode"]
    evals = []

    def checkpoint(frame, result):
        agent = TrainedAgent(result.learner.net, tcfg, eval_mode)
        evals.append((frame, _eval_agent(agent, spec, cfg, job["seeds"]["eval"], frame)))

    result = run_training(lambda rng: MazeEnv(spec, rng, noise), tcfg, job["seeds"]["train"],
                          on_checkpoint=checkpoint, checkpoint_every=cfg.maze["eval_every"])
    H = tcfg.total_frames
    agent = TrainedAgent(result.learner.net, tcfg, eval_mode)
    final = _eval_agent(agent, spec, cfg, job["seeds"]["eval"], H)
    evals.append((H, final))

    out = Path(out_dir)
    tag = run_tag(job["variant"], job["density"], job["index"])
    _write_csv(out / "traces" / f"{tag}.csv", TRACE_COLUMNS,
               [(r.frame, r.episode_return, r.mean_batch_bonus, r.loss, r.epsilon) for r in result.trace])
    _write_csv(out / "evals" / f"{tag}.csv", ("frame", "relative_length"), evals)
    if cfg.maze["save_checkpoints"]:
        save_checkpoint(result.learner.net, out / "checkpoints" / tag, adam=result.learner.adam,
                        extra={"maze": json.loads(spec.to_json()), "trainer": tcfg.to_dict(),
                               "noise_scale": noise, "eval_mode": eval_mode, "tag": tag})
    return {**job, "tag": tag, "relative_length": final, "gradient_steps": result.gradient_steps}


def summarize_maze(cfg: ExperimentConfig, results: list, status: str) -> dict:
    table = {}
    for variant in cfg.maze["variants"]:
        for density in cfg.maze["densities"]:
            vals = [r["relative_length"] for r in sorted(results, key=lambda r: r["index"])
                    if r["variant"] == variant and r["density"] == density]
            if not vals:
                continue
            table.setdefault(variant, {})[f"{density:.2f}"] = {
                "n": len(vals), "mean": float(np.mean(vals)), "std": float(np.std(vals)), "per_seed": vals}
    paired = {}
    if "OB2I" in table and "BEBU" in table:
        for dkey, ob in table["OB2I"].items():
            be = table["BEBU"].get(dkey)
            if be is None or be["n"] != ob["n"]:
                continue
            wins = sum(o <= b for o, b in zip(ob["per_seed"], be["per_seed"]))
            paired[dkey] = {"ob2i_le_bebu": int(wins), "n": ob["n"], "ob2i_mean_lower": ob["mean"] < be["mean"]}
    return {"status": status, "relative_length": table, "paired_ob2i_vs_bebu": paired,
            "total_frames": cfg.maze["total_frames"], "std_ddof": 0}


def run_maze_suite(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    for sub in ("traces", "evals", "checkpoints"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    jobs = maze_jobs(cfg)
    manifest = RunManifest("maze-run", cfg.to_dict(),
                           {run_tag(j["variant"], j["density"], j["index"]): j["seeds"] for j in jobs}, started=_now())
    manifest.write(out)
    cfg_dict = cfg.to_dict()
    results = []

    def flush(status):
        summary = summarize_maze(cfg, results, status)
        _write_json(out / "summary.json", summary)
        return summary

    try:
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [pool.submit(run_maze_job, cfg_dict, job, str(out)) for job in jobs]
                for fut in futures:
                    results.append(fut.result())
                    flush("partial")
        else:
            for job in jobs:
                results.append(run_maze_job(cfg_dict, job, str(out)))
                flush("partial")
    except BaseException:
        flush("aborted")
        raise
    summary = flush("complete")
    manifest.finished = _now()
    manifest.write(out)
    return summary


def read_final_relative_lengths(out_dir) -> dict:
    """Per-tag final relative length, read back from the per-seed eval CSVs."""
    found = {}
    for path in sorted((Path(out_dir) / "evals").glob("*.csv")):
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        found[path.stem] = float(rows[-1]["relative_length"])
    return found


# ---------------------------------------------------------------------------
# lsvi-verify
# ---------------------------------------------------------------------------

LSVI_COLUMNS = ("design_id", "probe_id", "mode", "d", "m", "lambda", "closed_form_std", "monte_carlo_std",
                "closed_form_var", "monte_carlo_var", "rel_error", "tolerance", "passed")


def _design_rows(design_id, Phi, targets, lam, probes, n_samples, mode, tol, rng):
    rows = []
    for p, phi in enumerate(probes):
        closed, mc = posterior_variance_oracle(Phi, targets, lam, phi, n_samples, rng, mode=mode)
        rel = abs(mc - closed) / closed if closed > 0 else abs(mc)
        rows.append((design_id, p, mode, Phi.shape[1], Phi.shape[0], float(lam), float(np.sqrt(closed)),
                     float(np.sqrt(mc)), float(closed), float(mc), float(rel), float(tol), bool(rel <= tol)))
    return rows


def linear_designs(cfg: ExperimentConfig):
    """Two fixed sanity designs followed by random ones; yields ``(id, Phi, y, lambda, probes)``."""
    s = cfg.lsvi
    # prior only: variance is phi.phi / lambda
    yield "prior_only", np.zeros((0, 3)), np.zeros(0), 1.0, [np.array([1.0, -2.0, 0.5])]
    # one observation of a scalar: (1 + 1)^-1
    yield "scalar", np.ones((1, 1)), np.array([0.3]), 1.0, [np.ones(1)]
    for i in range(s["n_designs"]):
        rng = np.random.default_rng(sub_seed(cfg.seed, 10, i))
        d = int(rng.integers(1, s["max_dim"] + 1))
        m = int(rng.integers(1, s["max_points"] + 1))
        lam = float(s["lambdas"][i % len(s["lambdas"])])
        Phi = rng.normal(size=(m, d)) / np.sqrt(d)
        targets = Phi @ rng.normal(size=d) + rng.normal(size=m)
        yield f"random_{i:02d}", Phi, targets, lam, [rng.normal(size=d) for _ in range(s["probes"])]


def bootstrap_designs(cfg: ExperimentConfig):
    s = cfg.lsvi
    for i in range(s["bootstrap_designs"]):
        rng = np.random.default_rng(sub_seed(cfg.seed, 20, i))
        d = int(rng.integers(1, s["max_dim"] + 1))
        m = s["bootstrap_points"]
        lam = float(s["bootstrap_lambdas"][i % len(s["bootstrap_lambdas"])])
        Phi = rng.normal(size=(m, d))
        targets = Phi @ rng.normal(size=d) + rng.normal(size=m)
        yield f"bootstrap_{i:02d}", Phi, targets, lam, [rng.normal(size=d)]


def run_lsvi_verify(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.lsvi
    manifest = RunManifest("lsvi-verify", cfg.to_dict(), {"master": cfg.seed}, started=_now())
    rows = []
    for design_id, Phi, y, lam, probes in linear_designs(cfg):
        rng = np.random.default_rng(sub_seed(cfg.seed, 11, len(rows)))
        rows += _design_rows(design_id, Phi, y, lam, probes, s["n_samples"], "gaussian", s["tolerance"], rng)
    n_exact = len(rows)
    for design_id, Phi, y, lam, probes in bootstrap_designs(cfg):
        rng = np.random.default_rng(sub_seed(cfg.seed, 21, len(rows)))
        rows += _design_rows(design_id, Phi, y, lam, probes, s["bootstrap_samples"], s["bootstrap_mode"],
                             s["bootstrap_tolerance"], rng)
    _write_csv(out / "lsvi_verify.csv", LSVI_COLUMNS, rows)
    exact, boot = rows[:n_exact], rows[n_exact:]
    report = {
        "rows": len(rows),
        "passed": all(r[-1] for r in exact),
        "max_rel_error": max(r[10] for r in exact),
        "bootstrap_passed": all(r[-1] for r in boot) if boot else None,
        "bootstrap_max_rel_error": max(r[10] for r in boot) if boot else None,
        "failed_rows": [f"{r[0]}/{r[1]}" for r in rows if not r[-1]],
    }
    _write_json(out / "lsvi_summary.json", report)
    manifest.finished = _now()
    manifest.write(out)
    return report


# ---------------------------------------------------------------------------
# regress-demo
# ---------------------------------------------------------------------------


def run_regress_demo(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    r = cfg.regress
    seeds = {f"seed_{i:03d}": {"data": sub_seed(cfg.seed, 30, i), "fit": sub_seed(cfg.seed, 31, i)}
             for i in range(cfg.seeds)}
    manifest = RunManifest("regress-demo", cfg.to_dict(), seeds, started=_now())
    per_seed = []
    for tag, sd in seeds.items():
        ds = make_gap_dataset(sd["data"], n_points=r["n_points"], noise=r["noise"])
        lo, hi = ds.x.min(), ds.x.max()
        fit = fit_ensemble(ds, r["n_nets"], r["epochs"], sd["fit"], hidden=tuple(r["hidden"]), lr=r["lr"],
                           grid=np.linspace(lo, hi, r["grid_points"]))
        emit_bands(fit, out / f"bands_{tag}.csv")
        gap, support = gap_and_support_std(fit, ds.description["intervals"])
        per_seed.append({"tag": tag, "gap_std": gap, "support_std": support, "gap_exceeds_support": gap > support,
                         "optimistic_above_mean": bool(np.all(fit.g_plus >= fit.mean)), "final_loss": fit.final_loss})
    summary = {"per_seed": per_seed, "gap_exceeds_support": sum(p["gap_exceeds_support"] for p in per_seed),
               "n": len(per_seed)}
    _write_json(out / "regress_summary.json", summary)
    manifest.finished = _now()
    manifest.write(out)
    return summary


# ---------------------------------------------------------------------------
# bonus-trace
# ---------------------------------------------------------------------------

BONUS_COLUMNS = ("frame", "mean_batch_bonus", "smoothed")
BONUS_SUMMARY_COLUMNS = ("run", "status", "rows", "peak_frame", "peak", "first", "final", "final_over_peak",
                         "warmup", "passed")


def smooth(values, window: int) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points have no value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(values)])
    return (c[window:] - c[:-window]) / window


def rise_then_fall(frames, bonuses, window: int, warmup: int) -> dict:
    """Statistic over the smoothed bonus curve.

    Passes when the peak lies after ``warmup``, exceeds the first smoothed
    value (an actual rise) and the last smoothed value is below half of it.
    """
    frames = np.asarray(frames)
    bonuses = np.asarray(bonuses, dtype=np.float64)
    base = {"rows": int(bonuses.size), "warmup": int(warmup)}
    if bonuses.size and np.all(bonuses == 0.0):
        return {**base, "status": "not_applicable", "passed": None}
    if bonuses.size < window or bonuses.size == 0:
        return {**base, "status": "warning_trace_shorter_than_window", "passed": None}
    sm = smooth(bonuses, window)
    k = int(np.argmax(sm))
    peak, final, first = float(sm[k]), float(sm[-1]), float(sm[0])
    peak_frame = int(frames[window - 1 + k])
    passed = peak_frame > warmup and peak > first and final < 0.5 * peak
    return {**base, "status": "ok", "peak_frame": peak_frame, "peak": peak, "first": first, "final": final,
            "final_over_peak": final / peak if peak > 0 else None, "passed": bool(passed)}


def emit_bonus_trace(trace, path, window: int):
    """Write ``(frame, mean_batch_bonus, smoothed)`` rows from a training trace."""
    rows = [(int(f), float(b)) for f, b in trace]
    sm = smooth([b for _, b in rows], window)
    out = []
    for i, (f, b) in enumerate(rows):
        s = float(sm[i - window + 1]) if i >= window - 1 and sm.size else None
        out.append((f, b, s))
    _write_csv(path, BONUS_COLUMNS, out)
    return out


def read_bonus_trace(path) -> list:
    with open(path) as fh:
        return [(int(r["frame"]), float(r["mean_batch_bonus"])) for r in csv.DictReader(fh) if r["mean_batch_bonus"]]


def _summary_row(name, stat):
    return (name, stat["status"], stat["rows"], stat.get("peak_frame"), stat.get("peak"), stat.get("first"),
            stat.get("final"), stat.get("final_over_peak"), stat["warmup"], stat["passed"])


def run_bonus_trace(cfg: ExperimentConfig, out_dir) -> dict:
    """Bonus traces from existing trace CSVs (``trace.input``) or fresh OB2I maze runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    window = cfg.trace["window"]
    warmup = cfg.maze["learning_starts"]
    source = cfg.trace["input"]
    traces = {}
    if source:
        src = Path(source)
        for path in sorted(src.glob("*.csv")) if src.is_dir() else [src]:
            traces[path.stem] = read_bonus_trace(path)
        seeds = {"input": str(source)}
    else:
        density = cfg.maze["densities"][0]
        tcfg = cfg.trainer_config("OB2I")
        seeds = {}
        for j in range(cfg.seeds):
            sd = {"maze": sub_seed(cfg.seed, 0, j, 0), "train": sub_seed(cfg.seed, 0, j, 1)}
            tag = run_tag("OB2I", density, j)
            seeds[tag] = sd
            spec = build_maze(cfg, density, sd["maze"])
            noise = cfg.maze["noise_scale"]
            traces[tag] = run_training(lambda rng: MazeEnv(spec, rng, noise), tcfg, sd["train"]).bonus_trace
    manifest = RunManifest("bonus-trace", cfg.to_dict(), seeds, started=_now())
    summary_rows, stats = [], {}
    for name, trace in traces.items():
        emit_bonus_trace(trace, out / f"bonus_{name}.csv", window)
        stat = rise_then_fall([f for f, _ in trace], [b for _, b in trace], window, warmup)
        stats[name] = stat
        summary_rows.append(_summary_row(name, stat))
    _write_csv(out / "bonus_summary.csv", BONUS_SUMMARY_COLUMNS, summary_rows)
    applicable = [s for s in stats.values() if s["passed"] is not None]
    result = {"runs": len(stats), "applicable": len(applicable), "passed": sum(bool(s["passed"]) for s in applicable)}
    _write_json(out / "bonus_summary.json", result)
    manifest.finished = _now()
    manifest.write(out)
    return result


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def run_eval(cfg: ExperimentConfig, checkpoint, out_dir) -> dict:
    net, _, manifest = load_checkpoint(checkpoint)
    extra = manifest.get("extra", {})
    if "maze" not in extra or "trainer" not in extra:
        raise ConfigError("checkpoint", "checkpoint lacks maze and trainer metadata")
    spec = MazeSpec.from_json(json.dumps(extra["maze"]))
    tcfg = TrainerConfig(**extra["trainer"])
    agent = TrainedAgent(net, tcfg, extra.get("eval_mode", "variant"))
    noise = extra.get("noise_scale", cfg.maze["noise_scale"])
    rng = np.random.default_rng(sub_seed(cfg.seed, 40))
    rel = evaluate_relative_length(agent, spec, cfg.maze["eval_episodes"], rng,
                                   env_factory=lambda r: MazeEnv(spec, r, noise))
    report = {"checkpoint": extra.get("tag", Path(checkpoint).name), "variant": tcfg.variant, "episodes": cfg.maze["eval_episodes"],
              "seed": cfg.seed, "relative_length": rel}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", report)
    return report


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ob2i", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("maze-run", "train and evaluate agents on generated mazes"),
                            ("lsvi-verify", "compare ensemble-style sampling with the linear bonus"),
                            ("regress-demo", "fit a 1-D ensemble and write uncertainty bands"),
                            ("bonus-trace", "smoothed mean-bonus curves and their rise-then-fall check"),
                            ("eval", "relative length of a saved checkpoint")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file or run manifest")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--seeds", type=int, help="number of seeds")
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, repeatable")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint path without suffix")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        for flag in ("seed", "seeds", "workers"):
            value = getattr(args, flag)
            if value is not None:
                overrides.append(f"{flag}={value}")
        cfg = parse_config(args.config, overrides, section=COMMAND_SECTION[args.command])
        if args.command == "maze-run":
            result = run_maze_suite(cfg, args.out)
        elif args.command == "lsvi-verify":
            result = run_lsvi_verify(cfg, args.out)
        elif args.command == "regress-demo":
            result = run_regress_demo(cfg, args.out)
        elif args.command == "bonus-trace":
            result = run_bonus_trace(cfg, args.out)
        else:
            result = run_eval(cfg, args.checkpoint, args.out)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return 2
    except (Ob2iError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
