"""Declarative experiment configs, seeded multi-trial execution and aggregation.

A config is a YAML mapping.  ``load_config`` validates it strictly (unknown
keys, ranges, types) and returns an :class:`ExperimentConfig` whose
``canonical()`` text is a fixed point of load/dump.  ``run_experiment``
executes every grid cell and trial, writes raw per-trial CSVs and one
``aggregate.csv`` whose bytes depend only on the config.
"""
from __future__ import annotations

import copy
import csv
import enum
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import cbf_core, envs, nn, rl, scalar_flow

OUTPUT_DIR_ENV = "CBFPA_OUTPUT_DIR"
JOBS_ENV = "CBFPA_JOBS"
VIOLATION_TOL = 1e-2


class Kind(str, enum.Enum):
    ILLUSTRATIVE_SWEEP = "illustrative_sweep"
    CARTPOLE_PRETRAIN = "cartpole_pretrain"
    CARTPOLE_ADAPT = "cartpole_adapt"
    UNICYCLE_PRETRAIN = "unicycle_pretrain"
    UNICYCLE_ADAPT_GOAL = "unicycle_adapt_goal"
    UNICYCLE_ADAPT_OBSTACLE = "unicycle_adapt_obstacle"
    ORACLE_FUZZ = "oracle_fuzz"


RL_KINDS = {Kind.CARTPOLE_PRETRAIN, Kind.CARTPOLE_ADAPT, Kind.UNICYCLE_PRETRAIN,
            Kind.UNICYCLE_ADAPT_GOAL, Kind.UNICYCLE_ADAPT_OBSTACLE}
ADAPT_METHODS = {"cbfpa": rl.Mode.ADAPT_CBFPA, "morl": rl.Mode.ADAPT_MORL, "bc": rl.Mode.ADAPT_BC,
                 "plain": rl.Mode.ADAPT_PLAIN}

TOP_KEYS = {"kind", "name", "description", "trials", "base_seed", "output_dir", "grid", "flow", "env",
            "pretrain", "train", "stage2", "evaluation", "fuzz"}
GRID_KEYS = {
    Kind.ILLUSTRATIVE_SWEEP: {"method", "w", "gamma_h", "alpha"},
    Kind.CARTPOLE_PRETRAIN: {"method"},
    Kind.UNICYCLE_PRETRAIN: {"method"},
    Kind.CARTPOLE_ADAPT: {"method", "w", "gamma_h", "baseline_w"},
    Kind.UNICYCLE_ADAPT_GOAL: {"method", "w", "gamma_h", "baseline_w"},
    Kind.UNICYCLE_ADAPT_OBSTACLE: {"method", "w", "gamma_h", "baseline_w"},
    Kind.ORACLE_FUZZ: set(),
}
FLOW_KEYS = {"steps": 20000, "theta0": None}
EVAL_KEYS = {"episodes": 5, "horizon": None, "seed": 10_000, "goal_tolerance": 0.2}
FUZZ_KEYS = {"instances": 10_000, "seed": 0, "p_values": list(range(1, 9)), "gamma_values": [0.1, 1.0, 10.0],
             "w_values": [0.01, 1.0, 100.0]}
TRAIN_KEYS = set(rl.TrainConfig.__dataclass_fields__)


# ---------------------------------------------------------------------------
# Diagnostics

@dataclass(frozen=True)
class Diagnostic:
    field: str
    message: str
    line: int | None = None

    def as_dict(self) -> dict:
        return {"field": self.field, "line": self.line, "error": self.message}

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.field}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, diagnostics, source="<config>"):
        self.diagnostics = list(diagnostics)
        self.source = source
        super().__init__(f"{source}: " + "; ".join(str(d) for d in self.diagnostics))


def _line_index(text):
    """Map dotted key paths to 1-based source lines."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                out[f"{prefix}[{i}]"] = v.start_mark.line + 1
                walk(v, f"{prefix}[{i}]")

    if root is not None:
        walk(root, "")
    return out


# ---------------------------------------------------------------------------
# Config

@dataclass
class ExperimentConfig:
    kind: Kind
    name: str
    trials: int = 1
    base_seed: int = 0
    output_dir: str = "results"
    description: str = ""
    grid: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    fuzz: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {
            "kind": self.kind.value, "name": self.name, "description": self.description,
            "trials": self.trials, "base_seed": self.base_seed, "output_dir": self.output_dir,
            "grid": {k: list(v) for k, v in self.grid.items()},
        }
        for key in ("flow", "env", "pretrain", "train", "stage2", "evaluation", "fuzz"):
            if getattr(self, key):
                d[key] = copy.deepcopy(getattr(self, key))
        return d

    def canonical(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=True, default_flow_style=False, width=1000)

    def cells(self) -> list:
        """Grid cells as ordered dicts, keys sorted, values in file order."""
        keys = sorted(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_DIR_ENV)
        return Path(root) / self.name if root else Path(self.output_dir)


def _num(diags, lines, path, value, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
    bad = isinstance(value, bool) or not isinstance(value, (int, float)) or (kind is int and not isinstance(value, int))
    if bad or (isinstance(value, float) and not math.isfinite(value)):
        diags.append(Diagnostic(path, f"expected a finite {kind.__name__}, got {value!r}", lines.get(path)))
        return
    if lo is not None and (value < lo or (lo_open and value == lo)):
        op = ">" if lo_open else ">="
        diags.append(Diagnostic(path, f"must be {op} {lo}, got {value}", lines.get(path)))
    if hi is not None and (value > hi or (hi_open and value == hi)):
        op = "<" if hi_open else "<="
        diags.append(Diagnostic(path, f"must be {op} {hi}, got {value}", lines.get(path)))


RANGES = {
    "w": dict(lo=0.0),
    "baseline_w": dict(lo=0.0),
    "gamma_h": dict(lo=0.0, lo_open=True),
    "alpha": dict(lo=0.0, lo_open=True),
    "alpha_q": dict(lo=0.0, lo_open=True),
    "epsilon": dict(lo=0.0, hi=1.0, lo_open=True, hi_open=True),
    "tau": dict(lo=0.0, hi=1.0, lo_open=True),
    "discount": dict(lo=0.0, hi=1.0),
    "noise_sigma": dict(lo=0.0),
    "ou_theta": dict(lo=0.0),
    "margin": dict(lo=0.0),
    "rl_slack_fraction": dict(lo=0.0),
}
INT_KEYS = {"episodes": 0, "batch_size": 1, "buffer_capacity": 1, "warmup_steps": 0, "critic_warmup_steps": 0,
            "seed": 0, "horizon": 1}


def _check_train(diags, lines, prefix, d):
    if not isinstance(d, dict):
        diags.append(Diagnostic(prefix, "expected a mapping", lines.get(prefix)))
        return
    for k, v in d.items():
        path = f"{prefix}.{k}"
        if k not in TRAIN_KEYS:
            diags.append(Diagnostic(path, "unknown key", lines.get(path)))
        elif k in RANGES:
            _num(diags, lines, path, v, **RANGES[k])
        elif k in INT_KEYS and not (k == "horizon" and v is None):
            _num(diags, lines, path, v, int, lo=INT_KEYS[k])
        elif k in ("optimizer", "actor_optimizer") and v not in ("sgd", "adam"):
            diags.append(Diagnostic(path, f"must be 'sgd' or 'adam', got {v!r}", lines.get(path)))
        elif k == "noise_kind" and v not in ("gaussian", "ou"):
            diags.append(Diagnostic(path, f"must be 'gaussian' or 'ou', got {v!r}", lines.get(path)))
        elif k in ("noise_anneal", "use_targets", "absorbing_terminal") and not isinstance(v, bool):
            diags.append(Diagnostic(path, f"must be true or false, got {v!r}", lines.get(path)))
    if not any(d.field.startswith(prefix + ".") for d in diags):
        try:
            rl.TrainConfig.from_dict(d)
        except (ValueError, TypeError) as exc:
            diags.append(Diagnostic(prefix, str(exc), lines.get(prefix)))


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    lines = _line_index(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError([Diagnostic("<yaml>", str(exc).splitlines()[0], mark.line + 1 if mark else None)], source)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([Diagnostic("<root>", "config must be a mapping", 1)], source)
    diags = []
    missing = [k for k in ("kind", "name") if k not in raw]
    if missing:
        diags.append(Diagnostic("<root>", "missing required keys: " + ", ".join(missing)))
    for k in raw:
        if k not in TOP_KEYS:
            diags.append(Diagnostic(str(k), "unknown key", lines.get(str(k))))
    kind = None
    if "kind" in raw:
        try:
            kind = Kind(raw["kind"])
        except ValueError:
            diags.append(Diagnostic("kind", f"must be one of {[k.value for k in Kind]}, got {raw['kind']!r}",
                                    lines.get("kind")))
    if "name" in raw and not (isinstance(raw["name"], str) and raw["name"]):
        diags.append(Diagnostic("name", "must be a nonempty string", lines.get("name")))
    for key, lo in (("trials", 1), ("base_seed", 0)):
        if key in raw:
            _num(diags, lines, key, raw[key], int, lo=lo)
    if kind is not None:
        _check_grid(diags, lines, kind, raw.get("grid"))
        _check_sections(diags, lines, kind, raw)
    if diags:
        raise ConfigError(diags, source)
    cfg = ExperimentConfig(
        kind=kind, name=raw["name"], trials=int(raw.get("trials", 1)), base_seed=int(raw.get("base_seed", 0)),
        output_dir=str(raw.get("output_dir", f"results/{raw['name']}")), description=str(raw.get("description", "")),
        grid={k: list(v) for k, v in (raw.get("grid") or {}).items()},
    )
    if kind is Kind.ILLUSTRATIVE_SWEEP:
        cfg.flow = {**FLOW_KEYS, **(raw.get("flow") or {})}
    if kind is Kind.ORACLE_FUZZ:
        cfg.fuzz = {**FUZZ_KEYS, **(raw.get("fuzz") or {})}
    if kind in RL_KINDS:
        cfg.env = dict(raw.get("env") or {})
        cfg.pretrain = dict(raw.get("pretrain") or {})
        cfg.train = dict(raw.get("train") or {})
        cfg.stage2 = dict(raw.get("stage2") or {})
        cfg.evaluation = {**EVAL_KEYS, **(raw.get("evaluation") or {})}
        if "method" not in cfg.grid:
            cfg.grid["method"] = ["ddpg"] if kind in (Kind.CARTPOLE_PRETRAIN, Kind.UNICYCLE_PRETRAIN) else ["cbfpa"]
    return cfg


def _check_grid(diags, lines, kind, grid):
    allowed = GRID_KEYS[kind]
    if kind is Kind.ORACLE_FUZZ:
        if grid:
            diags.append(Diagnostic("grid", "oracle_fuzz takes no grid", lines.get("grid")))
        return
    if grid is None:
        if kind is Kind.ILLUSTRATIVE_SWEEP:
            diags.append(Diagnostic("grid", "required for illustrative_sweep"))
        return
    if not isinstance(grid, dict):
        diags.append(Diagnostic("grid", "expected a mapping of key -> list", lines.get("grid")))
        return
    for k, vals in grid.items():
        path = f"grid.{k}"
        if k not in allowed:
            diags.append(Diagnostic(path, f"unknown grid key (allowed: {sorted(allowed)})", lines.get(path)))
            continue
        if not isinstance(vals, list) or not vals:
            diags.append(Diagnostic(path, "must be a nonempty list", lines.get(path)))
            continue
        for i, v in enumerate(vals):
            p = f"{path}[{i}]"
            if k == "method":
                ok = {"cbfpa", "mogd", "gd"} if kind is Kind.ILLUSTRATIVE_SWEEP else (
                    {"ddpg"} if kind in (Kind.CARTPOLE_PRETRAIN, Kind.UNICYCLE_PRETRAIN) else set(ADAPT_METHODS))
                if v not in ok:
                    diags.append(Diagnostic(p, f"must be one of {sorted(ok)}, got {v!r}", lines.get(p)))
            else:
                _num(diags, lines, p, v, **RANGES[k])
    if kind is Kind.ILLUSTRATIVE_SWEEP:
        for k in ("method", "w", "gamma_h", "alpha"):
            if k not in grid:
                diags.append(Diagnostic(f"grid.{k}", "required for illustrative_sweep", lines.get("grid")))


def _check_sections(diags, lines, kind, raw):
    if kind is Kind.ILLUSTRATIVE_SWEEP:
        allowed_sections = {"flow"}
    elif kind is Kind.ORACLE_FUZZ:
        allowed_sections = {"fuzz"}
    elif kind in (Kind.CARTPOLE_PRETRAIN, Kind.UNICYCLE_PRETRAIN):
        allowed_sections = {"env", "pretrain", "evaluation"}
    else:
        allowed_sections = {"env", "pretrain", "train", "evaluation"}
        if kind is Kind.UNICYCLE_ADAPT_OBSTACLE:
            allowed_sections.add("stage2")
    for sec in ("flow", "env", "pretrain", "train", "stage2", "evaluation", "fuzz"):
        if sec in raw and sec not in allowed_sections:
            diags.append(Diagnostic(sec, f"not used by kind {kind.value}", lines.get(sec)))
    if "flow" in raw and "flow" in allowed_sections:
        flow = raw["flow"] or {}
        for k, v in flow.items():
            path = f"flow.{k}"
            if k not in FLOW_KEYS:
                diags.append(Diagnostic(path, "unknown key", lines.get(path)))
            elif k == "steps":
                _num(diags, lines, path, v, int, lo=1)
            elif v is not None and not (isinstance(v, list) and len(v) == 2):
                diags.append(Diagnostic(path, "must be a list of two numbers", lines.get(path)))
    if "fuzz" in raw and "fuzz" in allowed_sections:
        for k, v in (raw["fuzz"] or {}).items():
            path = f"fuzz.{k}"
            if k not in FUZZ_KEYS:
                diags.append(Diagnostic(path, "unknown key", lines.get(path)))
            elif k in ("instances", "seed"):
                _num(diags, lines, path, v, int, lo=1 if k == "instances" else 0)
            elif not (isinstance(v, list) and v):
                diags.append(Diagnostic(path, "must be a nonempty list", lines.get(path)))
    for sec in ("pretrain", "train", "stage2"):
        if sec in raw and sec in allowed_sections:
            _check_train(diags, lines, sec, raw[sec] or {})
    if "evaluation" in raw and "evaluation" in allowed_sections:
        for k, v in (raw["evaluation"] or {}).items():
            path = f"evaluation.{k}"
            if k not in EVAL_KEYS:
                diags.append(Diagnostic(path, "unknown key", lines.get(path)))
            elif k == "goal_tolerance":
                _num(diags, lines, path, v, lo=0.0, lo_open=True)
            elif not (k == "horizon" and v is None):
                _num(diags, lines, path, v, int, lo=1 if k != "seed" else 0)
    if "env" in raw and "env" in allowed_sections:
        kind_name = "cartpole" if kind in (Kind.CARTPOLE_PRETRAIN, Kind.CARTPOLE_ADAPT) else "unicycle"
        try:
            envs.make_env(kind_name, raw["env"] or {})
        except (ValueError, TypeError) as exc:
            diags.append(Diagnostic("env", str(exc), lines.get("env")))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


validate_config = load_config


# ---------------------------------------------------------------------------
# CSV helpers

def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cell_label(cell: dict) -> str:
    return "_".join(f"{k}-{_fmt(v)}" for k, v in cell.items()) or "default"


# ---------------------------------------------------------------------------
# Aggregation

@dataclass
class AggregateReport:
    keys: list
    metrics: list
    rows: list  # (cell dict, {metric: (mean, std, min, max)}, n)

    def header(self) -> list:
        cols = list(self.keys) + ["n_trials"]
        for m in self.metrics:
            cols += [f"{m}_mean", f"{m}_std", f"{m}_min", f"{m}_max"]
        return cols

    def write(self, path) -> None:
        out = []
        for cell, stats, n in self.rows:
            row = [cell[k] for k in self.keys] + [n]
            for m in self.metrics:
                row += list(stats[m])
            out.append(row)
        write_csv(path, self.header(), out)

    def lookup(self, metric, **cell) -> float:
        for c, stats, _ in self.rows:
            if all(_fmt(c[k]) == _fmt(v) for k, v in cell.items()):
                return stats[metric][0]
        raise KeyError(cell)


def summarize(values) -> tuple:
    """``(mean, std, min, max)`` with population std (0 for a single trial)."""
    a = np.asarray(values, dtype=float)
    return float(np.mean(a)), float(np.std(a)), float(np.min(a)), float(np.max(a))


def aggregate(keys, metric_names, per_cell) -> AggregateReport:
    rows = []
    for cell, trials in per_cell:
        stats = {m: summarize([t[m] for t in trials]) for m in metric_names}
        rows.append((cell, stats, len(trials)))
    return AggregateReport(list(keys), list(metric_names), rows)


def read_aggregate(path) -> AggregateReport:
    recs = read_csv(path)
    if not recs:
        raise ValueError(f"{path}: empty aggregate")
    cols = list(recs[0])
    i = cols.index("n_trials")
    keys = cols[:i]
    metrics = [c[:-5] for c in cols[i + 1:] if c.endswith("_mean")]
    rows = []
    for r in recs:
        cell = {k: _parse_scalar(r[k]) for k in keys}
        stats = {m: tuple(float(r[f"{m}_{s}"]) for s in ("mean", "std", "min", "max")) for m in metrics}
        rows.append((cell, stats, int(r["n_trials"])))
    return AggregateReport(keys, metrics, rows)


def _parse_scalar(s):
    try:
        return float(s)
    except ValueError:
        return s


# ---------------------------------------------------------------------------
# Illustrative sweep

FLOW_METRICS = ["final_J", "final_G", "g_bar", "max_excess", "violations", "diverged", "steps_run"]


def _flow_job(args):
    cell, flow, trial, raw_dir = args
    obj = scalar_flow.illustrative_objectives()
    tr = scalar_flow.run_flow(obj, cell["method"], flow["steps"], cell["alpha"], cell["gamma_h"], cell["w"],
                              flow.get("theta0"))
    d = Path(raw_dir) / f"trial{trial}"
    d.mkdir(parents=True, exist_ok=True)
    scalar_flow.write_trace(tr, d)
    excess = tr.constraint_excess(obj.g_ref)
    return {
        "final_J": float(tr.j_values[-1]),
        "final_G": float(tr.g_values[-1]),
        "g_bar": tr.g_bar,
        "max_excess": float(np.max(excess)),
        "violations": int(np.sum(excess > VIOLATION_TOL)),
        "diverged": int(tr.diverged),
        "steps_run": tr.steps,
    }


# ---------------------------------------------------------------------------
# RL experiments

RL_METRICS = {
    "cartpole": ["eval_cost_original", "eval_cost_additional", "pre_eval_cost_original", "pre_eval_cost_additional",
                 "additional_reduction", "surrogate_violations", "diverged"],
    "unicycle": ["reach_fraction", "collision_events", "final_goal_distance", "eval_cost_additional",
                 "pre_reach_fraction", "pre_collision_events", "surrogate_violations", "diverged"],
}
STAGE1_METRICS = ["stage1_reach_fraction", "stage1_collision_events"]


def metric_names(kind: Kind) -> list:
    names = list(RL_METRICS[_env_kind(kind)])
    if kind is Kind.UNICYCLE_ADAPT_OBSTACLE:
        names[-2:-2] = STAGE1_METRICS
    return names


def _env_kind(kind: Kind) -> str:
    return "cartpole" if kind in (Kind.CARTPOLE_PRETRAIN, Kind.CARTPOLE_ADAPT) else "unicycle"


def _make_env(kind: Kind, overrides, task=None):
    overrides = dict(overrides)
    if _env_kind(kind) == "unicycle" and task is not None:
        overrides["task"] = task
    return envs.make_env(_env_kind(kind), overrides)


def evaluation_starts(env, n, seed) -> list:
    """Noise-free evaluation starts; unicycle starts are resampled until collision-free."""
    rng = np.random.default_rng(seed)
    starts = []
    while len(starts) < n:
        x = env.reset(rng).x
        if isinstance(env, envs.Unicycle) and any(
                ob.distance(x[0], x[1]) <= ob.collision_radius for ob in env.params.obstacles):
            continue
        starts.append(x)
    return starts


def evaluate_policy(env, actor, ev) -> list:
    """One record per evaluation episode."""
    horizon = ev["horizon"] or env.horizon
    recs = []
    for i, x0 in enumerate(evaluation_starts(env, ev["episodes"], ev["seed"])):
        r = rl.rollout(env, actor, x0, horizon)
        rec = {"episode": i, "steps": r.steps, "cost_original": r.cost_original,
               "cost_additional_mean": r.cost_additional_mean}
        if isinstance(env, envs.Unicycle):
            p = env.params
            d = np.hypot(r.states[:, 0] - p.goal[0], r.states[:, 1] - p.goal[1])
            rec["min_goal_distance"] = float(d.min())
            rec["final_goal_distance"] = float(d[-1])
            rec["reached"] = int(d.min() <= ev["goal_tolerance"])
            rec["collisions"] = int(sum(envs.unicycle_collisions(p, s, p.task) for s in r.states))
        recs.append(rec)
    return recs


def _eval_summary(env_kind, recs, prefix=""):
    if env_kind == "cartpole":
        return {f"{prefix}eval_cost_original": float(np.median([r["cost_original"] for r in recs])),
                f"{prefix}eval_cost_additional": float(np.mean([r["cost_additional_mean"] for r in recs]))}
    return {f"{prefix}reach_fraction": float(np.mean([r["reached"] for r in recs])),
            f"{prefix}collision_events": float(np.sum([r["collisions"] for r in recs])),
            f"{prefix}final_goal_distance": float(np.mean([r["final_goal_distance"] for r in recs])),
            f"{prefix}eval_cost_additional": float(np.mean([r["cost_additional_mean"] for r in recs]))}


def _write_log(path, log):
    write_csv(path, rl.LOG_COLUMNS, [[getattr(l, c) for c in rl.LOG_COLUMNS] for l in log])


def _write_eval(path, recs):
    header = list(recs[0])
    write_csv(path, header, [[r[k] for k in header] for r in recs])


def _save_bundle(d, stem, bundle):
    for role in ("actor", "critic", "target_actor", "target_critic"):
        nn.save_checkpoint(getattr(bundle, role), d / f"{stem}_{role}.txt")


def _train_cfg(section, seed, cell=None):
    d = dict(section)
    if cell:
        for k in ("w", "gamma_h", "baseline_w"):
            if k in cell:
                d[k] = cell[k]
    d["seed"] = seed
    return rl.TrainConfig.from_dict(d)


def pretrain_policy(env, section, seed) -> rl.TrainResult:
    return rl.train(_train_cfg(section, seed), env, rl.Mode.PRETRAIN)


def fit_critic(env, actor, section, seed) -> nn.Mlp:
    """Policy evaluation: learn a critic for a frozen actor on the original cost."""
    cfg = _train_cfg(section, seed)
    rng = np.random.default_rng(seed)
    fresh = rl.fresh_bundle(env.state_dim, env.action_dim, env.action_bound, rng, cfg.hidden)
    bundle = rl.AgentBundle(actor, fresh.critic, actor, fresh.critic)
    res = rl.train(cfg, env, rl.Mode.FIT_CRITIC, bundle)
    return res.bundle.target_critic


def _rl_trial(args):
    """All grid cells of one trial (they share the pretrained networks)."""
    cfg_dict, trial, out_dir = args
    cfg = parse_config(yaml.safe_dump(cfg_dict))
    seed = cfg.base_seed + trial
    raw = Path(out_dir) / "raw"
    ckpt = Path(out_dir) / "checkpoints"
    raw.mkdir(parents=True, exist_ok=True)
    ckpt.mkdir(parents=True, exist_ok=True)
    kind = cfg.kind
    ek = _env_kind(kind)
    ev = cfg.evaluation
    results = []

    first_task = envs.UnicycleTask.AVOID_ONLY if ek == "unicycle" else None
    goal_task = envs.UnicycleTask.AVOID_PLUS_GOAL
    env_pre = _make_env(kind, cfg.env, first_task)
    stem = f"trial{trial}_pretrain"
    try:
        pre = pretrain_policy(env_pre, cfg.pretrain, seed)
    except rl.DivergenceError:
        return [(cell, None) for cell in cfg.cells()]
    _write_log(raw / f"{stem}_train.csv", pre.log)
    _save_bundle(ckpt, stem, pre.bundle)

    if kind in (Kind.CARTPOLE_PRETRAIN, Kind.UNICYCLE_PRETRAIN):
        recs = evaluate_policy(env_pre, pre.policy, ev)
        _write_eval(raw / f"{stem}_eval.csv", recs)
        m = _eval_summary(ek, recs)
        m.update(_eval_summary(ek, recs, "pre_"))
        return [(cell, _complete(kind, m, 0)) for cell in cfg.cells()]

    # the reference policy/critic that adaptation must preserve
    ref_actor, ref_critic = pre.bundle.pretrained_actor, pre.bundle.pretrained_critic
    env_adapt = _make_env(kind, cfg.env, goal_task if ek == "unicycle" else None)
    adapt_seed = seed + 100
    adapt_section = cfg.train
    if kind is Kind.UNICYCLE_ADAPT_OBSTACLE:
        # stage 1: goal adaptation with CBF-PA (same seed/settings as the goal experiment's cbfpa cell);
        # stage 2 adapts the result around the second obstacle
        b1 = rl.adaptation_bundle(ref_actor, ref_critic, np.random.default_rng(adapt_seed))
        try:
            stage1 = rl.train(_train_cfg(cfg.train, adapt_seed), env_adapt, rl.Mode.ADAPT_CBFPA, b1)
        except rl.DivergenceError:
            return [(cell, None) for cell in cfg.cells()]
        _write_log(raw / f"trial{trial}_stage1_train.csv", stage1.log)
        _save_bundle(ckpt, f"trial{trial}_stage1", stage1.bundle)
        s1 = evaluate_policy(env_adapt, stage1.policy, ev)
        _write_eval(raw / f"trial{trial}_stage1_eval.csv", s1)
        stage1_m = {"stage1_" + k: v for k, v in _eval_summary(ek, s1).items()}
        env_adapt = _make_env(kind, cfg.env, envs.UnicycleTask.TWO_OBSTACLES)
        ref_actor = stage1.policy
        ref_critic = fit_critic(env_adapt, ref_actor, cfg.pretrain, seed + 200)
        adapt_section = {**cfg.train, **cfg.stage2}
        adapt_seed = seed + 300
        nn.save_checkpoint(ref_critic, ckpt / f"trial{trial}_stage1_fitted_critic.txt")

    pre_recs = evaluate_policy(env_adapt, ref_actor, ev)
    _write_eval(raw / f"trial{trial}_reference_eval.csv", pre_recs)
    pre_m = _eval_summary(ek, pre_recs, "pre_")
    if kind is Kind.UNICYCLE_ADAPT_OBSTACLE:
        pre_m.update(stage1_m)

    for cell in cfg.cells():
        stem = f"{cell_label(cell)}_trial{trial}"
        mode = ADAPT_METHODS[cell["method"]]
        b = rl.adaptation_bundle(ref_actor, ref_critic, np.random.default_rng(adapt_seed))
        try:
            res = rl.train(_train_cfg(adapt_section, adapt_seed, cell), env_adapt, mode, b)
        except rl.DivergenceError:
            results.append((cell, None))
            continue
        _write_log(raw / f"{stem}_train.csv", res.log)
        _save_bundle(ckpt, stem, res.bundle)
        recs = evaluate_policy(env_adapt, res.policy, ev)
        _write_eval(raw / f"{stem}_eval.csv", recs)
        m = dict(pre_m)
        m.update(_eval_summary(ek, recs))
        m["surrogate_violations"] = float(sum(l.surrogate_violations for l in res.log))
        results.append((cell, _complete(kind, m, 0)))
    return results


def _complete(kind, m, diverged):
    out = {k: m.get(k, 0.0) for k in metric_names(kind)}
    if _env_kind(kind) == "cartpole":
        pre = m.get("pre_eval_cost_additional", 0.0)
        out["additional_reduction"] = (1.0 - m["eval_cost_additional"] / pre) if pre > 0 else 0.0
    out["diverged"] = diverged
    return out


def _nan_metrics(names):
    d = {m: math.nan for m in names}
    d["diverged"] = 1
    return d


# ---------------------------------------------------------------------------
# Runner

def _jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(a) for a in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs=None) -> AggregateReport:
    """Execute every cell x trial; seeds are ``base_seed + trial``."""
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    jobs = _jobs() if jobs is None else jobs
    (out / "config.yaml").write_text(cfg.canonical())

    if cfg.kind is Kind.ORACLE_FUZZ:
        f = cfg.fuzz
        rows = []
        for trial in range(cfg.trials):
            rep = cbf_core.fuzz_oracle(f["instances"], f["seed"] + cfg.base_seed + trial, f["p_values"],
                                       f["gamma_values"], f["w_values"])
            rows.append({"max_abs_da": rep.max_abs_da, "max_abs_dc": rep.max_abs_dc,
                         "min_residual": rep.min_residual, "ok": int(rep.ok()),
                         **{f"n_{k.lower()}": v for k, v in rep.branch_counts.items()}})
        names = list(rows[0])
        write_csv(out / "raw_fuzz.csv", ["trial"] + names, [[i] + [r[n] for n in names] for i, r in enumerate(rows)])
        report = aggregate(["kind"], names, [({"kind": "oracle_fuzz"}, rows)])
        report.write(out / "aggregate.csv")
        return report

    cells = cfg.cells()
    keys = sorted(cfg.grid)
    if cfg.kind is Kind.ILLUSTRATIVE_SWEEP:
        raw = out / "raw"
        args = [(cell, cfg.flow, t, str(raw)) for cell in cells for t in range(cfg.trials)]
        results = _map(_flow_job, args, jobs)
        per_cell = [(cell, results[i * cfg.trials:(i + 1) * cfg.trials]) for i, cell in enumerate(cells)]
        metrics = FLOW_METRICS
    else:
        metrics = metric_names(cfg.kind)
        args = [(cfg.as_dict(), t, str(out)) for t in range(cfg.trials)]
        by_trial = _map(_rl_trial, args, jobs)
        per_cell = []
        for i, cell in enumerate(cells):
            trials = []
            for tr in by_trial:
                m = tr[i][1]
                trials.append(_nan_metrics(metrics) if m is None else m)
            per_cell.append((cell, trials))
    write_csv(out / "raw_metrics.csv", keys + ["trial"] + metrics,
              [[cell[k] for k in keys] + [t] + [m[n] for n in metrics]
               for cell, trials in per_cell for t, m in enumerate(trials)])
    report = aggregate(keys, metrics, per_cell)
    report.write(out / "aggregate.csv")
    return report


# ---------------------------------------------------------------------------
# Method comparison (illustrative sweeps)

COMPARE_METRICS = ("final_J", "g_bar", "violations")


def compare_methods(reports) -> list:
    """Per (w, gamma_h, alpha) row with each method's metrics and a CBF-PA-vs-MOGD Gbar flag.

    ``reports`` is an iterable of :class:`AggregateReport` from illustrative
    sweeps; together they must cover the same cells for every method.
    """
    table = {}
    for rep in reports:
        if "method" not in rep.keys:
            raise ValueError("comparison needs reports with a 'method' column")
        for cell, stats, _ in rep.rows:
            key = tuple(_fmt(cell[k]) for k in ("w", "gamma_h", "alpha"))
            table.setdefault(key, {})[cell["method"]] = {m: stats[m][0] for m in COMPARE_METRICS}
    if not table:
        raise ValueError("no cells to compare")
    methods = sorted({m for row in table.values() for m in row})
    for key, row in table.items():
        if set(row) != set(methods):
            raise ValueError(f"grid mismatch at w={key[0]} gamma_h={key[1]} alpha={key[2]}: "
                             f"methods {sorted(row)} vs {methods}")
    out = []
    for key in sorted(table, key=lambda k: tuple(float(v) for v in k)):
        row = {"w": float(key[0]), "gamma_h": float(key[1]), "alpha": float(key[2])}
        for m in methods:
            for metric in COMPARE_METRICS:
                row[f"{m}_{metric}"] = table[key][m][metric]
        if "cbfpa" in methods and "mogd" in methods:
            row["cbfpa_g_bar_le_mogd"] = int(table[key]["cbfpa"]["g_bar"] <= table[key]["mogd"]["g_bar"])
        out.append(row)
    return out


def write_comparison(rows, path) -> None:
    header = list(rows[0])
    write_csv(path, header, [[r[h] for h in header] for r in rows])
