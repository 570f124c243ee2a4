"""Command-line experiment runner.

    hgpmpc fit-gps          --config cfg.json
    hgpmpc run              --config cfg.json [--seed-base 0] [--workers 1] [--debug-trace]
    hgpmpc ablate-alpha-min --config cfg.json [--alpha-min 0.1,0.5,0.9]

Configs are JSON documents carrying ``"schema": "hgpmpc.experiment/1"``.
Unknown keys are rejected. Relative paths resolve against the config file's
directory. Exit codes: 0 success, 2 config error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .controllers import ControllerConfig, MpcController
from .environments import (Environment, TaskSpec, export_mode_grid_csv, generate_reference, make_env,
                           sample_training_data)
from .gp import GpFitError, HybridResidualModel, fit_hybrid, load_hyperparams, read_dataset_csv, \
    save_hyperparams, write_dataset_csv
from .harness import (ExperimentSettings, RunProtocol, RunSpec, map_jobs, per_run_table, run_closed_loop,
                      run_protocol_seed, write_rows_csv, write_trajectory_csv)
from .modemap import TradeoffConfig, save_mapping_state
from .qp import QpInfeasible

SCHEMA = "hgpmpc.experiment/1"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
log = logging.getLogger("hgpmpc")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

_TOP_KEYS = {"schema", "name", "study", "environment", "gp", "task", "controllers", "run_index", "seeds",
             "output_dir", "write_trajectories", "grid_n", "protocol", "tradeoff", "training", "alpha_min",
             "weights", "reference_N"}
_CTRL_KEYS = {"name", "kind", "N", "p_x", "shrink", "params", "prune", "max_horizon"}
_GP_KEYS = {"source", "path", "data", "n_per_mode", "seed"}
_TASK_KEYS = {"kind", "T", "center", "radii", "points", "freqs"}
_PROTO_KEYS = {"runs", "shift_run", "nominal_N"}
_RUN_KEYS = {"task", "controller", "retrain", "repeat"}
_TRAIN_KEYS = {"epochs", "step_size", "optimizer", "hidden"}
_WEIGHT_KEYS = {"Q_diag", "R_diag"}


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}; allowed keys are {sorted(allowed)}")


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


@dataclass
class GpSource:
    source: str = "fit"              # fit | file
    path: Path | None = None         # hyperparameter JSON for source=file
    data: Path | None = None         # training CSV; synthesized from the environment when absent
    n_per_mode: int = 200
    seed: int = 0


@dataclass
class NamedController:
    name: str
    cfg: ControllerConfig


@dataclass
class ExperimentConfig:
    name: str
    study: str                        # closed_loop | protocol
    env: Environment
    env_id: str
    gp: GpSource
    controllers: list
    output_dir: Path
    seeds: int = 1
    task: TaskSpec | None = None
    run_index: int = 1
    protocol: RunProtocol | None = None
    nominal_N: int | None = None
    tradeoff: TradeoffConfig = TradeoffConfig()
    training: dict = field(default_factory=dict)
    alpha_min: list = field(default_factory=list)
    write_trajectories: bool = False
    grid_n: int = 100
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    reference_N: int = 20


def _parse_task(doc, where) -> TaskSpec:
    _check_keys(doc, _TASK_KEYS, where)
    if "kind" not in doc or "T" not in doc:
        raise ConfigError(f"{where}: 'kind' and 'T' are required")
    try:
        return TaskSpec(**{k: _tuplify(v) for k, v in doc.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_controller(doc, where) -> NamedController:
    _check_keys(doc, _CTRL_KEYS, where)
    doc = dict(doc)
    name = doc.pop("name", None) or doc.get("kind", "exo")
    N = doc.get("N", 30)
    if not isinstance(N, int) or N < 1:
        raise ConfigError(f"{where}.N = {N!r}: the horizon must be an integer >= 1")
    p_x = doc.get("p_x", 0.99)
    if not isinstance(p_x, (int, float)) or not 0.5 <= p_x < 1.0:
        raise ConfigError(f"{where}.p_x = {p_x!r}: the satisfaction probability must lie in [0.5, 1), "
                          "e.g. 0.9 or 0.99")
    try:
        return NamedController(str(name), ControllerConfig(**doc))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(doc: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a config document; raises ConfigError before any computation."""
    base = Path(base_dir)
    _check_keys(doc, _TOP_KEYS, "config")
    if doc.get("schema") != SCHEMA:
        raise ConfigError(f"config: 'schema' must be {SCHEMA!r}, got {doc.get('schema')!r}")
    study = doc.get("study", "closed_loop")
    if study not in ("closed_loop", "protocol"):
        raise ConfigError(f"config.study = {study!r}: use 'closed_loop' or 'protocol'")

    env_doc = doc.get("environment")
    if env_doc is None:
        raise ConfigError("config: 'environment' is required, e.g. {\"id\": \"lti\"}")
    _check_keys(env_doc, {"id", "params"}, "environment")
    env_id = env_doc.get("id")
    params = {k: _tuplify(v) for k, v in (env_doc.get("params") or {}).items()}
    if study == "protocol" and "shift_run" in (doc.get("protocol") or {}):
        params["shift_run"] = doc["protocol"]["shift_run"]
    try:
        proto_env = make_env(env_id)
        known = {f.name for f in dataclasses.fields(proto_env)}
        bad = sorted(set(params) - known)
        if bad:
            raise ConfigError(f"environment.params: unknown key(s) {bad} for {env_id!r}")
        env = make_env(env_id, **params)
    except ValueError as exc:
        raise ConfigError(f"environment: {exc}") from None

    gp_doc = doc.get("gp", {})
    _check_keys(gp_doc, _GP_KEYS, "gp")
    gp = GpSource(source=gp_doc.get("source", "fit"), n_per_mode=int(gp_doc.get("n_per_mode", 200)),
                  seed=int(gp_doc.get("seed", 0)))
    if gp.source not in ("fit", "file"):
        raise ConfigError(f"gp.source = {gp.source!r}: use 'fit' or 'file'")
    if gp_doc.get("data"):
        gp.data = base / gp_doc["data"]
        if not gp.data.exists():
            raise ConfigError(f"gp.data: training CSV {gp.data} does not exist")
    if gp.source == "file":
        if not gp_doc.get("path"):
            raise ConfigError("gp.path is required when gp.source is 'file' (run fit-gps first)")
        gp.path = base / gp_doc["path"]
        if not gp.path.exists():
            raise ConfigError(f"gp.path: GP bank {gp.path} does not exist (run fit-gps first)")
    if gp.n_per_mode < 1:
        raise ConfigError("gp.n_per_mode must be >= 1")

    ctrl_docs = doc.get("controllers") or []
    if not isinstance(ctrl_docs, list) or not ctrl_docs:
        raise ConfigError("config: 'controllers' must be a non-empty list")
    controllers = [_parse_controller(c, f"controllers[{i}]") for i, c in enumerate(ctrl_docs)]
    names = [c.name for c in controllers]
    if len(set(names)) != len(names):
        raise ConfigError(f"controllers: names must be unique, got {names}")

    seeds = doc.get("seeds", 1)
    if not isinstance(seeds, int) or seeds < 1:
        raise ConfigError(f"config.seeds = {seeds!r}: must be an integer >= 1")

    Q = R = None
    if "weights" in doc:
        _check_keys(doc["weights"], _WEIGHT_KEYS, "weights")
        if "Q_diag" in doc["weights"]:
            Q = np.diag(np.asarray(doc["weights"]["Q_diag"], float))
            if Q.shape != (env.state_dim, env.state_dim):
                raise ConfigError(f"weights.Q_diag needs {env.state_dim} entries")
        if "R_diag" in doc["weights"]:
            R = np.diag(np.asarray(doc["weights"]["R_diag"], float))
            if R.shape != (env.input_dim, env.input_dim):
                raise ConfigError(f"weights.R_diag needs {env.input_dim} entries")

    tr_doc = doc.get("tradeoff", {})
    _check_keys(tr_doc, {f.name for f in dataclasses.fields(TradeoffConfig)}, "tradeoff")
    try:
        tradeoff = TradeoffConfig(**tr_doc)
    except ValueError as exc:
        raise ConfigError(f"tradeoff: {exc}") from None
    training = doc.get("training", {})
    _check_keys(training, _TRAIN_KEYS, "training")
    training = {k: (_tuplify(v) if k == "hidden" else v) for k, v in training.items()}
    if training.get("optimizer", "gd") not in ("gd", "adam"):
        raise ConfigError("training.optimizer must be 'gd' or 'adam'")

    alpha = doc.get("alpha_min", [])
    if not isinstance(alpha, list) or any(not isinstance(a, (int, float)) or not 0 < a <= 1 for a in alpha):
        raise ConfigError("alpha_min must be a list of numbers in (0, 1]")

    cfg = ExperimentConfig(
        name=str(doc.get("name", "experiment")), study=study, env=env, env_id=env_id, gp=gp,
        controllers=controllers, output_dir=base / doc.get("output_dir", "out"), seeds=seeds,
        run_index=int(doc.get("run_index", 1)), tradeoff=tradeoff, training=training,
        alpha_min=[float(a) for a in alpha], write_trajectories=bool(doc.get("write_trajectories", False)),
        grid_n=int(doc.get("grid_n", 100)), Q=Q, R=R, reference_N=int(doc.get("reference_N", 20)))

    if study == "closed_loop":
        if "task" not in doc:
            raise ConfigError("closed_loop study needs a 'task'")
        cfg.task = _parse_task(doc["task"], "task")
        if any(c.cfg.kind == "minlp" for c in controllers) and env.region_boxes(cfg.run_index) is None:
            raise ConfigError(f"environment {env_id!r} has no polytopic regions; drop the minlp controller")
    else:
        p_doc = doc.get("protocol")
        if p_doc is None:
            raise ConfigError("protocol study needs a 'protocol' block")
        _check_keys(p_doc, _PROTO_KEYS, "protocol")
        runs = []
        for i, r in enumerate(p_doc.get("runs") or []):
            _check_keys(r, _RUN_KEYS, f"protocol.runs[{i}]")
            if r.get("controller", "main") not in ("nominal", "main"):
                raise ConfigError(f"protocol.runs[{i}].controller must be 'nominal' or 'main'")
            spec = RunSpec(_parse_task(r.get("task", {}), f"protocol.runs[{i}].task"),
                           r.get("controller", "main"), bool(r.get("retrain", True)))
            runs.extend([spec] * int(r.get("repeat", 1)))
        try:
            cfg.protocol = RunProtocol(runs, shift_run=int(p_doc.get("shift_run", 4)))
        except ValueError as exc:
            raise ConfigError(f"protocol: {exc}") from None
        cfg.nominal_N = p_doc.get("nominal_N")
        if any(c.cfg.kind == "minlp" for c in controllers):
            raise ConfigError("the repetitive protocol supports exo/endo controllers only")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc, path.parent)


# ---------------------------------------------------------------------------
# GP bank
# ---------------------------------------------------------------------------

def _training_data(cfg: ExperimentConfig):
    if cfg.gp.data is not None:
        data = read_dataset_csv(cfg.gp.data)
        if data.d.shape[1] != cfg.env.residual_dim:
            raise ConfigError(f"{cfg.gp.data}: expected {cfg.env.residual_dim} residual columns")
        return data, cfg.gp.data
    return sample_training_data(cfg.env, cfg.gp.n_per_mode, cfg.gp.seed), None


def cmd_fit_gps(cfg: ExperimentConfig) -> Path:
    """Fit one bank per mode and write hyperparameters plus the data reference."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    data, src = _training_data(cfg)
    if src is None:
        src = out / "training_data.csv"
        write_dataset_csv(src, data)
    model = fit_hybrid(data, cfg.env.split.yg_idx, cfg.env.Bg, cfg.env.mode_count)
    path = out / "gp_bank.json"
    rel = Path(src).resolve()
    try:
        rel = rel.relative_to(out.resolve())
    except ValueError:
        pass
    save_hyperparams(path, model, environment=cfg.env_id, data=str(rel), samples=len(data))
    log.info("wrote %s (%d modes, %d samples)", path, model.mode_count, len(data))
    return path


def load_model(cfg: ExperimentConfig) -> HybridResidualModel:
    if cfg.gp.source == "fit":
        data, _ = _training_data(cfg)
        return fit_hybrid(data, cfg.env.split.yg_idx, cfg.env.Bg, cfg.env.mode_count)
    hps, doc = load_hyperparams(cfg.gp.path)
    data_path = cfg.gp.data or (cfg.gp.path.parent / doc.get("data", ""))
    if not Path(data_path).is_file():
        raise ConfigError(f"{cfg.gp.path}: referenced training CSV {data_path} does not exist")
    data = read_dataset_csv(data_path)
    if len(hps) != cfg.env.mode_count:
        raise ConfigError(f"{cfg.gp.path}: {len(hps)} banks for a {cfg.env.mode_count}-mode environment")
    return fit_hybrid(data, cfg.env.split.yg_idx, cfg.env.Bg, cfg.env.mode_count, hps)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ["controller", "kind", "N", "p_x", "shrink", "n_seeds", "cl_cost_mean", "cl_cost_std",
                   "violations_mean", "fallbacks", "mean_ol_ms", "mean_prep_ms"]
TIMING_COLUMNS = {"mean_ol_ms", "mean_prep_ms"}


def _controller_cfg(cfg: ExperimentConfig, nc: NamedController) -> ControllerConfig:
    c = replace(nc.cfg)
    c.Q = None if cfg.Q is None else cfg.Q.copy()
    c.R = None if cfg.R is None else cfg.R.copy()
    return c


def _cl_job(args):
    env, ctrl, ref, run_index, seed, trace_dir = args
    return run_closed_loop(env, ctrl, ref, run_index=run_index, seed=seed, trace_dir=trace_dir)


def _seeds(cfg: ExperimentConfig, seed_base: int) -> list[int]:
    return [seed_base + i for i in range(cfg.seeds)]


def run_closed_loop_study(cfg: ExperimentConfig, model, seed_base=0, workers=1, debug_trace=False):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = None
    if debug_trace:
        trace_dir = out / "trace"
        trace_dir.mkdir(exist_ok=True)
    seeds = _seeds(cfg, seed_base)
    summary, per_seed = [], []
    for nc in cfg.controllers:
        ctrl = MpcController(cfg.env, _controller_cfg(cfg, nc), model if nc.cfg.kind != "nominal" else None)
        ref = generate_reference(cfg.env, cfg.task, ctrl.cfg.Q, ctrl.cfg.R, N=cfg.reference_N)
        jobs = [(cfg.env, ctrl, ref, cfg.run_index, s, None if trace_dir is None else str(trace_dir / nc.name))
                for s in seeds]
        if trace_dir is not None:
            (trace_dir / nc.name).mkdir(exist_ok=True)
        results = map_jobs(_cl_job, jobs, workers)
        costs = np.array([r.cl_cost for r in results])
        summary.append({
            "controller": nc.name, "kind": nc.cfg.kind, "N": nc.cfg.N, "p_x": nc.cfg.p_x,
            "shrink": nc.cfg.shrink, "n_seeds": len(results), "cl_cost_mean": float(costs.mean()),
            "cl_cost_std": float(costs.std(ddof=1)) if len(costs) > 1 else 0.0,
            "violations_mean": float(np.mean([r.violations for r in results])),
            "fallbacks": int(sum(r.fallbacks for r in results)),
            "mean_ol_ms": float(np.mean(np.concatenate([r.ol_ms for r in results]))),
            "mean_prep_ms": float(np.mean(np.concatenate([r.prep_ms for r in results]))),
        })
        for r in results:
            per_seed.append({"controller": nc.name, "seed": r.seed, "cl_cost": r.cl_cost,
                             "violations": r.violations, "fallbacks": r.fallbacks,
                             "mean_ol_ms": float(r.ol_ms.mean()), "mean_prep_ms": float(r.prep_ms.mean())})
            if cfg.write_trajectories:
                (out / "trajectories").mkdir(exist_ok=True)
                write_trajectory_csv(out / "trajectories" / f"{nc.name}_seed{r.seed}.csv", r)
        log.info("%s: cost %.3f +- %.3f, violations %.2f, OL %.1f ms", nc.name, summary[-1]["cl_cost_mean"],
                 summary[-1]["cl_cost_std"], summary[-1]["violations_mean"], summary[-1]["mean_ol_ms"])
    write_rows_csv(out / "summary.csv", summary, SUMMARY_COLUMNS)
    write_rows_csv(out / "per_seed.csv", per_seed)
    export_mode_grid_csv(cfg.env, out / "mode_grid.csv", (cfg.run_index,), cfg.grid_n)
    return summary


def _settings(cfg: ExperimentConfig, model, nc: NamedController, tradeoff=None) -> ExperimentSettings:
    return ExperimentSettings(cfg.env, model, cfg.protocol, _controller_cfg(cfg, nc),
                              tradeoff or cfg.tradeoff, nominal_N=cfg.nominal_N, label=nc.name,
                              **cfg.training)


def _protocol_job(args):
    settings, seed, keep, trace_dir = args
    snaps = [] if keep else None
    rows = run_protocol_seed(settings, seed, snaps, trace_dir=trace_dir)
    return rows, snaps


def _run_protocol(cfg, model, nc, seeds, workers, tradeoff=None, keep=False, trace_dir=None):
    settings = _settings(cfg, model, nc, tradeoff)
    out = map_jobs(_protocol_job, [(settings, s, keep, trace_dir) for s in seeds], workers)
    rows = [r for rs, _ in out for r in rs]
    return rows, [s for _, s in out]


PER_RUN_COLUMNS = ["run", "controller", "seed", "cl_cost", "violations", "mean_ol_ms", "accuracy", "fallbacks"]


def run_protocol_study(cfg: ExperimentConfig, model, seed_base=0, workers=1, debug_trace=False):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(cfg, seed_base)
    trace_dir = None
    if debug_trace:
        trace_dir = out / "trace"
        trace_dir.mkdir(exist_ok=True)
    all_rows, table = [], []
    n_runs = len(cfg.protocol.runs)
    for i, nc in enumerate(cfg.controllers):
        if trace_dir is not None:
            (trace_dir / nc.name).mkdir(exist_ok=True)
        rows, snaps = _run_protocol(cfg, model, nc, seeds, workers, keep=True,
                                    trace_dir=None if trace_dir is None else str(trace_dir / nc.name))
        all_rows += rows
        table += per_run_table(rows)
        (out / "mapping").mkdir(exist_ok=True)
        for seed, sn in zip(seeds, snaps):
            _, clf, store, _ = sn[-1]
            save_mapping_state(out / "mapping" / f"{nc.name}_seed{seed}.json", clf, store)
            if cfg.write_trajectories:
                (out / "trajectories").mkdir(exist_ok=True)
                for r, _, _, res in sn:
                    write_trajectory_csv(out / "trajectories" / f"{nc.name}_seed{seed}_run{r}.csv", res)
        if i == 0:
            export_mode_grid_csv(cfg.env, out / "mode_grid.csv", tuple(range(1, n_runs + 1)), cfg.grid_n,
                                 {r: clf for r, clf, _, _ in snaps[0]})
        for row in table[-n_runs:]:
            log.info("%s run %d: cost %.3f, accuracy %.3f", nc.name, row["run"], row["cl_cost_mean"],
                     row["accuracy_mean"])
    write_rows_csv(out / "per_run.csv", all_rows, PER_RUN_COLUMNS)
    write_rows_csv(out / "per_run_summary.csv", table)
    return table


def cmd_run(cfg: ExperimentConfig, seed_base=0, workers=1, debug_trace=False):
    model = load_model(cfg)
    if cfg.study == "closed_loop":
        return run_closed_loop_study(cfg, model, seed_base, workers, debug_trace)
    return run_protocol_study(cfg, model, seed_base, workers, debug_trace)


ABLATION_COLUMNS = ["alpha_min"] + PER_RUN_COLUMNS


def cmd_ablate_alpha_min(cfg: ExperimentConfig, alphas=None, seed_base=0, workers=1):
    """Repeat the protocol for every alpha_min with the first configured controller."""
    if cfg.study != "protocol":
        raise ConfigError("ablate-alpha-min needs a protocol study config")
    alphas = list(alphas if alphas else cfg.alpha_min)
    if not alphas:
        raise ConfigError("no alpha_min values: set 'alpha_min' in the config or pass --alpha-min")
    for a in alphas:
        if not 0 < a <= cfg.tradeoff.alpha_max:
            raise ConfigError(f"alpha_min {a} must lie in (0, alpha_max={cfg.tradeoff.alpha_max}]")
    model = load_model(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(cfg, seed_base)
    nc = cfg.controllers[0]
    rows, table = [], []
    for a in alphas:
        r_a, _ = _run_protocol(cfg, model, nc, seeds, workers, replace(cfg.tradeoff, alpha_min=a))
        rows += [{"alpha_min": a, **r} for r in r_a]
        table += [{"alpha_min": a, **t} for t in per_run_table(r_a)]
        log.info("alpha_min %.2f done", a)
    write_rows_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)
    write_rows_csv(out / "ablation_summary.csv", table)
    return rows


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgpmpc", description="Hybrid GP-MPC experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("fit-gps", "fit and serialize the per-mode GP banks"),
                        ("run", "run the configured experiment"),
                        ("ablate-alpha-min", "repeat the protocol for several alpha_min values")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path, help="experiment config (JSON)")
        s.add_argument("--seed-base", type=int, default=0, help="first seed; seeds are base..base+count-1")
        s.add_argument("--workers", type=int, default=1, help="parallel worker processes over seeds")
        s.add_argument("--debug-trace", action="store_true", help="dump per-solve SQP traces as CSV")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "ablate-alpha-min":
            s.add_argument("--alpha-min", type=str, default=None,
                           help="comma-separated values, overriding the config list")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config)
        if args.command == "fit-gps":
            cmd_fit_gps(cfg)
        elif args.command == "run":
            cmd_run(cfg, args.seed_base, args.workers, args.debug_trace)
        else:
            alphas = None
            if args.alpha_min:
                try:
                    alphas = [float(a) for a in args.alpha_min.split(",")]
                except ValueError:
                    raise ConfigError(f"--alpha-min {args.alpha_min!r}: expected comma-separated numbers")
            cmd_ablate_alpha_min(cfg, alphas, args.seed_base, args.workers)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (QpInfeasible, GpFitError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        # malformed training CSVs and similar input problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
