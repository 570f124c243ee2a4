"""Closed-loop simulation, metrics and the repetitive-task protocol."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import ControllerConfig, MpcController
from .environments import Environment, Reference, TaskSpec, generate_reference, step_truth, workspace_grid
from .gp import HybridResidualModel
from .modemap import ModeClassifier, PriorDensityStore, TradeoffConfig, iterate


@dataclass
class ClosedLoopResult:
    states: np.ndarray
    inputs: np.ndarray
    ol_ms: np.ndarray
    prep_ms: np.ndarray
    cl_cost: float
    violations: int
    seed: int
    fallbacks: int = 0
    statuses: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.inputs)


def cl_cost(states, inputs, x_ref, Q, R) -> float:
    """Running Q/R-weighted sum over steps 0..T-1 plus the terminal Q term."""
    states = np.asarray(states, dtype=float)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    E = states - np.asarray(x_ref, dtype=float)[:len(states)]
    T = len(inputs)
    run = np.einsum("ki,ij,kj->", E[:T], Q, E[:T]) + np.einsum("ki,ij,kj->", inputs, R, inputs)
    return float(run + E[T] @ Q @ E[T])


def count_violations(states, low, high, tol: float = 1e-9) -> int:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    bad = (states < np.asarray(low) - tol) | (states > np.asarray(high) + tol)
    return int(bad.any(axis=1).sum())


def run_closed_loop(env: Environment, controller: MpcController, reference: Reference,
                    T: int | None = None, run_index: int = 1, seed: int = 0, x0=None,
                    rng: np.random.Generator | None = None, trace_dir=None) -> ClosedLoopResult:
    """Receding-horizon execution against the true system.

    An infeasible solve falls back to the previous plan shifted by one step
    (holding its last input); with no previous plan the reference input is
    used.
    """
    T = reference.T if T is None else T
    N = controller.cfg.N
    rng = np.random.default_rng(seed) if rng is None else rng
    x = np.asarray(reference.x[0] if x0 is None else x0, dtype=float).copy()
    xs, us, ol, prep, statuses = [x.copy()], [], [], [], []
    plan = None
    fallbacks = 0
    lo, hi = np.asarray(env.u_low), np.asarray(env.u_high)
    for k in range(T):
        xr, ur = reference.window(k, N)
        warm = ur if plan is None else np.vstack([plan[1:], plan[-1:]])
        res, p_ms = controller.plan(x, xr, ur, run_index, warm, trace=trace_dir is not None)
        if trace_dir is not None:
            from .controllers import dump_trace_csv
            dump_trace_csv(f"{trace_dir}/solve_run{run_index}_seed{seed}_step{k:04d}.csv", res)
        ol.append(res.wall_ms)
        prep.append(p_ms)
        statuses.append(res.status)
        if res.status == "infeasible" or not res.feasible:
            fallbacks += 1
            plan = warm.copy()
        else:
            plan = res.inputs.copy()
        u = np.clip(plan[0], lo, hi)
        us.append(u)
        x = step_truth(env, x, u, run_index, rng)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"state diverged at step {k}")
        xs.append(x.copy())
    xs, us = np.array(xs), np.array(us)
    x_ref = reference.x[np.arange(T + 1) % reference.T] if reference.periodic and T > reference.T \
        else reference.x[np.minimum(np.arange(T + 1), reference.T)]
    cost = cl_cost(xs, us, x_ref, controller.cfg.Q, controller.cfg.R)
    viol = count_violations(xs, env.x_low, env.x_high)
    return ClosedLoopResult(xs, us, np.array(ol), np.array(prep), cost, viol, seed, fallbacks, statuses)


def write_trajectory_csv(path, result: ClosedLoopResult) -> None:
    n, m = result.states.shape[1], result.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"x_{i+1}" for i in range(n)] + [f"u_{i+1}" for i in range(m)])
        for k, x in enumerate(result.states):
            u = result.inputs[k] if k < result.T else np.full(m, np.nan)
            w.writerow([k] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


# ---------------------------------------------------------------------------
# many seeds
# ---------------------------------------------------------------------------

def _cl_job(args):
    env, controller, reference, T, run_index, seed = args
    return run_closed_loop(env, controller, reference, T, run_index, seed)


def map_jobs(fn, jobs, workers: int = 1):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def run_seeds(env, controller, reference, seeds, T=None, run_index=1, workers=1):
    return map_jobs(_cl_job, [(env, controller, reference, T, run_index, s) for s in seeds], workers)


def summarize(results) -> dict:
    costs = np.array([r.cl_cost for r in results])
    return {
        "cl_cost_mean": float(costs.mean()),
        "cl_cost_std": float(costs.std(ddof=1)) if len(costs) > 1 else 0.0,
        "violations_mean": float(np.mean([r.violations for r in results])),
        "ol_ms_mean": float(np.mean(np.concatenate([r.ol_ms for r in results]))),
        "prep_ms_mean": float(np.mean(np.concatenate([r.prep_ms for r in results]))),
        "fallbacks": int(sum(r.fallbacks for r in results)),
        "n": len(results),
    }


# ---------------------------------------------------------------------------
# repetitive-task protocol with mode mapping between runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSpec:
    task: TaskSpec
    controller: str     # nominal | main
    retrain: bool = True


@dataclass
class RunProtocol:
    runs: list
    shift_run: int = 4

    def __post_init__(self):
        if not self.runs:
            raise ValueError("protocol needs at least one run")
        if self.runs[0].controller != "nominal":
            raise ValueError("run 1 must use the nominal controller for sample collection")


def classifier_accuracy(classifier: ModeClassifier, env: Environment, run_index: int,
                        n: int = 100) -> float:
    """Argmax agreement with the true region map on an ``n x n`` workspace grid."""
    xs, zs = workspace_grid(env, n)
    pts = np.column_stack([xs, zs])
    pred = classifier.probs(pts).argmax(axis=1)
    return float((pred == env.region_map(pts, run_index)).mean())


@dataclass
class ExperimentSettings:
    """Everything a single-seed protocol execution needs apart from the seed."""
    env: Environment
    model: HybridResidualModel
    protocol: RunProtocol
    main: ControllerConfig
    tradeoff: TradeoffConfig = TradeoffConfig()
    nominal_N: int | None = None
    epochs: int = 500
    step_size: float = 1e-3
    optimizer: str = "gd"
    hidden: tuple = (64, 64)
    label: str = "proposed"


_NOMINAL_RUNS: dict = {}


def run_protocol_seed(settings: ExperimentSettings, seed: int, snapshots: list | None = None,
                      trace_dir=None) -> list[dict]:
    """Execute every run of the protocol for one seed; returns per-run rows.

    When ``snapshots`` is a list, ``(run, classifier, store, result)`` is
    appended after every run's retraining step.
    """
    env = settings.env
    clf = ModeClassifier.create(len(env.split.yd_idx), env.mode_count, env.yd_low, env.yd_high,
                                hidden=settings.hidden, seed=seed)
    store = PriorDensityStore(len(env.split.yd_idx))
    nominal_cfg = replace(settings.main, kind="nominal", shrink=False,
                          N=settings.nominal_N or settings.main.N, params="truth")
    rows = []
    for r, run in enumerate(settings.protocol.runs, start=1):
        ref = generate_reference(env, run.task, settings.main.Q, settings.main.R, N=settings.main.N)
        if run.controller == "nominal":
            ctrl = MpcController(env, replace(nominal_cfg), None, None)
        else:
            ctrl = MpcController(env, replace(settings.main), settings.model, clf)
        if run.controller == "nominal":
            # the nominal run does not depend on the classifier, so it is
            # shared between experiment variants with the same seed
            key = (env, run.task, ctrl.cfg.N, ctrl.cfg.Q.tobytes(), r, seed)
            res = _NOMINAL_RUNS.get(key)
            if res is None:
                res = run_closed_loop(env, ctrl, ref, run_index=r, seed=seed,
                                      rng=np.random.default_rng([seed, r]))
                _NOMINAL_RUNS[key] = res
        else:
            res = run_closed_loop(env, ctrl, ref, run_index=r, seed=seed,
                                  rng=np.random.default_rng([seed, r]), trace_dir=trace_dir)
        if run.retrain:
            clf, store, _ = iterate(settings.model, res.states, res.inputs, env.nominal, env.split,
                                    clf, store, settings.tradeoff, epochs=settings.epochs,
                                    step_size=settings.step_size, optimizer=settings.optimizer)
        rows.append({
            "run": r, "controller": settings.label if run.controller != "nominal" else "nominal",
            "seed": seed, "cl_cost": res.cl_cost, "violations": res.violations,
            "mean_ol_ms": float(res.ol_ms.mean()), "accuracy": classifier_accuracy(clf, env, r),
            "fallbacks": res.fallbacks,
        })
        if snapshots is not None:
            snapshots.append((r, clf.copy(), store.copy(), res))
    return rows


def _protocol_job(args):
    settings, seed = args
    return run_protocol_seed(settings, seed)


def run_repetitive_experiment(settings: ExperimentSettings, seeds, workers: int = 1) -> list[dict]:
    """Per-seed, per-run rows for the whole protocol (flattened, seed-major)."""
    out = map_jobs(_protocol_job, [(settings, s) for s in seeds], workers)
    return [row for rows in out for row in rows]


def per_run_table(rows) -> list[dict]:
    """Aggregate per-seed rows into per-run means and medians."""
    runs = sorted({r["run"] for r in rows})
    table = []
    for run in runs:
        sel = [r for r in rows if r["run"] == run]
        cost = np.array([r["cl_cost"] for r in sel])
        acc = np.array([r["accuracy"] for r in sel])
        table.append({"run": run, "controller": sel[0]["controller"], "n": len(sel),
                      "cl_cost_mean": float(cost.mean()),
                      "cl_cost_std": float(cost.std(ddof=1)) if len(sel) > 1 else 0.0,
                      "accuracy_mean": float(acc.mean()), "accuracy_median": float(np.median(acc)),
                      "violations_mean": float(np.mean([r["violations"] for r in sel])),
                      "mean_ol_ms": float(np.mean([r["mean_ol_ms"] for r in sel]))})
    return table


RUN_COLUMNS = ["run", "controller", "seed", "cl_cost", "violations", "mean_ol_ms", "accuracy"]


def write_rows_csv(path, rows, columns=None, append: bool = False) -> None:
    columns = columns or list(rows[0].keys())
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if not append or fh.tell() == 0:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
