"""Finite-horizon tracking controllers.

All controllers share one condensed (single-shooting) SQP. They differ only
in how the residual enters the prediction model and in which constraints
are added:

* exogenous: the GP mean is evaluated once along the reference and enters as
  a fixed offset, so linear nominal dynamics give a QP;
* endogenous: the GP mean of a fixed per-step mode is evaluated at the
  predicted state inside the SQP;
* mixed-integer: the mode sequence is enumerated and each sequence solved as
  an endogenous problem with region-membership constraints.
"""
from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .environments import Environment
from .gp import HybridResidualModel
from .modemap import ModeClassifier, hard_label
from .qp import QpInfeasible, solve_qp
from .uncertainty import TightenedConstraints, box_halfspaces, precompute_reference_uncertainty

FEAS_TOL = 1e-6


# ---------------------------------------------------------------------------
# prediction models
# ---------------------------------------------------------------------------

class ExoDynamics:
    """Nominal dynamics plus a fixed per-step offset (state units)."""

    def __init__(self, env: Environment, offsets):
        self.env = env
        self.offsets = np.asarray(offsets, dtype=float)

    def step(self, k, x, u):
        return self.env.nominal(x, u) + self.offsets[k]

    def step_jac(self, k, x, u):
        A, B = self.env.jacobian(x, u)
        return self.env.nominal(x, u) + self.offsets[k], A, B


class EndoDynamics:
    """Nominal dynamics plus the GP mean of mode ``modes[k]`` at the predicted point."""

    def __init__(self, env: Environment, model: HybridResidualModel, modes):
        self.env = env
        self.model = model
        self.modes = [int(m) for m in modes]
        self.Bg = model.output_selector
        n = env.state_dim
        idx = list(env.split.yg_idx)
        self.sel = np.zeros((len(idx), n + env.input_dim))
        self.sel[np.arange(len(idx)), idx] = 1.0
        self.n = n

    def step(self, k, x, u):
        yg = self.env.yg_of_state(x, u)
        return self.env.nominal(x, u) + self.Bg @ self.model.mean(self.modes[k], yg)

    def step_jac(self, k, x, u):
        yg = self.env.yg_of_state(x, u)
        mu, J = self.model.mean_and_jac(self.modes[k], yg)
        A, B = self.env.jacobian(x, u)
        Jz = self.Bg @ (J @ self.sel)
        return self.env.nominal(x, u) + self.Bg @ mu, A + Jz[:, :self.n], B + Jz[:, self.n:]


# ---------------------------------------------------------------------------
# problem and result types
# ---------------------------------------------------------------------------

@dataclass
class OcpSpec:
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    x0: np.ndarray
    x_ref: np.ndarray          # (N+1, n)
    u_ref: np.ndarray          # (N, m); used as the default initial guess
    u_low: np.ndarray
    u_high: np.ndarray
    constraints: TightenedConstraints
    dynamics: object
    extra: list | None = None  # optional per-step (A_k, b_k) rows for k = 1..N

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        self.x0 = np.asarray(self.x0, dtype=float)
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        self.u_ref = np.asarray(self.u_ref, dtype=float)
        if self.x_ref.shape != (self.N + 1, len(self.x0)):
            raise ValueError("x_ref must have N+1 rows of state dimension")
        if self.u_ref.shape[0] != self.N:
            raise ValueError("u_ref must have N rows")
        if self.constraints.horizon != self.N:
            raise ValueError("tightened constraints must cover steps 1..N")


@dataclass
class SolveResult:
    inputs: np.ndarray
    states: np.ndarray
    objective: float
    status: str                 # optimal | max_iter | infeasible
    wall_ms: float
    iterations: int
    kkt: float = np.inf
    max_violation: float = np.inf
    multipliers: np.ndarray | None = None
    trace: list = field(default_factory=list)
    sequence: tuple | None = None
    subproblems: int = 0

    @property
    def feasible(self) -> bool:
        return self.max_violation <= FEAS_TOL


def dump_trace_csv(path, result: SolveResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "kkt", "step_norm", "alpha", "n_active", "active"])
        for r in result.trace:
            w.writerow([r["iteration"], repr(r["objective"]), repr(r["kkt"]), repr(r["step_norm"]),
                        repr(r["alpha"]), len(r["active"]), " ".join(map(str, r["active"]))])


# ---------------------------------------------------------------------------
# condensed SQP
# ---------------------------------------------------------------------------

class _Problem:
    def __init__(self, spec: OcpSpec):
        self.s = spec
        self.n = len(spec.x0)
        self.m = spec.u_ref.shape[1]
        self.N = spec.N
        self.nU = self.N * self.m
        A = spec.constraints.A
        rows_A = [A] * self.N
        rows_b = list(spec.constraints.b_tight)
        if spec.extra is not None:
            rows_A = [np.vstack([rows_A[k], spec.extra[k][0]]) for k in range(self.N)]
            rows_b = [np.concatenate([rows_b[k], spec.extra[k][1]]) for k in range(self.N)]
        self.rows_A = rows_A
        self.rows_b = rows_b
        self.lo = np.tile(np.asarray(spec.u_low, float), self.N)
        self.hi = np.tile(np.asarray(spec.u_high, float), self.N)
        self.Rbar = np.kron(np.eye(self.N), np.asarray(spec.R, float))

    def rollout(self, U):
        s = self.s
        X = np.empty((self.N + 1, self.n))
        X[0] = s.x0
        Uk = U.reshape(self.N, self.m)
        for k in range(self.N):
            X[k + 1] = s.dynamics.step(k, X[k], Uk[k])
        return X

    def linearize(self, U):
        s = self.s
        n, m, N = self.n, self.m, self.N
        X = np.empty((N + 1, n))
        X[0] = s.x0
        S = np.zeros((N + 1, n, self.nU))
        Uk = U.reshape(N, m)
        for k in range(N):
            X[k + 1], A, B = s.dynamics.step_jac(k, X[k], Uk[k])
            S[k + 1] = A @ S[k]
            S[k + 1][:, k * m:(k + 1) * m] += B
        return X, S

    def objective(self, X, U):
        s = self.s
        E = X - s.x_ref
        J = float(np.einsum("ki,ij,kj->", E[:-1], s.Q, E[:-1]))
        J += float(E[-1] @ s.P @ E[-1])
        J += float(U @ self.Rbar @ U)
        return J

    def cons(self, X):
        return np.concatenate([self.rows_A[k] @ X[k + 1] - self.rows_b[k] for k in range(self.N)])

    def cons_jac(self, S):
        return np.vstack([self.rows_A[k] @ S[k + 1] for k in range(self.N)])

    def grad_hess(self, X, S, U):
        s = self.s
        E = X - s.x_ref
        Wq = np.einsum("kin,ij->kjn", S[1:-1], s.Q)
        g = 2 * np.einsum("kjn,kj->n", Wq, E[1:-1])
        H = 2 * np.einsum("kjn,kjp->np", Wq, S[1:-1])
        SP = s.P @ S[-1]
        g += 2 * SP.T @ E[-1]
        H += 2 * S[-1].T @ SP
        g += 2 * self.Rbar @ U
        H += 2 * self.Rbar
        return g, 0.5 * (H + H.T)

    def box_violation(self, U):
        return max(0.0, float(np.max(self.lo - U)), float(np.max(U - self.hi)))


def solve_ocp_nlp(spec: OcpSpec, u_init=None, *, max_iter: int = 50, step_tol: float = 1e-8,
                  kkt_tol: float = 1e-6, trace: bool = False) -> SolveResult:
    """Minimise the tracking objective over the input sequence by SQP.

    Each major iteration linearises the rollout about the current inputs,
    solves the box and half-space constrained QP with a Gauss-Newton Hessian,
    and takes an Armijo step on the l1 merit function. ``iterations`` counts
    the QPs solved.
    """
    t0 = time.perf_counter()
    pb = _Problem(spec)
    U = np.asarray(spec.u_ref if u_init is None else u_init, dtype=float).ravel().copy()
    U = np.clip(U, pb.lo, pb.hi)
    X, S = pb.linearize(U)
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite rollout")
    J = pb.objective(X, U)
    c = pb.cons(X)
    eye = np.eye(pb.nU)
    rho = 1.0
    lam = None
    kkt = np.inf
    its = 0
    status = "max_iter"
    rows = []
    while True:
        g, H = pb.grad_hess(X, S, U)
        G = pb.cons_jac(S)
        viol = max(float(np.max(c, initial=0.0)), pb.box_violation(U))
        if lam is not None:
            nc = len(c)
            stat = g + G.T @ lam[:nc] + lam[nc:nc + pb.nU] - lam[nc + pb.nU:]
            comp = np.abs(lam[:nc] * c).max(initial=0.0)
            kkt = float(max(np.abs(stat).max(), comp) / (1.0 + np.abs(g).max()))
            if kkt < kkt_tol and viol <= FEAS_TOL:
                status = "optimal"
                break
        if its >= max_iter:
            break
        Cq = np.vstack([G, eye, -eye])
        dq = np.concatenate([-c, pb.hi - U, U - pb.lo])
        try:
            qp = solve_qp(H, g, Cq, dq)
        except QpInfeasible:
            status = "infeasible"
            break
        its += 1
        p, lam = qp.x, qp.multipliers
        nc = len(c)
        rho = max(rho, 1.1 * float(np.max(lam[:nc], initial=0.0)) + 1e-6)
        pos = float(np.maximum(c, 0.0).sum())
        phi = J + rho * pos
        dphi = float(g @ p) - rho * pos
        alpha = 1.0
        for _ in range(30):
            U_try = U + alpha * p
            X_try = pb.rollout(U_try)
            if np.all(np.isfinite(X_try)):
                J_try = pb.objective(X_try, U_try)
                c_try = pb.cons(X_try)
                if J_try + rho * float(np.maximum(c_try, 0.0).sum()) <= phi + 1e-4 * alpha * min(dphi, 0.0):
                    break
            alpha *= 0.5
        step = alpha * p
        U = np.clip(U + step, pb.lo, pb.hi)
        # active bounds from the QP land a few ulps off; put them on the box
        U = np.where(np.abs(U - pb.hi) < 1e-10, pb.hi, np.where(np.abs(U - pb.lo) < 1e-10, pb.lo, U))
        X, S = pb.linearize(U)
        J = pb.objective(X, U)
        c = pb.cons(X)
        snorm = float(np.abs(step).max())
        if trace:
            rows.append({"iteration": its, "objective": J, "kkt": kkt, "step_norm": snorm,
                         "alpha": alpha, "active": list(qp.active)})
        if snorm < step_tol:
            viol = max(float(np.max(c, initial=0.0)), pb.box_violation(U))
            status = "optimal" if viol <= FEAS_TOL else "infeasible"
            break
    viol = max(float(np.max(c, initial=0.0)), pb.box_violation(U))
    if status == "optimal" and viol > FEAS_TOL:
        status = "infeasible"
    return SolveResult(U.reshape(pb.N, pb.m), X, J, status, 1e3 * (time.perf_counter() - t0), its,
                       kkt, viol, lam, rows)


# ---------------------------------------------------------------------------
# parametrisations along the reference
# ---------------------------------------------------------------------------

def build_reference_params(classifier: ModeClassifier, ref_yd) -> np.ndarray:
    """One-hot mode labels at every reference point."""
    return np.atleast_2d(hard_label(classifier, np.atleast_2d(ref_yd)))


def build_fixed_params(classifier: ModeClassifier, ref_yd) -> np.ndarray:
    """Every step gets the label of the first reference point."""
    ref_yd = np.atleast_2d(ref_yd)
    first = np.atleast_2d(hard_label(classifier, ref_yd[:1]))
    return np.repeat(first, len(ref_yd), axis=0)


def exo_offsets(model: HybridResidualModel, env: Environment, x_ref, u_ref, modes) -> np.ndarray:
    """``B_g mu`` of the labelled mode at each reference point (steps 0..N-1)."""
    out = np.zeros((len(u_ref), env.state_dim))
    for k in range(len(u_ref)):
        yg = env.yg_of_state(x_ref[k], u_ref[k])
        out[k] = model.output_selector @ model.mean(int(modes[k]), yg)
    return out


def solve_nlp_exo(spec: OcpSpec, u_init=None, **kw) -> SolveResult:
    if not isinstance(spec.dynamics, ExoDynamics):
        raise TypeError("exogenous solve needs ExoDynamics")
    return solve_ocp_nlp(spec, u_init, **kw)


def solve_nlp_endo(spec: OcpSpec, u_init=None, **kw) -> SolveResult:
    if not isinstance(spec.dynamics, EndoDynamics):
        raise TypeError("endogenous solve needs EndoDynamics")
    return solve_ocp_nlp(spec, u_init, **kw)


# ---------------------------------------------------------------------------
# mixed-integer controller by mode-sequence enumeration
# ---------------------------------------------------------------------------

def _box_of_rows(A, b, n):
    """Per-coordinate bounds implied by the axis-aligned rows of ``A x <= b``."""
    lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    for a, bi in zip(A, b):
        nz = np.flatnonzero(a)
        if len(nz) == 1:
            i = nz[0]
            if a[i] > 0:
                hi[i] = min(hi[i], bi / a[i])
            else:
                lo[i] = max(lo[i], bi / a[i])
    return lo, hi


def _linear_nominal(env):
    A = getattr(env, "A_d", None)
    B = getattr(env, "B_d", None)
    return (A, B) if A is not None else None


def enumerate_sequences(env: Environment, model: HybridResidualModel, spec: OcpSpec,
                        boxes, prune: bool = True):
    """Yield candidate mode sequences (s_0..s_N) in lexicographic order.

    With ``prune`` the search keeps an interval over-approximation of the
    states reachable under the sequence so far (nominal dynamics over the
    input box, the GP-mean bound, the tightened state bounds and the region
    box of each chosen mode) and drops a branch once it is empty. Every
    sequence with a feasible input is therefore kept.
    """
    M = model.mode_count
    N = spec.N
    n = env.state_dim
    if not prune:
        yield from itertools.product(range(M), repeat=N + 1)
        return
    lin = _linear_nominal(env)
    tol = FEAS_TOL
    x0 = spec.x0
    starts = [m for m in range(M)
              if np.all(x0 >= boxes[m][0] - tol) and np.all(x0 <= boxes[m][1] + tol)]
    step_bounds = [_box_of_rows(spec.constraints.A, spec.constraints.b_tight[k], n) for k in range(N)]
    rbound = np.abs(model.output_selector) @ model.mean_bound()
    uc = 0.5 * (np.asarray(spec.u_low) + np.asarray(spec.u_high))
    ur = 0.5 * (np.asarray(spec.u_high) - np.asarray(spec.u_low))

    def reach(lo, hi):
        if lin is None:
            return np.full(n, -np.inf), np.full(n, np.inf)
        A, B = lin
        c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        cn = A @ c + B @ uc
        rn = np.abs(A) @ r + np.abs(B) @ ur + rbound
        return cn - rn - tol, cn + rn + tol

    def dfs(k, seq, lo, hi):
        if k == N:
            yield tuple(seq)
            return
        rlo, rhi = reach(lo, hi)
        slo, shi = step_bounds[k]
        rlo, rhi = np.maximum(rlo, slo - tol), np.minimum(rhi, shi + tol)
        for m in range(M):
            blo = np.maximum(rlo, boxes[m][0] - tol)
            bhi = np.minimum(rhi, boxes[m][1] + tol)
            if np.all(blo <= bhi):
                seq.append(m)
                yield from dfs(k + 1, seq, blo, bhi)
                seq.pop()

    for m0 in starts:
        yield from dfs(0, [m0], x0.copy(), x0.copy())


def solve_minlp(spec: OcpSpec, env: Environment, model: HybridResidualModel, boxes,
                u_init=None, *, prune: bool = True, max_horizon: int = 6, **kw) -> SolveResult:
    """Globally optimal over mode sequences: enumerate, solve each, keep the best.

    ``boxes[m] = (lo, hi)`` is the state-space region of mode m. Only
    sequences whose final SQP iterate is feasible count. Ties go to the
    lexicographically smallest sequence.
    """
    if spec.N > max_horizon:
        raise ValueError(f"mixed-integer horizon {spec.N} exceeds cap {max_horizon}")
    t0 = time.perf_counter()
    x0 = spec.x0
    best = None
    count = 0
    tol = 1e-9
    region_rows = [box_halfspaces(*boxes[m]) for m in range(model.mode_count)]
    for seq in enumerate_sequences(env, model, spec, boxes, prune=prune):
        lo0, hi0 = boxes[seq[0]]
        if np.any(x0 < lo0 - tol) or np.any(x0 > hi0 + tol):
            continue
        sub = OcpSpec(spec.N, spec.Q, spec.R, spec.P, spec.x0, spec.x_ref, spec.u_ref,
                      spec.u_low, spec.u_high, spec.constraints,
                      EndoDynamics(env, model, seq[:-1]),
                      extra=[region_rows[seq[k + 1]] for k in range(spec.N)])
        res = solve_ocp_nlp(sub, u_init, **kw)
        count += 1
        if not res.feasible or res.status == "infeasible":
            continue
        if best is None or res.objective < best.objective:
            res.sequence = tuple(int(s) for s in seq)
            best = res
    wall = 1e3 * (time.perf_counter() - t0)
    if best is None:
        return SolveResult(np.tile(np.asarray(spec.u_ref[:1]), (spec.N, 1)),
                           np.tile(spec.x0, (spec.N + 1, 1)), np.inf, "infeasible", wall, 0,
                           subproblems=count)
    best.wall_ms = wall
    best.subproblems = count
    return best


def hybrid_rollout(env: Environment, model: HybridResidualModel, x0, U, run_index: int = 1):
    """Mean prediction with the mode picked from the true region map at each step."""
    U = np.atleast_2d(U)
    X = [np.asarray(x0, float)]
    modes = []
    for u in U:
        m = int(env.mode_at(X[-1], run_index))
        modes.append(m)
        X.append(env.nominal(X[-1], u) + model.output_selector @ model.mean(m, env.yg_of_state(X[-1], u)))
    return np.array(X), modes


def tracking_objective(X, U, x_ref, Q, R, P) -> float:
    E = np.asarray(X) - x_ref
    U = np.atleast_2d(U)
    return float(np.einsum("ki,ij,kj->", E[:-1], Q, E[:-1]) + E[-1] @ P @ E[-1]
                 + np.einsum("ki,ij,kj->", U, R, U))


# ---------------------------------------------------------------------------
# receding-horizon controller
# ---------------------------------------------------------------------------

@dataclass
class ControllerConfig:
    kind: str = "exo"          # exo | endo | minlp | nominal
    N: int = 30
    Q: np.ndarray = None
    R: np.ndarray = None
    P: np.ndarray = None
    p_x: float = 0.99
    shrink: bool = True
    params: str = "truth"      # truth | classifier | fixed
    prune: bool = True
    max_horizon: int = 6

    def __post_init__(self):
        if self.kind not in ("exo", "endo", "minlp", "nominal"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.params not in ("truth", "classifier", "fixed"):
            raise ValueError(f"unknown parametrisation {self.params!r}")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0.5 <= self.p_x < 1.0:
            raise ValueError("p_x must lie in [0.5, 1)")


@dataclass
class MpcController:
    env: Environment
    cfg: ControllerConfig
    model: HybridResidualModel | None = None
    classifier: ModeClassifier | None = None

    def __post_init__(self):
        Q = self.cfg.Q
        if Q is None:
            from .environments import default_tracking_weights
            Q, R = default_tracking_weights(self.env)
            self.cfg.Q = Q
            self.cfg.R = R if self.cfg.R is None else self.cfg.R
        if self.cfg.R is None:
            self.cfg.R = 0.01 * np.eye(self.env.input_dim)
        if self.cfg.P is None:
            self.cfg.P = self.cfg.Q
        if self.cfg.kind != "nominal" and self.model is None:
            raise ValueError(f"{self.cfg.kind} controller needs a residual model")
        self.A_box, self.b_box = box_halfspaces(self.env.x_low, self.env.x_high)

    def reference_modes(self, x_ref, run_index: int) -> np.ndarray:
        yd = self.env.yd_of_state(x_ref)
        src = self.cfg.params
        if src == "truth" or (src == "fixed" and self.classifier is None):
            modes = np.atleast_1d(self.env.region_map(yd, run_index))
        elif self.classifier is None:
            raise ValueError("classifier parametrisation requested without a classifier")
        else:
            modes = self.classifier.probs(yd).argmax(axis=1)
        if src == "fixed":
            modes = np.full(len(yd), int(modes[0]))
        return modes.astype(int)

    def prepare(self, x0, x_ref, u_ref, run_index: int):
        """Parametric quantities along the reference window; returns an OcpSpec."""
        env, cfg = self.env, self.cfg
        N = cfg.N
        if cfg.kind == "nominal":
            cons = TightenedConstraints.untightened(self.A_box, self.b_box, N)
            dyn = ExoDynamics(env, np.zeros((N, env.state_dim)))
        else:
            modes = self.reference_modes(x_ref, run_index)
            jac = [env.jacobian(x_ref[k], u_ref[k])[0] for k in range(N)]
            yg = np.array([env.yg_of_state(x_ref[k], u_ref[k]) for k in range(N)])
            _, _, cons = precompute_reference_uncertainty(self.model, yg, modes[:N], jac, cfg.p_x,
                                                          self.A_box, self.b_box, tighten=cfg.shrink)
            if cfg.kind == "exo":
                dyn = ExoDynamics(env, exo_offsets(self.model, env, x_ref, u_ref, modes))
            else:
                dyn = EndoDynamics(env, self.model, modes[:N])
        return OcpSpec(N, cfg.Q, cfg.R, cfg.P, x0, x_ref, u_ref, np.asarray(env.u_low),
                       np.asarray(env.u_high), cons, dyn)

    def plan(self, x0, x_ref, u_ref, run_index: int = 1, u_init=None, trace: bool = False):
        """Returns ``(SolveResult, prep_ms)``; the result's wall time covers the solve only."""
        t0 = time.perf_counter()
        spec = self.prepare(x0, x_ref, u_ref, run_index)
        prep = 1e3 * (time.perf_counter() - t0)
        if self.cfg.kind == "minlp":
            boxes = self.env.region_boxes(run_index)
            if boxes is None:
                raise ValueError(f"{self.env.name} has no polytopic regions for the mixed-integer controller")
            res = solve_minlp(spec, self.env, self.model, boxes, u_init, prune=self.cfg.prune,
                              max_horizon=self.cfg.max_horizon, trace=trace)
        else:
            res = solve_ocp_nlp(spec, u_init, trace=trace)
        return res, prep
