"""Ground-truth simulated systems with piecewise residual dynamics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .gp import ResidualDataset, fit_hybrid
from .modemap import FeatureSplit


@dataclass(frozen=True)
class Environment:
    """Base class. Subclasses define the nominal model, modes and regions.

    Residuals are rate-level quantities: the true transition is
    ``x+ = f(x, u) + dt * B_g (g^m(y^g) + w)`` with ``w ~ N(0, noise_vars[m])``.
    """
    name: str = "env"
    dt: float = 0.05
    residual_scale: float = 1.0
    noise_scale: float = 1.0

    # -- overridden ----------------------------------------------------------
    state_dim: int = 0
    input_dim: int = 0
    noise_vars: tuple = ()
    split: FeatureSplit = None
    x_low: tuple = ()
    x_high: tuple = ()
    u_low: tuple = ()
    u_high: tuple = ()
    yd_low: tuple = ()
    yd_high: tuple = ()
    yg_range: tuple = ((), ())   # GP-input sampling range for training data

    def nominal(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def residual(self, mode: int, yg) -> np.ndarray:
        raise NotImplementedError

    def region_map(self, yd, run_index: int = 1):
        raise NotImplementedError

    def region_boxes(self, run_index: int = 1):
        """Per mode, a state-space box ``(lo, hi)`` covering its region, or None."""
        return None

    def lift(self, p, v, a) -> np.ndarray:
        raise NotImplementedError

    def training_range(self, mode: int):
        """GP-input box from which training samples of ``mode`` are drawn."""
        return tuple(np.asarray(r, float) for r in self.yg_range)

    # -- shared --------------------------------------------------------------
    @property
    def mode_count(self) -> int:
        return len(self.noise_vars)

    @property
    def Bg(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def residual_dim(self) -> int:
        return self.Bg.shape[1]

    @property
    def u_hover(self) -> np.ndarray:
        return np.zeros(self.input_dim)

    def z_of(self, x, u) -> np.ndarray:
        return np.concatenate([np.asarray(x, float), np.asarray(u, float)])

    def yd_of_state(self, x) -> np.ndarray:
        """Classifier input from a state (both systems use state coordinates only)."""
        x = np.asarray(x, dtype=float)
        return x[..., list(self.split.yd_idx)]

    def yg_of_state(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.split.yg_of(np.concatenate([x, u], axis=-1))

    def mode_at(self, x, run_index: int = 1):
        return self.region_map(self.yd_of_state(x), run_index)


def step_truth(env: Environment, x, u, run_index: int, rng: np.random.Generator,
               mode: int | None = None) -> np.ndarray:
    """Advance the true system one step.

    Exactly ``residual_dim`` standard normals are drawn per call regardless of
    mode or scaling, so different controllers see common random numbers.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    e = rng.standard_normal(env.residual_dim)
    m = env.mode_at(x, run_index) if mode is None else mode
    g = env.residual_scale * env.residual(int(m), env.yg_of_state(x, u))
    w = np.sqrt(env.noise_scale * np.asarray(env.noise_vars[int(m)])) * e
    return env.nominal(x, u) + env.dt * (env.Bg @ (g + w))


# ---------------------------------------------------------------------------
# planar LTI system
# ---------------------------------------------------------------------------

LTI_A = np.array([[1.0, 0.0], [0.0, -1.0]])
LTI_B = np.eye(2)
LTI_BANDS = (1.3, 2.6)


@dataclass(frozen=True)
class LtiEnvironment(Environment):
    name: str = "lti"
    state_dim: int = 2
    input_dim: int = 2
    noise_vars: tuple = (0.2, 0.15, 0.25)
    split: FeatureSplit = FeatureSplit(yg_idx=(1,), yd_idx=(0, 1))
    x_low: tuple = (0.0, -0.05)
    x_high: tuple = (4.0, 4.0)
    u_low: tuple = (-5.0, -5.0)
    u_high: tuple = (5.0, 5.0)
    yd_low: tuple = (0.0, -0.05)
    yd_high: tuple = (4.0, 4.0)
    yg_range: tuple = ((-0.05,), (4.0,))

    @property
    def Bg(self):
        return np.array([[1.0], [0.0]])

    @property
    def A_d(self):
        return np.eye(2) + self.dt * LTI_A

    @property
    def B_d(self):
        return self.dt * LTI_B

    def nominal(self, x, u):
        x = np.asarray(x, dtype=float)
        return x + self.dt * (LTI_A @ x + np.asarray(u, dtype=float))

    def jacobian(self, x, u):
        return self.A_d, self.B_d

    def residual(self, mode, yg):
        x2 = float(np.asarray(yg).ravel()[0])
        if mode == 0:
            return np.array([0.4 * math.sin(1.5 * x2)])
        if mode == 1:
            return np.array([-0.5 + 0.25 * x2])
        if mode == 2:
            return np.array([0.5 * math.cos(x2)])
        raise ValueError(f"unknown mode {mode}")

    def region_map(self, yd, run_index=1):
        x2 = np.asarray(yd, dtype=float)[..., 1]
        out = np.digitize(x2, LTI_BANDS)
        return int(out) if np.ndim(out) == 0 else out

    def region_boxes(self, run_index=1):
        # the bands cover the whole plane, so a state pushed out of the state
        # box by noise still has a mode
        edges = [-np.inf, *LTI_BANDS, np.inf]
        return [(np.array([-np.inf, edges[m]]), np.array([np.inf, edges[m + 1]])) for m in range(3)]

    def lift(self, p, v, a):
        return np.asarray(p, dtype=float).copy()

    def training_range(self, mode):
        # the GP input is the banding coordinate, so each mode is only
        # observable inside its own band
        edges = [self.x_low[1], *LTI_BANDS, self.x_high[1]]
        return np.array([edges[mode]]), np.array([edges[mode + 1]])


def lti_env(**overrides) -> LtiEnvironment:
    return LtiEnvironment(**overrides)


# ---------------------------------------------------------------------------
# planar quadrotor
# ---------------------------------------------------------------------------

QUAD_MASS = 0.027
QUAD_ARM = 0.0397
QUAD_INERTIA = 1.4e-5
GRAVITY = 9.81


@dataclass(frozen=True)
class Quad2dEnvironment(Environment):
    """State (px, vx, pz, vz, theta, omega); inputs are the two rotor thrusts."""
    name: str = "quad2d"
    state_dim: int = 6
    input_dim: int = 2
    noise_vars: tuple = (0.003, 0.002, 0.004)
    split: FeatureSplit = FeatureSplit(yg_idx=(5,), yd_idx=(0, 2))
    x_low: tuple = (-2.0, -3.0, 0.0, -3.0, -1.0, -8.0)
    x_high: tuple = (2.0, 3.0, 2.6, 3.0, 1.0, 8.0)
    u_low: tuple = (0.0, 0.0)
    u_high: tuple = (0.2, 0.2)
    yd_low: tuple = (-1.5, 0.2)
    yd_high: tuple = (1.5, 2.2)
    yg_range: tuple = ((-2.0,), (2.0,))
    strips: tuple = (-0.45, 0.45)
    shift_run: int = 4
    shift_box: tuple = ((-1.5, 1.2), (0.3, 2.2))  # ((px_lo, pz_lo), (px_hi, pz_hi))
    mass: float = QUAD_MASS
    arm: float = QUAD_ARM
    inertia: float = QUAD_INERTIA

    @property
    def Bg(self):
        B = np.zeros((6, 1))
        B[0, 0] = 1.0
        return B

    @property
    def u_hover(self):
        return np.full(2, self.mass * GRAVITY / 2)

    def nominal(self, x, u):
        px, vx, pz, vz, th, om = np.asarray(x, dtype=float)
        t1, t2 = np.asarray(u, dtype=float)
        T = t1 + t2
        dt = self.dt
        return np.array([
            px + dt * vx,
            vx + dt * T * math.sin(th) / self.mass,
            pz + dt * vz,
            vz + dt * (T * math.cos(th) / self.mass - GRAVITY),
            th + dt * om,
            om + dt * self.arm * (t2 - t1) / self.inertia,
        ])

    def jacobian(self, x, u):
        th = float(x[4])
        T = float(u[0] + u[1])
        dt, m = self.dt, self.mass
        s, c = math.sin(th), math.cos(th)
        A = np.eye(6)
        A[0, 1] = A[2, 3] = A[4, 5] = dt
        A[1, 4] = dt * T * c / m
        A[3, 4] = -dt * T * s / m
        B = np.zeros((6, 2))
        B[1, :] = dt * s / m
        B[3, :] = dt * c / m
        k = dt * self.arm / self.inertia
        B[5, 0], B[5, 1] = -k, k
        return A, B

    def residual(self, mode, yg):
        om = float(np.asarray(yg).ravel()[0])
        if mode == 0:
            return np.array([0.3 * math.cos(om)])
        if mode == 1:
            return np.array([-0.25 + 0.05 * om])
        if mode == 2:
            return np.array([0.15 * math.sin(2.0 * om)])
        raise ValueError(f"unknown mode {mode}")

    def in_shift_box(self, yd):
        yd = np.asarray(yd, dtype=float)
        (xl, zl), (xh, zh) = self.shift_box
        return (yd[..., 0] >= xl) & (yd[..., 0] <= xh) & (yd[..., 1] >= zl) & (yd[..., 1] <= zh)

    def region_map(self, yd, run_index=1):
        yd = np.asarray(yd, dtype=float)
        m = np.digitize(yd[..., 0], self.strips)
        if run_index >= self.shift_run:
            m = np.where(self.in_shift_box(yd), (m + 1) % 3, m)
        return int(m) if np.ndim(m) == 0 else m

    def lift(self, p, v, a):
        p, v, a = (np.asarray(t, dtype=float) for t in (p, v, a))
        th = math.atan2(a[0], a[1] + GRAVITY)
        return np.array([p[0], v[0], p[1], v[1], th, 0.0])


def quad2d_env(**overrides) -> Quad2dEnvironment:
    return Quad2dEnvironment(**overrides)


def make_env(name: str, **overrides) -> Environment:
    if name == "lti":
        return lti_env(**overrides)
    if name == "quad2d":
        return quad2d_env(**overrides)
    raise ValueError(f"unknown environment {name!r}")


def sample_training_data(env: Environment, n_per_mode: int, seed: int = 0) -> ResidualDataset:
    """Residual samples of every mode over the whole GP-input range.

    States and inputs are drawn uniformly from their boxes, with the GP-input
    coordinates redrawn uniformly over the mode's training range; the mode
    is forced, so each bank sees its curve over that whole range.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(env.x_low, float), np.asarray(env.x_high, float)
    ulo, uhi = np.asarray(env.u_low, float), np.asarray(env.u_high, float)
    n = env.state_dim
    xs, us, ds, ms = [], [], [], []
    for m in range(env.mode_count):
        glo, ghi = env.training_range(m)
        for _ in range(n_per_mode):
            x = rng.uniform(lo, hi)
            u = rng.uniform(ulo, uhi)
            z = np.concatenate([x, u])
            z[list(env.split.yg_idx)] = rng.uniform(glo, ghi)
            x, u = z[:n], z[n:]
            d = step_truth(env, x, u, 1, rng, mode=m) - env.nominal(x, u)
            xs.append(x); us.append(u); ds.append(d @ env.Bg); ms.append(m)
    return ResidualDataset(np.array(xs), np.array(us), np.array(ds), np.array(ms))


def fit_env_model(env: Environment, n_per_mode: int, seed: int = 0, hyperparams=None):
    data = sample_training_data(env, n_per_mode, seed)
    return fit_hybrid(data, env.split.yg_idx, env.Bg, env.mode_count, hyperparams), data


def export_mode_grid_csv(env: Environment, path, run_indices=(1,), n: int = 100,
                         classifier=None) -> None:
    """Gridded ground-truth (and optionally predicted) mode maps, 1-based ids.

    ``classifier`` is either one classifier used for every run index or a
    dict from run index to classifier.
    """
    xs, zs = workspace_grid(env, n)
    pts = np.column_stack([xs, zs])
    per_run = classifier if isinstance(classifier, dict) else \
        ({r: classifier for r in run_indices} if classifier is not None else None)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["yd_1", "yd_2", "run_index", "mode"] + (["predicted"] if per_run else []))
        for r in run_indices:
            truth = env.region_map(pts, r)
            pred = per_run[r].probs(pts).argmax(1) if per_run else None
            for i, p in enumerate(pts):
                row = [repr(float(p[0])), repr(float(p[1])), r, int(truth[i]) + 1]
                if pred is not None:
                    row.append(int(pred[i]) + 1)
                w.writerow(row)


def workspace_grid(env: Environment, n: int = 100):
    """``n x n`` cell-centred grid over the classifier workspace."""
    lo, hi = np.asarray(env.yd_low), np.asarray(env.yd_high)
    g0 = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    g1 = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    X, Z = np.meshgrid(g0, g1, indexing="ij")
    return X.ravel(), Z.ravel()


# ---------------------------------------------------------------------------
# tasks and references
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    """Analytic waypoint path in the classifier plane.

    ``figure8``: lemniscate ``center + (a sin s, b sin 2s)`` with period T.
    ``initial_sweep``: Lissajous ``center + (a sin(p s), b sin(q s + pi/2))``
    with ``(p, q) = freqs``.
    ``boundary``: constant-speed polyline through ``points``.
    """
    kind: str
    T: int
    center: tuple = (0.0, 0.0)
    radii: tuple = (1.0, 1.0)
    points: tuple = ()
    freqs: tuple = (1, 3)

    def __post_init__(self):
        if self.kind not in ("figure8", "boundary", "initial_sweep"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.T < 2:
            raise ValueError("task duration must be at least 2 steps")
        if self.kind == "boundary" and len(self.points) < 2:
            raise ValueError("boundary task needs at least two points")

    @property
    def periodic(self) -> bool:
        return self.kind == "figure8"

    def waypoints(self, dt: float):
        """Positions, velocities and accelerations at steps 0..T (inclusive)."""
        k = np.arange(self.T + 1)
        if self.kind == "boundary":
            return _polyline(np.asarray(self.points, float), self.T, dt)
        w = 2 * np.pi / (self.T * dt)
        t = k * dt
        c = np.asarray(self.center, float)
        a, b = self.radii
        if self.kind == "figure8":
            f1, f2, ph = 1.0, 2.0, 0.0
        else:
            f1, f2, ph = float(self.freqs[0]), float(self.freqs[1]), np.pi / 2
        w1, w2 = f1 * w, f2 * w
        p = np.column_stack([c[0] + a * np.sin(w1 * t), c[1] + b * np.sin(w2 * t + ph)])
        v = np.column_stack([a * w1 * np.cos(w1 * t), b * w2 * np.cos(w2 * t + ph)])
        acc = np.column_stack([-a * w1 * w1 * np.sin(w1 * t), -b * w2 * w2 * np.sin(w2 * t + ph)])
        return p, v, acc


def _polyline(pts, T, dt):
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    s = np.linspace(0.0, cum[-1], T + 1)
    p = np.empty((T + 1, 2))
    v = np.empty((T + 1, 2))
    speed = cum[-1] / (T * dt)
    for i, si in enumerate(s):
        j = min(int(np.searchsorted(cum, si, side="right")) - 1, len(seg) - 1)
        frac = (si - cum[j]) / lens[j]
        p[i] = pts[j] + frac * seg[j]
        v[i] = speed * seg[j] / lens[j]
    return p, v, np.zeros_like(p)


@dataclass
class Reference:
    x: np.ndarray  # (T+1, n)
    u: np.ndarray  # (T, m)
    periodic: bool

    @property
    def T(self) -> int:
        return len(self.u)

    def window(self, k: int, N: int):
        """States k..k+N and inputs k..k+N-1, wrapping or holding at the end."""
        T = self.T
        if self.periodic:
            xi = (k + np.arange(N + 1)) % T
            ui = (k + np.arange(N)) % T
        else:
            xi = np.minimum(k + np.arange(N + 1), T)
            ui = np.minimum(k + np.arange(N), T - 1)
        return self.x[xi], self.u[ui]


def default_tracking_weights(env: Environment):
    if isinstance(env, Quad2dEnvironment):
        return np.diag([50.0, 1.0, 50.0, 1.0, 1.0, 0.01]), 0.01 * np.eye(2)
    return 50.0 * np.eye(2), 0.01 * np.eye(2)


def generate_reference(env: Environment, task: TaskSpec, Q=None, R=None, N: int = 20,
                       laps: int = 3) -> Reference:
    """Dynamically feasible reference from nominal receding-horizon tracking.

    The waypoints are lifted to full states and tracked with the nominal
    model under the (untightened) state and input boxes. Periodic tasks run
    ``laps`` laps and keep the last one so the result is close to a periodic
    orbit; non-periodic tasks run once and hold the final waypoint.
    """
    key = (replace(env, residual_scale=1.0, noise_scale=1.0), task, None if Q is None else np.asarray(Q).tobytes(),
           None if R is None else np.asarray(R).tobytes(), N, laps)
    return _reference_cached(key, env, task, Q, R, N, laps)


_REF_CACHE: dict = {}


def _reference_cached(key, env, task, Q, R, N, laps):
    hit = _REF_CACHE.get(key)
    if hit is not None:
        return Reference(hit.x.copy(), hit.u.copy(), hit.periodic)
    ref = _build_reference(env, task, Q, R, N, laps)
    _REF_CACHE[key] = ref
    return Reference(ref.x.copy(), ref.u.copy(), ref.periodic)


def _build_reference(env, task, Q, R, N, laps):
    from .controllers import OcpSpec, ExoDynamics, solve_ocp_nlp
    from .uncertainty import TightenedConstraints, box_halfspaces
    Q0, R0 = default_tracking_weights(env)
    Q = Q0 if Q is None else np.asarray(Q, float)
    R = R0 if R is None else np.asarray(R, float)
    p, v, a = task.waypoints(env.dt)
    T = task.T
    wp = np.array([env.lift(p[k], v[k], a[k]) for k in range(T + 1)])
    lo, hi = np.asarray(env.x_low), np.asarray(env.x_high)
    if np.any(wp[:, list(env.split.yd_idx)] < lo[list(env.split.yd_idx)] - 1e-9) or \
            np.any(wp[:, list(env.split.yd_idx)] > hi[list(env.split.yd_idx)] + 1e-9):
        raise ValueError("task geometry leaves the state box")
    A_box, b_box = box_halfspaces(lo, hi)
    cons = TightenedConstraints.untightened(A_box, b_box, N)
    dyn = ExoDynamics(env, np.zeros((N, env.state_dim)))
    total = T * (laps if task.periodic else 1)
    x = wp[0].copy()
    xs, us = [x.copy()], []
    u_guess = np.tile(env.u_hover, (N, 1))
    for k in range(total):
        if task.periodic:
            idx = (k + np.arange(N + 1)) % T
        else:
            idx = np.minimum(k + np.arange(N + 1), T)
        spec = OcpSpec(N=N, Q=Q, R=R, P=Q, x0=x, x_ref=wp[idx], u_ref=u_guess,
                       u_low=np.asarray(env.u_low), u_high=np.asarray(env.u_high),
                       constraints=cons, dynamics=dyn)
        res = solve_ocp_nlp(spec, u_init=u_guess)
        if res.status == "infeasible":
            raise ValueError(f"reference tracking infeasible at step {k}")
        u0 = res.inputs[0]
        us.append(u0)
        x = env.nominal(x, u0)
        xs.append(x.copy())
        u_guess = np.vstack([res.inputs[1:], res.inputs[-1:]])
    xs, us = np.array(xs), np.array(us)
    if task.periodic:
        start = (laps - 1) * T
        return Reference(xs[start:start + T + 1], us[start:start + T], True)
    return Reference(xs, us, False)
