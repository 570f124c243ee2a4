"""Squared-exponential GP regression for per-mode residual models.

Each mode of the hybrid residual model is a bank of independent scalar GPs,
one per residual output dimension. Predictive covariances are therefore
diagonal.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTER_START = 1e-8
JITTER_MAX = 1e-4
GRID_POINTS = 7
REFINE_ROUNDS = 2


class GpFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelHyperparams:
    signal_variance: float
    lengthscales: tuple[float, ...]
    noise_variance: float = 0.0

    def __post_init__(self):
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be positive")
        if len(self.lengthscales) == 0 or any(not l > 0 for l in self.lengthscales):
            raise ValueError("lengthscales must be a non-empty positive vector")
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be non-negative")

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": list(self.lengthscales),
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelHyperparams":
        return cls(float(d["signal_variance"]), tuple(float(v) for v in d["lengthscales"]),
                   float(d["noise_variance"]))


def se_kernel(a: np.ndarray, b: np.ndarray, hp: KernelHyperparams) -> np.ndarray:
    """ARD squared-exponential covariance between rows of ``a`` and ``b``."""
    ls = np.asarray(hp.lengthscales)
    a = np.atleast_2d(a) / ls
    b = np.atleast_2d(b) / ls
    # elementwise differences (no matrix product) so every row is computed
    # identically whatever the batch size
    diff = a[:, None, :] - b[None, :, :]
    sq = (diff * diff).sum(-1)
    return hp.signal_variance * np.exp(-0.5 * sq)


@dataclass(frozen=True, eq=False)
class GpModel:
    hyperparams: KernelHyperparams
    inputs: np.ndarray
    targets: np.ndarray
    factor: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0
    # filled lazily by predict; only used for diagnostics
    clamp_count: list = field(default_factory=lambda: [0], repr=False)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def log_marginal_likelihood(self) -> float:
        n = len(self.targets)
        return float(-0.5 * self.targets @ self.alpha - np.log(np.diag(self.factor)).sum()
                     - 0.5 * n * math.log(2 * math.pi))

    def mean_bound(self) -> float:
        """Upper bound on |mean| over the whole input space."""
        return float(self.hyperparams.signal_variance * np.abs(self.alpha).sum())


def _factorize(x: np.ndarray, y: np.ndarray, hp: KernelHyperparams):
    K = se_kernel(x, x, hp)
    K[np.diag_indices_from(K)] += hp.noise_variance
    jitter = JITTER_START * hp.signal_variance
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(K)))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX * hp.signal_variance * (1 + 1e-9):
                raise GpFitError("kernel matrix not factorizable; degenerate hyperparameters")
    alpha = cho_solve((L, True), y)
    return L, alpha, jitter


def condition(x: np.ndarray, y: np.ndarray, hp: KernelHyperparams) -> GpModel:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) == 0:
        raise GpFitError("empty sample list")
    if x.shape[0] != len(y):
        raise ValueError("inputs and targets differ in length")
    if x.shape[1] != len(hp.lengthscales):
        raise ValueError("lengthscale count does not match input dimension")
    L, alpha, jitter = _factorize(x, y, hp)
    return GpModel(hp, x, y, L, alpha, jitter)


def _lml(x, y, hp) -> float:
    try:
        L, alpha, _ = _factorize(x, y, hp)
    except GpFitError:
        return -np.inf
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


def fit_gp(x, y, hyperparams: KernelHyperparams | None = None, *, return_trace: bool = False):
    """Condition a GP on ``(x, y)``.

    Without ``hyperparams`` they are selected by maximising the log marginal
    likelihood over a log grid (7 values per parameter spanning 3 decades),
    followed by two rounds of coordinate refinement on a finer log grid.
    With ``return_trace`` the list of ``(hyperparams, lml)`` candidates that
    were evaluated is returned alongside the model.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) == 0:
        raise GpFitError("empty sample list")
    if x.shape[0] != len(y):
        # a single 1-d sample list like [0.0, 1.0] arrives as one row
        x = x.reshape(len(y), -1)
    if hyperparams is not None:
        model = condition(x, y, hyperparams)
        return (model, []) if return_trace else model

    p = x.shape[1]
    var_y = float(np.var(y)) if len(y) > 1 else 0.0
    scale = max(var_y, float(np.mean(y * y)), 1e-12)
    span = np.ptp(x, axis=0) if len(y) > 1 else np.ones(p)
    span = np.where(span > 0, span, 1.0)

    # log10 parameter vector: [signal, ls_1..ls_p, noise]
    centers = np.concatenate([[math.log10(scale)], np.log10(span), [math.log10(scale)]])
    offsets = [np.linspace(-1.5, 1.5, GRID_POINTS)] + \
              [np.linspace(-2.0, 1.0, GRID_POINTS)] * p + \
              [np.linspace(-3.0, 0.0, GRID_POINTS)]
    trace: list[tuple[KernelHyperparams, float]] = []
    cache: dict[tuple, float] = {}

    def to_hp(theta):
        return KernelHyperparams(10 ** theta[0], tuple(10 ** theta[1:1 + p]), 10 ** theta[-1])

    def score(theta):
        key = tuple(np.round(theta, 12))
        if key not in cache:
            hp = to_hp(theta)
            cache[key] = _lml(x, y, hp)
            trace.append((hp, cache[key]))
        return cache[key]

    grids = [c + o for c, o in zip(centers, offsets)]
    if p == 1:
        best, best_val = None, -np.inf
        for a in grids[0]:
            for b in grids[1]:
                for c in grids[2]:
                    theta = np.array([a, b, c])
                    v = score(theta)
                    if v > best_val:
                        best, best_val = theta, v
    else:
        best = centers + np.array([0.0] + [-0.5] * p + [-1.5])
        best_val = score(best)
        for i in range(len(best)):
            for v in grids[i]:
                theta = best.copy()
                theta[i] = v
                s = score(theta)
                if s > best_val:
                    best, best_val = theta, s

    step = 0.5  # decades between coarse grid points
    for _ in range(REFINE_ROUNDS):
        step /= 3.0
        for i in range(len(best)):
            for off in np.linspace(-3 * step, 3 * step, GRID_POINTS):
                theta = best.copy()
                theta[i] += off
                s = score(theta)
                if s > best_val:
                    best, best_val = theta, s

    if not np.isfinite(best_val):
        raise GpFitError("no factorizable hyperparameter candidate")
    model = condition(x, y, to_hp(best))
    return (model, trace) if return_trace else model


def predict(model: GpModel, query, *, include_noise: bool = False):
    """Posterior mean and variance of the latent function.

    ``query`` is a single input vector (returns two floats) or an ``(n, p)``
    array (returns two arrays). Negative variances from round-off are clamped
    to zero and counted in ``model.clamp_count``.
    """
    q = np.asarray(query, dtype=float)
    single = q.ndim <= 1
    q2 = q.reshape(1, -1) if single else q
    if q2.shape[1] != model.input_dim:
        raise ValueError(f"query dimension {q2.shape[1]} != training dimension {model.input_dim}")
    Ks = se_kernel(q2, model.inputs, model.hyperparams)
    mean = (Ks * model.alpha).sum(axis=1)
    # one triangular solve per query keeps batch and scalar results bitwise equal
    v = np.empty_like(Ks)
    for i in range(len(Ks)):
        v[i] = solve_triangular(model.factor, Ks[i], lower=True, check_finite=False)
    var = model.hyperparams.signal_variance - (v * v).sum(axis=1)
    neg = var < 0
    if neg.any():
        model.clamp_count[0] += int(neg.sum())
        var = np.where(neg, 0.0, var)
    if include_noise:
        var = var + model.hyperparams.noise_variance
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def mean_and_grad(model: GpModel, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Posterior mean at a single input and its gradient w.r.t. the input."""
    hp = model.hyperparams
    ls2 = np.asarray(hp.lengthscales) ** 2
    diff = model.inputs - y
    k = hp.signal_variance * np.exp(-0.5 * (diff * diff / ls2).sum(1))
    w = k * model.alpha
    return float(w.sum()), (w @ diff) / ls2


def mean_only(model: GpModel, y: np.ndarray) -> float:
    hp = model.hyperparams
    diff = model.inputs - y
    ls2 = np.asarray(hp.lengthscales) ** 2
    k = np.exp(-0.5 * (diff * diff / ls2).sum(1))
    return float(hp.signal_variance * (k @ model.alpha))


@dataclass(frozen=True, eq=False)
class HybridResidualModel:
    """One bank of scalar GPs per mode; ``modes[m][j]`` models output j."""
    modes: tuple[tuple[GpModel, ...], ...]
    output_selector: np.ndarray

    def __post_init__(self):
        Bg = np.asarray(self.output_selector)
        if any(len(bank) != Bg.shape[1] for bank in self.modes):
            raise ValueError("every bank must have one GP per residual dimension")
        if not (np.all(np.isin(Bg, (0.0, 1.0))) and np.all(Bg.sum(0) == 1)):
            raise ValueError("B_g must have exactly one unit entry per residual dimension")

    @property
    def mode_count(self) -> int:
        return len(self.modes)

    @property
    def residual_dim(self) -> int:
        return self.output_selector.shape[1]

    def bank(self, mode: int) -> tuple[GpModel, ...]:
        if not 0 <= mode < self.mode_count:
            raise ValueError(f"unknown mode id {mode} (have {self.mode_count})")
        return self.modes[mode]

    def mean(self, mode: int, yg: np.ndarray) -> np.ndarray:
        return np.array([mean_only(g, yg) for g in self.bank(mode)])

    def mean_and_jac(self, mode: int, yg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = [mean_and_grad(g, yg) for g in self.bank(mode)]
        return np.array([o[0] for o in out]), np.array([o[1] for o in out])

    def mean_bound(self) -> np.ndarray:
        return np.array([max(bank[j].mean_bound() for bank in self.modes)
                         for j in range(self.residual_dim)])


def predict_hybrid(model: HybridResidualModel, mode: int, query, *, include_noise: bool = True):
    """Mean vector and diagonal covariance of mode ``mode`` (0-based) at ``query``.

    By default the covariance includes each GP's noise variance, since the
    mode model stands for residual plus process noise.
    """
    bank = model.bank(mode)
    preds = [predict(g, query, include_noise=include_noise) for g in bank]
    q = np.asarray(query, dtype=float)
    if q.ndim <= 1:
        return np.array([p[0] for p in preds]), np.diag([p[1] for p in preds])
    mean = np.stack([p[0] for p in preds], axis=-1)
    var = np.stack([p[1] for p in preds], axis=-1)
    return mean, var  # batched: (n, n_d) means, (n, n_d) diagonal variances


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@dataclass
class ResidualDataset:
    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    mode: np.ndarray  # 0-based in memory

    def __len__(self):
        return len(self.mode)


def write_dataset_csv(path, data: ResidualDataset) -> None:
    n, m, nd = data.x.shape[1], data.u.shape[1], data.d.shape[1]
    header = [f"x_{i+1}" for i in range(n)] + [f"u_{i+1}" for i in range(m)] + \
             [f"d_{i+1}" for i in range(nd)] + ["mode"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(data)):
            w.writerow([repr(float(v)) for v in np.concatenate([data.x[i], data.u[i], data.d[i]])]
                       + [int(data.mode[i]) + 1])


def read_dataset_csv(path) -> ResidualDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"training CSV not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = rows[0]
    cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in ("x", "u", "d")}
    if "mode" not in header or not cols["x"] or not cols["d"]:
        raise ValueError(f"{path}: expected columns x_*, u_*, d_*, mode")
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if arr.size == 0:
        raise ValueError(f"{path}: no data rows")
    mode = arr[:, header.index("mode")].astype(int) - 1
    if (mode < 0).any():
        raise ValueError(f"{path}: mode ids must be >= 1")
    return ResidualDataset(arr[:, cols["x"]], arr[:, cols["u"]], arr[:, cols["d"]], mode)


def fit_hybrid(data: ResidualDataset, yg_idx: Sequence[int], output_selector: np.ndarray,
               mode_count: int | None = None,
               hyperparams: list[list[KernelHyperparams]] | None = None) -> HybridResidualModel:
    """Fit one bank per mode on the rows of ``data`` labelled with that mode."""
    z = np.hstack([data.x, data.u])
    yg = z[:, list(yg_idx)]
    M = mode_count if mode_count is not None else int(data.mode.max()) + 1
    banks = []
    for m in range(M):
        rows = data.mode == m
        if not rows.any():
            raise GpFitError(f"no training samples for mode {m + 1}")
        bank = []
        for j in range(data.d.shape[1]):
            hp = hyperparams[m][j] if hyperparams is not None else None
            bank.append(fit_gp(yg[rows], data.d[rows, j], hp))
        banks.append(tuple(bank))
    return HybridResidualModel(tuple(banks), np.asarray(output_selector, dtype=float))


def save_hyperparams(path, model: HybridResidualModel, **extra) -> None:
    doc = {
        "schema": "hgpmpc.gp-bank/1",
        "kernel": "squared-exponential-ard",
        "output_selector": np.asarray(model.output_selector).tolist(),
        "modes": [{"mode": m + 1, "outputs": [g.hyperparams.to_dict() for g in bank]}
                  for m, bank in enumerate(model.modes)],
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_hyperparams(path) -> tuple[list[list[KernelHyperparams]], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "hgpmpc.gp-bank/1":
        raise ValueError(f"{path}: unsupported GP bank schema {doc.get('schema')!r}")
    hps = [[KernelHyperparams.from_dict(o) for o in m["outputs"]]
           for m in sorted(doc["modes"], key=lambda m: m["mode"])]
    return hps, doc
