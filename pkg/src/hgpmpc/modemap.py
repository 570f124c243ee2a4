"""Iterative mode mapping.

Residuals observed along a trajectory are scored under every mode's GP, the
likelihoods are traded off against the current classifier's prior through a
KDE-derived exponent, and the classifier is fine-tuned on the resulting soft
labels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .gp import HybridResidualModel, predict

LOG_TINY = math.log(np.finfo(float).tiny)


@dataclass(frozen=True)
class FeatureSplit:
    """Index selectors into ``z = (x, u)`` for the GP and classifier inputs."""
    yg_idx: tuple[int, ...]
    yd_idx: tuple[int, ...]

    def yg_of(self, z):
        return np.asarray(z)[..., list(self.yg_idx)]

    def yd_of(self, z):
        return np.asarray(z)[..., list(self.yd_idx)]


@dataclass(frozen=True)
class TradeoffConfig:
    bandwidth: float = 0.25
    kde_min: float = 0.05
    kde_max: float = 1.0
    alpha_min: float = 0.3
    alpha_max: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.kde_min < self.kde_max:
            raise ValueError("kde_min must be below kde_max")
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 < alpha_min <= alpha_max")


@dataclass
class PriorDensityStore:
    dim: int
    points: np.ndarray = None
    cap: int | None = 20_000

    def __post_init__(self):
        if self.points is None:
            self.points = np.zeros((0, self.dim))

    def __len__(self):
        return len(self.points)

    def extend(self, pts) -> None:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        self.points = np.vstack([self.points, pts])

    def copy(self) -> "PriorDensityStore":
        return PriorDensityStore(self.dim, self.points.copy(), self.cap)

    def sample(self) -> np.ndarray:
        if self.cap is None or len(self.points) <= self.cap:
            return self.points
        idx = np.random.default_rng(0).choice(len(self.points), self.cap, replace=False)
        return self.points[np.sort(idx)]

    def to_dict(self) -> dict:
        return {"dim": self.dim, "cap": self.cap, "points": self.points.ravel().tolist()}

    @classmethod
    def from_dict(cls, d) -> "PriorDensityStore":
        pts = np.asarray(d["points"], dtype=float).reshape(-1, d["dim"])
        return cls(d["dim"], pts, d.get("cap"))


# ---------------------------------------------------------------------------
# classifier: small sinusoidal MLP with a softmax head
# ---------------------------------------------------------------------------

@dataclass
class ModeClassifier:
    weights: list            # [(W, b), ...]; W has shape (fan_in, fan_out)
    input_low: np.ndarray
    input_high: np.ndarray
    omega0: float = 30.0

    @classmethod
    def create(cls, input_dim: int, mode_count: int, input_low, input_high,
               hidden: Sequence[int] = (64, 64), seed: int = 0, omega0: float = 30.0):
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, mode_count]
        weights = []
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == 0:
                bound = 1.0 / fi
            elif i < len(sizes) - 2:
                bound = math.sqrt(6.0 / fi)
            else:
                bound = math.sqrt(6.0 / fi) / omega0
            W = rng.uniform(-bound, bound, size=(fi, fo))
            b = np.zeros(fo) if i == len(sizes) - 2 else rng.uniform(-bound, bound, size=fo)
            weights.append((W, b))
        return cls(weights, np.asarray(input_low, float), np.asarray(input_high, float), omega0)

    @property
    def input_dim(self) -> int:
        return self.weights[0][0].shape[0]

    @property
    def mode_count(self) -> int:
        return self.weights[-1][0].shape[1]

    def normalize(self, yd) -> np.ndarray:
        yd = np.asarray(yd, dtype=float)
        return 2.0 * (yd - self.input_low) / (self.input_high - self.input_low) - 1.0

    def _forward(self, xn):
        acts = [xn]
        pre = []
        h = xn
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(self.weights):
            a = h @ W + b
            if i == last:
                pre.append(a)
                break
            if i == 0:
                a = self.omega0 * a
            pre.append(a)
            h = np.sin(a)
            acts.append(h)
        logits = pre[-1]
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p, acts, pre

    def probs(self, yd) -> np.ndarray:
        yd = np.asarray(yd, dtype=float)
        single = yd.ndim == 1
        yd2 = yd.reshape(1, -1) if single else yd
        if yd2.shape[1] != self.input_dim:
            raise ValueError(f"classifier expects {self.input_dim}-d input, got {yd2.shape[1]}")
        p = self._forward(self.normalize(yd2))[0]
        return p[0] if single else p

    def copy(self) -> "ModeClassifier":
        return ModeClassifier([(W.copy(), b.copy()) for W, b in self.weights],
                              self.input_low.copy(), self.input_high.copy(), self.omega0)

    def to_dict(self) -> dict:
        return {
            "omega0": self.omega0,
            "input_low": self.input_low.tolist(),
            "input_high": self.input_high.tolist(),
            "layers": [{"shape": list(W.shape), "W": W.ravel().tolist(), "b": b.tolist()}
                       for W, b in self.weights],
        }

    @classmethod
    def from_dict(cls, d) -> "ModeClassifier":
        weights = [(np.asarray(l["W"], float).reshape(l["shape"]), np.asarray(l["b"], float))
                   for l in d["layers"]]
        return cls(weights, np.asarray(d["input_low"], float), np.asarray(d["input_high"], float),
                   float(d["omega0"]))


def save_mapping_state(path, classifier: ModeClassifier, store: PriorDensityStore) -> None:
    Path(path).write_text(json.dumps({"schema": "hgpmpc.modemap/1",
                                      "classifier": classifier.to_dict(),
                                      "store": store.to_dict()}))


def load_mapping_state(path) -> tuple[ModeClassifier, PriorDensityStore]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "hgpmpc.modemap/1":
        raise ValueError(f"{path}: unsupported mapping-state schema")
    return ModeClassifier.from_dict(doc["classifier"]), PriorDensityStore.from_dict(doc["store"])


def cross_entropy(classifier: ModeClassifier, yd, labels) -> float:
    p = classifier.probs(yd)
    return float(-(labels * np.log(np.maximum(p, 1e-300))).sum(1).mean())


def _gradients(clf: ModeClassifier, xn, labels):
    p, acts, pre = clf._forward(xn)
    loss = float(-(labels * np.log(np.maximum(p, 1e-300))).sum(1).mean())
    grads = [None] * len(clf.weights)
    delta = (p - labels) / len(xn)
    for i in range(len(clf.weights) - 1, -1, -1):
        W, _ = clf.weights[i]
        grads[i] = (acts[i].T @ delta, delta.sum(0))
        if i == 0:
            break
        delta = (delta @ W.T) * np.cos(pre[i - 1])
        if i - 1 == 0:
            delta = delta * clf.omega0
    return loss, grads


def retrain(classifier: ModeClassifier, yd, labels, epochs: int = 500, step_size: float = 1e-3,
            seed: int | None = None, optimizer: str = "gd"):
    """Fine-tune ``classifier`` in place on soft labels by full-batch descent.

    ``optimizer`` is ``"gd"`` (plain gradient steps) or ``"adam"``.

    The iterate with the lowest loss seen during the run is kept, so the
    loss on the dataset never increases. On a non-finite loss the run is
    restarted from the incoming weights with half the step size (at most 5
    times). Returns the per-epoch loss history. ``seed`` is accepted for
    interface symmetry; training is deterministic.
    """
    yd = np.atleast_2d(np.asarray(yd, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    if len(yd) == 0:
        raise ValueError("empty training set")
    if optimizer not in ("gd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if epochs <= 0:
        return []
    xn = classifier.normalize(yd)
    start = [(W.copy(), b.copy()) for W, b in classifier.weights]
    lr = step_size
    for attempt in range(6):
        weights = [(W.copy(), b.copy()) for W, b in start]
        classifier.weights = weights
        m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]
        v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in weights]
        b1, b2, eps = 0.9, 0.999, 1e-8
        best_loss, best = np.inf, None
        history = []
        ok = True
        for t in range(1, epochs + 1):
            loss, grads = _gradients(classifier, xn, labels)
            if not np.isfinite(loss):
                ok = False
                break
            history.append(loss)
            if loss < best_loss:
                best_loss = loss
                best = [(W.copy(), b.copy()) for W, b in classifier.weights]
            if optimizer == "gd":
                classifier.weights = [(W - lr * gW, b - lr * gb)
                                      for (W, b), (gW, gb) in zip(classifier.weights, grads)]
                continue
            new = []
            for i, ((W, b), (gW, gb)) in enumerate(zip(classifier.weights, grads)):
                mW = b1 * m[i][0] + (1 - b1) * gW
                mb = b1 * m[i][1] + (1 - b1) * gb
                vW = b2 * v[i][0] + (1 - b2) * gW * gW
                vb = b2 * v[i][1] + (1 - b2) * gb * gb
                m[i], v[i] = (mW, mb), (vW, vb)
                c1, c2 = 1 - b1 ** t, 1 - b2 ** t
                new.append((W - lr * (mW / c1) / (np.sqrt(vW / c2) + eps),
                            b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)))
            classifier.weights = new
        if ok:
            final = cross_entropy(classifier, yd, labels)
            if np.isfinite(final) and final < best_loss:
                best_loss, best = final, classifier.weights
                history.append(final)
            classifier.weights = best
            return history
        lr *= 0.5
    classifier.weights = start
    raise FloatingPointError("retraining diverged after 5 step-size halvings")


# ---------------------------------------------------------------------------
# Algorithm steps
# ---------------------------------------------------------------------------

def make_residual_tuples(states, inputs, nominal: Callable, split: FeatureSplit):
    """Return ``(yg, yd, d)`` arrays with ``d_k = x_{k+1} - f(x_k, u_k)``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    L = len(states)
    if L < 2:
        raise ValueError("trajectory needs at least two states")
    if len(inputs) < L - 1:
        raise ValueError("need an input for every transition")
    z = np.hstack([states[:-1], inputs[:L - 1]])
    d = np.array([states[k + 1] - nominal(states[k], inputs[k]) for k in range(L - 1)])
    return split.yg_of(z), split.yd_of(z), d


def log_likelihoods(model: HybridResidualModel, yg, d) -> np.ndarray:
    """Gaussian log-density of each residual under each mode; shape (n, M)."""
    yg = np.atleast_2d(np.asarray(yg, dtype=float))
    d = np.atleast_2d(np.asarray(d, dtype=float))
    if d.shape[1] != model.residual_dim:
        raise ValueError("residual dimension mismatch")
    out = np.zeros((len(yg), model.mode_count))
    for m, bank in enumerate(model.modes):
        for j, g in enumerate(bank):
            mu, var = predict(g, yg, include_noise=True)
            var = np.where(var <= 0, 1e-9, var)
            out[:, m] += -0.5 * (d[:, j] - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var)
    return out


def compute_likelihoods(model: HybridResidualModel, yg, d) -> np.ndarray:
    yg = np.asarray(yg, dtype=float)
    single = np.asarray(d).ndim == 1
    ll = log_likelihoods(model, yg.reshape(1, -1) if single else yg, d)
    lik = np.exp(np.maximum(ll, LOG_TINY))
    return lik[0] if single else lik


def compute_priors(classifier: ModeClassifier, yd) -> np.ndarray:
    return classifier.probs(yd)


def kde_density(store: PriorDensityStore, yd, h: float) -> np.ndarray | float:
    """Gaussian-kernel density of the stored points at ``yd`` (0 for an empty store)."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    q = np.asarray(yd, dtype=float)
    single = q.ndim == 1
    q2 = q.reshape(1, -1) if single else q
    pts = store.sample()
    if len(pts) == 0:
        out = np.zeros(len(q2))
    else:
        sq = ((q2[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        out = np.exp(-sq / (2 * h * h)).sum(1) / (math.sqrt(2 * math.pi) * h * len(pts))
    return float(out[0]) if single else out


def alpha_of(kappa, cfg: TradeoffConfig):
    k = np.asarray(kappa, dtype=float)
    frac = np.clip((k - cfg.kde_min) / (cfg.kde_max - cfg.kde_min), 0.0, 1.0)
    a = cfg.alpha_max - frac * (cfg.alpha_max - cfg.alpha_min)
    # exact clamp values at and beyond the breakpoints
    a = np.where(frac >= 1.0, cfg.alpha_min, np.clip(a, cfg.alpha_min, cfg.alpha_max))
    return float(a) if np.ndim(a) == 0 else a


def posteriors_from_log(loglik, priors, alpha):
    """Row-wise ``L^alpha * prior`` normalised; inputs may be batched."""
    loglik = np.atleast_2d(np.asarray(loglik, dtype=float))
    priors = np.atleast_2d(np.asarray(priors, dtype=float))
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (len(loglik),))
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(priors)
        term = np.where(alpha[:, None] == 0, 0.0, alpha[:, None] * loglik)
        num = term + logp
        bad = ~np.isfinite(num).any(axis=1) | np.all(num == -np.inf, axis=1)
        if bad.any():
            # degenerate prior: likelihood only
            num[bad] = loglik[bad]
        num = num - num.max(axis=1, keepdims=True)
        post = np.exp(num)
    post /= post.sum(axis=1, keepdims=True)
    return post


def compute_posteriors(likelihoods, priors, alpha) -> np.ndarray:
    lik = np.asarray(likelihoods, dtype=float)
    single = lik.ndim == 1
    with np.errstate(divide="ignore"):
        ll = np.log(lik)
    post = posteriors_from_log(ll, priors, alpha)
    # the two limits in closed form wherever they are representable
    lik2 = np.atleast_2d(lik)
    pri2 = np.broadcast_to(np.atleast_2d(np.asarray(priors, dtype=float)), lik2.shape)
    a = np.broadcast_to(np.asarray(alpha, dtype=float), (len(lik2),))
    for i in np.flatnonzero((a == 0) | (a == 1)):
        num = pri2[i] if a[i] == 0 else lik2[i] * pri2[i]
        s = num.sum()
        if s > 0 and np.isfinite(s):
            post[i] = num / s
    return post[0] if single else post


def hard_label(classifier: ModeClassifier, yd) -> np.ndarray:
    p = np.atleast_2d(classifier.probs(yd))
    out = np.zeros_like(p)
    out[np.arange(len(p)), p.argmax(axis=1)] = 1.0
    return out[0] if np.asarray(yd).ndim == 1 else out


@dataclass
class IterationInfo:
    alpha: np.ndarray
    kappa: np.ndarray
    labels: np.ndarray
    loglik: np.ndarray
    priors: np.ndarray
    loss_history: list = field(default_factory=list)


def iterate(model: HybridResidualModel, states, inputs, nominal: Callable, split: FeatureSplit,
            classifier: ModeClassifier, store: PriorDensityStore, cfg: TradeoffConfig,
            epochs: int = 500, step_size: float = 1e-3, optimizer: str = "gd"):
    """One pass of the mapping loop on a single trajectory.

    Mutates ``classifier`` (fine-tuning) and ``store`` (appends this
    trajectory's classifier inputs) and returns them with diagnostics.
    """
    yg, yd, d = make_residual_tuples(states, inputs, nominal, split)
    Bg = model.output_selector
    ll = log_likelihoods(model, yg, d @ Bg)
    priors = compute_priors(classifier, yd)
    yd_n = classifier.normalize(yd)
    kappa = np.atleast_1d(kde_density(store, yd_n, cfg.bandwidth))
    alpha = np.atleast_1d(alpha_of(kappa, cfg))
    labels = posteriors_from_log(ll, priors, alpha)
    hist = retrain(classifier, yd, labels, epochs=epochs, step_size=step_size, optimizer=optimizer)
    store.extend(yd_n)
    return classifier, store, IterationInfo(alpha, kappa, labels, ll, priors, hist)
