"""Covariance propagation along a horizon and chance-constraint tightening."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .gp import HybridResidualModel, predict

# Acklam's rational approximation coefficients
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def norm_ppf(p: float) -> float:
    """Standard normal quantile.

    Rational approximation (relative error ~1e-9) polished by one Halley step
    against ``math.erfc``, which brings it to near machine precision.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log(1 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
    u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def propagate_covariance(grad_f, Bg, sigma_x, sigma_g) -> np.ndarray:
    """One step of the first-order covariance recursion.

    The joint state/residual covariance is block diagonal, so the update is
    ``grad_f @ sigma_x @ grad_f.T + Bg @ sigma_g @ Bg.T``.
    """
    grad_f = np.asarray(grad_f, dtype=float)
    Bg = np.asarray(Bg, dtype=float)
    sigma_g = np.atleast_2d(np.asarray(sigma_g, dtype=float))
    out = grad_f @ np.asarray(sigma_x, dtype=float) @ grad_f.T + Bg @ sigma_g @ Bg.T
    return 0.5 * (out + out.T)


def bonferroni_level(p_x: float, n_faces: int) -> float:
    return 1.0 - (1.0 - p_x) / n_faces


def tighten_halfspace(a, b: float, sigma_x, p_row: float) -> float:
    """Shrink ``a.x <= b`` by the ``p_row`` quantile of the projected std."""
    if not 0.5 <= p_row < 1.0:
        raise ValueError("p must lie in [0.5, 1)")
    a = np.asarray(a, dtype=float)
    s2 = float(a @ np.asarray(sigma_x, dtype=float) @ a)
    if s2 <= 0.0 or p_row == 0.5:
        return float(b)
    return float(b) - norm_ppf(p_row) * math.sqrt(s2)


def box_halfspaces(low, high) -> tuple[np.ndarray, np.ndarray]:
    """Faces of an axis-aligned box as rows of ``A x <= b`` (infinite sides skipped)."""
    low, high = np.asarray(low, dtype=float), np.asarray(high, dtype=float)
    rows, rhs = [], []
    for i in range(len(low)):
        if np.isfinite(high[i]):
            e = np.zeros(len(low)); e[i] = 1.0
            rows.append(e); rhs.append(high[i])
        if np.isfinite(low[i]):
            e = np.zeros(len(low)); e[i] = -1.0
            rows.append(e); rhs.append(-low[i])
    return np.array(rows), np.array(rhs)


@dataclass
class CovarianceTrajectory:
    sigmas: list  # N+1 matrices, sigmas[0] == 0


@dataclass
class TightenedConstraints:
    """Per-step half-spaces ``A[k] x_k <= b_tight[k]`` for k = 1..N (index k-1)."""
    A: np.ndarray        # (n_faces, n)
    b: np.ndarray        # (n_faces,) original right-hand sides
    b_tight: np.ndarray  # (N, n_faces)

    @property
    def horizon(self) -> int:
        return self.b_tight.shape[0]

    @classmethod
    def untightened(cls, A, b, N: int) -> "TightenedConstraints":
        return cls(np.asarray(A), np.asarray(b), np.tile(np.asarray(b, dtype=float), (N, 1)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "face", "a", "b", "b_tight"])
            for k in range(self.horizon):
                for f in range(len(self.b)):
                    w.writerow([k + 1, f, " ".join(repr(float(v)) for v in self.A[f]),
                                repr(float(self.b[f])), repr(float(self.b_tight[k, f]))])


def precompute_reference_uncertainty(model: HybridResidualModel, yg_ref: np.ndarray,
                                     modes_ref, jacobians, p_x: float, A_box, b_box,
                                     *, tighten: bool = True):
    """Residual covariances, state covariances and shrunk boxes along a reference.

    ``yg_ref`` holds the GP inputs at reference steps 0..N-1, ``modes_ref``
    the active mode at those steps and ``jacobians`` the nominal state
    Jacobians there. Returns ``(sigma_g_list, CovarianceTrajectory,
    TightenedConstraints)``.
    """
    N = len(modes_ref)
    Bg = model.output_selector
    n = Bg.shape[0]
    sig_g = []
    for k in range(N):
        bank = model.bank(int(modes_ref[k]))
        sig_g.append(np.diag([predict(g, yg_ref[k], include_noise=True)[1] for g in bank]))
    sigmas = [np.zeros((n, n))]
    for k in range(N):
        sigmas.append(propagate_covariance(jacobians[k], Bg, sigmas[-1], sig_g[k]))
    A_box, b_box = np.asarray(A_box, dtype=float), np.asarray(b_box, dtype=float)
    if not tighten:
        return sig_g, CovarianceTrajectory(sigmas), TightenedConstraints.untightened(A_box, b_box, N)
    z = norm_ppf(bonferroni_level(p_x, len(b_box)))
    bt = np.empty((N, len(b_box)))
    for k in range(N):
        proj = np.einsum("fi,ij,fj->f", A_box, sigmas[k + 1], A_box)
        bt[k] = b_box - z * np.sqrt(np.maximum(proj, 0.0))
    return sig_g, CovarianceTrajectory(sigmas), TightenedConstraints(A_box, b_box, bt)
