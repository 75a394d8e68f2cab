"""Per-sample neighborhood kernels from curve-shape and covariate similarity."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import MAXIMIZE, Dataset
from .effectcurve import DoseGrid, EffectCurveGrid
from .errors import KernelCalibrationError
from .nuisance import ImportanceWeights, OutcomeModel

SIGMA2_LO = 1e-6
SIGMA2_HI = 1e6
ROW_SUM_TOL = 0.05


@dataclass(frozen=True)
class KernelMatrix:
    """Positive neighborhood weights, row i = K_i(x_j), with per-row scales."""

    K: np.ndarray
    sigma: np.ndarray
    n_leaf_target: float

    def __post_init__(self):
        K = np.asarray(self.K, float)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "sigma", np.asarray(self.sigma, float))
        if np.any(K <= 0):
            raise ValueError("kernel weights must be positive")

    @property
    def n(self):
        return self.K.shape[0]


def init_curves(om: OutcomeModel, ds: Dataset, grid: DoseGrid):
    """Initial effect curves straight from the fitted outcome mean."""
    vals = om.predict_grid(ds.covariates, grid.points)
    if ds.direction != MAXIMIZE:
        vals = -vals
    return EffectCurveGrid(vals, grid)


def curve_distance(curves: EffectCurveGrid):
    """Pairwise curve-shape distance.

    D(i, j) = sup_a theta_i + sup_a theta_j - sup_a (theta_i + theta_j),
    evaluated on the grid. Invariant to vertical shifts; zero against any
    constant curve.
    """
    V = curves.values
    n = V.shape[0]
    row_max = V.max(axis=1)
    D = np.empty((n, n))
    for i in range(n):
        D[i] = row_max[i] + row_max - (V[i][None, :] + V).max(axis=1)
    D = 0.5 * (D + D.T)  # exact symmetry despite float noise
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def row_correlation_similarity(D):
    """Pearson correlation of distance-matrix rows; constant rows get 0."""
    D = np.asarray(D, float)
    n = D.shape[0]
    if n < 3:
        raise ValueError("need n >= 3 rows for row correlations")
    centered = D - D.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    constant = norms <= 1e-12 * max(1.0, float(np.abs(D).max()))
    if np.any(constant):
        warnings.warn(f"{int(constant.sum())} constant rows; similarity set to 0")
    safe = np.where(constant, 1.0, norms)
    S = (centered / safe[:, None]) @ (centered / safe[:, None]).T
    S[constant, :] = 0.0
    S[:, constant] = 0.0
    np.fill_diagonal(S, 1.0)
    return np.clip(S, -1.0, 1.0)


def weighted_euclidean_similarity(X, w: ImportanceWeights):
    """Covariate similarity: row correlations of the weighted squared-distance matrix."""
    X = np.asarray(X, float)
    Xw = X * np.sqrt(w.w)[None, :]
    sq = (Xw ** 2).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (Xw @ Xw.T)
    D = np.maximum(0.5 * (D + D.T), 0.0)
    np.fill_diagonal(D, 0.0)
    return row_correlation_similarity(D)


def _row_sum(sims_minus_1, sigma2):
    return float(np.exp(sims_minus_1 / sigma2).sum())


def build_kernels(S, S_tilde, n_leaf, combine="min"):
    """Kernels K_i(x_j) = exp{(combined similarity - 1) / sigma_i^2}.

    The -1 shift keeps every exponent <= 0 so the row sum is monotone in
    sigma_i^2 and per-row bisection hits the target sum ``n_leaf``. The shift
    is a positive per-row rescaling, invisible to the downstream effect
    curves.
    """
    S = np.asarray(S, float)
    St = np.asarray(S_tilde, float)
    if S.shape != St.shape or S.shape[0] != S.shape[1]:
        raise ValueError("similarity matrices must be square and congruent")
    n = S.shape[0]
    if not 1.0 < n_leaf < n:
        raise ValueError(f"need 1 < n_leaf < n, got n_leaf={n_leaf}, n={n}")
    if combine == "min":
        C = np.minimum(S, St)
    elif combine == "max":
        C = np.maximum(S, St)
    else:
        raise ValueError(f"unknown combiner {combine!r}")
    shifted = C - 1.0
    K = np.empty((n, n))
    sigma2 = np.empty(n)
    for i in range(n):
        row = shifted[i]
        lo_sum = _row_sum(row, SIGMA2_LO)
        hi_sum = _row_sum(row, SIGMA2_HI)
        if lo_sum > n_leaf:
            if abs(hi_sum - lo_sum) < 1e-9 * n:
                # flat row sum (e.g. all similarities equal 1): uncalibratable
                warnings.warn(
                    f"row {i}: similarities leave the row sum fixed at "
                    f"{hi_sum:.3g}; returning sigma at the upper bound"
                )
                sigma2[i] = SIGMA2_HI
                K[i] = np.exp(row / SIGMA2_HI)
                continue
            raise KernelCalibrationError(
                f"row {i}: minimum reachable row sum {lo_sum:.3g} exceeds "
                f"target {n_leaf:.3g}"
            )
        if hi_sum < n_leaf:
            raise KernelCalibrationError(
                f"row {i}: maximum reachable row sum {hi_sum:.3g} below "
                f"target {n_leaf:.3g}"
            )
        lo, hi = SIGMA2_LO, SIGMA2_HI
        for _ in range(200):
            mid = np.sqrt(lo * hi)
            val = _row_sum(row, mid)
            if abs(val - n_leaf) <= 0.01 * n_leaf:
                break
            if val < n_leaf:
                lo = mid
            else:
                hi = mid
        sigma2[i] = mid
        K[i] = np.exp(row / mid)
    # exp can underflow to exactly 0 for very dissimilar pairs; keep weights
    # strictly positive so downstream normalizations stay well defined
    np.maximum(K, 1e-300, out=K)
    return KernelMatrix(K, np.sqrt(sigma2), float(n_leaf))
