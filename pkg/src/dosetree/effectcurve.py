"""Doubly robust pseudo-outcomes and per-sample effect curves.

The smoother is local-linear kernel regression on the dose axis with a
closed-form intercept; the bandwidth is chosen once by leave-one-out
cross-validation on the population-kernel pseudo-outcomes and reused for
every per-sample curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .errors import BandwidthSelectionError, DegenerateKernelError
from .nuisance import OutcomeModel, PropensityModel

DEFAULT_GRID_SIZE = 100
DEFAULT_CANDIDATES = (0.03, 0.05, 0.08, 0.12, 0.18, 0.27, 0.40)
_CHUNK = 512


@dataclass(frozen=True)
class DoseGrid:
    """Strictly increasing dose grid spanning [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("grid must be a 1-d array with >= 2 points")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("grid must include the endpoints 0 and 1")

    @classmethod
    def default(cls, size=DEFAULT_GRID_SIZE):
        return cls(np.linspace(0.0, 1.0, size))

    @property
    def size(self):
        return self.points.size

    def snap_index(self, doses):
        """Index of the nearest grid point for each dose."""
        idx = np.searchsorted(self.points, np.asarray(doses, float))
        idx = np.clip(idx, 1, self.size - 1)
        left = self.points[idx - 1]
        right = self.points[idx]
        return np.where(np.abs(doses - left) <= np.abs(right - doses), idx - 1, idx)


@dataclass(frozen=True)
class SmootherConfig:
    """Bandwidth and kernel choice for the dose-axis smoother."""

    bandwidth: object = "auto"
    kernel: str = "epanechnikov"
    candidates: tuple = DEFAULT_CANDIDATES

    def __post_init__(self):
        if self.bandwidth != "auto" and not (float(self.bandwidth) > 0):
            raise ValueError("fixed bandwidth must be positive")
        if self.kernel not in ("epanechnikov", "gaussian"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.bandwidth == "auto" and not self.candidates:
            raise ValueError("auto bandwidth needs a nonempty candidate list")


@dataclass(frozen=True)
class EffectCurveGrid:
    """Per-sample effect curves evaluated on a shared dose grid."""

    values: np.ndarray  # (n, G)
    grid: DoseGrid

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[1] != self.grid.size:
            raise ValueError("values must be (n, G) aligned with the grid")
        if not np.all(np.isfinite(vals)):
            raise ValueError("effect curves must be finite")

    @property
    def n(self):
        return self.values.shape[0]


def _kernel(u, kind):
    if kind == "epanechnikov":
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return norm.pdf(u)


def _kernel_at_zero(kind):
    return 0.75 if kind == "epanechnikov" else float(norm.pdf(0.0))


def _ll_weights(doses, eval_points, b, kind):
    """Local-linear intercept weights L with shape (n, m); column g smooths at
    eval_points[g]. Returns (L, n_fallback): singular columns fall back to
    Nadaraya-Watson, columns with no kernel support fall back to the global
    mean; both are counted."""
    doses = np.asarray(doses, float)
    eval_points = np.asarray(eval_points, float)
    n, m = doses.size, eval_points.size
    L = np.empty((n, m))
    n_fallback = 0
    for start in range(0, m, _CHUNK):
        pts = eval_points[start:start + _CHUNK]
        u = (doses[:, None] - pts[None, :]) / b  # (n, c)
        k = _kernel(u, kind) / b
        s0 = k.sum(axis=0)
        s1 = (k * u).sum(axis=0)
        s2 = (k * u * u).sum(axis=0)
        det = s0 * s2 - s1 * s1
        singular = det <= 1e-12 * np.maximum(s0 * s2, s1 * s1) + 1e-300
        det_safe = np.where(singular, 1.0, det)
        block = (s2[None, :] - s1[None, :] * u) * k / det_safe[None, :]
        if np.any(singular):
            no_support = s0 <= 1e-300
            nw = k / np.where(no_support, 1.0, s0)[None, :]
            block = np.where(singular[None, :], nw, block)
            if np.any(no_support):
                block[:, no_support] = 1.0 / n
            n_fallback += int(singular.sum())
        L[:, start:start + _CHUNK] = block
    return L, n_fallback


def local_linear_smooth(xi, doses, grid: DoseGrid, cfg: SmootherConfig):
    """Smooth pseudo-outcomes onto the dose grid; returns the intercepts."""
    b = loo_bandwidth(xi, doses, cfg.candidates, cfg.kernel) \
        if cfg.bandwidth == "auto" else float(cfg.bandwidth)
    L, _ = _ll_weights(doses, grid.points, b, cfg.kernel)
    return np.asarray(xi, float) @ L


def hat_diagonal(doses, b, kind):
    """Leverage of each sample in the local-linear smoother at its own dose."""
    doses = np.asarray(doses, float)
    n = doses.size
    k0 = _kernel_at_zero(kind) / b
    diag = np.empty(n)
    for start in range(0, n, _CHUNK):
        pts = doses[start:start + _CHUNK]
        u = (doses[:, None] - pts[None, :]) / b
        k = _kernel(u, kind) / b
        s0 = k.sum(axis=0)
        s1 = (k * u).sum(axis=0)
        s2 = (k * u * u).sum(axis=0)
        det = s0 * s2 - s1 * s1
        with np.errstate(divide="ignore", invalid="ignore"):
            diag[start:start + _CHUNK] = s2 * k0 / det
    return diag


def loo_bandwidth(xi, doses, candidates, kind="epanechnikov"):
    """Leave-one-out bandwidth selection via the hat-matrix shortcut.

    Minimizes sum_i {(xi_i - theta_b(A_i)) / (1 - H_ii)}^2; candidates with
    any leverage >= 1 or an unstable smoother are skipped. Near-ties go to
    the smallest bandwidth.
    """
    xi = np.asarray(xi, float)
    doses = np.asarray(doses, float)
    results = []
    for b in sorted(float(c) for c in candidates):
        if b <= 0:
            raise ValueError("bandwidth candidates must be positive")
        diag = hat_diagonal(doses, b, kind)
        if not np.all(np.isfinite(diag)) or np.any(diag >= 1.0):
            continue
        L, n_fallback = _ll_weights(doses, doses, b, kind)
        if n_fallback:
            continue
        fitted = xi @ L
        crit = float(np.sum(((xi - fitted) / (1.0 - diag)) ** 2))
        results.append((b, crit))
    if not results:
        raise BandwidthSelectionError("no candidate bandwidth was usable")
    best = min(crit for _, crit in results)
    tol = 1e-9 * max(1.0, best)
    return min(b for b, crit in results if crit <= best + tol)


def _marginal_dose_density(pm: PropensityModel, doses, X):
    """w(a_j) = average over samples of the fitted density pi(a_j | x_l)."""
    means = pm.mean(X)
    doses = np.asarray(doses, float)
    out = np.empty(doses.size)
    for start in range(0, doses.size, _CHUNK):
        pts = doses[start:start + _CHUNK]
        z_lo = (0.0 - means) / pm.s
        z_hi = (1.0 - means) / pm.s
        mass = np.maximum(norm.cdf(z_hi) - norm.cdf(z_lo), 1e-12)
        dens = norm.pdf((pts[None, :] - means[:, None]) / pm.s) / pm.s / mass[:, None]
        out[start:start + _CHUNK] = np.maximum(dens, pm.eps).mean(axis=0)
    return out


def dr_pseudo_outcomes(ds: Dataset, om: OutcomeModel, pm: PropensityModel,
                       kernel_row):
    """Doubly robust pseudo-outcomes for one kernel neighborhood.

    xi_j = kappa^{-1} [ (Y_j - mu(X_j, A_j)) / pi(A_j | X_j) * w(A_j) * K(X_j)
                        + m(A_j) ]
    with w, m, kappa the empirical averages over the sample.
    """
    k = np.asarray(kernel_row, float)
    if k.shape != (ds.n,) or np.any(k < 0):
        raise ValueError("kernel_row must be a nonnegative length-n vector")
    kappa = k.mean()
    if kappa <= 0:
        raise DegenerateKernelError("kernel row sums to zero")
    X, A, Y = ds.covariates, ds.doses, ds.outcomes
    mu_obs = om.predict(X, A)
    pi_obs = pm.density(A, X)
    w_bar = _marginal_dose_density(pm, A, X)
    m_hat = np.empty(ds.n)
    for start in range(0, ds.n, _CHUNK):
        cols = om.predict_grid(X, A[start:start + _CHUNK])  # (n, c)
        m_hat[start:start + _CHUNK] = k @ cols / ds.n
    resid_term = (Y - mu_obs) / pi_obs * w_bar * k
    return (resid_term + m_hat) / kappa


def estimate_effect_curves(ds: Dataset, om: OutcomeModel, pm: PropensityModel,
                           kernel_matrix, grid: DoseGrid, cfg: SmootherConfig):
    """Per-sample effect curves: DR pseudo-outcomes row by row, smoothed.

    ``kernel_matrix`` is the neighborhood weight matrix, one row per target
    neighborhood and one column per training sample; the usual case is the
    (n, n) per-sample matrix with row i = K_i(x_j), but any (m, n) stack of
    neighborhoods works (e.g. one row per tree leaf). The bandwidth is
    selected once, on the population (all-ones kernel) pseudo-outcomes,
    when the config says "auto".

    Returns ``(EffectCurveGrid, diagnostics)`` where diagnostics records the
    bandwidth and the number of grid points needing a smoother fallback.
    """
    K = np.atleast_2d(np.asarray(kernel_matrix, float))
    if K.shape[1] != ds.n:
        raise ValueError("kernel matrix must have one column per sample")
    X, A, Y = ds.covariates, ds.doses, ds.outcomes
    mu_obs = om.predict(X, A)
    pi_obs = pm.density(A, X)
    w_bar = _marginal_dose_density(pm, A, X)
    r = (Y - mu_obs) / pi_obs * w_bar  # shared residual factor, per sample j

    kappa = K.mean(axis=1)
    if np.any(kappa <= 0):
        raise DegenerateKernelError("a kernel row sums to zero")
    # m_hat rows: (K @ M) / n with M[l, j] = mu(x_l, A_j), built in chunks.
    KM = np.empty((K.shape[0], ds.n))
    m_pop = np.empty(ds.n)
    for start in range(0, ds.n, _CHUNK):
        cols = om.predict_grid(X, A[start:start + _CHUNK])
        KM[:, start:start + _CHUNK] = K @ cols / ds.n
        m_pop[start:start + _CHUNK] = cols.mean(axis=0)
    xi = (r[None, :] * K + KM) / kappa[:, None]

    if cfg.bandwidth == "auto":
        # population pseudo-outcomes: the all-ones kernel row (kappa = 1)
        xi_pop = r + m_pop
        b = loo_bandwidth(xi_pop, A, cfg.candidates, cfg.kernel)
    else:
        b = float(cfg.bandwidth)
    L, n_fallback = _ll_weights(A, grid.points, b, cfg.kernel)
    curves = xi @ L
    diagnostics = {"bandwidth": b, "smoother_fallbacks": n_fallback}
    return EffectCurveGrid(curves, grid), diagnostics
