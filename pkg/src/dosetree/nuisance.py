"""Working models: outcome mean, continuous-dose propensity, interaction importance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm
from sklearn.ensemble import GradientBoostingRegressor
from sklearn.model_selection import KFold

from .data import MAXIMIZE, Dataset
from .errors import DegeneratePropensityError, InsufficientDataError

MIN_FIT_SIZE = 20
DENSITY_FLOOR = 1e-3
RESIDUAL_SCALE_FLOOR = 0.01


@dataclass(frozen=True)
class RegressorConfig:
    """Gradient-boosted-trees settings shared by all nuisance fits."""

    n_estimators: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    subsample: float = 1.0
    early_stopping: int = 10  # validation-loss patience; 0 disables
    seed: int = 0

    def make(self):
        # Early stopping keeps the fit honest: without it the booster
        # interpolates its training targets and the residual-based bias
        # correction downstream has nothing to work with.
        extra = {}
        if self.early_stopping:
            extra = {"n_iter_no_change": self.early_stopping,
                     "validation_fraction": 0.2}
        return GradientBoostingRegressor(
            n_estimators=self.n_estimators,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            subsample=self.subsample,
            random_state=self.seed,
            **extra,
        )


class OutcomeModel:
    """Fitted conditional mean of the outcome given (covariates, dose).

    ``predict_fn`` takes a design matrix with the dose appended as the last
    column. Constructed either by :func:`fit_outcome_model` or directly from
    any callable (used to plug in oracle models in tests).
    """

    def __init__(self, predict_fn, n_train, p):
        self._predict_fn = predict_fn
        self.n_train = n_train
        self.p = p

    def predict(self, X, a):
        """Point prediction at covariates ``X`` (m, p) and dose ``a`` (scalar or (m,))."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[1]}")
        a = np.broadcast_to(np.asarray(a, dtype=float), (X.shape[0],))
        out = self._predict_fn(np.column_stack([X, a]))
        return np.asarray(out, dtype=float)

    def predict_grid(self, X, grid_points):
        """Matrix of predictions, rows = samples of ``X``, columns = grid doses."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m, g = X.shape[0], len(grid_points)
        design = np.column_stack(
            [np.repeat(X, g, axis=0), np.tile(grid_points, m)]
        )
        return np.asarray(
            self._predict_fn(design), dtype=float
        ).reshape(m, g)


class PropensityModel:
    """Conditional dose density: truncated Gaussian around a fitted mean.

    ``density(a, X)`` is the Normal(mean_fn(X), s) density truncated and
    renormalized to [0, 1], floored at ``eps`` (positivity guard).
    """

    def __init__(self, mean_fn, s, eps=DENSITY_FLOOR):
        if s <= 0:
            raise ValueError("residual scale must be positive")
        self.mean_fn = mean_fn
        self.s = float(s)
        self.eps = float(eps)

    def mean(self, X):
        return np.asarray(self.mean_fn(np.atleast_2d(np.asarray(X, float))), float)

    def density(self, a, X):
        m = self.mean(X)
        a = np.broadcast_to(np.asarray(a, dtype=float), m.shape)
        z_lo = (0.0 - m) / self.s
        z_hi = (1.0 - m) / self.s
        mass = norm.cdf(z_hi) - norm.cdf(z_lo)
        dens = norm.pdf((a - m) / self.s) / self.s / np.maximum(mass, 1e-12)
        dens = np.where((a < 0.0) | (a > 1.0), 0.0, dens)
        return np.maximum(dens, self.eps)


@dataclass(frozen=True)
class ImportanceWeights:
    """Per-covariate weights for dose-interaction strength; nonnegative, sum 1."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if np.any(w < 0):
            raise ValueError("importance weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("importance weights must sum to 1")


def fit_outcome_model(ds: Dataset, cfg: RegressorConfig = RegressorConfig()):
    """Regress the outcome on (covariates, dose)."""
    if ds.n < MIN_FIT_SIZE:
        raise InsufficientDataError(f"need n >= {MIN_FIT_SIZE}, got {ds.n}")
    design = np.column_stack([ds.covariates, ds.doses])
    reg = cfg.make().fit(design, ds.outcomes)
    return OutcomeModel(reg.predict, ds.n, ds.p)


def fit_propensity_model(ds: Dataset, cfg: RegressorConfig = RegressorConfig(),
                         eps=DENSITY_FLOOR):
    """Regress the dose on covariates; residual scale from out-of-fold residuals.

    Out-of-fold residuals avoid the shrinkage the boosted trees produce on
    their own training data, which would overstate how concentrated the dose
    distribution is.
    """
    if ds.n < MIN_FIT_SIZE:
        raise InsufficientDataError(f"need n >= {MIN_FIT_SIZE}, got {ds.n}")
    if np.var(ds.doses) < 1e-16:
        raise DegeneratePropensityError("doses are constant")
    X, A = ds.covariates, ds.doses
    oof = np.empty_like(A)
    for train, test in KFold(n_splits=5, shuffle=True, random_state=cfg.seed).split(X):
        fold_reg = cfg.make().fit(X[train], A[train])
        oof[test] = fold_reg.predict(X[test])
    resid = A - oof
    if np.var(resid) < 1e-16:
        raise DegeneratePropensityError("dose residuals have zero variance")
    s = max(float(np.std(resid)), RESIDUAL_SCALE_FLOOR)
    reg = cfg.make().fit(X, A)
    return PropensityModel(reg.predict, s, eps)


def propensity_density(model: PropensityModel, a, X):
    """Floored truncated-normal density of dose ``a`` given covariates ``X``."""
    return model.density(a, X)


def greedy_doses(model: OutcomeModel, ds: Dataset, grid_points):
    """Per-sample dose maximizing (or minimizing) the fitted outcome mean."""
    preds = model.predict_grid(ds.covariates, grid_points)
    idx = np.argmax(preds, axis=1) if ds.direction == MAXIMIZE else np.argmin(preds, axis=1)
    return np.asarray(grid_points)[idx]


def variable_importance(model: OutcomeModel, ds: Dataset, grid_points,
                        cfg: RegressorConfig = RegressorConfig()):
    """Dose-interaction importance of each covariate.

    A covariate matters here only through how it moves the per-sample greedy
    dose, not through any main effect on the outcome: the greedy doses are
    regressed on the covariates and the auxiliary model's impurity-decrease
    importances are returned, normalized to sum 1.
    """
    best = greedy_doses(model, ds, grid_points)
    if np.ptp(best) < 1e-12:
        warnings.warn("greedy doses are constant; returning uniform importance")
        return ImportanceWeights(np.full(ds.p, 1.0 / ds.p))
    aux = cfg.make().fit(ds.covariates, best)
    w = np.asarray(aux.feature_importances_, dtype=float)
    total = w.sum()
    if total <= 0:
        warnings.warn("auxiliary importances vanished; returning uniform importance")
        return ImportanceWeights(np.full(ds.p, 1.0 / ds.p))
    return ImportanceWeights(w / total)
