"""Single-stage fitting pipeline: nuisance fits -> kernels -> curves -> tree."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, DoseScaler, standardize_doses
from .effectcurve import (DoseGrid, SmootherConfig, estimate_effect_curves)
from .kernelsearch import (build_kernels, curve_distance, init_curves,
                           row_correlation_similarity,
                           weighted_euclidean_similarity)
from .nuisance import (RegressorConfig, fit_outcome_model,
                       fit_propensity_model, variable_importance)
from .tao import AnnealSchedule, TaoConfig, DoseTree, tao_fit, _route_subsets


@dataclass(frozen=True)
class PipelineConfig:
    """Hyperparameters for one full single-stage fit."""

    grid_size: int = 100
    n_leaf: object = None  # None -> n / 8
    combine: str = "min"
    kernel_passes: int = 2
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    tao: TaoConfig = field(default_factory=lambda: TaoConfig(restarts=40))
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    curve_regressor: RegressorConfig = field(
        default_factory=lambda: RegressorConfig(
            n_estimators=800, learning_rate=0.05, max_depth=6,
            early_stopping=0))
    seed: int = 0


@dataclass
class StageFit:
    """One fitted stage: the dose tree plus everything needed to apply it."""

    tree: DoseTree
    scaler: DoseScaler
    feature_names: tuple
    outcome_model: object
    grid: DoseGrid
    diagnostics: dict
    leaf_curves: object = None  # (n_leaves, G) summed curves, or None

    def doses_for(self, H):
        """Recommended doses in original units for history matrix H."""
        return self.scaler.unscale(self.tree.assigned_dose(H))


def fit_single_stage(ds: Dataset, cfg: PipelineConfig = PipelineConfig()):
    """Run the whole single-stage pipeline and return a :class:`StageFit`."""
    work = ds.as_maximization()
    work, scaler = standardize_doses(work)
    grid = DoseGrid.default(cfg.grid_size)
    reg_cfg = replace(cfg.regressor, seed=cfg.seed)
    curve_reg_cfg = replace(cfg.curve_regressor, seed=cfg.seed)

    # Two outcome fits with different regularization: a strong one whose
    # predicted curves seed the kernel search (predictive quality is all
    # that matters there), and an early-stopped one whose training
    # residuals still carry the model misfit, which the doubly robust
    # correction needs to see.
    om_curve = fit_outcome_model(work, curve_reg_cfg)
    om = fit_outcome_model(work, reg_cfg)
    weights = variable_importance(om_curve, work, grid.points, curve_reg_cfg)
    curves0 = init_curves(om_curve, work, grid)
    S_tilde = weighted_euclidean_similarity(work.covariates, weights)
    n_leaf = float(cfg.n_leaf) if cfg.n_leaf is not None else work.n / 8.0
    pm = fit_propensity_model(work, reg_cfg)

    # Kernels and curves reinforce each other: better curves give purer
    # kernels, which in turn sharpen the curve estimates, so optionally
    # rebuild the kernels from the corrected curves and re-estimate.
    curves = curves0
    for _ in range(max(1, cfg.kernel_passes)):
        D = curve_distance(curves)
        S = row_correlation_similarity(D)
        kernels = build_kernels(S, S_tilde, n_leaf, cfg.combine)
        curves, curve_diag = estimate_effect_curves(
            work, om, pm, kernels.K, grid, cfg.smoother)

    tao_cfg = replace(cfg.tao, seed=cfg.seed)
    result = tao_fit(curves, work.covariates, tao_cfg, cfg.anneal,
                     feature_probs=weights.w)

    # The per-sample kernels are deliberately local and carry some neighbor
    # contamination, which pulls every curve's peak toward the population
    # mean dose. Once the partition is fixed, each leaf is itself a clean
    # neighborhood, so re-estimate one curve per leaf (indicator kernel)
    # and set the leaf dose to its peak.
    leaf_curves = _refine_leaf_doses(result.tree, work, om, pm, grid,
                                     cfg.smoother)
    diagnostics = {
        "bandwidth": curve_diag["bandwidth"],
        "smoother_fallbacks": curve_diag["smoother_fallbacks"],
        "objective": result.objective,
        "objective_trace": result.trace,
        "restart_objectives": result.restart_objectives,
        "n_leaves": result.tree.n_leaves(),
        "n_leaves_unpruned": 2 ** tao_cfg.height,
        "importance": weights.w.tolist(),
    }
    return StageFit(tree=result.tree, scaler=scaler,
                    feature_names=work.feature_names, outcome_model=om_curve,
                    grid=grid, diagnostics=diagnostics,
                    leaf_curves=leaf_curves)


_VERTEX_WINDOW = 0.3
_VERTEX_MIN_SAMPLES = 10
_VERTEX_AGREEMENT = 0.2


def _refine_leaf_doses(tree, work, om, pm, grid, smoother_cfg):
    """Re-estimate each leaf's dose from the leaf-indicator neighborhood.

    The leaf curve's peak locates the best dose only up to smoothing noise
    (a leaf holds a few dozen samples), so the peak is polished with a
    parametric step: a quadratic fit of the leaf's observed outcomes on the
    doses falling in a window around the peak, whose vertex replaces the
    grid argmax when the fit is concave. Updates the tree's leaf doses in
    place and returns the per-leaf curves normalized to a maximum of zero
    (the exported leaf-curve table).
    """
    subsets = _route_subsets(tree.root, work.covariates)
    leaves = list(tree.leaves())
    K = np.zeros((len(leaves), work.n))
    for row, leaf in enumerate(leaves):
        idx = subsets[id(leaf)]
        if idx.size:
            K[row, idx] = 1.0
        else:  # empty leaf (possible only pre-pruning); fall back to global
            K[row, :] = 1.0
    curves, _ = estimate_effect_curves(work, om, pm, K, grid, smoother_cfg)
    for row, leaf in enumerate(leaves):
        peak = float(grid.points[int(np.argmax(curves.values[row]))])
        idx = subsets[id(leaf)]
        leaf.dose = _polish_peak(peak, work.doses[idx], work.outcomes[idx])
    return curves.values - curves.values.max(axis=1, keepdims=True)


def _polish_peak(peak, doses, outcomes, window=_VERTEX_WINDOW,
                 agreement=_VERTEX_AGREEMENT):
    """Parametric polish of a leaf curve's grid-argmax dose.

    Prefers the vertex of a quadratic fit over the full dose range when that
    vertex lands near the nonparametric peak (the dose response is then
    globally quadratic and the full-range fit has the least variance);
    otherwise falls back to a quadratic fit restricted to a window around
    the peak, which tolerates peaked, non-quadratic responses. Keeps the
    grid argmax whenever a fit is infeasible or not concave.
    """
    full = _quadratic_vertex(doses, outcomes, 0.0, 1.0)
    if full is not None and abs(full - peak) <= agreement:
        return full
    lo, hi = max(0.0, peak - window), min(1.0, peak + window)
    sel = (doses >= lo) & (doses <= hi)
    local = _quadratic_vertex(doses[sel], outcomes[sel], lo, hi)
    return peak if local is None else local


def _quadratic_vertex(doses, outcomes, lo, hi):
    """Clipped vertex of a concave quadratic fit, or None if infeasible."""
    if doses.size < _VERTEX_MIN_SAMPLES:
        return None
    coef = np.polyfit(doses, outcomes, 2)
    if coef[0] >= 0:
        return None
    return float(np.clip(-coef[1] / (2.0 * coef[0]), lo, hi))
