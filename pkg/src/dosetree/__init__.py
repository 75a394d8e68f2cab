"""Interpretable dose decision trees for continuous-dosage treatment regimes.

The pipeline estimates doubly robust individualized dose-effect curves,
builds covariate-similarity kernels from curve geometry, and fits a
globally optimized (non-greedy) binary dose tree per treatment stage, with
backward induction across stages.
"""

from .data import (Dataset, DoseScaler, StageData, load_csv, load_stage_csv,
                   standardize_doses, warfarin_reward)
from .dtr import Policy, fit_dtr, recommend
from .effectcurve import (DoseGrid, EffectCurveGrid, SmootherConfig,
                          estimate_effect_curves, local_linear_smooth,
                          loo_bandwidth)
from .errors import (BandwidthSelectionError, DegenerateDoseError,
                     DegenerateKernelError, DegeneratePropensityError,
                     DoseTreeError, EmptyNodeError, InsufficientDataError,
                     KernelCalibrationError, ParseError, PipelineError,
                     SchemaError)
from .kernelsearch import (KernelMatrix, build_kernels, curve_distance,
                           init_curves, row_correlation_similarity,
                           weighted_euclidean_similarity)
from .nuisance import (ImportanceWeights, OutcomeModel, PropensityModel,
                       RegressorConfig, fit_outcome_model,
                       fit_propensity_model, propensity_density,
                       variable_importance)
from .pipeline import PipelineConfig, StageFit, fit_single_stage
from .sim import EvalReport, ScenarioSpec, evaluate, generate, run_comparison
from .tao import (AnnealSchedule, DoseTree, Node, SplitRule, TaoConfig,
                  TaoResult, tao_fit)

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule", "BandwidthSelectionError", "Dataset",
    "DegenerateDoseError", "DegenerateKernelError",
    "DegeneratePropensityError", "DoseGrid", "DoseScaler", "DoseTree",
    "DoseTreeError", "EffectCurveGrid", "EmptyNodeError", "EvalReport",
    "ImportanceWeights", "InsufficientDataError", "KernelCalibrationError",
    "KernelMatrix",
    "Node", "OutcomeModel", "ParseError", "PipelineConfig", "PipelineError",
    "Policy", "PropensityModel", "RegressorConfig", "ScenarioSpec",
    "SchemaError", "SmootherConfig", "SplitRule", "StageData", "StageFit",
    "TaoConfig", "TaoResult", "build_kernels", "curve_distance",
    "estimate_effect_curves", "evaluate", "fit_dtr", "fit_outcome_model",
    "fit_propensity_model", "fit_single_stage", "generate", "init_curves",
    "load_csv", "load_stage_csv", "local_linear_smooth", "loo_bandwidth",
    "propensity_density", "recommend", "row_correlation_similarity",
    "run_comparison",
    "standardize_doses", "tao_fit", "variable_importance",
    "warfarin_reward",
]
