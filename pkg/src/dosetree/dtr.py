"""Multi-stage optimal regime estimation by backward induction."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import MINIMIZE, Dataset, StageData
from .errors import PipelineError
from .pipeline import PipelineConfig, StageFit, fit_single_stage

PSI_SUM = "sum"
PSI_LAST = "last"


@dataclass(frozen=True)
class Policy:
    """Ordered per-stage dose rules; stage t consumes the stage-t history."""

    stage_fits: tuple
    direction: str = MINIMIZE
    psi: str = PSI_SUM

    def __post_init__(self):
        object.__setattr__(self, "stage_fits", tuple(self.stage_fits))
        if not self.stage_fits:
            raise ValueError("a policy needs at least one stage")

    @property
    def n_stages(self):
        return len(self.stage_fits)

    def stage_dose(self, t, H):
        """Doses (original units) for stage ``t`` (1-based) histories ``H``."""
        fit = self.stage_fits[t - 1]
        H = np.atleast_2d(np.asarray(H, float))
        if H.shape[1] != len(fit.feature_names):
            raise ValueError(
                f"stage {t} expects {len(fit.feature_names)} history columns, "
                f"got {H.shape[1]}")
        return fit.doses_for(H)


def history_feature_names(sd: StageData, t):
    """Column names of the stage-t history matrix."""
    names = []
    for v in range(t - 1):
        stage = sd.stages[v]
        names.extend(stage.feature_names)
        names.append(f"dose_s{v + 1}")
        names.append(f"reward_s{v + 1}")
    names.extend(sd.stages[t - 1].feature_names)
    return tuple(names)


def build_history(sd: StageData, t):
    """History matrix H_t: prior (covariates, dose, reward) blocks + stage-t covariates."""
    if not 1 <= t <= sd.n_stages:
        raise ValueError(f"stage {t} out of range 1..{sd.n_stages}")
    blocks = []
    for v in range(t - 1):
        stage = sd.stages[v]
        blocks.extend([stage.covariates, stage.doses[:, None],
                       stage.outcomes[:, None]])
    blocks.append(sd.stages[t - 1].covariates)
    return np.column_stack(blocks)


def pseudo_outcome(fit_next: StageFit, H_next):
    """Plug-in value of following the fitted stage-(t+1) rule.

    Y~_t(i) = mu_{t+1}(H_{t+1,i}, g_{t+1}(H_{t+1,i})), with the tree's dose
    on the same standardized scale the outcome model was trained on.
    """
    H_next = np.atleast_2d(np.asarray(H_next, float))
    doses = fit_next.tree.assigned_dose(H_next)
    return fit_next.outcome_model.predict(H_next, doses)


def fit_dtr(sd, cfg: PipelineConfig = PipelineConfig(), psi=PSI_SUM,
            stage_fitter=fit_single_stage):
    """Backward induction: fit stage T first, then earlier stages on
    pseudo-outcome targets. Accepts a single Dataset as the T=1 case.

    ``psi``: "sum" optimizes the total reward, "last" the final reward only.
    ``stage_fitter`` is swappable (used for the greedy-tree comparator).
    """
    if isinstance(sd, Dataset):
        sd = StageData((sd,))
    if psi not in (PSI_SUM, PSI_LAST):
        raise ValueError(f"unknown psi {psi!r}")
    direction = sd.stages[0].direction
    T = sd.n_stages
    fits = [None] * T
    value_next = None
    for t in range(T, 0, -1):
        stage = sd.stages[t - 1]
        reward = stage.as_maximization().outcomes
        if t == T:
            target = reward
        elif psi == PSI_SUM:
            target = reward + value_next
        else:
            target = value_next
        H = build_history(sd, t)
        names = history_feature_names(sd, t)
        stage_ds = Dataset(H, stage.doses, target, names, "maximize")
        try:
            fits[t - 1] = stage_fitter(stage_ds, cfg)
        except Exception as exc:
            raise PipelineError(f"stage {t} fit failed: {exc}") from exc
        if t > 1:
            value_next = pseudo_outcome(fits[t - 1], H)
    return Policy(tuple(fits), direction=direction, psi=psi)


def recommend(policy: Policy, stage_covariates, given_doses=None,
              given_rewards=None, substitute_recommended=False):
    """Per-subject, per-stage recommended doses.

    ``stage_covariates``: list of (n, p_t) matrices, one per stage.
    ``given_doses`` / ``given_rewards``: per-stage observed values used to
    build later-stage histories; with ``substitute_recommended`` the policy's
    own recommendations replace the given doses. Rewards are always taken
    from ``given_rewards`` (they cannot be simulated).
    Returns an (n, T) matrix of doses in original units.
    """
    T = policy.n_stages
    if len(stage_covariates) != T:
        raise ValueError(f"expected covariates for {T} stages")
    covs = [np.atleast_2d(np.asarray(c, float)) for c in stage_covariates]
    n = covs[0].shape[0]
    out = np.empty((n, T))
    blocks = []
    for t in range(1, T + 1):
        H = np.column_stack(blocks + [covs[t - 1]]) if blocks else covs[t - 1]
        out[:, t - 1] = policy.stage_dose(t, H)
        if t < T:
            if substitute_recommended:
                doses = out[:, t - 1]
            else:
                if given_doses is None or given_doses[t - 1] is None:
                    raise ValueError(f"need observed stage-{t} doses")
                doses = np.asarray(given_doses[t - 1], float)
            if given_rewards is None or given_rewards[t - 1] is None:
                raise ValueError(f"need observed stage-{t} rewards")
            rewards = np.asarray(given_rewards[t - 1], float)
            blocks.extend([covs[t - 1], doses[:, None], rewards[:, None]])
    return out
