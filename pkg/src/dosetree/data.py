"""Dataset containers, CSV ingestion, dose standardization and the INR reward."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import DegenerateDoseError, ParseError, SchemaError

MINIMIZE = "minimize"
MAXIMIZE = "maximize"


@dataclass(frozen=True)
class DoseScaler:
    """Affine map between original dose units and the internal [0, 1] scale."""

    a_min: float
    a_max: float

    def __post_init__(self):
        if not (np.isfinite(self.a_min) and np.isfinite(self.a_max)):
            raise ValueError("scaler bounds must be finite")
        if self.a_min >= self.a_max:
            raise DegenerateDoseError(
                f"degenerate dose range [{self.a_min}, {self.a_max}]"
            )

    def scale(self, a):
        return (np.asarray(a, dtype=float) - self.a_min) / (self.a_max - self.a_min)

    def unscale(self, a):
        return np.asarray(a, dtype=float) * (self.a_max - self.a_min) + self.a_min


@dataclass(frozen=True)
class Dataset:
    """Single-stage sample of (covariates, doses, outcomes).

    Immutable after construction; safe to share across parallel tasks.
    """

    covariates: np.ndarray
    doses: np.ndarray
    outcomes: np.ndarray
    feature_names: tuple
    direction: str = MINIMIZE

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        A = np.asarray(self.doses, dtype=float)
        Y = np.asarray(self.outcomes, dtype=float)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "doses", A)
        object.__setattr__(self, "outcomes", Y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if X.ndim != 2:
            raise ValueError("covariates must be a 2-d matrix")
        n, p = X.shape
        if n < 2 or p < 1:
            raise ValueError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if A.shape != (n,) or Y.shape != (n,):
            raise ValueError("doses/outcomes must be length-n vectors")
        if len(self.feature_names) != p:
            raise ValueError("feature_names must have one entry per column")
        for name, arr in (("covariates", X), ("doses", A), ("outcomes", Y)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if self.direction not in (MINIMIZE, MAXIMIZE):
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    def negated(self):
        """Flip the optimization direction by negating outcomes."""
        flipped = MAXIMIZE if self.direction == MINIMIZE else MINIMIZE
        return replace(self, outcomes=-self.outcomes, direction=flipped)

    def as_maximization(self):
        """Internal convention: all downstream code maximizes."""
        return self.negated() if self.direction == MINIMIZE else self


@dataclass(frozen=True)
class StageData:
    """Ordered multi-stage data; all stages share the sample count."""

    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("need at least one stage")
        n = stages[0].n
        for t, ds in enumerate(stages):
            if ds.n != n:
                raise ValueError(f"stage {t + 1} has n={ds.n}, expected {n}")

    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def n(self):
        return self.stages[0].n


def warfarin_reward(inr):
    """Concave INR reward, maximal on the therapeutic band [2, 3]."""
    inr = np.asarray(inr, dtype=float)
    if not np.all(np.isfinite(inr)):
        raise ValueError("INR must be finite")
    out = -100.0 * np.abs(inr - 2.0) - 100.0 * np.abs(inr - 3.0)
    return float(out) if out.ndim == 0 else out


def standardize_doses(ds: Dataset):
    """Map doses affinely onto [0, 1]; returns the rescaled dataset and scaler.

    Doses already spanning exactly [0, 1] are passed through with an
    identity scaler.
    """
    a_min = float(ds.doses.min())
    a_max = float(ds.doses.max())
    if a_min == a_max:
        raise DegenerateDoseError(f"all doses equal {a_min}; cannot standardize")
    if a_min >= 0.0 and a_max <= 1.0:
        scaler = DoseScaler(0.0, 1.0)
        return ds, scaler
    scaler = DoseScaler(a_min, a_max)
    return replace(ds, doses=scaler.scale(ds.doses)), scaler


def _numeric_column(frame, col, kept_mask):
    """Convert one column to float, distinguishing missing from garbage."""
    raw = frame[col]
    as_num = pd.to_numeric(raw, errors="coerce")
    missing = raw.isna() | (raw.astype(str).str.strip() == "")
    bad = as_num.isna() & ~missing
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            f"non-numeric value {raw.iloc[row]!r} in column {col!r}, row {row}",
            row=row,
            column=col,
        )
    kept_mask &= ~missing.to_numpy()
    return as_num.to_numpy(dtype=float)


def load_csv(path, schema):
    """Load a single-stage dataset from CSV.

    ``schema`` maps column roles: ``{"dose": name, "outcome": name,
    "covariates": [names], "direction": ..., "reward": None | "warfarin"}``.
    Rows with missing required fields are dropped and their indices logged;
    non-numeric cells raise :class:`ParseError` naming the row and column.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    dose_col = schema.get("dose")
    outcome_col = schema.get("outcome")
    cov_cols = list(schema.get("covariates", []))
    if not dose_col or not outcome_col or not cov_cols:
        raise SchemaError("schema must name a dose, an outcome and >=1 covariates")
    for col in [dose_col, outcome_col] + cov_cols:
        if col not in frame.columns:
            raise SchemaError(f"missing column {col!r} in {path}")

    kept = np.ones(len(frame), dtype=bool)
    doses = _numeric_column(frame, dose_col, kept)
    outcomes = _numeric_column(frame, outcome_col, kept)
    covs = np.column_stack(
        [_numeric_column(frame, c, kept) for c in cov_cols]
    )
    dropped = np.flatnonzero(~kept)
    if dropped.size:
        import logging

        logging.getLogger(__name__).warning(
            "dropped %d rows with missing required fields: %s",
            dropped.size,
            dropped.tolist(),
        )
    doses, outcomes, covs = doses[kept], outcomes[kept], covs[kept]
    if schema.get("reward") == "warfarin":
        outcomes = warfarin_reward(outcomes)
        direction = schema.get("direction", MAXIMIZE)
    else:
        direction = schema.get("direction", MINIMIZE)
    return Dataset(covs, doses, outcomes, tuple(cov_cols), direction)


def load_stage_csv(path, stage_schemas):
    """Load wide-format multi-stage data (one row per subject).

    ``stage_schemas`` is an ordered list of per-stage schemas with
    stage-suffixed column names (e.g. ``x1_t1, a_t1, r_t1``).
    """
    stages = [load_csv(path, schema) for schema in stage_schemas]
    return StageData(tuple(stages))
