# src/schemas/validation_schema.py

from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit


class ComparisonStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    abs_mean_diff: float           # km/h
    mean_abs_diff: float
    weighted_mean_abs_diff: float
    max_abs_diff: float
    tv_distance: float = Field(ge=0, le=1)
    kl_divergence: float = Field(ge=0)
    ks_distance: float = Field(ge=0, le=1)


class PercentileMarker(str, Enum):
    IN_RANGE = "in-range"
    BELOW_MIN = "below-min"
    ABOVE_MAX = "above-max"


class SeedPercentile(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed_id: str = ""
    seed_delta_v: float
    percentile: Optional[float] = Field(default=None, ge=0, le=100)
    marker: PercentileMarker = PercentileMarker.IN_RANGE


class PercentileReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_bins: int
    bin_edges: Tuple[float, ...]
    counts: Tuple[int, ...]
    below_min: int
    above_max: int
    chi_square: Optional[float] = None
    p_value: Optional[float] = None

    @property
    def n_seeds(self) -> int:
        return int(sum(self.counts)) + self.below_min + self.above_max


class InjuryLevel(str, Enum):
    MAIS1 = "MAIS1+"
    MAIS2 = "MAIS2+"
    MAIS3 = "MAIS3+"


class InjuryRiskCurve(BaseModel):
    """
    Risk of at least the given MAIS level as a function of delta-v. Either a
    table (linearly interpolated, flat beyond its ends) or logistic parameters.
    """

    model_config = ConfigDict(frozen=True)

    level: InjuryLevel
    delta_v: Optional[Tuple[float, ...]] = None
    risk: Optional[Tuple[float, ...]] = None
    intercept: Optional[float] = None
    slope: Optional[float] = None

    @model_validator(mode="after")
    def _check(self):
        tabulated = self.delta_v is not None and self.risk is not None
        logistic = self.intercept is not None and self.slope is not None
        if tabulated == logistic:
            raise ValueError("risk curve needs either a table or logistic parameters")
        if tabulated:
            if len(self.delta_v) != len(self.risk) or not self.delta_v:
                raise ValueError("risk table is empty or ragged")
            risk = np.asarray(self.risk)
            if np.any(np.diff(self.delta_v) <= 0):
                raise ValueError("risk table delta-v must be strictly increasing")
            if np.any(risk < 0) or np.any(risk > 1) or np.any(np.diff(risk) < 0):
                raise ValueError("risk must lie in [0, 1] and be nondecreasing")
        elif self.slope < 0:
            raise ValueError("logistic risk slope must be nonnegative")
        return self

    def __call__(self, delta_v) -> np.ndarray:
        dv = np.asarray(delta_v, dtype=float)
        if self.delta_v is not None:
            return np.interp(dv, self.delta_v, self.risk)
        return expit(self.intercept + self.slope * dv)


class AvoidanceResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    rate: float
    per_seed: Dict[str, float]
    excluded: Tuple[str, ...] = ()


class DmsAssessment(BaseModel):
    model_config = ConfigDict(frozen=True)

    cut_at: float
    avoidance_rate: float
    seeds_without_crashes: int
    mean_delta_v: Optional[float] = None
    baseline_mean_delta_v: Optional[float] = None
    injury_risk: Dict[str, float] = {}
    baseline_injury_risk: Dict[str, float] = {}
