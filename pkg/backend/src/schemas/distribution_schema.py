# src/schemas/distribution_schema.py

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

GLANCE_BIN_WIDTH_S = 0.1
PROBABILITY_TOLERANCE = 1e-12


def _check_probabilities(probabilities, extra_mass: float = 0.0):
    probs = np.asarray(probabilities, dtype=float)
    if np.any(probs < 0):
        raise ValueError("negative probability")
    total = float(probs.sum()) + extra_mass
    if abs(total - 1.0) > PROBABILITY_TOLERANCE:
        raise ValueError(f"probabilities sum to {total!r}, expected 1")


class GlanceDistribution(BaseModel):
    """
    Off-road glance durations in 0.1 s bins plus the point mass at zero
    (eyes on road). Bin k covers ((k-1)*0.1, k*0.1] and is labelled k*0.1.
    """

    model_config = ConfigDict(frozen=True)

    on_road_mass: float = Field(ge=0, lt=1)
    durations: Tuple[float, ...]
    probabilities: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.durations) != len(self.probabilities):
            raise ValueError("durations and probabilities differ in length")
        if not self.durations:
            raise ValueError("glance distribution has no off-road bins")
        steps = np.asarray(self.durations) / GLANCE_BIN_WIDTH_S
        if np.any(steps < 1 - 1e-9) or np.any(np.abs(steps - np.round(steps)) > 1e-6):
            raise ValueError("durations must be positive multiples of 0.1 s")
        if np.any(np.diff(steps) <= 0):
            raise ValueError("durations must be strictly increasing")
        _check_probabilities(self.probabilities, self.on_road_mass)
        return self

    @property
    def off_road_bins(self) -> List[Tuple[float, float]]:
        return list(zip(self.durations, self.probabilities))

    @property
    def bin_indices(self) -> np.ndarray:
        return np.round(np.asarray(self.durations) / GLANCE_BIN_WIDTH_S).astype(int)

    @property
    def off_road_mass(self) -> float:
        return 1.0 - self.on_road_mass


class OvershootDistribution(BaseModel):
    """Residual glance overshoot past the looming anchor; on-road mass carried as overshoot 0."""

    model_config = ConfigDict(frozen=True)

    on_road_mass: float = Field(ge=0, lt=1)
    overshoots: Tuple[float, ...]
    probabilities: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.overshoots) != len(self.probabilities):
            raise ValueError("overshoots and probabilities differ in length")
        _check_probabilities(self.probabilities, self.on_road_mass)
        return self

    @property
    def bins(self) -> List[Tuple[float, float]]:
        return list(zip(self.overshoots, self.probabilities))

    def axis(self) -> List[Tuple[float, float]]:
        """Sweep axis, ascending, with the on-road point mass as overshoot 0."""
        axis = [(0.0, self.on_road_mass)] if self.on_road_mass > 0 else []
        return axis + self.bins


class DecelDistribution(BaseModel):
    """Maximum driver deceleration [m/s^2] at bin centres."""

    model_config = ConfigDict(frozen=True)

    bin_width: float = Field(default=1.5, gt=0)
    d_max: Tuple[float, ...]
    probabilities: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.d_max) != len(self.probabilities) or not self.d_max:
            raise ValueError("deceleration distribution is empty or ragged")
        if any(d <= 0 for d in self.d_max):
            raise ValueError("d_max bins must be positive")
        _check_probabilities(self.probabilities)
        return self

    @property
    def bins(self) -> List[Tuple[float, float]]:
        return list(zip(self.d_max, self.probabilities))


class ReactionTimeDistribution(BaseModel):
    """Discretized log-normal reaction time used by the brake-light-onset model."""

    model_config = ConfigDict(frozen=True)

    m: float = Field(gt=0)
    v: float = Field(gt=0)
    mu: float
    sigma: float
    reaction_times: Tuple[float, ...]
    probabilities: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        _check_probabilities(self.probabilities)
        return self

    @property
    def bins(self) -> List[Tuple[float, float]]:
        return list(zip(self.reaction_times, self.probabilities))
