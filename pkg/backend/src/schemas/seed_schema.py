# src/schemas/seed_schema.py

from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Final-gap tolerance for "the seed ends in collision" [m]
COLLISION_TOLERANCE_M = 0.05
TRAJECTORY_FIELDS = ("t", "position", "speed", "acceleration")


class LeadBehaviorClass(str, Enum):
    BRAKING = "braking"
    NON_BRAKING = "non-braking"
    STANDSTILL = "standstill-at-start"


class VehicleMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = ""
    mass: float = Field(gt=0)     # kg
    width: float = Field(gt=0)    # m
    length: float = Field(gt=0)   # m


class TrajectorySample(BaseModel):
    model_config = ConfigDict(frozen=True)

    t: float             # s
    position: float      # m, along the common path
    speed: float         # m/s
    acceleration: float  # m/s^2


class Trajectory(BaseModel):
    """
    Time series of one vehicle on the common 1-D path.
    Follower positions are front-bumper, lead positions rear-bumper.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    t: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    acceleration: np.ndarray

    @field_validator("t", "position", "speed", "acceleration", mode="before")
    @classmethod
    def _as_float_array(cls, value):
        arr = np.array(value, dtype=float)
        if arr.ndim != 1:
            raise ValueError("trajectory columns must be one-dimensional")
        arr.setflags(write=False)
        return arr

    @model_validator(mode="after")
    def _check_series(self):
        n = len(self.t)
        if n < 2:
            raise ValueError("trajectory needs at least two samples")
        if any(len(getattr(self, name)) != n for name in TRAJECTORY_FIELDS):
            raise ValueError("trajectory columns differ in length")
        if not np.all(np.isfinite(np.column_stack([self.t, self.position, self.speed, self.acceleration]))):
            raise ValueError("trajectory contains non-finite values")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sample times are not strictly increasing")
        if np.any(self.speed < 0):
            raise ValueError("negative speed in trajectory")
        return self

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in TRAJECTORY_FIELDS)

    __hash__ = None

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def step(self) -> float:
        return float(np.median(np.diff(self.t)))

    def samples(self) -> List[TrajectorySample]:
        return [
            TrajectorySample(t=t, position=p, speed=v, acceleration=a)
            for t, p, v, a in zip(self.t, self.position, self.speed, self.acceleration)
        ]


class SeedCrash(BaseModel):
    """A reconstructed pre-crash matrix: lead and follower on a shared time base."""

    model_config = ConfigDict(frozen=True)

    id: str
    lead: Trajectory
    follower: Trajectory
    lead_meta: VehicleMeta
    follower_meta: VehicleMeta
    seed_delta_v: Optional[float] = None  # km/h, from the source database

    @model_validator(mode="after")
    def _check_collision_geometry(self):
        if not np.array_equal(self.lead.t, self.follower.t):
            raise ValueError("lead and follower do not share the time base")
        gap = self.gap
        if np.any(gap[:-1] < 0):
            first = int(np.argmax(gap[:-1] < 0))
            raise ValueError(f"negative gap before the final sample (t={self.lead.t[first]:.3f} s)")
        if gap[-1] > COLLISION_TOLERANCE_M:
            raise ValueError("seed does not end in collision")
        return self

    @property
    def gap(self) -> np.ndarray:
        return self.lead.position - self.follower.position


class CounterfactualSeed(BaseModel):
    """
    Seed with the follower's evasive maneuver replaced by a constant speed and
    the horizon extended beyond the original PCM window.
    """

    model_config = ConfigDict(frozen=True)

    id: str
    lead: Trajectory
    follower: Trajectory
    lead_meta: VehicleMeta
    follower_meta: VehicleMeta
    seed_delta_v: Optional[float] = None
    original_end: float
    follower_speed: float
    lead_behavior_class: LeadBehaviorClass
    lead_brake_onset: Optional[float] = None
    anchor_time: Optional[float] = None
    inv_tau_threshold: float = 0.2

    @model_validator(mode="after")
    def _check_counterfactual(self):
        if not np.array_equal(self.lead.t, self.follower.t):
            raise ValueError("lead and follower do not share the time base")
        if np.any(self.follower.speed != self.follower_speed):
            raise ValueError("counterfactual follower speed is not constant")
        if self.lead.t[-1] < self.original_end:
            raise ValueError("counterfactual horizon is shorter than the seed")
        return self

    @property
    def gap(self) -> np.ndarray:
        return self.lead.position - self.follower.position


class SynthesisConfig(BaseModel):
    """
    Ranges for forward-simulated synthetic seeds. Every range is (low, high),
    sampled uniformly.
    """

    model_config = ConfigDict(extra="forbid")

    n_seeds: int = Field(default=103, ge=1)
    rng_seed: int = 0
    dt: float = Field(default=0.010, gt=0)
    pre_impact_window_s: float = Field(default=5.0, gt=0)
    max_time_s: float = Field(default=60.0, gt=0)
    max_attempts_per_seed: int = Field(default=50, ge=1)

    follower_speed_ms: Tuple[float, float] = (10.0, 30.0)
    # lead speed as a fraction of the follower speed for moving leads
    lead_speed_fraction: Tuple[float, float] = (0.2, 0.9)
    time_headway_s: Tuple[float, float] = (0.6, 2.5)
    initial_gap_m: Optional[Tuple[float, float]] = None

    lead_behavior_mix: Dict[LeadBehaviorClass, float] = {
        LeadBehaviorClass.BRAKING: 0.66,
        LeadBehaviorClass.NON_BRAKING: 0.20,
        LeadBehaviorClass.STANDSTILL: 0.14,
    }
    lead_behavior_counts: Optional[Dict[LeadBehaviorClass, int]] = None
    lead_brake_onset_s: Tuple[float, float] = (0.5, 3.0)
    lead_decel_ms2: Tuple[float, float] = (2.0, 8.0)

    evasive_braking_probability: float = Field(default=0.8, ge=0, le=1)
    evasive_ttc_s: Tuple[float, float] = (0.3, 1.0)
    evasive_decel_ms2: Tuple[float, float] = (2.0, 7.0)
    evasive_jerk_ms3: float = Field(default=-23.04, lt=0)

    mass_kg: Tuple[float, float] = (1000.0, 2200.0)
    width_m: Tuple[float, float] = (1.6, 2.0)
    length_m: Tuple[float, float] = (3.8, 5.0)

    @field_validator(
        "follower_speed_ms", "lead_speed_fraction", "time_headway_s", "initial_gap_m",
        "lead_brake_onset_s", "lead_decel_ms2", "evasive_ttc_s", "evasive_decel_ms2",
        "mass_kg", "width_m", "length_m",
    )
    @classmethod
    def _ordered_range(cls, value):
        if value is not None and value[0] > value[1]:
            raise ValueError(f"range low {value[0]} exceeds high {value[1]}")
        return value

    @model_validator(mode="after")
    def _check_counts(self):
        if self.lead_behavior_counts is not None:
            if sum(self.lead_behavior_counts.values()) != self.n_seeds:
                raise ValueError("lead_behavior_counts must sum to n_seeds")
        elif sum(self.lead_behavior_mix.values()) <= 0:
            raise ValueError("lead_behavior_mix has no mass")
        return self
