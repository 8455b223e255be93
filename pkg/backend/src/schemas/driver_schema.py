# src/schemas/driver_schema.py

import math
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator


class DriverModelKind(str, Enum):
    CBM = "cbm"     # crash-causation based model (glances, too-close, low decel, no response)
    BLOM = "blom"   # brake-light onset + reaction time


class CbmConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    inv_tau_threshold: float = Field(default=0.2, gt=0)      # 1/s
    response_delay: float = Field(default=0.5, ge=0)         # s
    jerk_mean: float = Field(default=-23.04, lt=0)           # m/s^3
    jerk_sd: float = Field(default=0.74, ge=0)               # m/s^3, informational only
    no_response_fraction: float = Field(default=0.10, ge=0, lt=1)


class BlomConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    m: float = Field(default=1.275, gt=0)   # s
    v: float = Field(default=0.36, gt=0)    # s^2
    jerk_mean: float = Field(default=-23.04, lt=0)


class BrakeProfile(BaseModel):
    """
    Ramp-then-plateau braking: deceleration magnitude grows with |jerk| from
    `onset` until `d_max`. onset = inf is the driver that never brakes.
    """

    model_config = ConfigDict(frozen=True)

    onset: float
    jerk: float = Field(default=-23.04, lt=0)
    d_max: float = Field(gt=0)

    @model_validator(mode="after")
    def _check(self):
        if math.isnan(self.onset):
            raise ValueError("brake onset is NaN")
        return self

    @property
    def never_brakes(self) -> bool:
        return math.isinf(self.onset)

    @property
    def ramp_duration(self) -> float:
        return self.d_max / abs(self.jerk)
