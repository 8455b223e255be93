# src/schemas/bias_schema.py

from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit


class OccupantRole(str, Enum):
    DRIVER = "driver"
    PASSENGER = "passenger"


class OccupantRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    delta_v: float = Field(ge=0)    # km/h
    mais: int = Field(ge=0, le=6)
    role: OccupantRole = OccupantRole.DRIVER


class PdoModel(BaseModel):
    """
    Exponential PDO shape: share of the PDO population per bin of `bin_width`
    km/h centred at dv is B1 * exp(-B2 * dv).
    """

    model_config = ConfigDict(frozen=True)

    B1: float = Field(gt=0)
    B2: float = Field(gt=0)
    bin_width: float = Field(default=2.0, gt=0)

    def pdf(self, delta_v) -> np.ndarray:
        return self.B1 * np.exp(-self.B2 * np.asarray(delta_v, dtype=float))


class TransferFunction(BaseModel):
    """Logistic selection probability P(dv) = e^(C1+C2 dv) / (1 + e^(C1+C2 dv))."""

    model_config = ConfigDict(frozen=True)

    C1: float
    C2: float

    def probability(self, delta_v) -> np.ndarray:
        return expit(self.C1 + self.C2 * np.asarray(delta_v, dtype=float))

    @property
    def midpoint(self) -> Optional[float]:
        return -self.C1 / self.C2 if self.C2 != 0 else None


class TransferGrid(BaseModel):
    """Exhaustive search grid for the transfer function parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    c1_min: float = -10.0
    c1_max: float = -0.1
    c1_step: float = Field(default=0.05, gt=0)
    c2_min: float = 0.001
    c2_max: float = 5.0
    c2_step: float = Field(default=0.001, gt=0)

    def c1_values(self) -> np.ndarray:
        return _grid(self.c1_min, self.c1_max, self.c1_step)

    def c2_values(self) -> np.ndarray:
        return _grid(self.c2_min, self.c2_max, self.c2_step)


def _grid(low: float, high: float, step: float) -> np.ndarray:
    n = int(np.floor((high - low) / step + 1e-9)) + 1
    return np.round(low + step * np.arange(n), 10)


class PdoFitResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    model: PdoModel
    pdo_present: float
    injured: float
    pdo_total: float
    deficit: float
    mode_delta_v: float
    fill: Tuple[float, ...]          # counts added to the lowest bins
    augmented_counts: Tuple[float, ...]
    residuals: Tuple[float, ...]     # residual after each allocate-and-fit iteration
    iterations: int


class TransferFitResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    transfer: TransferFunction
    cost: float
    degenerate: bool = False
    grid_shape: Tuple[int, int]
