# src/schemas/outcome_schema.py

from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.schemas.driver_schema import DriverModelKind
from src.schemas.seed_schema import LeadBehaviorClass

CELL_PROBABILITY_TOLERANCE = 1e-12


class SimOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    crashed: bool
    impact_time: Optional[float] = None  # s
    v1: Optional[float] = None           # follower speed at first overlap, m/s
    v2: Optional[float] = None           # lead speed at first overlap, m/s
    max_severity: bool = False           # response had not begun before impact

    @model_validator(mode="after")
    def _check(self):
        if self.crashed:
            if self.v1 is None or self.v2 is None or self.impact_time is None:
                raise ValueError("crash outcome needs impact time and speeds")
            if self.v1 < self.v2:
                raise ValueError("crash with follower slower than lead")
        elif self.max_severity:
            raise ValueError("max_severity is only defined for crashes")
        return self

    @property
    def relative_speed(self) -> float:
        return (self.v1 - self.v2) if self.crashed else 0.0


NO_CRASH = SimOutcome(crashed=False)


class OutcomeMatrix(BaseModel):
    """
    Outcomes of one seed over (axis1 x decel). axis1 is overshoot for the CBM
    and reaction time for the BLOM; both ascend with brake-onset time.
    """

    model_config = ConfigDict(frozen=True)

    seed_id: str
    model: DriverModelKind
    axis1_values: Tuple[float, ...]
    axis1_probs: Tuple[float, ...]
    decel_values: Tuple[float, ...]
    decel_probs: Tuple[float, ...]
    cells: Tuple[Tuple[SimOutcome, ...], ...]
    no_response: Optional[SimOutcome] = None
    follower_mass: float = Field(gt=0)
    lead_mass: float = Field(gt=0)
    seed_delta_v: Optional[float] = None
    lead_behavior_class: Optional[LeadBehaviorClass] = None
    kernel_calls: int = 0
    fallback_rows: int = 0   # decel bins re-simulated exhaustively after a failed spot check

    @model_validator(mode="after")
    def _check(self):
        if len(self.axis1_values) != len(self.axis1_probs) or len(self.decel_values) != len(self.decel_probs):
            raise ValueError("axis values and probabilities differ in length")
        if len(self.cells) != len(self.axis1_values) or any(len(row) != len(self.decel_values) for row in self.cells):
            raise ValueError("cell grid does not match the axes")
        total = float(self.cell_probability.sum())
        if abs(total - 1.0) > CELL_PROBABILITY_TOLERANCE:
            raise ValueError(f"cell probabilities sum to {total!r}")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.axis1_values), len(self.decel_values)

    @property
    def theoretical_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def cell_probability(self) -> np.ndarray:
        return np.outer(self.axis1_probs, self.decel_probs)

    @property
    def crash_mask(self) -> np.ndarray:
        return np.array([[cell.crashed for cell in row] for row in self.cells], dtype=bool)

    @property
    def max_severity_mask(self) -> np.ndarray:
        return np.array([[cell.max_severity for cell in row] for row in self.cells], dtype=bool)

    @property
    def crash_probability(self) -> float:
        return float(self.cell_probability[self.crash_mask].sum())

    @property
    def n_crash_cells(self) -> int:
        return int(self.crash_mask.sum())


class DeltaVDistribution(BaseModel):
    """
    Binned delta-v. Bin k covers [k*bin_width, (k+1)*bin_width) km/h; bins are
    contiguous from zero so two distributions with the same width share edges.
    """

    model_config = ConfigDict(frozen=True)

    bin_width: float = Field(default=2.0, gt=0)
    weights: Tuple[float, ...]
    mean: float
    normalized: bool = True
    # count basis for pseudo-count corrections (number of underlying crashes)
    n_effective: float = Field(default=0.0, ge=0)
    components: Dict[str, float] = {}

    @model_validator(mode="after")
    def _check(self):
        weights = np.asarray(self.weights, dtype=float)
        if np.any(weights < 0):
            raise ValueError("negative histogram weight")
        if self.normalized and weights.size and abs(weights.sum() - 1.0) > CELL_PROBABILITY_TOLERANCE:
            raise ValueError(f"normalized histogram sums to {weights.sum()!r}")
        return self

    @property
    def n_bins(self) -> int:
        return len(self.weights)

    @property
    def weights_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def bin_lows(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.bin_width

    @property
    def bin_highs(self) -> np.ndarray:
        return self.bin_lows + self.bin_width

    @property
    def centers(self) -> np.ndarray:
        return self.bin_lows + self.bin_width / 2

    @property
    def total_mass(self) -> float:
        return float(self.weights_array.sum())

    def padded(self, n_bins: int) -> np.ndarray:
        weights = self.weights_array
        if n_bins < weights.size:
            raise ValueError("cannot pad a histogram to fewer bins")
        return np.concatenate([weights, np.zeros(n_bins - weights.size)])


class SeedWeight(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed_id: str
    q_raw: float = Field(gt=0)      # summed crash-cell probability
    q: float = Field(gt=0)          # normalized over seeds
    w_untrimmed: float = Field(gt=0)
    w: float = Field(gt=0)          # after percentile trimming
    contribution: float = Field(ge=0)  # seed share of the final weighted mass
