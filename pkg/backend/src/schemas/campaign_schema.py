# src/schemas/campaign_schema.py

import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.core.errors import ConfigError
from src.schemas.bias_schema import TransferGrid
from src.schemas.distribution_schema import (
    DecelDistribution,
    GlanceDistribution,
    OvershootDistribution,
    ReactionTimeDistribution,
)
from src.schemas.driver_schema import BlomConfig, CbmConfig, DriverModelKind
from src.schemas.outcome_schema import OutcomeMatrix
from src.schemas.seed_schema import SynthesisConfig


class SyntheticGlanceConfig(BaseModel):
    """SHRP2-like stand-in when no glance distribution file is given."""

    model_config = ConfigDict(extra="forbid")

    n_glances: int = Field(default=4604, ge=1)
    max_duration_s: float = Field(default=6.7, gt=0)
    on_road_fraction: float = Field(default=0.8, ge=0, lt=1)


class SyntheticDecelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_values: int = Field(default=45, ge=1)
    low_ms2: float = Field(default=1.6, gt=0)
    high_ms2: float = Field(default=10.4, gt=0)


class CampaignConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "cbm-baseline"
    model: DriverModelKind = DriverModelKind.CBM
    glance_distribution: Optional[Path] = None
    synthetic_glances: SyntheticGlanceConfig = SyntheticGlanceConfig()
    glance_cut_s: Optional[float] = Field(default=None, gt=0)
    decel_distribution: Optional[Path] = None
    synthetic_decels: SyntheticDecelConfig = SyntheticDecelConfig()
    decel_bin_width: float = Field(default=1.5, gt=0)
    cbm: CbmConfig = CbmConfig()
    blom: BlomConfig = BlomConfig()
    dt: float = Field(default=0.010, gt=0)
    horizon_extension_s: float = Field(default=30.0, ge=0)
    jerk_override: Optional[float] = Field(default=None, lt=0)
    verify_fills: bool = True
    rng_seed: int = 0


class WeightingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    trim_percentiles: Tuple[float, float] = (5.0, 95.0)
    bin_width: float = Field(default=2.0, gt=0)
    mix_no_response: bool = True

    @field_validator("trim_percentiles")
    @classmethod
    def _ordered(cls, value):
        low, high = value
        if not 0 <= low <= high <= 100:
            raise ValueError("trim percentiles must satisfy 0 <= low <= high <= 100")
        return value


class SyntheticOccupantConfig(BaseModel):
    """Insurance-like occupant sample used when no occupant file is given."""

    model_config = ConfigDict(extra="forbid")

    n_records: int = Field(default=912, ge=1)
    mais0_share: float = Field(default=0.43, gt=0, lt=1)
    pdo_decay_per_kmh: float = Field(default=0.27, gt=0)
    censor_below_kmh: float = Field(default=4.0, ge=0)
    injured_mean_kmh: float = Field(default=18.0, gt=0)
    injured_sd_kmh: float = Field(default=7.0, gt=0)


class BiasConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    occupants: Optional[Path] = None
    synthetic_occupants: SyntheticOccupantConfig = SyntheticOccupantConfig()
    reference_histogram: Optional[Path] = None
    p_pdo: float = Field(default=0.7, gt=0, lt=1)
    n_fill_bins: int = Field(default=6, ge=1)
    bin_width: float = Field(default=2.0, gt=0)
    max_iterations: int = Field(default=50, ge=1)
    tolerance: float = Field(default=1e-10, gt=0)
    grid: TransferGrid = TransferGrid()
    # Injury-severity underreporting weights; accepted but not applied.
    severity_weights: Optional[Dict[str, float]] = None
    rng_seed: int = 0


class SensitivityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_variants: int = Field(default=18, ge=1)
    spread: float = Field(default=0.30, ge=0, lt=1)
    pdo_shares: List[float] = [0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85]
    rng_seed: int = 0


class ValidationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    risk_curves: List[Path] = []
    percentile_bins: int = Field(default=10, ge=1)
    bin_width: float = Field(default=2.0, gt=0)


class DmsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cuts: List[float] = [3.0, 2.0]


class ReportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    title_prefix: str = ""


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    synthesis: SynthesisConfig = SynthesisConfig()
    campaign: CampaignConfig = CampaignConfig()
    weighting: WeightingConfig = WeightingConfig()
    bias: BiasConfig = BiasConfig()
    sensitivity: SensitivityConfig = SensitivityConfig()
    validation: ValidationConfig = ValidationConfig()
    dms: DmsConfig = DmsConfig()
    report: ReportConfig = ReportConfig()

    @classmethod
    def load(cls, path: Path) -> "PipelineConfig":
        path = Path(path)
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
            config = cls.model_validate(document)
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except (json.JSONDecodeError, ValidationError) as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        return config.resolved(path.parent)

    def resolved(self, base_dir: Path) -> "PipelineConfig":
        """Relative file paths are taken relative to the config file directory."""

        def fix(p: Optional[Path]) -> Optional[Path]:
            if p is None or p.is_absolute():
                return p
            return base_dir / p

        campaign = self.campaign.model_copy(update={
            "glance_distribution": fix(self.campaign.glance_distribution),
            "decel_distribution": fix(self.campaign.decel_distribution),
        })
        bias = self.bias.model_copy(update={
            "occupants": fix(self.bias.occupants),
            "reference_histogram": fix(self.bias.reference_histogram),
        })
        validation = self.validation.model_copy(update={
            "risk_curves": [fix(p) for p in self.validation.risk_curves],
        })
        return self.model_copy(update={"campaign": campaign, "bias": bias, "validation": validation})

    def with_seed(self, rng_seed: int) -> "PipelineConfig":
        return self.model_copy(update={
            "synthesis": self.synthesis.model_copy(update={"rng_seed": rng_seed}),
            "campaign": self.campaign.model_copy(update={"rng_seed": rng_seed}),
            "bias": self.bias.model_copy(update={"rng_seed": rng_seed}),
            "sensitivity": self.sensitivity.model_copy(update={"rng_seed": rng_seed}),
        })


class CampaignSummary(BaseModel):
    """One row of the simulation-set table: sweep size, effort and yield."""

    model_config = ConfigDict(frozen=True)

    name: str
    model: DriverModelKind
    n_seeds: int
    excluded: List[str] = []
    axis1_bins: int
    decel_bins: int
    theoretical_cells: int
    kernel_calls: int
    crash_cells: int
    fallback_rows: int = 0

    @property
    def n_excluded(self) -> int:
        return len(self.excluded)


class CampaignManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: str
    tool_version: str
    config_digest: Optional[str] = None
    inputs: Dict[str, str] = {}     # path -> sha256
    outputs: Dict[str, str] = {}
    created_at: str = ""            # not part of any digest


class CampaignAxes(BaseModel):
    """Sweep axes of a campaign plus the distributions they were derived from."""

    model_config = ConfigDict(frozen=True)

    axis1: Tuple[Tuple[float, float], ...]   # (value, probability), ascending onset
    decels: DecelDistribution
    glance: Optional[GlanceDistribution] = None
    overshoot: Optional[OvershootDistribution] = None
    reaction: Optional[ReactionTimeDistribution] = None


class CampaignResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    matrices: List[OutcomeMatrix]
    summary: CampaignSummary
    axes: Optional[CampaignAxes] = None
