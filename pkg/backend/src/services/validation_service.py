# src/services/validation_service.py

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.stats import chisquare, entropy

from src.core.errors import ConfigError, DistributionError
from src.schemas.outcome_schema import DeltaVDistribution, OutcomeMatrix
from src.schemas.validation_schema import (
    AvoidanceResult,
    ComparisonStats,
    DmsAssessment,
    InjuryLevel,
    InjuryRiskCurve,
    PercentileMarker,
    PercentileReport,
    SeedPercentile,
)
from src.services.outcome_service import (
    build_histogram,
    prevalence_weights,
    seed_delta_v_samples,
    weighted_crash_samples,
)

logger = logging.getLogger(__name__)

KL_PSEUDO_COUNT = 0.5


def _pseudo_count_basis(dist: DeltaVDistribution, p: np.ndarray) -> float:
    """Number of crashes the histogram represents; without one, the smallest occupied bin counts as one."""
    if dist.n_effective > 0:
        return dist.n_effective
    occupied = p[p > 0]
    return 1.0 / occupied.min() if occupied.size else 1.0


def compare(p: DeltaVDistribution, q: DeltaVDistribution) -> ComparisonStats:
    """Distance statistics between two delta-v histograms on the same bin width."""
    if p.bin_width != q.bin_width:
        raise DistributionError(f"rebin first: bin widths {p.bin_width} and {q.bin_width} differ")

    n = max(p.n_bins, q.n_bins)
    pp, qq = p.padded(n), q.padded(n)
    if pp.sum() <= 0 or qq.sum() <= 0:
        raise DistributionError("cannot compare an empty histogram")
    pp, qq = pp / pp.sum(), qq / qq.sum()
    diff = np.abs(pp - qq)

    # smoothed counts keep KL finite where one histogram is empty
    p_smooth = pp * _pseudo_count_basis(p, pp) + KL_PSEUDO_COUNT
    q_smooth = qq * _pseudo_count_basis(q, qq) + KL_PSEUDO_COUNT
    kl = float(entropy(p_smooth / p_smooth.sum(), q_smooth / q_smooth.sum()))

    return ComparisonStats(
        abs_mean_diff=abs(p.mean - q.mean),
        mean_abs_diff=float(diff.mean()),
        weighted_mean_abs_diff=float(np.sum((pp + qq) / 2 * diff)),
        max_abs_diff=float(diff.max()),
        tv_distance=min(1.0, float(0.5 * diff.sum())),
        kl_divergence=max(0.0, kl),
        ks_distance=min(1.0, float(np.max(np.abs(np.cumsum(pp) - np.cumsum(qq))))),
    )


# ---------------------------------------------------------
# Percentile check
# ---------------------------------------------------------

def seed_percentile(seed_dv: float, generated: Sequence[float], weights: Sequence[float],
                    seed_id: str = "") -> SeedPercentile:
    """
    Mid-rank percentile of the seed's recorded delta-v among the delta-v
    generated from it; outside the generated support gives a marker instead.
    """
    dv = np.asarray(generated, dtype=float)
    w = np.asarray(weights, dtype=float)
    if dv.size == 0 or w.sum() <= 0:
        raise DistributionError(f"seed {seed_id or '?'} has no generated crashes")
    w = w / w.sum()

    if seed_dv < dv.min():
        return SeedPercentile(seed_id=seed_id, seed_delta_v=seed_dv, marker=PercentileMarker.BELOW_MIN)
    if seed_dv > dv.max():
        return SeedPercentile(seed_id=seed_id, seed_delta_v=seed_dv, marker=PercentileMarker.ABOVE_MAX)

    below = w[dv < seed_dv].sum()
    equal = w[dv == seed_dv].sum()
    percentile = float(np.clip(100.0 * (below + 0.5 * equal), 0.0, 100.0))
    return SeedPercentile(seed_id=seed_id, seed_delta_v=seed_dv, percentile=percentile)


def percentile_histogram(percentiles: Sequence[SeedPercentile], n_bins: int = 10) -> PercentileReport:
    """Histogram of in-range percentiles and a chi-square statistic against a uniform shape."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")

    in_range = np.array([p.percentile for p in percentiles if p.marker == PercentileMarker.IN_RANGE], dtype=float)
    edges = np.linspace(0.0, 100.0, n_bins + 1)
    counts, _ = np.histogram(in_range, bins=edges)

    chi_square = p_value = None
    if in_range.size and n_bins > 1:
        result = chisquare(counts)
        chi_square, p_value = float(result.statistic), float(result.pvalue)

    return PercentileReport(
        n_bins=n_bins,
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        below_min=sum(1 for p in percentiles if p.marker == PercentileMarker.BELOW_MIN),
        above_max=sum(1 for p in percentiles if p.marker == PercentileMarker.ABOVE_MAX),
        chi_square=chi_square,
        p_value=p_value,
    )


# ---------------------------------------------------------
# Injury risk
# ---------------------------------------------------------

def injury_risk(h: DeltaVDistribution, curve: InjuryRiskCurve) -> float:
    """Share of occupants injured at the curve's level: sum of R(bin centre) * h."""
    weights = h.weights_array
    if weights.sum() <= 0:
        raise DistributionError("injury risk needs a non-empty distribution")
    return float(np.dot(curve(h.centers), weights / weights.sum()))


def load_risk_curve(path: Path, level: Optional[InjuryLevel] = None) -> InjuryRiskCurve:
    """
    CSV `delta_v_kmh,risk` (level from a `level` column or the argument) or
    JSON `{"level", "intercept", "slope"}` / `{"level", "delta_v", "risk"}`.
    """
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            document = json.loads(path.read_text(encoding="utf-8"))
            if level is not None:
                document.setdefault("level", level)
            return InjuryRiskCurve.model_validate(document)

        frame = pd.read_csv(path)
        if "level" in frame.columns:
            level = InjuryLevel(frame["level"].iloc[0])
        if level is None:
            raise ConfigError(f"risk curve {path.name} names no injury level")
        return InjuryRiskCurve(
            level=level,
            delta_v=tuple(frame["delta_v_kmh"].astype(float)),
            risk=tuple(frame["risk"].astype(float)),
        )
    except FileNotFoundError as exc:
        raise ConfigError(f"risk curve not found: {path}") from exc
    except (KeyError, ValueError, ValidationError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid risk curve {path.name}: {exc}") from exc


# ---------------------------------------------------------
# Driver monitoring assessment
# ---------------------------------------------------------

def crash_avoidance_rate(baseline: Sequence[OutcomeMatrix], treatment: Sequence[OutcomeMatrix]) -> AvoidanceResult:
    """
    Mean over seeds of 1 - P_treatment / P_baseline. Seeds that never crash in
    the baseline have no ratio and are listed as excluded.
    """
    base = {m.seed_id: m.crash_probability for m in baseline}
    treat = {m.seed_id: m.crash_probability for m in treatment}
    if set(base) != set(treat):
        raise DistributionError("baseline and treatment cover different seeds")

    per_seed, excluded = {}, []
    for seed_id in sorted(base):
        if base[seed_id] <= 0:
            excluded.append(seed_id)
            continue
        per_seed[seed_id] = 1.0 - treat[seed_id] / base[seed_id]

    if not per_seed:
        raise DistributionError("no seed crashes in the baseline")
    rate = float(np.mean(list(per_seed.values())))
    return AvoidanceResult(rate=rate, per_seed=per_seed, excluded=tuple(excluded))


def population_histogram(
    matrices: Sequence[OutcomeMatrix],
    trim_percentiles=(5.0, 95.0),
    bin_width: float = 2.0,
) -> Optional[DeltaVDistribution]:
    """Prevalence-weighted delta-v histogram of a matrix set; None if nothing crashes."""
    if not any(m.crash_probability > 0 for m in matrices):
        return None
    weights, _ = prevalence_weights(matrices, trim_percentiles)
    samples = weighted_crash_samples(matrices, weights)
    return build_histogram(samples["delta_v"], samples["weight"], bin_width)


def assess_dms(
    baseline: Sequence[OutcomeMatrix],
    treatment: Sequence[OutcomeMatrix],
    cut_at: float,
    curves: Sequence[InjuryRiskCurve] = (),
    trim_percentiles=(5.0, 95.0),
    bin_width: float = 2.0,
) -> DmsAssessment:
    """Crash avoidance, remaining-crash severity and injury risk of a glance-cutting DMS."""
    avoidance = crash_avoidance_rate(baseline, treatment)
    without = sum(1 for m in treatment if m.crash_probability <= 0)

    base_hist = population_histogram(baseline, trim_percentiles, bin_width)
    treat_hist = population_histogram(treatment, trim_percentiles, bin_width)

    def risks(h) -> Dict[str, float]:
        return {} if h is None else {c.level.value: injury_risk(h, c) for c in curves}

    logger.info("DMS cut %.1f s: avoidance %.3f, %d seed(s) without crashes", cut_at, avoidance.rate, without)
    return DmsAssessment(
        cut_at=cut_at,
        avoidance_rate=avoidance.rate,
        seeds_without_crashes=without,
        mean_delta_v=None if treat_hist is None else treat_hist.mean,
        baseline_mean_delta_v=None if base_hist is None else base_hist.mean,
        injury_risk=risks(treat_hist),
        baseline_injury_risk=risks(base_hist),
    )


def percentile_table(percentiles: Sequence[SeedPercentile]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"seed_id": p.seed_id, "seed_delta_v": p.seed_delta_v, "percentile": p.percentile,
          "marker": p.marker.value} for p in percentiles],
        columns=["seed_id", "seed_delta_v", "percentile", "marker"],
    )


def stats_table(stats: Dict[str, ComparisonStats]) -> pd.DataFrame:
    """One row per compared distribution pair, columns as in the statistics table of the reports."""
    return pd.DataFrame([{"comparison": name, **s.model_dump()} for name, s in stats.items()])


def seed_percentiles(matrices: Sequence[OutcomeMatrix], no_response_fraction: float = 0.0) -> List[SeedPercentile]:
    """Percentile of every seed with a recorded delta-v among its own generated crashes."""
    result = []
    for m in matrices:
        if m.seed_delta_v is None:
            continue
        dv, w = seed_delta_v_samples(m, no_response_fraction)
        if dv.size == 0:
            logger.warning("Seed %s has no generated crashes; no percentile", m.seed_id)
            continue
        result.append(seed_percentile(m.seed_delta_v, dv, w, m.seed_id))
    return result
