# src/services/outcome_service.py

import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.core.errors import DistributionError
from src.schemas.outcome_schema import DeltaVDistribution, OutcomeMatrix, SeedWeight

logger = logging.getLogger(__name__)

MS_TO_KMH = 3.6
SAMPLE_COLUMNS = ["seed_id", "axis1_bin", "decel_bin", "delta_v", "weight", "max_severity"]


def delta_v(v1, v2, m1, m2):
    """
    Follower delta-v [km/h] from momentum conservation in a fully plastic
    impact: m2 * (v1 - v2) / (m1 + m2). Speeds in m/s, masses in kg.
    """
    ratio = np.asarray(m2, dtype=float) / (np.asarray(m1, dtype=float) + np.asarray(m2, dtype=float))
    result = ratio * (np.asarray(v1, dtype=float) - np.asarray(v2, dtype=float)) * MS_TO_KMH
    return float(result) if np.ndim(result) == 0 else result


def _nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    rank = max(1, math.ceil(percentile / 100.0 * sorted_values.size))
    return float(sorted_values[rank - 1])


def prevalence_weights(
    matrices: Sequence[OutcomeMatrix],
    trim_percentiles: Tuple[float, float] = (5.0, 95.0),
) -> Tuple[List[SeedWeight], List[str]]:
    """
    Seed weights so every seed contributes equally to the crash population:
    w_i = 1 / q_i with q_i the seed's crash probability normalized over seeds,
    clamped to the nearest-rank percentile bounds. Seeds without crash cells
    are returned separately.
    """
    crashing = [m for m in matrices if m.crash_probability > 0]
    excluded = [m.seed_id for m in matrices if m.crash_probability <= 0]
    if excluded:
        logger.warning("%d seed(s) without crash cells left out of the weighting", len(excluded))
    if not crashing:
        raise DistributionError("no seed has a crash cell; nothing to weight")

    q_raw = np.array([m.crash_probability for m in crashing])
    q = q_raw / q_raw.sum()
    w_untrimmed = 1.0 / q

    ordered = np.sort(w_untrimmed)
    low, high = (_nearest_rank(ordered, p) for p in trim_percentiles)
    w = np.clip(w_untrimmed, low, high)

    mass = w * q_raw
    contribution = mass / mass.sum()

    weights = [
        SeedWeight(
            seed_id=m.seed_id,
            q_raw=float(q_raw[i]),
            q=float(q[i]),
            w_untrimmed=float(w_untrimmed[i]),
            w=float(w[i]),
            contribution=float(contribution[i]),
        )
        for i, m in enumerate(crashing)
    ]
    logger.info("Weighted %d seeds; untrimmed span %.1f:1, trimmed %.1f:1",
                len(weights), ordered[-1] / ordered[0], w.max() / w.min())
    return weights, excluded


def crash_delta_v(matrix: OutcomeMatrix) -> np.ndarray:
    """Follower delta-v of every cell; 0 where there is no crash."""
    v1 = np.array([[c.v1 if c.crashed else 0.0 for c in row] for row in matrix.cells])
    v2 = np.array([[c.v2 if c.crashed else 0.0 for c in row] for row in matrix.cells])
    return delta_v(v1, v2, matrix.follower_mass, matrix.lead_mass)


def weighted_crash_samples(matrices: Sequence[OutcomeMatrix], weights: Sequence[SeedWeight]) -> pd.DataFrame:
    """One row per crash cell with weight w_i * p_j, normalized over all rows."""
    by_seed = {w.seed_id: w.w for w in weights}
    frames = []
    for m in matrices:
        if m.seed_id not in by_seed:
            continue
        mask = m.crash_mask
        rows, cols = np.nonzero(mask)
        frames.append(pd.DataFrame({
            "seed_id": m.seed_id,
            "axis1_bin": rows,
            "decel_bin": cols,
            "delta_v": crash_delta_v(m)[mask],
            "weight": by_seed[m.seed_id] * m.cell_probability[mask],
            "max_severity": m.max_severity_mask[mask],
        }))

    if not frames:
        raise DistributionError("no weighted crash samples")
    samples = pd.concat(frames, ignore_index=True)[SAMPLE_COLUMNS]
    samples["weight"] = samples["weight"] / samples["weight"].sum()
    return samples


def max_severity_share(samples: pd.DataFrame) -> float:
    total = samples["weight"].sum()
    return float(samples.loc[samples["max_severity"], "weight"].sum() / total) if total > 0 else 0.0


def build_histogram(
    delta_vs: Sequence[float],
    weights: Optional[Sequence[float]] = None,
    bin_width: float = 2.0,
    normalize: bool = True,
) -> DeltaVDistribution:
    """
    Weighted delta-v histogram on bins [k*w, (k+1)*w) from zero. The mean is
    taken from the unbinned samples. Samples are sorted first so the result
    does not depend on their order.
    """
    dv = np.asarray(delta_vs, dtype=float)
    w = np.ones_like(dv) if weights is None else np.asarray(weights, dtype=float)
    if dv.size == 0:
        raise DistributionError("cannot build a histogram from no samples")
    if dv.shape != w.shape:
        raise DistributionError("delta-v samples and weights differ in length")
    if np.any(w < 0) or np.any(dv < 0) or not np.all(np.isfinite(dv)):
        raise DistributionError("delta-v samples must be finite and >= 0 with nonnegative weights")

    order = np.lexsort((w, dv))
    dv, w = dv[order], w[order]
    total = w.sum()
    if total <= 0:
        raise DistributionError("histogram weights sum to zero")

    counts = np.bincount(np.floor(dv / bin_width).astype(int), weights=w)
    return DeltaVDistribution(
        bin_width=bin_width,
        weights=tuple(float(c) for c in (counts / total if normalize else counts)),
        mean=float(np.dot(dv, w) / total),
        normalized=normalize,
        n_effective=float(np.count_nonzero(w)),
    )


def no_response_delta_vs(matrices: Sequence[OutcomeMatrix]) -> List[float]:
    """One delta-v per seed whose no-response counterfactual crashes."""
    values = []
    for m in matrices:
        nr = m.no_response
        if nr is not None and nr.crashed:
            values.append(delta_v(nr.v1, nr.v2, m.follower_mass, m.lead_mass))
    missing = len(matrices) - len(values)
    if missing:
        logger.warning("%d seed(s) do not crash without a response; left out of the no-response histogram", missing)
    return values


def mix_no_response(base: DeltaVDistribution, no_resp_dvs: Sequence[float], fraction: float) -> DeltaVDistribution:
    """(1 - fraction) * base + fraction * normalized histogram of the no-response delta-v."""
    if not 0 <= fraction <= 1:
        raise DistributionError("no-response fraction must lie in [0, 1]")
    if not base.normalized:
        raise DistributionError("base distribution must be normalized")
    if fraction == 0:
        return base.model_copy(update={"components": {"base": 1.0, "no_response": 0.0}})

    no_resp = build_histogram(no_resp_dvs, bin_width=base.bin_width)
    if fraction == 1:
        return no_resp.model_copy(update={"components": {"base": 0.0, "no_response": 1.0}})

    n = max(base.n_bins, no_resp.n_bins)
    mixed = (1.0 - fraction) * base.padded(n) + fraction * no_resp.padded(n)
    return DeltaVDistribution(
        bin_width=base.bin_width,
        weights=tuple(float(x) for x in mixed / mixed.sum()),
        mean=(1.0 - fraction) * base.mean + fraction * no_resp.mean,
        normalized=True,
        n_effective=base.n_effective + no_resp.n_effective,
        components={"base": 1.0 - fraction, "no_response": fraction},
    )


def seed_delta_v_samples(matrix: OutcomeMatrix, no_response_fraction: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generated delta-v of one seed with weights normalized within the seed: crash
    cells carry 1 - fraction, the no-response crash carries `fraction`.
    """
    mask = matrix.crash_mask
    dv = crash_delta_v(matrix)[mask]
    p = matrix.cell_probability[mask]
    if p.sum() > 0:
        p = p / p.sum()

    nr = matrix.no_response
    if no_response_fraction > 0 and nr is not None and nr.crashed:
        if p.size == 0:
            return np.array([delta_v(nr.v1, nr.v2, matrix.follower_mass, matrix.lead_mass)]), np.array([1.0])
        dv = np.append(dv, delta_v(nr.v1, nr.v2, matrix.follower_mass, matrix.lead_mass))
        p = np.append(p * (1.0 - no_response_fraction), no_response_fraction)
    return dv, p


def conditional_mean_delta_v(matrix: OutcomeMatrix) -> Optional[float]:
    """Probability-weighted mean delta-v over the seed's crash cells; None without crashes."""
    mask = matrix.crash_mask
    p = matrix.cell_probability[mask]
    if p.sum() <= 0:
        return None
    return float(np.dot(crash_delta_v(matrix)[mask], p) / p.sum())


# ---------------------------------------------------------
# Files
# ---------------------------------------------------------

def save_histogram(dist: DeltaVDistribution, path: Path) -> List[Path]:
    """Histogram CSV plus a JSON sidecar with the mean and provenance fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({
        "bin_low_kmh": dist.bin_lows,
        "bin_high_kmh": dist.bin_highs,
        "weight": dist.weights_array,
    }).to_csv(path, index=False)

    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "bin_width": dist.bin_width,
        "mean": dist.mean,
        "normalized": dist.normalized,
        "n_effective": dist.n_effective,
        "components": dist.components,
    }, indent=2, sort_keys=True), encoding="utf-8")
    return [path, sidecar]


def load_histogram(path: Path) -> DeltaVDistribution:
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
        lows = frame["bin_low_kmh"].to_numpy(dtype=float)
        weights = frame["weight"].to_numpy(dtype=float)
    except FileNotFoundError as exc:
        raise DistributionError(f"histogram not found: {path}") from exc
    except (KeyError, ValueError, pd.errors.ParserError) as exc:
        raise DistributionError(f"invalid histogram {path.name}: {exc}") from exc

    if lows.size == 0:
        raise DistributionError(f"histogram {path.name} has no bins")
    width = float(frame["bin_high_kmh"].iloc[0] - lows[0])
    if not np.allclose(lows, width * np.arange(lows.size)):
        raise DistributionError(f"histogram {path.name} bins are not contiguous from zero")

    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else {}
    total = weights.sum()
    normalized = meta.get("normalized", abs(total - 1.0) <= 1e-12)
    centres = lows + width / 2

    return DeltaVDistribution(
        bin_width=meta.get("bin_width", width),
        weights=tuple(float(x) for x in weights),
        mean=meta.get("mean", float(np.dot(centres, weights) / total) if total > 0 else 0.0),
        normalized=normalized,
        n_effective=meta.get("n_effective", 0.0),
        components=meta.get("components", {}),
    )
