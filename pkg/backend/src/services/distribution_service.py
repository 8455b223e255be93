# src/services/distribution_service.py

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.core.errors import DistributionError
from src.schemas.distribution_schema import (
    GLANCE_BIN_WIDTH_S,
    DecelDistribution,
    GlanceDistribution,
    OvershootDistribution,
)

logger = logging.getLogger(__name__)


def glance_bin_index(durations) -> np.ndarray:
    """Bin k covers ((k-1)*0.1, k*0.1]; rounding absorbs float noise on the edges."""
    return np.ceil(np.round(np.asarray(durations, dtype=float) / GLANCE_BIN_WIDTH_S, 9)).astype(int)


def _labels(indices) -> Tuple[float, ...]:
    return tuple(float(round(k * GLANCE_BIN_WIDTH_S, 10)) for k in indices)


def bin_glances(durations: Sequence[float], on_road_fraction: float) -> GlanceDistribution:
    """Off-road glances counted in 0.1 s bins, scaled to 1 - on_road_fraction."""
    if not 0 <= on_road_fraction < 1:
        raise DistributionError("on-road fraction must lie in [0, 1)")

    values = np.asarray(durations, dtype=float)
    if values.size == 0:
        raise DistributionError("no off-road glances to bin (off-road mass would be unassigned)")
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise DistributionError("glance durations must be positive and finite")

    indices, counts = np.unique(glance_bin_index(values), return_counts=True)
    probabilities = counts / counts.sum() * (1.0 - on_road_fraction)

    return GlanceDistribution(
        on_road_mass=on_road_fraction,
        durations=_labels(indices),
        probabilities=tuple(float(p) for p in probabilities),
    )


def _dense_off_road(g: GlanceDistribution) -> np.ndarray:
    """Off-road probabilities on bins 1..K (index 0 is bin 1)."""
    dense = np.zeros(int(g.bin_indices.max()))
    dense[g.bin_indices - 1] = g.probabilities
    return dense


def overshoot_transform(g: GlanceDistribution) -> OvershootDistribution:
    """
    A glance of k bins overshoots the anchor by j bins, 1 <= j <= k, each with
    equal chance: o(j) = sum_{k >= j} p(k) / k. The off-road part is rescaled to
    the glance distribution's off-road mass; on-road mass stays at overshoot 0.
    """
    p = _dense_off_road(g)
    k = np.arange(1, p.size + 1)
    overshoot = np.cumsum((p / k)[::-1])[::-1]
    overshoot *= g.off_road_mass / overshoot.sum()

    return OvershootDistribution(
        on_road_mass=g.on_road_mass,
        overshoots=_labels(k),
        probabilities=tuple(float(o) for o in overshoot),
    )


def enumerate_overshoot_cells(g: GlanceDistribution) -> List[Tuple[float, float, float]]:
    """
    Every (glance duration, overshoot, probability) pair the transform
    collapses; the on-road point mass is the single cell (0, 0, on_road_mass).
    """
    cells = [(0.0, 0.0, g.on_road_mass)] if g.on_road_mass > 0 else []
    for k, (duration, prob) in zip(g.bin_indices, g.off_road_bins):
        share = prob / k
        cells.extend((duration, float(round(j * GLANCE_BIN_WIDTH_S, 10)), share) for j in range(1, k + 1))
    return cells


def cut_glances(g: GlanceDistribution, cut_at: float) -> GlanceDistribution:
    """
    Drop glances longer than `cut_at` (a DMS that interrupts them) and rescale
    the remaining bins to the original off-road mass.
    """
    if cut_at <= 0:
        raise DistributionError("cut threshold must be positive")

    keep = np.asarray(g.durations) <= cut_at + 1e-9
    if not keep.any():
        raise DistributionError(f"cut at {cut_at} s removes every off-road glance")
    if keep.all():
        return g

    kept = np.asarray(g.probabilities)[keep]
    probabilities = kept / kept.sum() * g.off_road_mass

    return GlanceDistribution(
        on_road_mass=g.on_road_mass,
        durations=tuple(d for d, k in zip(g.durations, keep) if k),
        probabilities=tuple(float(p) for p in probabilities),
    )


def bin_decels(d_values: Sequence[float], bin_width: float = 1.5) -> DecelDistribution:
    """Count-based probabilities over fixed-width bins from zero; only occupied bins are kept."""
    values = np.asarray(d_values, dtype=float)
    if values.size == 0 or np.any(values <= 0):
        raise DistributionError("deceleration values must be a non-empty set of positive numbers")

    indices, counts = np.unique(np.floor(values / bin_width).astype(int), return_counts=True)
    return DecelDistribution(
        bin_width=bin_width,
        d_max=tuple(float((i + 0.5) * bin_width) for i in indices),
        probabilities=tuple(float(c) for c in counts / counts.sum()),
    )


# ---------------------------------------------------------
# Synthetic stand-ins for the naturalistic-driving data
# ---------------------------------------------------------

def synthesize_glance_durations(n_glances: int = 4604, max_duration: float = 6.7, rng_seed: int = 0) -> np.ndarray:
    """
    Log-normal off-road glance durations capped at `max_duration`, with one
    glance placed in every 0.1 s bin so all bins up to the cap are occupied.
    """
    n_bins = int(glance_bin_index([max_duration])[0])
    if n_glances < n_bins:
        raise DistributionError(f"need at least {n_bins} glances to occupy every bin up to {max_duration} s")

    rng = np.random.default_rng(rng_seed)
    guaranteed = np.round(GLANCE_BIN_WIDTH_S * np.arange(1, n_bins + 1), 10)
    drawn = rng.lognormal(mean=np.log(0.9), sigma=0.6, size=n_glances - n_bins)
    drawn = np.clip(drawn, 0.05, max_duration)
    return np.concatenate([guaranteed, drawn])


def synthesize_decels(n_values: int = 45, low: float = 1.6, high: float = 10.4, rng_seed: int = 0,
                      bin_width: float = 1.5) -> np.ndarray:
    """Maximum decelerations spread over [low, high], every bin in that span occupied."""
    if low > high:
        raise DistributionError("deceleration range is inverted")

    rng = np.random.default_rng(rng_seed)
    first, last = int(np.floor(low / bin_width)), int(np.floor(high / bin_width))
    anchors = [low] + [b * bin_width + bin_width / 2 for b in range(first + 1, last)] + [high]
    anchors = anchors[: max(1, min(len(anchors), n_values))]
    drawn = rng.triangular(low, (low + high) / 2, high, size=n_values - len(anchors))
    return np.concatenate([anchors, drawn])


# ---------------------------------------------------------
# Files
# ---------------------------------------------------------

def save_glance_distribution(g: Union[GlanceDistribution, OvershootDistribution], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = g.durations if isinstance(g, GlanceDistribution) else g.overshoots
    frame = pd.DataFrame({"duration_s": values, "probability": g.probabilities})
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"on_road_mass,{g.on_road_mass!r}\n")
        frame.to_csv(fh, index=False)
    return path


def load_glance_distribution(path: Path) -> GlanceDistribution:
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            label, value = fh.readline().strip().split(",")
        if label != "on_road_mass":
            raise ValueError("first row must be on_road_mass,<value>")
        frame = pd.read_csv(path, skiprows=1, float_precision="round_trip")
        return GlanceDistribution(
            on_road_mass=float(value),
            durations=tuple(frame["duration_s"].astype(float)),
            probabilities=tuple(frame["probability"].astype(float)),
        )
    except FileNotFoundError as exc:
        raise DistributionError(f"glance distribution not found: {path}") from exc
    except (ValueError, KeyError, pd.errors.ParserError) as exc:
        raise DistributionError(f"invalid glance distribution {path.name}: {exc}") from exc


def save_decel_distribution(d: DecelDistribution, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"d_max_ms2": d.d_max, "probability": d.probabilities}).to_csv(path, index=False)
    return path


def load_decel_distribution(path: Path, bin_width: float = 1.5) -> DecelDistribution:
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
        return DecelDistribution(
            bin_width=bin_width,
            d_max=tuple(frame["d_max_ms2"].astype(float)),
            probabilities=tuple(frame["probability"].astype(float)),
        )
    except FileNotFoundError as exc:
        raise DistributionError(f"deceleration distribution not found: {path}") from exc
    except (ValueError, KeyError, pd.errors.ParserError) as exc:
        raise DistributionError(f"invalid deceleration distribution {path.name}: {exc}") from exc
