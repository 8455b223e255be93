# src/services/bias_transform_service.py

import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.optimize import nnls
from scipy.special import expit

from src.core.errors import DistributionError, FitError
from src.schemas.bias_schema import (
    OccupantRecord,
    OccupantRole,
    PdoFitResult,
    PdoModel,
    TransferFitResult,
    TransferFunction,
    TransferGrid,
)
from src.schemas.campaign_schema import SyntheticOccupantConfig
from src.schemas.outcome_schema import DeltaVDistribution
from src.services.outcome_service import build_histogram

logger = logging.getLogger(__name__)

# Weight of the "fill sums to the deficit" row in the constrained least squares
EQUALITY_WEIGHT = 1e4


# ---------------------------------------------------------
# Occupant records
# ---------------------------------------------------------

def load_occupants(path: Path) -> List[OccupantRecord]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
        return [
            OccupantRecord(delta_v=float(r.delta_v_kmh), mais=int(r.mais), role=OccupantRole(r.role))
            for r in frame.itertuples(index=False)
        ]
    except FileNotFoundError as exc:
        raise DistributionError(f"occupant records not found: {path}") from exc
    except (AttributeError, ValueError, ValidationError, pd.errors.ParserError) as exc:
        raise DistributionError(f"invalid occupant records {path.name}: {exc}") from exc


def synthesize_occupants(cfg: SyntheticOccupantConfig, rng_seed: int = 0) -> List[OccupantRecord]:
    """
    Insurance-like occupant sample: MAIS0 delta-v exponential but missing the
    lowest speeds (unreported damage-only crashes), injured occupants roughly normal.
    """
    rng = np.random.default_rng(rng_seed)
    n_pdo = int(round(cfg.n_records * cfg.mais0_share))
    n_injured = cfg.n_records - n_pdo

    pdo = cfg.censor_below_kmh + rng.exponential(1.0 / cfg.pdo_decay_per_kmh, size=n_pdo)
    injured = np.abs(rng.normal(cfg.injured_mean_kmh, cfg.injured_sd_kmh, size=n_injured))
    mais = rng.choice([1, 2, 3], size=n_injured, p=[0.8, 0.15, 0.05])

    records = [OccupantRecord(delta_v=float(dv), mais=0) for dv in pdo]
    records += [OccupantRecord(delta_v=float(dv), mais=int(m)) for dv, m in zip(injured, mais)]
    return records


def save_occupants(records: Sequence[OccupantRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({
        "delta_v_kmh": [r.delta_v for r in records],
        "mais": [r.mais for r in records],
        "role": [r.role.value for r in records],
    }).to_csv(path, index=False)
    return path


def injury_histogram(records: Sequence[OccupantRecord], bin_width: float = 2.0):
    """Delta-v distribution of the injured (MAIS1+) occupants, i.e. what an injury database holds."""
    injured = [r.delta_v for r in records if r.mais >= 1]
    return build_histogram(injured, bin_width=bin_width)


# ---------------------------------------------------------
# PDO model
# ---------------------------------------------------------

def _fit_exponential(centres: np.ndarray, counts: np.ndarray):
    """Log-linear fit of counts ~ A * exp(-B2 * dv) over strictly positive bins."""
    positive = counts > 0
    if positive.sum() < 2:
        raise FitError("exponential fit needs at least two non-empty bins")
    slope, intercept = np.polyfit(centres[positive], np.log(counts[positive]), 1, w=np.sqrt(counts[positive]))
    if not np.isfinite(slope) or slope >= 0:
        raise FitError(f"PDO delta-v counts do not decay (slope {slope:.4g})")
    return float(np.exp(intercept)), float(-slope)


def _allocate_fill(target: np.ndarray, deficit: float) -> np.ndarray:
    """Nonnegative fill closest to `target` whose sum equals `deficit`."""
    n = target.size
    a = np.vstack([np.eye(n), EQUALITY_WEIGHT * np.ones((1, n))])
    b = np.concatenate([np.maximum(target, 0.0), [EQUALITY_WEIGHT * deficit]])
    fill, _ = nnls(a, b)
    total = fill.sum()
    return fill * (deficit / total) if total > 0 else np.full(n, deficit / n)


def build_pdo(
    records: Sequence[OccupantRecord],
    p_pdo: float = 0.7,
    n_fill_bins: int = 6,
    bin_width: float = 2.0,
    max_iterations: int = 50,
    tolerance: float = 1e-10,
    fill_weights: Optional[Sequence[float]] = None,
) -> PdoFitResult:
    """
    Complete the MAIS0 delta-v distribution so PDO occupants make up `p_pdo`
    of all occupants, then fit the exponential PDO form. The missing PDO
    count goes into the `n_fill_bins` lowest bins below the MAIS0 mode,
    alternating allocation and fit until the residual stops changing.
    `fill_weights` fixes the allocation shape instead (sensitivity runs).
    """
    if not 0 < p_pdo < 1:
        raise FitError("p_pdo must lie strictly between 0 and 1")

    pdo_dv = np.array([r.delta_v for r in records if r.mais == 0])
    injured = float(sum(1 for r in records if r.mais >= 1))
    if pdo_dv.size == 0 or injured == 0:
        raise FitError("occupant records need both MAIS0 and MAIS1+ occupants")

    pdo_present = float(pdo_dv.size)
    pdo_total = injured * p_pdo / (1.0 - p_pdo)
    deficit = pdo_total - pdo_present
    if deficit < -1e-9:
        raise FitError(
            f"MAIS0 share already exceeds p_pdo={p_pdo}: {pdo_present:.0f} present, {pdo_total:.1f} needed"
        )
    deficit = deficit if deficit > 1e-9 else 0.0

    counts = np.bincount(np.floor(pdo_dv / bin_width).astype(int)).astype(float)
    centres = (np.arange(counts.size) + 0.5) * bin_width
    mode = int(np.argmax(counts))
    fill_idx = np.arange(min(n_fill_bins, mode))

    if deficit > 0 and fill_idx.size == 0:
        raise FitError("no bins below the MAIS0 mode to place the missing PDO occupants in")

    fill = np.zeros(counts.size)
    residuals = []

    if deficit == 0:
        amplitude, decay = _fit_exponential(centres, counts)
        iterations = 1
    elif fill_weights is not None:
        shape = np.asarray(fill_weights, dtype=float)[: fill_idx.size]
        if shape.size != fill_idx.size or np.any(shape < 0) or shape.sum() <= 0:
            raise FitError("fill weights must be nonnegative, nonzero and match the fill bins")
        fill[fill_idx] = deficit * shape / shape.sum()
        amplitude, decay = _fit_exponential(centres, counts + fill)
        iterations = 1
    else:
        tail = np.arange(counts.size) >= mode
        amplitude, decay = _fit_exponential(centres[tail], counts[tail])
        iterations = 0
        for iterations in range(1, max_iterations + 1):
            target = amplitude * np.exp(-decay * centres[fill_idx]) - counts[fill_idx]
            fill[fill_idx] = _allocate_fill(target, deficit)
            augmented = counts + fill
            amplitude, decay = _fit_exponential(centres, augmented)
            fitted = amplitude * np.exp(-decay * centres)
            residuals.append(float(np.linalg.norm(augmented - fitted) / augmented.sum()))
            if len(residuals) > 1 and abs(residuals[-1] - residuals[-2]) <= tolerance:
                break
        else:
            logger.warning("PDO allocation did not settle in %d iterations (residual %.3g)",
                           max_iterations, residuals[-1])

    augmented = counts + fill
    if not residuals:
        fitted = amplitude * np.exp(-decay * centres)
        residuals.append(float(np.linalg.norm(augmented - fitted) / augmented.sum()))

    model = PdoModel(B1=amplitude / augmented.sum(), B2=decay, bin_width=bin_width)
    logger.info("PDO fit: B1=%.4f B2=%.4f (deficit %.1f occupants, %d iteration(s))",
                model.B1, model.B2, deficit, iterations)

    return PdoFitResult(
        model=model,
        pdo_present=pdo_present,
        injured=injured,
        pdo_total=pdo_total,
        deficit=deficit,
        mode_delta_v=float(centres[mode]),
        fill=tuple(float(f) for f in fill[fill_idx]),
        augmented_counts=tuple(float(c) for c in augmented),
        residuals=tuple(residuals),
        iterations=iterations,
    )


def augment_reference(injury_dist: DeltaVDistribution, pdo: PdoModel, p_pdo: float = 0.7) -> DeltaVDistribution:
    """
    Mix the injury distribution with the PDO shape so PDO crashes carry
    `p_pdo` of the mass. The PDO part is normalized over the injury bins.
    """
    if not 0 <= p_pdo < 1:
        raise DistributionError("p_pdo must lie in [0, 1)")
    if not injury_dist.normalized:
        raise DistributionError("injury distribution must be normalized")
    if p_pdo == 0:
        return injury_dist

    centres = injury_dist.centers
    pdo_w = pdo.pdf(centres) * injury_dist.bin_width / pdo.bin_width
    pdo_w = pdo_w / pdo_w.sum()
    mixed = p_pdo * pdo_w + (1.0 - p_pdo) * injury_dist.weights_array

    return DeltaVDistribution(
        bin_width=injury_dist.bin_width,
        weights=tuple(float(x) for x in mixed / mixed.sum()),
        mean=p_pdo * float(np.dot(centres, pdo_w)) + (1.0 - p_pdo) * injury_dist.mean,
        normalized=True,
        n_effective=injury_dist.n_effective / (1.0 - p_pdo),
        components={"pdo": p_pdo, "injury": 1.0 - p_pdo},
    )


# ---------------------------------------------------------
# Transfer function
# ---------------------------------------------------------

def transfer_cost(with_pdo: np.ndarray, original: np.ndarray, centres: np.ndarray, c1: float, c2: np.ndarray) -> np.ndarray:
    """
    Sum of absolute bin differences between `original` and the censored
    with-PDO histogram rescaled to the original's mass, one value per c2.
    """
    censored = expit(c1 + np.outer(c2, centres)) * with_pdo
    scale = original.sum() / censored.sum(axis=1)
    return np.abs(original - censored * scale[:, None]).sum(axis=1)


def fit_transfer(
    with_pdo: DeltaVDistribution,
    original: DeltaVDistribution,
    grid: TransferGrid = TransferGrid(),
) -> TransferFitResult:
    """
    Exhaustive grid search for (C1, C2). Ties go to the smallest C1, then the
    smallest C2. An optimum at the largest C1 with the flattest C2 means the
    inputs show no censoring and is flagged as degenerate.
    """
    if with_pdo.bin_width != original.bin_width:
        raise DistributionError("transfer fit needs both histograms on the same bin width")

    n = max(with_pdo.n_bins, original.n_bins)
    a = with_pdo.padded(n)
    o = original.padded(n)
    if a.sum() <= 0 or o.sum() <= 0:
        raise FitError("transfer fit needs non-empty histograms")
    centres = (np.arange(n) + 0.5) * original.bin_width

    c1_values, c2_values = grid.c1_values(), grid.c2_values()
    best = (np.inf, 0, 0)
    for i, c1 in enumerate(c1_values):
        costs = transfer_cost(a, o, centres, c1, c2_values)
        j = int(np.argmin(costs))
        if costs[j] < best[0]:
            best = (float(costs[j]), i, j)

    cost, i, j = best
    if not np.isfinite(cost):
        raise FitError("transfer fit cost is not finite anywhere on the grid")

    transfer = TransferFunction(C1=float(c1_values[i]), C2=float(c2_values[j]))
    degenerate = i == len(c1_values) - 1 and j == 0
    if degenerate:
        logger.warning("Transfer fit saturates at C1=%.2f, C2=%.3f: no censoring visible", transfer.C1, transfer.C2)
    else:
        logger.info("Transfer fit: C1=%.2f C2=%.3f cost=%.5f", transfer.C1, transfer.C2, cost)

    return TransferFitResult(
        transfer=transfer,
        cost=cost,
        degenerate=degenerate,
        grid_shape=(len(c1_values), len(c2_values)),
    )


def apply_transfer(dist: DeltaVDistribution, tf: TransferFunction) -> DeltaVDistribution:
    """Censor a model distribution like an injury database: weights * P(dv), renormalized."""
    if not dist.normalized:
        raise DistributionError("distribution must be normalized")

    centres = dist.centers
    censored = dist.weights_array * tf.probability(centres)
    total = censored.sum()
    if total <= 0:
        raise DistributionError("transfer function removes all mass")
    out = censored / total

    return DeltaVDistribution(
        bin_width=dist.bin_width,
        weights=tuple(float(x) for x in out),
        mean=float(np.dot(centres, out)),
        normalized=True,
        n_effective=dist.n_effective,
    )


# ---------------------------------------------------------
# Files
# ---------------------------------------------------------

def save_model(model, path: Path, **diagnostics) -> Path:
    """PdoModel / TransferFunction parameters as JSON, with optional fit diagnostics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {**model.model_dump(), **diagnostics}
    path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_transfer(path: Path) -> TransferFunction:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        return TransferFunction(C1=document["C1"], C2=document["C2"])
    except FileNotFoundError as exc:
        raise DistributionError(f"transfer function not found: {path}") from exc
    except (KeyError, ValueError) as exc:
        raise DistributionError(f"invalid transfer function {path.name}: {exc}") from exc
