# src/services/looming_service.py

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from src.core.errors import LoomingDomainError
from src.schemas.seed_schema import CounterfactualSeed

logger = logging.getLogger(__name__)

DEFAULT_INV_TAU_THRESHOLD = 0.2  # 1/s


class LoomingSeries(BaseModel):
    """Optical angle, its rate and inverse tau, up to (not including) the first overlap."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    t: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    inv_tau: np.ndarray


def optical_angle(range_m, lead_width: float):
    """
    Angle subtended by the lead vehicle's width: 2 * arctan(w / 2R).
    Accepts scalars or arrays; any range <= 0 means the vehicles overlap.
    """
    if lead_width <= 0:
        raise LoomingDomainError(f"lead width must be positive, got {lead_width}")
    r = np.asarray(range_m, dtype=float)
    if np.any(r <= 0):
        raise LoomingDomainError("optical angle undefined for range <= 0 (vehicles overlap)")
    theta = 2.0 * np.arctan(lead_width / (2.0 * r))
    return float(theta) if theta.ndim == 0 else theta


def optical_angle_rate(range_m, range_rate, lead_width: float) -> np.ndarray:
    """Analytic derivative of the optical angle: -w * dR / (R^2 + w^2 / 4)."""
    r = np.asarray(range_m, dtype=float)
    return -lead_width * np.asarray(range_rate, dtype=float) / (r ** 2 + lead_width ** 2 / 4.0)


def looming_series(cf: CounterfactualSeed) -> LoomingSeries:
    gap = cf.gap
    overlapping = np.flatnonzero(gap <= 0)
    end = int(overlapping[0]) if overlapping.size else len(gap)

    r = gap[:end]
    r_dot = cf.lead.speed[:end] - cf.follower.speed[:end]
    width = cf.lead_meta.width

    theta = optical_angle(r, width)
    theta_dot = optical_angle_rate(r, r_dot, width)

    return LoomingSeries(
        t=cf.lead.t[:end],
        theta=theta,
        theta_dot=theta_dot,
        inv_tau=theta_dot / theta,
    )


def find_anchor(series: LoomingSeries, threshold: float = DEFAULT_INV_TAU_THRESHOLD) -> Optional[float]:
    """
    First upward crossing of inv_tau through `threshold`, linearly
    interpolated between samples. None when it is never reached. When the
    series already starts at or above the threshold there is no crossing to
    interpolate and the first sample time is returned.
    """
    if threshold <= 0:
        raise ValueError("inverse tau threshold must be positive")

    above = series.inv_tau >= threshold
    if not above.any():
        return None

    i = int(np.argmax(above))
    if i == 0:
        logger.debug("inverse tau %.3f already >= %.3f at t=%.2f s; anchoring at the first sample",
                     series.inv_tau[0], threshold, series.t[0])
        return float(series.t[0])

    x0, x1 = series.inv_tau[i - 1], series.inv_tau[i]
    t0, t1 = series.t[i - 1], series.t[i]
    return float(t0 + (threshold - x0) / (x1 - x0) * (t1 - t0))
