# src/services/driver_model_service.py

import math
from typing import Optional, Tuple

import numpy as np
from scipy.stats import lognorm

from src.core.errors import ModelUndefinedError
from src.schemas.distribution_schema import ReactionTimeDistribution
from src.schemas.driver_schema import BrakeProfile, CbmConfig
from src.schemas.seed_schema import CounterfactualSeed, LeadBehaviorClass

REACTION_BIN_STEP_S = 0.2
REACTION_BIN_COUNT = 25
NEVER = math.inf


def cbm_onset(anchor: Optional[float], overshoot: float, cfg: CbmConfig) -> float:
    """Brake onset for the off-road glance driver: anchor + overshoot + response delay."""
    if anchor is None:
        raise ValueError("no looming anchor; route the seed to the no-response driver")
    if overshoot < 0:
        raise ValueError("overshoot must be >= 0")
    return anchor + overshoot + cfg.response_delay


def blom_onset(brake_light_onset: float, t_react: float) -> float:
    return brake_light_onset + t_react


def blom_brake_light(cf: CounterfactualSeed) -> float:
    """Lead brake-light onset, or ModelUndefinedError when the lead never brakes."""
    if cf.lead_behavior_class != LeadBehaviorClass.BRAKING or cf.lead_brake_onset is None:
        raise ModelUndefinedError(
            f"brake-light-onset model undefined for seed {cf.id} "
            f"(lead is {cf.lead_behavior_class.value})"
        )
    return cf.lead_brake_onset


def lognormal_parameters(m: float, v: float) -> Tuple[float, float]:
    """mu and sigma of the log-normal with mean m and variance v."""
    mu = math.log(m ** 2 / math.sqrt(v + m ** 2))
    sigma = math.sqrt(math.log(v / m ** 2 + 1.0))
    return mu, sigma


def discretize_reaction_time(m: float = 1.275, v: float = 0.36) -> ReactionTimeDistribution:
    """
    Bin centres 0.2, 0.4, ..., 5.0 s; each bin gets the log-normal mass on
    centre +/- 0.1 s. Mass outside [0.1, 5.1] s is dropped and the rest renormalized.
    """
    if m <= 0 or v <= 0:
        raise ValueError("reaction time mean and variance must be positive")

    mu, sigma = lognormal_parameters(m, v)
    centres = np.round(REACTION_BIN_STEP_S * np.arange(1, REACTION_BIN_COUNT + 1), 10)
    half = REACTION_BIN_STEP_S / 2
    cdf = lognorm(s=sigma, scale=math.exp(mu)).cdf
    mass = cdf(centres + half) - cdf(centres - half)

    if mass.sum() <= 0:
        raise ValueError("reaction time distribution has no mass in 0.1-5.1 s")
    probabilities = mass / mass.sum()

    return ReactionTimeDistribution(
        m=m,
        v=v,
        mu=mu,
        sigma=sigma,
        reaction_times=tuple(float(c) for c in centres),
        probabilities=tuple(float(p) for p in probabilities),
    )


def brake_deceleration(profile: BrakeProfile, t):
    """Deceleration magnitude at t: clamp(|jerk| * (t - onset), 0, d_max)."""
    ts = np.asarray(t, dtype=float)
    if profile.never_brakes:
        decel = np.zeros_like(ts)
    else:
        decel = np.clip(abs(profile.jerk) * (ts - profile.onset), 0.0, profile.d_max)
    return float(decel) if decel.ndim == 0 else decel


def integrate_braking(
    t: np.ndarray,
    x0: float,
    v0: float,
    profile: BrakeProfile,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Semi-implicit Euler on the time grid `t`: speed updates from the
    deceleration at the previous sample, position from the updated speed.
    Speed never drops below zero. Returns (position, speed, acceleration).
    """
    dt = np.diff(t)
    decel = brake_deceleration(profile, t)

    speed = np.empty_like(t)
    speed[0] = v0
    speed[1:] = np.maximum(v0 - np.cumsum(decel[:-1] * dt), 0.0)

    position = np.empty_like(t)
    position[0] = x0
    position[1:] = x0 + np.cumsum(speed[1:] * dt)

    acceleration = np.where(speed > 0, -decel, 0.0)
    return position, speed, acceleration
