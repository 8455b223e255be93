# src/services/scenario_service.py

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.core.errors import GenerationError, SeedParseError, SeedValidationError
from src.schemas.driver_schema import BrakeProfile
from src.schemas.seed_schema import (
    CounterfactualSeed,
    LeadBehaviorClass,
    SeedCrash,
    SynthesisConfig,
    Trajectory,
    VehicleMeta,
)
from src.services.driver_model_service import integrate_braking
from src.services.looming_service import DEFAULT_INV_TAU_THRESHOLD, find_anchor, looming_series
from src.services.outcome_service import delta_v

logger = logging.getLogger(__name__)

SEED_COLUMNS = ["t", "lead_pos", "lead_speed", "lead_acc", "foll_pos", "foll_speed", "foll_acc"]

# Sustained-deceleration detector shared by the follower maneuver and the lead brake light
DECEL_ONSET_THRESHOLD = -0.5  # m/s^2
DECEL_MIN_DURATION = 0.2      # s
STANDSTILL_SPEED = 0.1        # m/s

DEFAULT_HORIZON_EXTENSION = 30.0  # s


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(err["msg"].removeprefix("Value error, ") for err in exc.errors())


# ---------------------------------------------------------
# Seed files
# ---------------------------------------------------------

def load_seed(pcm_file: Union[str, Path]) -> SeedCrash:
    """
    Read a seed from its CSV time series and the JSON sidecar next to it
    (same stem, .json).
    """
    pcm_file = Path(pcm_file)
    sidecar = pcm_file.with_suffix(".json")

    try:
        frame = pd.read_csv(pcm_file, float_precision="round_trip")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SeedParseError(f"missing seed file: {exc.filename}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, json.JSONDecodeError) as exc:
        raise SeedParseError(f"cannot parse seed {pcm_file.name}: {exc}") from exc

    missing = [c for c in SEED_COLUMNS if c not in frame.columns]
    if missing:
        raise SeedParseError(f"{pcm_file.name}: missing columns {missing}")

    try:
        columns = {c: frame[c].to_numpy(dtype=float) for c in SEED_COLUMNS}
        lead_meta = VehicleMeta(id="lead", **meta["lead"])
        follower_meta = VehicleMeta(id="follower", **meta["follower"])
        seed_id = str(meta["id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SeedParseError(f"{pcm_file.name}: bad seed content ({exc})") from exc

    reference_dv = meta.get("seed_delta_v_kmh")

    try:
        return SeedCrash(
            id=seed_id,
            lead=Trajectory(
                t=columns["t"],
                position=columns["lead_pos"],
                speed=columns["lead_speed"],
                acceleration=columns["lead_acc"],
            ),
            follower=Trajectory(
                t=columns["t"],
                position=columns["foll_pos"],
                speed=columns["foll_speed"],
                acceleration=columns["foll_acc"],
            ),
            lead_meta=lead_meta,
            follower_meta=follower_meta,
            seed_delta_v=None if reference_dv is None else float(reference_dv),
        )
    except ValidationError as exc:
        raise SeedValidationError(f"{pcm_file.name}: {_validation_message(exc)}") from exc


def save_seed(seed: SeedCrash, pcm_file: Union[str, Path]) -> Path:
    pcm_file = Path(pcm_file)
    pcm_file.parent.mkdir(parents=True, exist_ok=True)

    frame = pd.DataFrame({
        "t": seed.lead.t,
        "lead_pos": seed.lead.position,
        "lead_speed": seed.lead.speed,
        "lead_acc": seed.lead.acceleration,
        "foll_pos": seed.follower.position,
        "foll_speed": seed.follower.speed,
        "foll_acc": seed.follower.acceleration,
    })
    frame.to_csv(pcm_file, index=False)

    meta = {
        "id": seed.id,
        "lead": seed.lead_meta.model_dump(include={"mass", "width", "length"}),
        "follower": seed.follower_meta.model_dump(include={"mass", "width", "length"}),
    }
    if seed.seed_delta_v is not None:
        meta["seed_delta_v_kmh"] = seed.seed_delta_v
    pcm_file.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return pcm_file


def load_seed_dir(seed_dir: Union[str, Path]) -> List[SeedCrash]:
    """Every CSV with a JSON sidecar in `seed_dir`, sorted by seed id."""
    seed_dir = Path(seed_dir)
    if not seed_dir.is_dir():
        raise SeedParseError(f"seed directory not found: {seed_dir}")

    seeds = [load_seed(p) for p in sorted(seed_dir.glob("*.csv")) if p.with_suffix(".json").exists()]
    if not seeds:
        raise SeedParseError(f"no seed files in {seed_dir}")

    ids = [s.id for s in seeds]
    if len(set(ids)) != len(ids):
        raise SeedValidationError(f"duplicate seed ids in {seed_dir}")
    return sorted(seeds, key=lambda s: s.id)


# ---------------------------------------------------------
# Counterfactual construction
# ---------------------------------------------------------

def detect_sustained_deceleration(
    t: np.ndarray,
    acceleration: np.ndarray,
    threshold: float = DECEL_ONSET_THRESHOLD,
    min_duration: float = DECEL_MIN_DURATION,
) -> Optional[int]:
    """
    Index of the first sample of the first run with acceleration <= threshold
    lasting at least `min_duration` (first to last sample of the run).
    """
    below = np.concatenate([[False], np.asarray(acceleration) <= threshold, [False]])
    edges = np.diff(below.astype(np.int8))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1

    for start, end in zip(starts, ends):
        if t[end] - t[start] >= min_duration - 1e-9:
            return int(start)
    return None


def lead_brake_onset(seed: Union[SeedCrash, CounterfactualSeed]) -> Optional[float]:
    """Brake-light onset of the lead: start of its first sustained deceleration."""
    idx = detect_sustained_deceleration(seed.lead.t, seed.lead.acceleration)
    return None if idx is None else float(seed.lead.t[idx])


def classify_lead(seed: Union[SeedCrash, CounterfactualSeed]) -> LeadBehaviorClass:
    if seed.lead.speed[0] < STANDSTILL_SPEED:
        return LeadBehaviorClass.STANDSTILL
    if lead_brake_onset(seed) is not None:
        return LeadBehaviorClass.BRAKING
    return LeadBehaviorClass.NON_BRAKING


def remove_evasive_maneuver(
    seed: Union[SeedCrash, CounterfactualSeed],
    horizon_extension: float = DEFAULT_HORIZON_EXTENSION,
    inv_tau_threshold: float = DEFAULT_INV_TAU_THRESHOLD,
) -> CounterfactualSeed:
    """
    Replace the follower's evasive braking by a constant speed and extend the
    lead beyond the seed at its final speed. The horizon always ends
    `horizon_extension` after the original seed end, so applying this to its
    own output returns the same record.
    """
    if horizon_extension < 0:
        raise ValueError("horizon extension must be >= 0")

    original_end = getattr(seed, "original_end", float(seed.lead.t[-1]))
    keep = seed.lead.t <= original_end
    t = seed.lead.t[keep]
    lead_pos = seed.lead.position[keep]
    lead_speed = seed.lead.speed[keep]
    lead_acc = seed.lead.acceleration[keep]

    onset_idx = detect_sustained_deceleration(t, seed.follower.acceleration[keep])
    if onset_idx is None or onset_idx == 0:
        speed = float(seed.follower.speed[0])
    else:
        speed = float(seed.follower.speed[onset_idx - 1])

    step = float(np.median(np.diff(t)))
    n_ext = int(round(horizon_extension / step))
    t_ext = t[-1] + step * np.arange(1, n_ext + 1)
    t_all = np.concatenate([t, t_ext])

    lead = Trajectory(
        t=t_all,
        position=np.concatenate([lead_pos, lead_pos[-1] + lead_speed[-1] * (t_ext - t[-1])]),
        speed=np.concatenate([lead_speed, np.full(n_ext, lead_speed[-1])]),
        acceleration=np.concatenate([lead_acc, np.zeros(n_ext)]),
    )
    follower = Trajectory(
        t=t_all,
        position=seed.follower.position[0] + speed * (t_all - t_all[0]),
        speed=np.full(t_all.size, speed),
        acceleration=np.zeros(t_all.size),
    )

    cf = CounterfactualSeed(
        id=seed.id,
        lead=lead,
        follower=follower,
        lead_meta=seed.lead_meta,
        follower_meta=seed.follower_meta,
        seed_delta_v=seed.seed_delta_v,
        original_end=original_end,
        follower_speed=speed,
        lead_behavior_class=classify_lead(seed),
        lead_brake_onset=lead_brake_onset(seed),
        inv_tau_threshold=inv_tau_threshold,
    )
    return cf.model_copy(update={"anchor_time": find_anchor(looming_series(cf), inv_tau_threshold)})


# ---------------------------------------------------------
# Synthetic seeds
# ---------------------------------------------------------

def _lead_classes(config: SynthesisConfig, rng: np.random.Generator) -> List[LeadBehaviorClass]:
    order = list(LeadBehaviorClass)
    if config.lead_behavior_counts is not None:
        classes = [c for c in order for _ in range(config.lead_behavior_counts.get(c, 0))]
        return [classes[i] for i in rng.permutation(len(classes))]

    weights = np.array([config.lead_behavior_mix.get(c, 0.0) for c in order], dtype=float)
    picks = rng.choice(len(order), size=config.n_seeds, p=weights / weights.sum())
    return [order[i] for i in picks]


def _uniform(rng: np.random.Generator, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _simulate_raw(
    config: SynthesisConfig,
    rng: np.random.Generator,
    lead_class: LeadBehaviorClass,
) -> Optional[Dict[str, np.ndarray]]:
    """One forward run with sampled parameters; None when it never collides."""
    dt = config.dt
    t = dt * np.arange(int(round(config.max_time_s / dt)) + 1)

    v_follow = _uniform(rng, config.follower_speed_ms)
    if config.initial_gap_m is not None:
        gap0 = _uniform(rng, config.initial_gap_m)
    else:
        gap0 = v_follow * _uniform(rng, config.time_headway_s)

    if lead_class == LeadBehaviorClass.STANDSTILL:
        lead = (gap0 + np.zeros_like(t), np.zeros_like(t), np.zeros_like(t))
    else:
        v_lead = v_follow * _uniform(rng, config.lead_speed_fraction)
        if lead_class == LeadBehaviorClass.BRAKING:
            onset = _uniform(rng, config.lead_brake_onset_s)
            d_lead = _uniform(rng, config.lead_decel_ms2)
        else:
            onset, d_lead = math.inf, 1.0
        lead = integrate_braking(t, gap0, v_lead, BrakeProfile(onset=onset, jerk=config.evasive_jerk_ms3, d_max=d_lead))

    cruise = integrate_braking(t, 0.0, v_follow, BrakeProfile(onset=math.inf, d_max=1.0))
    follower = cruise

    if rng.uniform() < config.evasive_braking_probability:
        closing = cruise[1] - lead[1]
        gap = lead[0] - cruise[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            ttc = np.where(closing > 0, gap / closing, np.inf)
        trigger = np.flatnonzero(ttc <= _uniform(rng, config.evasive_ttc_s))
        d_evasive = _uniform(rng, config.evasive_decel_ms2)
        if trigger.size:
            profile = BrakeProfile(onset=float(t[trigger[0]]), jerk=config.evasive_jerk_ms3, d_max=d_evasive)
            follower = integrate_braking(t, 0.0, v_follow, profile)

    gap = lead[0] - follower[0]
    contact = np.flatnonzero(gap <= 0)
    if not contact.size or contact[0] == 0:
        return None
    end = int(contact[0])

    return {
        "t": t[: end + 1],
        "lead_pos": lead[0][: end + 1],
        "lead_speed": lead[1][: end + 1],
        "lead_acc": lead[2][: end + 1],
        "foll_pos": follower[0][: end + 1],
        "foll_speed": follower[1][: end + 1],
        "foll_acc": follower[2][: end + 1],
    }


def synthesize_seeds(config: SynthesisConfig, rng_seed: Optional[int] = None) -> List[SeedCrash]:
    """
    Forward-simulate lead/follower pairs until collision and keep the last
    `pre_impact_window_s` before impact, re-based to t = 0 and follower
    position 0. Deterministic for a given (config, rng_seed).
    """
    rng = np.random.default_rng(config.rng_seed if rng_seed is None else rng_seed)
    window = int(round(config.pre_impact_window_s / config.dt))
    seeds = []

    for i, lead_class in enumerate(_lead_classes(config, rng)):
        for _ in range(config.max_attempts_per_seed):
            raw = _simulate_raw(config, rng, lead_class)
            if raw is None:
                continue
            seed = _windowed_seed(f"seed-{i + 1:04d}", raw, window, config, rng)
            # a braking lead may already stand still when the window opens
            if classify_lead(seed) == lead_class:
                break
        else:
            raise GenerationError(
                f"no {lead_class.value} collision after {config.max_attempts_per_seed} attempts; "
                "widen follower speed / headway ranges or lengthen max_time_s"
            )
        seeds.append(seed)

    logger.info("Synthesized %d seeds (rng_seed=%s)", len(seeds), config.rng_seed if rng_seed is None else rng_seed)
    return seeds


def _windowed_seed(seed_id: str, raw: Dict[str, np.ndarray], window: int, config: SynthesisConfig,
                   rng: np.random.Generator) -> SeedCrash:
    """Last `window` steps before impact, re-based to t = 0 and follower position 0."""
    start = max(0, len(raw["t"]) - 1 - window)
    cols = {k: v[start:] for k, v in raw.items()}
    origin_t, origin_x = cols["t"][0], cols["foll_pos"][0]

    lead_meta = VehicleMeta(
        id="lead",
        mass=_uniform(rng, config.mass_kg),
        width=_uniform(rng, config.width_m),
        length=_uniform(rng, config.length_m),
    )
    follower_meta = VehicleMeta(
        id="follower",
        mass=_uniform(rng, config.mass_kg),
        width=_uniform(rng, config.width_m),
        length=_uniform(rng, config.length_m),
    )

    v1, v2 = float(cols["foll_speed"][-1]), float(cols["lead_speed"][-1])
    seed_dv = float(delta_v(v1, v2, follower_meta.mass, lead_meta.mass)) if v1 > v2 else 0.0

    return SeedCrash(
        id=seed_id,
        lead=Trajectory(
            t=cols["t"] - origin_t,
            position=cols["lead_pos"] - origin_x,
            speed=cols["lead_speed"],
            acceleration=cols["lead_acc"],
        ),
        follower=Trajectory(
            t=cols["t"] - origin_t,
            position=cols["foll_pos"] - origin_x,
            speed=cols["foll_speed"],
            acceleration=cols["foll_acc"],
        ),
        lead_meta=lead_meta,
        follower_meta=follower_meta,
        seed_delta_v=round(seed_dv, 6),
    )
