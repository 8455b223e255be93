# src/services/sim_engine_service.py

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.core.errors import DistributionError, ModelUndefinedError
from src.schemas.campaign_schema import CampaignAxes, CampaignConfig, CampaignResult, CampaignSummary
from src.schemas.driver_schema import BrakeProfile, DriverModelKind
from src.schemas.outcome_schema import NO_CRASH, OutcomeMatrix, SimOutcome
from src.schemas.seed_schema import CounterfactualSeed, LeadBehaviorClass, SeedCrash
from src.services.distribution_service import (
    bin_decels,
    bin_glances,
    cut_glances,
    load_decel_distribution,
    load_glance_distribution,
    overshoot_transform,
    synthesize_decels,
    synthesize_glance_durations,
)
from src.services.driver_model_service import (
    NEVER,
    blom_brake_light,
    blom_onset,
    cbm_onset,
    discretize_reaction_time,
    integrate_braking,
)
from src.services.looming_service import find_anchor, looming_series
from src.services.scenario_service import remove_evasive_maneuver

logger = logging.getLogger(__name__)

EQUAL_IMPACT_SPEED_TOLERANCE = 0.01  # m/s
OUTCOME_FILE = "outcomes.csv"
SEED_META_FILE = "seed_meta.csv"


# ---------------------------------------------------------
# Kernel
# ---------------------------------------------------------

def _first_contact(t, gap, v_follow, v_lead, onset: float) -> SimOutcome:
    contact = np.flatnonzero(gap <= 0)
    if not contact.size:
        return NO_CRASH

    k = int(contact[0])
    if k == 0:
        t_imp, v1, v2 = float(t[0]), float(v_follow[0]), float(v_lead[0])
    else:
        f = gap[k - 1] / (gap[k - 1] - gap[k])
        t_imp = float(t[k - 1] + f * (t[k] - t[k - 1]))
        v1 = float(v_follow[k - 1] + f * (v_follow[k] - v_follow[k - 1]))
        v2 = float(v_lead[k - 1] + f * (v_lead[k] - v_lead[k - 1]))

    # grazing contact without closing speed is an avoidance
    if v1 <= v2:
        return NO_CRASH
    return SimOutcome(crashed=True, impact_time=t_imp, v1=v1, v2=v2, max_severity=onset >= t_imp)


class SeedKernel:
    """Lead motion resampled on the simulation grid of one counterfactual seed."""

    def __init__(self, cf: CounterfactualSeed, dt: float = 0.010):
        t0, t_end = float(cf.lead.t[0]), float(cf.lead.t[-1])
        n = int(round((t_end - t0) / dt)) + 1
        self.t = t0 + dt * np.arange(n)
        self.lead_position = np.interp(self.t, cf.lead.t, cf.lead.position)
        self.lead_speed = np.interp(self.t, cf.lead.t, cf.lead.speed)
        self.x0 = float(cf.follower.position[0])
        self.v0 = float(cf.follower_speed)
        self.calls = 0

    def simulate(self, onset: float, d_max: float, jerk: float) -> SimOutcome:
        self.calls += 1
        position, speed, _ = integrate_braking(self.t, self.x0, self.v0, BrakeProfile(onset=onset, jerk=jerk, d_max=d_max))
        return _first_contact(self.t, self.lead_position - position, speed, self.lead_speed, onset)


def simulate(cf: CounterfactualSeed, onset: float, d_max: float, jerk: float = -23.04, dt: float = 0.010) -> SimOutcome:
    """
    Follower holds its speed until `onset` (math.inf: never), then brakes along
    the jerk ramp to `d_max`. Crash at the first overlap with positive closing speed.
    """
    return SeedKernel(cf, dt).simulate(onset, d_max, jerk)


# ---------------------------------------------------------
# Sweep
# ---------------------------------------------------------

def _jerk(model: DriverModelKind, cfg: CampaignConfig) -> float:
    if cfg.jerk_override is not None:
        return cfg.jerk_override
    return cfg.cbm.jerk_mean if model == DriverModelKind.CBM else cfg.blom.jerk_mean


def brake_onsets(cf: CounterfactualSeed, axis1_values: Sequence[float], model: DriverModelKind,
                 cfg: CampaignConfig) -> np.ndarray:
    if model == DriverModelKind.BLOM:
        light = blom_brake_light(cf)
        return np.array([blom_onset(light, r) for r in axis1_values])

    if cf.anchor_time is not None and cf.inv_tau_threshold == cfg.cbm.inv_tau_threshold:
        anchor = cf.anchor_time
    else:
        anchor = find_anchor(looming_series(cf), cfg.cbm.inv_tau_threshold)
    if anchor is None:
        # never looms: the driver has nothing to respond to
        return np.full(len(axis1_values), NEVER)
    return np.array([cbm_onset(anchor, o, cfg.cbm) for o in axis1_values])


def _exhaustive_row(kernel: SeedKernel, onsets: np.ndarray, d_max: float, jerk: float) -> List[SimOutcome]:
    return [kernel.simulate(o, d_max, jerk) for o in onsets]


def _reduced_row(kernel: SeedKernel, onsets: np.ndarray, d_max: float, jerk: float):
    """
    Binary search for the first crashing onset, then walk upward until two
    consecutive crashes have equal impact speed and the later one is at
    maximum severity. Returns (row, filled indices) or None on a
    monotonicity violation.
    """
    n = len(onsets)
    done: Dict[int, SimOutcome] = {}

    def run(i: int) -> SimOutcome:
        if i not in done:
            done[i] = kernel.simulate(onsets[i], d_max, jerk)
        return done[i]

    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if run(mid).crashed:
            hi = mid
        else:
            lo = mid + 1
    boundary = lo

    plateau: Optional[int] = None
    for i in range(boundary, n):
        out = run(i)
        if not out.crashed:
            return None
        prev = done.get(i - 1)
        if (
            i > boundary
            and out.max_severity
            and abs(out.relative_speed - prev.relative_speed) <= EQUAL_IMPACT_SPEED_TOLERANCE
        ):
            plateau = i
            break

    row, filled = [], []
    for i in range(n):
        if i in done:
            row.append(done[i])
            continue
        filled.append(i)
        row.append(NO_CRASH if i < boundary else done[plateau])
    return row, filled


def sweep_seed(
    cf: CounterfactualSeed,
    axis1_bins: Sequence[Tuple[float, float]],
    decel_bins: Sequence[Tuple[float, float]],
    model: DriverModelKind,
    cfg: CampaignConfig,
    exhaustive: bool = False,
) -> OutcomeMatrix:
    """
    Outcome of every (axis1, decel) cell. axis1 must ascend in brake-onset
    time. The reduced sweep fills cells it can infer from monotonicity and
    re-simulates one random filled cell per decel bin; a mismatch falls back
    to simulating the whole decel bin.
    """
    axis1_values = [v for v, _ in axis1_bins]
    if any(b < a for a, b in zip(axis1_values, axis1_values[1:])):
        raise DistributionError("axis1 bins must be sorted ascending")

    onsets = brake_onsets(cf, axis1_values, model, cfg)
    jerk = _jerk(model, cfg)
    kernel = SeedKernel(cf, cfg.dt)
    seed_hash = zlib.crc32(cf.id.encode("utf-8"))

    columns = []
    fallbacks = 0
    for col, (d_max, _) in enumerate(decel_bins):
        if exhaustive:
            columns.append(_exhaustive_row(kernel, onsets, d_max, jerk))
            continue

        reduced = _reduced_row(kernel, onsets, d_max, jerk)
        if reduced is not None and cfg.verify_fills and reduced[1]:
            row, filled = reduced
            rng = np.random.default_rng([cfg.rng_seed, seed_hash, col])
            probe = filled[int(rng.integers(len(filled)))]
            if kernel.simulate(onsets[probe], d_max, jerk) != row[probe]:
                reduced = None

        if reduced is None:
            logger.warning("Seed %s, d_max %.2f: outcomes not monotone in onset, simulating every cell",
                           cf.id, d_max)
            fallbacks += 1
            columns.append(_exhaustive_row(kernel, onsets, d_max, jerk))
        else:
            columns.append(reduced[0])
        logger.debug("Seed %s, d_max %.2f: %d kernel calls so far", cf.id, d_max, kernel.calls)

    no_response = kernel.simulate(NEVER, decel_bins[0][0], jerk)

    return OutcomeMatrix(
        seed_id=cf.id,
        model=model,
        axis1_values=tuple(axis1_values),
        axis1_probs=tuple(p for _, p in axis1_bins),
        decel_values=tuple(d for d, _ in decel_bins),
        decel_probs=tuple(p for _, p in decel_bins),
        cells=tuple(tuple(columns[j][i] for j in range(len(decel_bins))) for i in range(len(axis1_values))),
        no_response=no_response,
        follower_mass=cf.follower_meta.mass,
        lead_mass=cf.lead_meta.mass,
        seed_delta_v=cf.seed_delta_v,
        lead_behavior_class=cf.lead_behavior_class,
        kernel_calls=kernel.calls,
        fallback_rows=fallbacks,
    )


# ---------------------------------------------------------
# Campaign
# ---------------------------------------------------------

def campaign_axes(cfg: CampaignConfig) -> CampaignAxes:
    """Load or synthesize the distributions a campaign sweeps over."""
    if cfg.decel_distribution is not None:
        decels = load_decel_distribution(cfg.decel_distribution, cfg.decel_bin_width)
    else:
        s = cfg.synthetic_decels
        decels = bin_decels(
            synthesize_decels(s.n_values, s.low_ms2, s.high_ms2, cfg.rng_seed, cfg.decel_bin_width),
            cfg.decel_bin_width,
        )

    if cfg.model == DriverModelKind.BLOM:
        reaction = discretize_reaction_time(cfg.blom.m, cfg.blom.v)
        return CampaignAxes(axis1=tuple(reaction.bins), decels=decels, reaction=reaction)

    if cfg.glance_distribution is not None:
        glance = load_glance_distribution(cfg.glance_distribution)
    else:
        s = cfg.synthetic_glances
        glance = bin_glances(
            synthesize_glance_durations(s.n_glances, s.max_duration_s, cfg.rng_seed),
            s.on_road_fraction,
        )
    if cfg.glance_cut_s is not None:
        glance = cut_glances(glance, cfg.glance_cut_s)

    overshoot = overshoot_transform(glance)
    return CampaignAxes(axis1=tuple(overshoot.axis()), decels=decels, glance=glance, overshoot=overshoot)


def _sweep_task(task) -> Union[OutcomeMatrix, str]:
    """Matrix for one seed, or the seed id when the model is undefined for it."""
    seed, cfg, axes, exhaustive = task
    cf = remove_evasive_maneuver(seed, cfg.horizon_extension_s, cfg.cbm.inv_tau_threshold)
    try:
        matrix = sweep_seed(cf, axes.axis1, axes.decels.bins, cfg.model, cfg, exhaustive=exhaustive)
    except ModelUndefinedError:
        return seed.id
    return matrix


def run_campaign(
    seeds: Sequence[SeedCrash],
    cfg: CampaignConfig,
    axes: Optional[CampaignAxes] = None,
    workers: int = 1,
    exhaustive: bool = False,
) -> CampaignResult:
    """
    One OutcomeMatrix per eligible seed, ordered by seed id. Seeds the model
    is undefined for (brake-light model without a braking lead) are excluded
    and listed in the summary. Output does not depend on `workers`.
    """
    axes = axes or campaign_axes(cfg)
    ordered = sorted(seeds, key=lambda s: s.id)
    tasks = [(seed, cfg, axes, exhaustive) for seed in ordered]

    logger.info("Campaign %s: %d seeds, %d x %d grid, %d worker(s)",
                cfg.name, len(ordered), len(axes.axis1), len(axes.decels.d_max), workers)

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(task) for task in tasks]

    matrices = [r for r in results if isinstance(r, OutcomeMatrix)]
    excluded = [r for r in results if isinstance(r, str)]

    if excluded:
        logger.warning("Campaign %s: %d of %d seeds excluded (lead not braking or standing still)",
                       cfg.name, len(excluded), len(ordered))

    summary = CampaignSummary(
        name=cfg.name,
        model=cfg.model,
        n_seeds=len(ordered),
        excluded=excluded,
        axis1_bins=len(axes.axis1),
        decel_bins=len(axes.decels.d_max),
        theoretical_cells=sum(m.theoretical_cells for m in matrices),
        kernel_calls=sum(m.kernel_calls for m in matrices),
        crash_cells=sum(m.n_crash_cells for m in matrices),
        fallback_rows=sum(m.fallback_rows for m in matrices),
    )
    logger.info("Campaign %s done: %d cells, %d kernel calls, %d crash cells",
                cfg.name, summary.theoretical_cells, summary.kernel_calls, summary.crash_cells)
    return CampaignResult(matrices=matrices, summary=summary, axes=axes)


def reweight_axis1(matrix: OutcomeMatrix, axis1: Sequence[Tuple[float, float]]) -> OutcomeMatrix:
    """
    The same outcomes under a different axis1 distribution whose support is a
    subset of the matrix's (e.g. a cut glance distribution). Cells whose axis1
    value is absent from `axis1` are dropped.
    """
    index = {round(v, 9): i for i, v in enumerate(matrix.axis1_values)}
    rows = []
    for value, prob in axis1:
        i = index.get(round(value, 9))
        if i is None:
            raise DistributionError(f"axis1 value {value} not swept for seed {matrix.seed_id}")
        rows.append(i)

    return matrix.model_copy(update={
        "axis1_values": tuple(matrix.axis1_values[i] for i in rows),
        "axis1_probs": tuple(p for _, p in axis1),
        "cells": tuple(matrix.cells[i] for i in rows),
    })


def campaign_diagnostics(matrices: Sequence[OutcomeMatrix]) -> pd.DataFrame:
    """Per-seed crash-cell count, crash probability and max-severity share of that probability."""
    rows = []
    for m in matrices:
        p = m.cell_probability
        crash_p = m.crash_probability
        severe_p = float(p[m.max_severity_mask].sum())
        rows.append({
            "seed_id": m.seed_id,
            "lead_behavior_class": m.lead_behavior_class.value if m.lead_behavior_class else "",
            "crash_cells": m.n_crash_cells,
            "crash_probability": crash_p,
            "max_severity_share": severe_p / crash_p if crash_p > 0 else 0.0,
            "kernel_calls": m.kernel_calls,
            "no_response_crashed": bool(m.no_response and m.no_response.crashed),
        })
    return pd.DataFrame(rows, columns=[
        "seed_id", "lead_behavior_class", "crash_cells", "crash_probability",
        "max_severity_share", "kernel_calls", "no_response_crashed",
    ])


# ---------------------------------------------------------
# Files
# ---------------------------------------------------------

def _optional(value) -> Optional[float]:
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else float(value)


def save_matrices(matrices: Sequence[OutcomeMatrix], out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cell_rows, meta_rows = [], []
    for m in matrices:
        p = m.cell_probability
        for i, row in enumerate(m.cells):
            for j, cell in enumerate(row):
                cell_rows.append({
                    "seed_id": m.seed_id,
                    "axis1_bin": i,
                    "decel_bin": j,
                    "crashed": cell.crashed,
                    "v1": cell.v1,
                    "v2": cell.v2,
                    "max_severity": cell.max_severity,
                    "p_cell": p[i, j],
                    "axis1_value": m.axis1_values[i],
                    "axis1_prob": m.axis1_probs[i],
                    "decel_value": m.decel_values[j],
                    "decel_prob": m.decel_probs[j],
                    "impact_time": cell.impact_time,
                })
        nr = m.no_response or NO_CRASH
        meta_rows.append({
            "seed_id": m.seed_id,
            "model": m.model.value,
            "follower_mass": m.follower_mass,
            "lead_mass": m.lead_mass,
            "seed_delta_v": m.seed_delta_v,
            "lead_behavior_class": m.lead_behavior_class.value if m.lead_behavior_class else None,
            "kernel_calls": m.kernel_calls,
            "fallback_rows": m.fallback_rows,
            "no_response_crashed": nr.crashed,
            "no_response_v1": nr.v1,
            "no_response_v2": nr.v2,
            "no_response_impact_time": nr.impact_time,
        })

    outcome_path, meta_path = out_dir / OUTCOME_FILE, out_dir / SEED_META_FILE
    pd.DataFrame(cell_rows, columns=[
        "seed_id", "axis1_bin", "decel_bin", "crashed", "v1", "v2", "max_severity", "p_cell",
        "axis1_value", "axis1_prob", "decel_value", "decel_prob", "impact_time",
    ]).to_csv(outcome_path, index=False)
    pd.DataFrame(meta_rows, columns=[
        "seed_id", "model", "follower_mass", "lead_mass", "seed_delta_v", "lead_behavior_class",
        "kernel_calls", "fallback_rows", "no_response_crashed", "no_response_v1", "no_response_v2", "no_response_impact_time",
    ]).to_csv(meta_path, index=False)
    return [outcome_path, meta_path]


def _outcome(crashed, v1, v2, impact_time, max_severity) -> SimOutcome:
    if not bool(crashed):
        return NO_CRASH
    return SimOutcome(crashed=True, impact_time=float(impact_time), v1=float(v1), v2=float(v2),
                      max_severity=bool(max_severity))


def load_matrices(campaign_dir: Path) -> List[OutcomeMatrix]:
    campaign_dir = Path(campaign_dir)
    try:
        cells = pd.read_csv(campaign_dir / OUTCOME_FILE, float_precision="round_trip", dtype={"seed_id": str})
        meta = pd.read_csv(campaign_dir / SEED_META_FILE, float_precision="round_trip", dtype={"seed_id": str})
    except FileNotFoundError as exc:
        raise DistributionError(f"campaign outcomes not found in {campaign_dir}") from exc

    matrices = []
    for record in meta.itertuples(index=False):
        seed_cells = cells[cells["seed_id"] == record.seed_id].sort_values(["axis1_bin", "decel_bin"])
        axis1 = seed_cells.drop_duplicates("axis1_bin")
        decel = seed_cells.drop_duplicates("decel_bin").sort_values("decel_bin")
        n1, n2 = len(axis1), len(decel)
        outcomes = [
            _outcome(r.crashed, r.v1, r.v2, r.impact_time, r.max_severity)
            for r in seed_cells.itertuples(index=False)
        ]
        lead_class = record.lead_behavior_class
        matrices.append(OutcomeMatrix(
            seed_id=record.seed_id,
            model=DriverModelKind(record.model),
            axis1_values=tuple(axis1["axis1_value"].astype(float)),
            axis1_probs=tuple(axis1["axis1_prob"].astype(float)),
            decel_values=tuple(decel["decel_value"].astype(float)),
            decel_probs=tuple(decel["decel_prob"].astype(float)),
            cells=tuple(tuple(outcomes[i * n2:(i + 1) * n2]) for i in range(n1)),
            no_response=_outcome(record.no_response_crashed, record.no_response_v1, record.no_response_v2,
                                 record.no_response_impact_time, True),
            follower_mass=float(record.follower_mass),
            lead_mass=float(record.lead_mass),
            seed_delta_v=_optional(record.seed_delta_v),
            lead_behavior_class=None if pd.isna(lead_class) else LeadBehaviorClass(lead_class),
            kernel_calls=int(record.kernel_calls),
            fallback_rows=int(record.fallback_rows),
        ))
    return matrices
