import math

import numpy as np
import pytest

from src.schemas.campaign_schema import CampaignConfig
from src.schemas.driver_schema import BrakeProfile, DriverModelKind
from src.schemas.outcome_schema import NO_CRASH, OutcomeMatrix, SimOutcome
from src.schemas.seed_schema import LeadBehaviorClass, SeedCrash, SynthesisConfig, Trajectory, VehicleMeta
from src.services.distribution_service import (
    bin_decels,
    bin_glances,
    synthesize_decels,
    synthesize_glance_durations,
)
from src.services.driver_model_service import integrate_braking
from src.services.scenario_service import synthesize_seeds

CRUISE = BrakeProfile(onset=math.inf, d_max=1.0)


def build_seed(
    seed_id="seed-test",
    follower_speed=10.0,
    gap=30.0,
    lead_speed=0.0,
    lead_brake=None,
    follower_brake=None,
    duration=60.0,
    dt=0.01,
    follower_mass=1500.0,
    lead_mass=1500.0,
    width=1.8,
    seed_delta_v=None,
):
    """Forward-simulate a lead/follower pair and cut it at the first overlap."""
    t = dt * np.arange(int(round(duration / dt)) + 1)
    lead = integrate_braking(t, gap, lead_speed, lead_brake or CRUISE)
    follower = integrate_braking(t, 0.0, follower_speed, follower_brake or CRUISE)

    contact = np.flatnonzero(lead[0] - follower[0] <= 0)
    if not contact.size:
        raise ValueError("fixture pair never collides")
    end = int(contact[0]) + 1

    return SeedCrash(
        id=seed_id,
        lead=Trajectory(t=t[:end], position=lead[0][:end], speed=lead[1][:end], acceleration=lead[2][:end]),
        follower=Trajectory(t=t[:end], position=follower[0][:end], speed=follower[1][:end],
                            acceleration=follower[2][:end]),
        lead_meta=VehicleMeta(id="lead", mass=lead_mass, width=width, length=4.5),
        follower_meta=VehicleMeta(id="follower", mass=follower_mass, width=width, length=4.5),
        seed_delta_v=seed_delta_v,
    )


def make_matrix(seed_id, relative_speeds, axis1_probs, decel_probs=(1.0,), max_severity=None,
                no_response_speed=None, model=DriverModelKind.CBM, masses=(1000.0, 1000.0), seed_delta_v=None):
    """
    OutcomeMatrix from a grid of impact relative speeds [m/s]; 0 or None is
    no crash. The lead is at rest at impact so v1 is the relative speed.
    """
    speeds = np.asarray(relative_speeds, dtype=float).reshape(len(axis1_probs), len(decel_probs))
    severe = np.zeros(speeds.shape, dtype=bool) if max_severity is None else np.asarray(max_severity)

    def cell(v, sev):
        if not v > 0:
            return NO_CRASH
        return SimOutcome(crashed=True, impact_time=1.0, v1=float(v), v2=0.0, max_severity=bool(sev))

    cells = tuple(tuple(cell(v, s) for v, s in zip(row, srow)) for row, srow in zip(speeds, severe))
    no_response = NO_CRASH if no_response_speed is None else cell(no_response_speed, True)
    return OutcomeMatrix(
        seed_id=seed_id,
        model=model,
        axis1_values=tuple(0.1 * i for i in range(len(axis1_probs))),
        axis1_probs=tuple(axis1_probs),
        decel_values=tuple(1.5 * j + 0.75 for j in range(len(decel_probs))),
        decel_probs=tuple(decel_probs),
        cells=cells,
        no_response=no_response,
        follower_mass=masses[0],
        lead_mass=masses[1],
        seed_delta_v=seed_delta_v,
    )


@pytest.fixture
def standstill_seed():
    """Follower at 10 m/s towards a lead standing 30 m ahead: impact at 3.0 s."""
    return build_seed("seed-standstill", follower_speed=10.0, gap=30.0)


@pytest.fixture
def braking_seed():
    """Lead at 15 m/s braking at 4 m/s^2 from 1.0 s, follower at 20 m/s braking late at 6 m/s^2."""
    return build_seed(
        "seed-braking",
        follower_speed=20.0,
        gap=25.0,
        lead_speed=15.0,
        lead_brake=BrakeProfile(onset=1.0, d_max=4.0),
        follower_brake=BrakeProfile(onset=2.0, d_max=6.0),
        seed_delta_v=12.0,
    )


@pytest.fixture(scope="session")
def shrp2_glances():
    """SHRP2-scale glance distribution: 4604 glances, 67 occupied bins."""
    return bin_glances(synthesize_glance_durations(4604, 6.7, rng_seed=0), on_road_fraction=0.8)


@pytest.fixture(scope="session")
def shrp2_decels():
    return bin_decels(synthesize_decels(45, 1.6, 10.4, rng_seed=0), 1.5)


@pytest.fixture(scope="session")
def campaign_config():
    return CampaignConfig()


@pytest.fixture(scope="session")
def reference_mix_seeds():
    """103 synthetic seeds, 68 with a braking lead and 35 the brake-light model cannot use."""
    config = SynthesisConfig(
        n_seeds=103,
        lead_behavior_counts={
            LeadBehaviorClass.BRAKING: 68,
            LeadBehaviorClass.NON_BRAKING: 20,
            LeadBehaviorClass.STANDSTILL: 15,
        },
    )
    return synthesize_seeds(config, rng_seed=7)
