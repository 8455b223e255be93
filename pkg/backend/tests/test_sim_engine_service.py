import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.errors import DistributionError
from src.schemas.campaign_schema import CampaignConfig
from src.schemas.driver_schema import DriverModelKind
from src.services.scenario_service import remove_evasive_maneuver
from src.services.sim_engine_service import (
    _first_contact,
    campaign_axes,
    campaign_diagnostics,
    load_matrices,
    reweight_axis1,
    run_campaign,
    save_matrices,
    simulate,
    sweep_seed,
)

from conftest import build_seed, make_matrix


@pytest.fixture(scope="module")
def cbm_campaign(reference_mix_seeds, campaign_config):
    return run_campaign(reference_mix_seeds, campaign_config)


@pytest.fixture
def standstill_cf(standstill_seed):
    return remove_evasive_maneuver(standstill_seed)


def _uniform(values):
    return [(v, 1.0 / len(values)) for v in values]


def test_no_response_hits_standstill_lead(standstill_cf):
    out = simulate(standstill_cf, math.inf, 6.0)

    assert out.crashed and out.max_severity
    assert_allclose(out.impact_time, 3.0, atol=1e-6)
    assert_allclose([out.v1, out.v2], [10.0, 0.0], atol=1e-9)


def test_early_hard_braking_avoids():
    cf = remove_evasive_maneuver(build_seed("seed-far", follower_speed=10.0, gap=100.0))

    assert not simulate(cf, 0.0, 9.0).crashed


def test_grazing_contact_is_not_a_crash():
    t = np.array([0.0, 0.01, 0.02])
    gap = np.array([0.02, 0.01, 0.0])
    speed = np.array([5.0, 5.0, 5.0])

    assert not _first_contact(t, gap, speed, speed, math.inf).crashed


def test_impact_speed_monotone_in_onset_and_decel(braking_seed):
    cf = remove_evasive_maneuver(braking_seed)
    onsets = np.round(np.arange(0.5, 6.0, 0.1), 10)

    by_onset = [simulate(cf, o, 6.0).relative_speed for o in onsets]
    by_decel = [simulate(cf, 2.0, d).relative_speed for d in (0.75, 2.25, 3.75, 5.25, 6.75, 8.25)]

    assert np.all(np.diff(by_onset) >= -1e-9)
    assert np.all(np.diff(by_decel) <= 1e-9)
    assert by_onset[0] == 0.0 and by_onset[-1] > 0.0


def test_all_avoid_row_needs_few_kernel_calls(standstill_cf, campaign_config):
    axis1 = _uniform([round(0.1 * i, 10) for i in range(11)])

    matrix = sweep_seed(standstill_cf, axis1, [(9.0, 1.0)], DriverModelKind.CBM, campaign_config)

    assert matrix.n_crash_cells == 0
    assert matrix.kernel_calls <= 6
    assert matrix.no_response.crashed


def test_all_max_severity_row(standstill_cf, campaign_config):
    axis1 = _uniform([round(3.0 + 0.1 * i, 10) for i in range(11)])

    matrix = sweep_seed(standstill_cf, axis1, [(9.0, 1.0)], DriverModelKind.CBM, campaign_config)

    assert matrix.max_severity_mask.all()
    assert_allclose([row[0].v1 for row in matrix.cells], 10.0, atol=1e-9)


def test_unsorted_axis_is_rejected(standstill_cf, campaign_config):
    with pytest.raises(DistributionError):
        sweep_seed(standstill_cf, [(0.2, 0.5), (0.1, 0.5)], [(9.0, 1.0)], DriverModelKind.CBM, campaign_config)


def test_reduced_sweep_equals_exhaustive(reference_mix_seeds, campaign_config):
    seeds = sorted(reference_mix_seeds, key=lambda s: s.id)[:50]

    reduced = run_campaign(seeds, campaign_config)
    exhaustive = run_campaign(seeds, campaign_config, axes=reduced.axes, exhaustive=True)

    assert len(reduced.matrices) == 50
    assert len(reduced.axes.overshoot.bins) == 67
    assert reduced.summary.decel_bins == 6

    assert [m.cells for m in reduced.matrices] == [m.cells for m in exhaustive.matrices]
    assert [m.no_response for m in reduced.matrices] == [m.no_response for m in exhaustive.matrices]
    assert reduced.summary.kernel_calls <= 0.5 * exhaustive.summary.kernel_calls


def test_full_cbm_campaign_size(cbm_campaign):
    summary = cbm_campaign.summary
    overshoot_bins = len(cbm_campaign.axes.overshoot.bins)

    assert overshoot_bins == 67
    assert summary.decel_bins == 6
    assert summary.n_seeds * overshoot_bins * summary.decel_bins == 41406
    # the eyes-on-road point mass adds one axis row per seed
    assert summary.theoretical_cells == 103 * 68 * 6
    assert summary.kernel_calls <= 0.5 * summary.theoretical_cells
    assert not summary.excluded


def test_brake_light_model_excludes_non_braking_leads(reference_mix_seeds):
    result = run_campaign(reference_mix_seeds, CampaignConfig(name="blom", model=DriverModelKind.BLOM))

    assert len(result.summary.excluded) == 35
    assert len(result.matrices) == 68
    assert result.summary.axis1_bins == 25


def test_campaign_is_ordered_and_worker_independent(reference_mix_seeds, campaign_config):
    seeds = list(reversed(reference_mix_seeds[:4]))

    serial = run_campaign(seeds, campaign_config)
    parallel = run_campaign(seeds, campaign_config, axes=serial.axes, workers=2)

    assert [m.seed_id for m in serial.matrices] == sorted(s.id for s in seeds)
    assert serial.matrices == parallel.matrices


def test_matrices_survive_a_file_round_trip(tmp_path, cbm_campaign):
    matrices = cbm_campaign.matrices[:3]

    save_matrices(matrices, tmp_path)

    assert load_matrices(tmp_path) == matrices


def test_campaign_diagnostics(cbm_campaign):
    frame = campaign_diagnostics(cbm_campaign.matrices)

    assert len(frame) == 103
    assert frame["crash_probability"].between(0, 1).all()
    assert frame["max_severity_share"].between(0, 1).all()


def test_reweight_axis1_selects_rows():
    matrix = make_matrix("seed-r", [0, 5, 10], [0.2, 0.3, 0.5])

    cut = reweight_axis1(matrix, [(0.0, 0.4), (0.2, 0.6)])

    assert cut.axis1_values == (0.0, 0.2)
    assert [row[0].v1 for row in cut.cells] == [None, 10.0]
    assert_allclose(cut.crash_probability, 0.6)

    with pytest.raises(DistributionError):
        reweight_axis1(matrix, [(0.3, 1.0)])
