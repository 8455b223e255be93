import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.errors import ConfigError, DistributionError
from src.schemas.distribution_schema import GlanceDistribution
from src.schemas.outcome_schema import DeltaVDistribution
from src.schemas.validation_schema import InjuryLevel, InjuryRiskCurve, PercentileMarker
from src.services.distribution_service import cut_glances, overshoot_transform
from src.services.outcome_service import build_histogram
from src.services.sim_engine_service import reweight_axis1
from src.services.validation_service import (
    assess_dms,
    compare,
    crash_avoidance_rate,
    injury_risk,
    load_risk_curve,
    percentile_histogram,
    percentile_table,
    seed_percentile,
    seed_percentiles,
    stats_table,
)

from conftest import make_matrix

LINEAR_RISK = InjuryRiskCurve(level=InjuryLevel.MAIS2, delta_v=(0.0, 20.0), risk=(0.0, 1.0))


def _dist(weights, bin_width=2.0):
    w = np.asarray(weights, dtype=float)
    centres = (np.arange(w.size) + 0.5) * bin_width
    return DeltaVDistribution(bin_width=bin_width, weights=tuple(w), mean=float(np.dot(centres, w)))


def test_identical_histograms_have_zero_distance():
    p = build_histogram([3.0, 7.0, 7.5, 20.0])

    stats = compare(p, p)

    assert all(value == pytest.approx(0.0, abs=1e-15) for value in stats.model_dump().values())


def test_disjoint_histograms():
    stats = compare(build_histogram([1.0]), build_histogram([9.0]))

    assert stats.tv_distance == 1.0
    assert stats.ks_distance == 1.0
    assert stats.kl_divergence > 0


def test_two_bin_example():
    stats = compare(_dist([0.5, 0.5]), _dist([1.0, 0.0]))

    assert_allclose([stats.tv_distance, stats.ks_distance, stats.max_abs_diff], [0.5, 0.5, 0.5])
    assert_allclose(stats.abs_mean_diff, 1.0)


def test_random_pairs_stay_in_range():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p = _dist(rng.dirichlet(np.ones(15)))
        q = _dist(rng.dirichlet(np.ones(12)))
        stats = compare(p, q)
        assert 0 <= stats.tv_distance <= 1
        assert 0 <= stats.ks_distance <= 1
        assert stats.kl_divergence > 0


def test_compare_needs_a_common_bin_width():
    with pytest.raises(DistributionError):
        compare(build_histogram([1.0]), build_histogram([1.0], bin_width=1.0))


def test_seed_percentile_examples():
    assert seed_percentile(20.0, [10.0, 20.0, 30.0], [1, 1, 1]).percentile == pytest.approx(50.0)
    assert seed_percentile(25.0, [25.0], [1.0]).percentile == pytest.approx(50.0)
    assert seed_percentile(23.0, [27.5, 30.0, 33.0], [1, 1, 1]).marker == PercentileMarker.BELOW_MIN
    assert seed_percentile(40.0, [27.5, 33.0], [1, 1]).marker == PercentileMarker.ABOVE_MAX


def test_seed_percentile_ignores_weight_scale():
    dv, w = [10.0, 12.0, 15.0, 30.0], np.array([0.1, 0.2, 0.3, 0.4])

    assert seed_percentile(14.0, dv, w).percentile == pytest.approx(seed_percentile(14.0, dv, 7.0 * w).percentile)


def _self_test_percentiles(n_seeds, biased=False):
    """Each seed delta-v drawn from its own weighted generated distribution."""
    rng = np.random.default_rng(4)
    percentiles = []
    for i in range(n_seeds):
        dv = np.sort(rng.uniform(5.0, 60.0, 50))
        w = rng.dirichlet(np.full(50, 500.0))
        if biased:
            seed_dv = dv[-1]
        else:
            seed_dv = rng.choice(dv, p=w / w.sum())
        percentiles.append(seed_percentile(seed_dv, dv, w, f"seed-{i:04d}"))
    return percentiles


def test_self_generated_seeds_look_uniform():
    report = percentile_histogram(_self_test_percentiles(600), n_bins=10)

    assert report.n_seeds == 600
    assert report.p_value > 0.01


def test_biased_seeds_fail_uniformity():
    report = percentile_histogram(_self_test_percentiles(600, biased=True), n_bins=10)

    assert report.p_value < 1e-6


def test_bin_counts_nest():
    percentiles = _self_test_percentiles(300)

    coarse = percentile_histogram(percentiles, n_bins=10).counts
    fine = percentile_histogram(percentiles, n_bins=20).counts

    assert list(np.asarray(fine).reshape(10, 2).sum(axis=1)) == list(coarse)


def test_all_seeds_below_the_generated_range():
    percentiles = [seed_percentile(1.0, [5.0, 6.0], [1, 1], f"seed-{i}") for i in range(4)]

    report = percentile_histogram(percentiles)

    assert report.below_min == 4
    assert sum(report.counts) == 0
    assert report.chi_square is None
    assert list(percentile_table(percentiles)["marker"]) == ["below-min"] * 4


def test_seed_percentiles_skip_seeds_without_a_record():
    matrices = [
        make_matrix("seed-a", [5.0, 10.0], [0.5, 0.5], seed_delta_v=9.0),
        make_matrix("seed-b", [5.0, 10.0], [0.5, 0.5]),
    ]

    (only,) = seed_percentiles(matrices)

    assert only.seed_id == "seed-a"
    assert only.percentile == pytest.approx(25.0)


def test_injury_risk():
    constant = InjuryRiskCurve(level=InjuryLevel.MAIS1, delta_v=(0.0, 100.0), risk=(0.3, 0.3))
    logistic = InjuryRiskCurve(level=InjuryLevel.MAIS3, intercept=-5.0, slope=0.1)
    h = build_histogram([1.0, 9.0])

    assert_allclose(injury_risk(h, constant), 0.3)
    assert_allclose(injury_risk(build_histogram([7.0]), logistic), logistic(7.0))
    assert_allclose(injury_risk(h, LINEAR_RISK), 0.5 * 0.05 + 0.5 * 0.45)
    assert injury_risk(build_histogram([15.0]), LINEAR_RISK) >= injury_risk(h, LINEAR_RISK)


def test_risk_curve_must_not_decrease():
    with pytest.raises(ValueError):
        InjuryRiskCurve(level=InjuryLevel.MAIS1, delta_v=(0.0, 10.0), risk=(0.5, 0.4))


def test_avoidance_rate():
    baseline = [make_matrix("seed-a", [0.0, 10.0], [0.6, 0.4]), make_matrix("seed-b", [0.0, 10.0], [0.5, 0.5])]
    treatment = [make_matrix("seed-a", [0.0, 10.0], [0.8, 0.2]), make_matrix("seed-b", [0.0, 0.0], [0.5, 0.5])]

    result = crash_avoidance_rate(baseline, treatment)

    assert_allclose(result.per_seed["seed-a"], 0.5)
    assert_allclose(result.per_seed["seed-b"], 1.0)
    assert_allclose(result.rate, 0.75)
    assert crash_avoidance_rate(baseline, baseline).rate == 0.0


def test_avoidance_rate_reports_seeds_without_baseline_crashes():
    baseline = [make_matrix("seed-a", [0.0, 10.0], [0.6, 0.4]), make_matrix("seed-b", [0.0], [1.0])]

    result = crash_avoidance_rate(baseline, baseline)

    assert result.excluded == ("seed-b",)
    with pytest.raises(DistributionError):
        crash_avoidance_rate(baseline, baseline[:1])


def test_shorter_glance_cuts_avoid_more_and_soften_crashes():
    glance = GlanceDistribution(on_road_mass=0.5, durations=(0.1, 0.2, 0.3, 0.4, 0.5),
                                probabilities=(0.1, 0.1, 0.1, 0.1, 0.1))
    axis1 = overshoot_transform(glance).axis()
    probs = [p for _, p in axis1]
    # the eyes-on-road row never crashes; impact speed grows with overshoot
    profiles = {"seed-a": (1, 2.0), "seed-b": (2, 3.0), "seed-c": (1, 5.0)}
    baseline = [
        make_matrix(seed_id, [0.0 if i < start else 5.0 + slope * i for i in range(len(probs))], probs)
        for seed_id, (start, slope) in profiles.items()
    ]

    assessments = []
    for cut in (0.5, 0.4, 0.3, 0.2):
        cut_axis = overshoot_transform(cut_glances(glance, cut)).axis()
        treatment = [reweight_axis1(m, cut_axis) for m in baseline]
        assessments.append(assess_dms(baseline, treatment, cut, curves=[LINEAR_RISK]))

    rates = [a.avoidance_rate for a in assessments]
    means = [a.mean_delta_v for a in assessments]
    assert rates[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(rates) >= -1e-12)
    assert rates[-1] > 0
    assert np.all(np.diff(means) <= 1e-9)
    assert all(a.seeds_without_crashes == 0 for a in assessments)
    assert set(assessments[-1].injury_risk) == {"MAIS2+"}


def test_load_risk_curves(tmp_path):
    table = tmp_path / "mais2.csv"
    table.write_text("delta_v_kmh,risk,level\n0,0.0,MAIS2+\n20,1.0,MAIS2+\n")
    logistic = tmp_path / "mais3.json"
    logistic.write_text(json.dumps({"level": "MAIS3+", "intercept": -6.0, "slope": 0.12}))
    unnamed = tmp_path / "unnamed.csv"
    unnamed.write_text("delta_v_kmh,risk\n0,0.0\n20,1.0\n")

    assert load_risk_curve(table) == LINEAR_RISK
    assert load_risk_curve(logistic).level == InjuryLevel.MAIS3
    assert load_risk_curve(unnamed, InjuryLevel.MAIS1).level == InjuryLevel.MAIS1
    with pytest.raises(ConfigError):
        load_risk_curve(unnamed)
    with pytest.raises(ConfigError):
        load_risk_curve(tmp_path / "missing.json")


def test_stats_table():
    stats = {"model vs reference": compare(build_histogram([3.0]), build_histogram([5.0]))}

    frame = stats_table(stats)

    assert list(frame["comparison"]) == ["model vs reference"]
    assert frame.loc[0, "tv_distance"] == 1.0
