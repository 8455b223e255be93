import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.errors import DistributionError, FitError
from src.schemas.bias_schema import OccupantRecord, PdoModel, TransferFunction, TransferGrid
from src.schemas.campaign_schema import SyntheticOccupantConfig
from src.services.bias_transform_service import (
    apply_transfer,
    augment_reference,
    build_pdo,
    fit_transfer,
    injury_histogram,
    load_occupants,
    load_transfer,
    save_model,
    save_occupants,
    synthesize_occupants,
    transfer_cost,
)
from src.services.outcome_service import build_histogram
from src.services.validation_service import compare

COARSE_GRID = TransferGrid(c1_step=0.5, c2_step=0.05)
REFERENCE_TRANSFER = TransferFunction(C1=-4.15, C2=0.388)


def _records(pdo_counts, injured, bin_width, injured_dv=20.0):
    """MAIS0 occupants at the bin centres with the given counts, plus injured occupants."""
    records = []
    for k, n in enumerate(pdo_counts):
        records += [OccupantRecord(delta_v=(k + 0.5) * bin_width, mais=0)] * int(n)
    records += [OccupantRecord(delta_v=injured_dv, mais=1)] * int(injured)
    return records


@pytest.fixture(scope="module")
def with_pdo():
    rng = np.random.default_rng(5)
    injury = build_histogram(np.abs(rng.normal(22.0, 8.0, 400)))
    return augment_reference(injury, PdoModel(B1=0.137, B2=0.27), p_pdo=0.7)


def test_exponential_pdo_is_recovered():
    centres = (np.arange(50) + 0.5) * 0.5
    expected = np.round(20000 * 0.137 * np.exp(-0.27 * centres))
    total = expected.sum()
    observed = expected.copy()
    observed[:4] = 0

    fit = build_pdo(_records(observed, round(total * 3 / 7), 0.5), p_pdo=0.7, n_fill_bins=4, bin_width=0.5)

    assert_allclose(fit.model.B2, 0.27, rtol=0.05)
    assert_allclose(fit.model.B1, 0.137, rtol=0.05)
    assert_allclose(sum(fit.fill), fit.deficit)
    assert len(fit.fill) == 4
    assert_allclose(fit.deficit, expected[:4].sum(), rtol=0.01)


def test_no_deficit_fits_the_raw_counts():
    fit = build_pdo(_records([40, 20, 10], 30, 2.0), p_pdo=0.7)

    assert fit.deficit == 0.0
    assert fit.fill == ()
    assert_allclose(fit.model.B2, np.log(2) / 2, rtol=1e-6)


def test_deficit_accounting():
    records = synthesize_occupants(SyntheticOccupantConfig(n_records=1000, mais0_share=0.43), rng_seed=1)

    fit = build_pdo(records, p_pdo=0.7)

    assert (fit.pdo_present, fit.injured) == (430.0, 570.0)
    assert_allclose(fit.deficit, 570 * 0.7 / 0.3 - 430)
    assert_allclose(sum(fit.fill), fit.deficit)
    assert all(f >= 0 for f in fit.fill)
    assert len(fit.fill) <= 6
    assert fit.mode_delta_v > 2.0 * len(fit.fill)


def test_surplus_pdo_is_an_error():
    with pytest.raises(FitError):
        build_pdo(_records([80, 40], 20, 2.0), p_pdo=0.7)


def test_fixed_fill_shape():
    records = synthesize_occupants(SyntheticOccupantConfig(), rng_seed=2)
    free = build_pdo(records)

    fixed = build_pdo(records, fill_weights=[1.0] * len(free.fill))

    assert_allclose(fixed.fill, [free.deficit / len(free.fill)] * len(free.fill))
    with pytest.raises(FitError):
        build_pdo(records, fill_weights=[1.0] * (len(free.fill) - 1))


def test_augmented_reference_carries_the_pdo_share(with_pdo):
    rng = np.random.default_rng(5)
    injury = build_histogram(np.abs(rng.normal(22.0, 8.0, 400)))

    pdo_part = with_pdo.padded(injury.n_bins) - 0.3 * injury.weights_array

    assert_allclose(pdo_part.sum(), 0.7, atol=1e-9)
    assert np.all(pdo_part >= -1e-15)
    assert with_pdo.mean < injury.mean
    assert augment_reference(injury, PdoModel(B1=0.137, B2=0.27), p_pdo=0.0) == injury


def test_transfer_is_recovered_on_the_grid(with_pdo):
    original = apply_transfer(with_pdo, REFERENCE_TRANSFER)
    centres = with_pdo.centers

    result = fit_transfer(with_pdo, original)

    true_cost = transfer_cost(with_pdo.weights_array, original.weights_array, centres,
                              REFERENCE_TRANSFER.C1, np.array([REFERENCE_TRANSFER.C2]))[0]
    assert result.cost <= true_cost + 1e-12
    assert abs(result.transfer.C1 - REFERENCE_TRANSFER.C1) <= 0.05 + 1e-9
    assert abs(result.transfer.C2 - REFERENCE_TRANSFER.C2) <= 0.001 + 1e-9
    assert result.grid_shape == (199, 5000)
    assert not result.degenerate
    assert compare(apply_transfer(with_pdo, result.transfer), original).tv_distance < 1e-3


def test_transfer_fit_survives_sampling_noise(with_pdo):
    clean = apply_transfer(with_pdo, REFERENCE_TRANSFER)
    rng = np.random.default_rng(11)
    sampled = rng.choice(clean.n_bins, size=1000, p=clean.weights_array / clean.weights_array.sum())
    noisy = build_histogram(clean.centers[sampled])

    result = fit_transfer(with_pdo, noisy)

    n = max(with_pdo.n_bins, noisy.n_bins)
    centres = (np.arange(n) + 0.5) * noisy.bin_width
    true_cost = transfer_cost(with_pdo.padded(n), noisy.padded(n), centres,
                              REFERENCE_TRANSFER.C1, np.array([REFERENCE_TRANSFER.C2]))[0]
    assert result.cost <= true_cost + 1e-12
    assert compare(apply_transfer(with_pdo, result.transfer), clean).tv_distance <= 0.02


def test_transfer_fit_is_reproducible(with_pdo):
    original = apply_transfer(with_pdo, REFERENCE_TRANSFER)

    assert fit_transfer(with_pdo, original, COARSE_GRID) == fit_transfer(with_pdo, original, COARSE_GRID)


def test_uncensored_input_is_degenerate(with_pdo):
    result = fit_transfer(with_pdo, with_pdo, COARSE_GRID)

    assert result.degenerate
    assert result.transfer.C1 == COARSE_GRID.c1_values()[-1]
    assert result.transfer.C2 == COARSE_GRID.c2_min


def test_transfer_cost_is_absolute_difference_after_rescaling():
    centres = np.array([1.0, 3.0])
    flat = np.array([0.0])

    # censored [0.5, 0.5] rescaled to mass 4 is [2, 2]
    assert_allclose(transfer_cost(np.array([1.0, 1.0]), np.array([3.0, 1.0]), centres, 0.0, flat), [2.0])
    assert_allclose(transfer_cost(np.array([1.0, 1.0]), np.array([2.0, 2.0]), centres, 0.0, flat), [0.0])


def test_transfer_needs_common_bins(with_pdo):
    with pytest.raises(DistributionError):
        fit_transfer(with_pdo, build_histogram([5.0], bin_width=1.0), COARSE_GRID)


def test_transfer_midpoint():
    assert_allclose(REFERENCE_TRANSFER.midpoint, 10.7, atol=0.01)
    assert_allclose(REFERENCE_TRANSFER.probability(REFERENCE_TRANSFER.midpoint), 0.5)


def test_apply_transfer(with_pdo):
    censored = apply_transfer(with_pdo, REFERENCE_TRANSFER)

    assert_allclose(REFERENCE_TRANSFER.probability(0.0), 0.0155, atol=1e-4)
    assert censored.mean > float(np.dot(with_pdo.centers, with_pdo.weights_array))
    assert np.all(np.cumsum(censored.weights_array) <= np.cumsum(with_pdo.weights_array) + 1e-12)


def test_flat_transfer_changes_little():
    dist = build_histogram([1.0, 3.0, 5.0])

    out = apply_transfer(dist, TransferFunction(C1=0.0, C2=0.001))

    assert_allclose(out.weights, dist.weights, atol=1e-3)


def test_model_and_occupant_files(tmp_path):
    path = save_model(REFERENCE_TRANSFER, tmp_path / "transfer.json", cost=0.01)
    records = synthesize_occupants(SyntheticOccupantConfig(n_records=50), rng_seed=3)

    assert load_transfer(path) == REFERENCE_TRANSFER
    assert load_occupants(save_occupants(records, tmp_path / "occupants.csv")) == records
    assert injury_histogram(records).normalized

    with pytest.raises(DistributionError):
        load_transfer(tmp_path / "missing.json")
