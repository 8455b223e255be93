import numpy as np
import pytest

from src.core.errors import FitError
from src.schemas.bias_schema import OccupantRecord, TransferGrid
from src.schemas.campaign_schema import BiasConfig, SyntheticOccupantConfig
from src.services.bias_transform_service import injury_histogram, synthesize_occupants
from src.services.outcome_service import build_histogram
from src.services.sensitivity_service import COLUMNS, fill_perturbation_sensitivity, pdo_share_sensitivity

CONFIG = BiasConfig(grid=TransferGrid(c1_step=0.1, c2_step=0.01))
FINE_CONFIG = BiasConfig(grid=TransferGrid(c2_step=0.005))


@pytest.fixture(scope="module")
def records():
    return synthesize_occupants(SyntheticOccupantConfig(), rng_seed=0)


@pytest.fixture(scope="module")
def reference(records):
    return injury_histogram(records)


@pytest.fixture(scope="module")
def model_dist():
    return build_histogram(np.random.default_rng(8).gamma(3.0, 4.0, 2000))


def test_fill_variants_table_layout(records, reference, model_dist):
    table = fill_perturbation_sensitivity(records, reference, model_dist, CONFIG, n_variants=4)

    assert list(table.columns) == COLUMNS
    assert list(table["variant"]) == ["best-fit", "perturbed-01", "perturbed-02", "perturbed-03",
                                      "perturbed-04", "lognormal-like"]
    assert table.loc[0, "mean_shift"] == 0.0
    assert (table["B2"] > 0).all()


def test_fill_perturbations_move_the_transformed_mean_less_than_0_2_kmh(records, reference, model_dist):
    table = fill_perturbation_sensitivity(records, reference, model_dist, FINE_CONFIG, n_variants=18, spread=0.30)

    assert len(table) == 20
    assert table["variant"].iloc[-1] == "lognormal-like"
    assert table["mean_shift"].abs().max() < 0.2


def test_fill_perturbations_are_reproducible(records, reference, model_dist):
    first = fill_perturbation_sensitivity(records, reference, model_dist, CONFIG, n_variants=2, rng_seed=3)
    second = fill_perturbation_sensitivity(records, reference, model_dist, CONFIG, n_variants=2, rng_seed=3)

    assert first.equals(second)


def test_nothing_to_perturb_without_a_deficit(reference, model_dist):
    records = [OccupantRecord(delta_v=1.0, mais=0)] * 40 + [OccupantRecord(delta_v=3.0, mais=0)] * 20
    records += [OccupantRecord(delta_v=5.0, mais=0)] * 10 + [OccupantRecord(delta_v=20.0, mais=1)] * 30

    with pytest.raises(FitError):
        fill_perturbation_sensitivity(records, reference, model_dist, CONFIG, n_variants=1)


def test_pdo_share_sweep(records, reference, model_dist):
    table = pdo_share_sensitivity(records, reference, model_dist, CONFIG, shares=(0.3, 0.6, 0.7, 0.8))

    # 0.3 is below the MAIS0 share already present and is skipped
    assert list(table["p_pdo"]) == [0.6, 0.7, 0.8]
    assert table.loc[table["p_pdo"] == 0.7, "mean_shift"].iloc[0] == 0.0


def test_pdo_share_sweep_needs_one_fit(records, reference, model_dist):
    with pytest.raises(FitError):
        pdo_share_sensitivity(records, reference, model_dist, CONFIG, shares=(0.2,))
