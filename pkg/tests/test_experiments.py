"""End-to-end runs of the three shipped experiments on their default settings."""

import numpy as np
import pytest

from shiftguard.cli import run_seed, train_surrogates
from shiftguard.config import default_config

pytestmark = pytest.mark.slow


@pytest.fixture(autouse=True)
def _backend():
    pytest.importorskip("cvxpy")


def trained(experiment, tmp_path_factory):
    out = tmp_path_factory.mktemp(experiment)
    config = default_config(experiment).model_copy(update={"output_dir": str(out)})
    train_surrogates(config)
    return config


def median_of(config, mode, column="mean_residual"):
    rows = [run_seed(config, mode, seed) for seed in config.seeds]
    assert all("error" not in row for row in rows)
    return float(np.median([row[column] for row in rows]))


def test_linear_car_halves_the_tracking_error(tmp_path_factory):
    config = trained("linear_car", tmp_path_factory)
    assert len(config.seeds) == 10 and config.horizon == 100
    assert median_of(config, "adapted") <= 0.5 * median_of(config, "unadapted")


def test_dubins_adaptation_beats_pi_star_and_the_swarm(tmp_path_factory):
    config = trained("dubins", tmp_path_factory)
    assert len(config.seeds) == 5 and config.horizon == 200
    adapted = median_of(config, "adapted")
    assert adapted < median_of(config, "unadapted")
    assert adapted < median_of(config, "pso")


def test_acc_adaptation_keeps_a_larger_gap(tmp_path_factory):
    config = trained("acc", tmp_path_factory)
    adapted = median_of(config, "adapted", "min_d_rel")
    assert adapted > 0.0
    assert adapted > median_of(config, "unadapted", "min_d_rel")
