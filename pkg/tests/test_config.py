import pytest

from shiftguard.config import default_config, load_config, to_toml
from shiftguard.errors import ConfigError


def test_experiment_defaults():
    dubins = default_config("dubins")
    assert dubins.horizon == 200
    assert dubins.seeds == [0, 1, 2, 3, 4]
    assert dubins.surrogate.deep_hidden == [16, 16]
    assert dubins.output_dir == "results/dubins"

    car = default_config("linear_car")
    assert car.horizon == 100
    assert car.seeds == list(range(10))
    assert car.surrogate.deep_hidden == []
    assert car.confidence == 0.95
    assert car.delta == 1e-6


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        default_config("submarine")


def test_file_overrides_experiment_defaults(tmp_path):
    path = tmp_path / "acc.toml"
    path.write_text('experiment = "acc"\nhorizon = 10\ntraining.epochs = 5\nadapt.use_interval_bounds = true\n')
    config = load_config(path)
    assert config.experiment == "acc"
    assert config.horizon == 10
    assert config.training.epochs == 5
    assert config.training.learning_rate == 3e-3
    assert config.seeds == [0, 1, 2, 3, 4]
    assert config.output_dir == "results/acc"
    assert config.adapt_options().use_interval_bounds


def test_experiment_argument_picks_defaults(tmp_path):
    path = tmp_path / "short.toml"
    path.write_text("horizon = 3\n")
    assert load_config(path, experiment="dubins").seeds == [0, 1, 2, 3, 4]


@pytest.mark.parametrize(
    "text",
    ["horizon = 10\nhorizn = 3\n", "training.momentum = 0.9\n", "confidence = 1.5\n", "horizon = [\n"],
)
def test_bad_files_raise_config_error(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


@pytest.mark.parametrize("experiment", ["dubins", "linear_car", "acc"])
def test_printed_defaults_load_back(tmp_path, experiment):
    config = default_config(experiment)
    text = to_toml(config)
    assert "pso.lower" not in text
    path = tmp_path / "printed.toml"
    path.write_text(text)
    assert load_config(path) == config


def test_adapt_options_carry_trust_floor(tmp_path):
    path = tmp_path / "floor.toml"
    path.write_text("trust_floor = 1e-5\nadapt.anchor_strategy = \"origin\"\n")
    options = load_config(path).adapt_options()
    assert options.trust_floor == 1e-5
    assert options.anchor_strategy == "origin"


def test_target_defaults_per_experiment(tmp_path):
    assert default_config("linear_car").adapt_options().target == "replan"
    assert default_config("dubins").adapt_options().target == "replan"
    assert default_config("acc").adapt_options().target == "reference"
    path = tmp_path / "target.toml"
    path.write_text('experiment = "dubins"\nadapt.target = "reference"\n')
    assert load_config(path).adapt.target == "reference"
    path.write_text('adapt.target = "lookahead"\n')
    with pytest.raises(ConfigError):
        load_config(path)
