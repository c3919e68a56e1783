import pytest

from helpers import FIXTURES
from scenemotion.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults_round_trip_through_text():
    cfg = RunConfig()
    assert parse_config(cfg.to_text()) == cfg
    assert parse_config(cfg.to_text()).digest() == cfg.digest()


def test_parse_values_and_comments():
    cfg = parse_config("model.stage_dims = 8, 16  # two stages\nmodel.stage_blocks = 0, 1\n"
                       "train.augment = false\ntrain.lr = 5e-4\nlambda.bbox = 0\n")
    assert cfg.model.stage_dims == (8, 16) and cfg.train.augment is False
    assert cfg.train.lr == 5e-4 and cfg.lambdas["bbox"] == 0.0


def test_toy_fixture_loads():
    cfg = load_config(FIXTURES / "toy.cfg")
    assert cfg.data.n_scenes == 5 and cfg.model.stage_dims == (8, 16, 24)


@pytest.mark.parametrize("text", [
    "train.learning_rate = 1",
    "optimizer.lr = 1",
    "lr = 1",
    "train.lr = fast",
    "train.lr = 1\ntrain.lr = 2",
    "train.lr = -1",
    "train.pretrain_mode = magic",
    "lambda.speed = 1",
    "model.stage_dims = 8, 16",
    "model.feature_dim = 32",
    "just words",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides():
    cfg = RunConfig().with_overrides(train={"epochs": 3}, world={"n_points": 1024}, **{"lambda": {"kl": 0.5}})
    assert cfg.train.epochs == 3 and cfg.world.n_points == 1024 and cfg.lambdas["kl"] == 0.5
    assert RunConfig().train.epochs != 3


def test_missing_file_is_not_a_config_error():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/run.cfg")
