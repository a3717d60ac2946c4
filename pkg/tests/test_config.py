import pytest

from prosiam.config import ConfigError, RunConfig


def test_defaults():
    cfg = RunConfig.load()
    assert cfg.train_config().lr_initial == 0.1
    assert cfg.model_config().conv_channels == (64, 128, 256, 256, 512)
    assert cfg.protocol().n_subpairs == 500


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\n"
                 "model.conv_channels = 8,16,32,32,64\n"
                 "train.epochs_cnn = 4   # short\n"
                 "train.siamese_dropout = 0.0\n"
                 "model.weight_sharing = false\n"
                 "run.seed = 7\n")
    cfg = RunConfig.load(p, ["train.epochs_cnn=6", "eval.n_subpairs=100"])
    assert cfg.model_config().conv_channels == (8, 16, 32, 32, 64)
    assert cfg.model_config().weight_sharing is False
    t = cfg.train_config()
    assert t.epochs_cnn == 6 and t.siamese_dropout == 0.0 and t.seed == 7
    assert cfg.protocol().seed == 7 and cfg.protocol().n_subpairs == 100


def test_explicit_stage_seed_wins():
    cfg = RunConfig.load(overrides=["run.seed=3", "train.seed=9"])
    assert cfg.train_config().seed == 9
    assert cfg.protocol().seed == 3


@pytest.mark.parametrize("override", ["train.nope=1", "model.n_classes=4", "eval.device_pair=x",
                                      "bogus.key=1", "train.epochs_cnn"])
def test_unknown_or_malformed_keys(override):
    with pytest.raises(ConfigError):
        RunConfig.load(overrides=[override])


def test_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.load(overrides=["train.epochs_cnn=three"])
    with pytest.raises(ConfigError, match="cannot parse"):
        RunConfig.load(overrides=["model.weight_sharing=maybe"])
    with pytest.raises(ConfigError, match="invalid TrainConfig"):
        RunConfig.load(overrides=["train.dropout=1.5"]).train_config()
    p = tmp_path / "bad.cfg"
    p.write_text("train.epochs_cnn 3\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        RunConfig.load(p)


def test_effective_roundtrip(tmp_path):
    cfg = RunConfig.load(overrides=["train.epochs_mlp=3", "model.fc6=256", "run.seed=5"])
    eff = cfg.effective()
    assert eff["train.epochs_mlp"] == 3 and eff["model.fc6"] == 256 and eff["run.seed"] == 5
    assert "model.n_classes" not in eff
    p = tmp_path / "echo.cfg"
    p.write_text(cfg.to_text())
    assert RunConfig.load(p).effective() == eff
