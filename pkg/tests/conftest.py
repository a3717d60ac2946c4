import numpy as np
import pytest

from prosiam.dataset import build_dataset
from prosiam.model import VerifierConfig
from prosiam.synth import generate_synthetic_corpus
from prosiam.train import TrainConfig, train_all

TINY_MODEL = dict(conv_channels=(8, 8, 16, 16, 16), fc6=32, fc7=16, fc8=16, mlp_hidden=(16, 16),
                  mlp_out=8)


def tiny_model(**kw) -> VerifierConfig:
    return VerifierConfig(**{**TINY_MODEL, **kw})


def toy_train_config(**kw) -> TrainConfig:
    base = dict(batch_size=16, lr_initial=0.03, dropout=0.0, lr_decay_epochs=10, epochs_cnn=8,
                epochs_mlp=5, epochs_fusion=3, epochs_joint=2, epochs_siamese=4, windows_per_utterance=8,
                mlp_passes=8, pairs_per_epoch=64, siamese_lr=0.01, siamese_dropout=0.0)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def toy_corpus():
    """4 speakers x 2 utterances x 3 devices of 7 s synthetic speech."""
    return generate_synthetic_corpus(4, 2, ["microphone", "dvr", "phone"], seed=1, duration=7.0)


@pytest.fixture(scope="session")
def toy_feats(toy_corpus):
    clips, manifest = toy_corpus
    feats, skipped = build_dataset(manifest, clips)
    assert not skipped
    return feats


@pytest.fixture(scope="session")
def toy_run(toy_feats):
    """All five training stages on the toy corpus with the tiny network."""
    return train_all(toy_feats, tiny_model(), toy_train_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
