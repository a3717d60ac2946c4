import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prosiam.evaluate import Protocol, evaluate
from prosiam.model import forward_embed, load_verifier, pair_distance, save_verifier
from prosiam.nn import contrastive_loss
from prosiam.train import (TrainConfig, TrainingDiverged, TrainingError, classifier_accuracy,
                           cross_validate, final_lr, lr_schedule, pretrain_cnn_classifier,
                           pretrain_mlp, prosody_statistics, sample_balanced_pairs,
                           speaker_folds, train_fusion_greedy, train_siamese)

from conftest import tiny_model, toy_train_config


# ---------------------------------------------------------------- schedule / config


@pytest.mark.parametrize("epoch,lr", [(0, 0.1), (1, 0.1), (2, 0.01), (3, 0.01), (4, 0.001)])
def test_lr_schedule_staircase(epoch, lr):
    assert lr_schedule(epoch, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_variants():
    cfg = TrainConfig(lr_mode="exponential")
    assert lr_schedule(1, cfg) == pytest.approx(0.1 * 0.1 ** 0.5)
    assert lr_schedule(3, TrainConfig(), base=0.5) == pytest.approx(0.05)
    assert final_lr(5, TrainConfig()) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        lr_schedule(-1, TrainConfig())


@pytest.mark.parametrize("kw", [dict(batch_size=1), dict(dropout=1.0), dict(lr_initial=0),
                                dict(pairs_per_epoch=7), dict(lr_mode="cosine"),
                                dict(epochs_cnn=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- pair sampling


def test_balanced_pairs(toy_feats):
    pairs = sample_balanced_pairs(toy_feats, 100, seed=3)
    labels = [p.label for p in pairs]
    assert labels.count(0) == labels.count(1) == 50
    for p in pairs:
        same = toy_feats[p.a].speaker_id == toy_feats[p.b].speaker_id
        assert same == (p.label == 0)
        assert (p.a, p.start_a) != (p.b, p.start_b)
        assert 0 <= p.start_a <= toy_feats[p.a].n_frames - 300
    assert sample_balanced_pairs(toy_feats, 100, seed=3) == pairs
    assert sample_balanced_pairs(toy_feats, 100, seed=4) != pairs


def test_balanced_pairs_single_speaker(toy_feats):
    one = [f for f in toy_feats if f.speaker_id == toy_feats[0].speaker_id]
    with pytest.raises(ValueError):
        sample_balanced_pairs(one, 10, 0)
    with pytest.raises(ValueError):
        sample_balanced_pairs(toy_feats, 9, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40))
def test_balanced_pairs_property(toy_feats, seed, half):
    pairs = sample_balanced_pairs(toy_feats, 2 * half, seed)
    assert sum(p.label for p in pairs) == half


# ---------------------------------------------------------------- classifier stages


def test_cnn_stage(toy_run, toy_feats):
    res = toy_run["cnn"]
    assert res.log[0][3] == pytest.approx(np.log(4), rel=0.1)
    assert classifier_accuracy(res.weights, toy_feats, "cnn_only") > 0.9
    assert res.weights.meta["stage"] == "cnn"


def test_cnn_stage_deterministic(toy_run, toy_feats):
    again = pretrain_cnn_classifier(toy_feats, tiny_model(), toy_train_config())
    assert again.log == toy_run["cnn"].log


def test_mlp_stage(toy_run, toy_feats, tmp_path):
    res = toy_run["mlp"]
    assert res.log[0][3] == pytest.approx(np.log(4), rel=0.1)
    assert classifier_accuracy(res.weights, toy_feats, "mlp_only") > 0.8
    save_verifier(tmp_path / "mlp.psnn", res.weights)
    back = load_verifier(tmp_path / "mlp.psnn").tower_a
    mean, std = prosody_statistics(toy_feats)
    np.testing.assert_allclose(back.prosody_mean.value, mean, rtol=1e-6)
    np.testing.assert_allclose(back.prosody_std.value, std, rtol=1e-6)


def test_mlp_trailing_loss_decreases(toy_feats):
    res = pretrain_mlp(toy_feats, tiny_model(), toy_train_config(epochs_mlp=10, mlp_passes=2))
    assert np.mean(res.epoch_loss[-5:]) < np.mean(res.epoch_loss[:5])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(toy_feats):
    with pytest.raises(TrainingDiverged, match="lower the learning rate"):
        pretrain_mlp(toy_feats, tiny_model(), toy_train_config(lr_initial=1e4, epochs_mlp=3))


def test_fusion_stage(toy_run, toy_feats):
    cnn, mlp, fusion = (toy_run[k].weights for k in ("cnn", "mlp", "fusion"))
    np.testing.assert_array_equal(fusion.named()["cnn.conv1.weight"].value,
                                  cnn.named()["cnn.conv1.weight"].value)
    np.testing.assert_array_equal(fusion.named()["mlp.fc1.weight"].value,
                                  mlp.named()["mlp.fc1.weight"].value)
    assert toy_run["fusion"].final_lr == min(toy_run["cnn"].final_lr, toy_run["mlp"].final_lr)
    assert all(row[2] == toy_run["fusion"].final_lr for row in toy_run["fusion"].log)
    best_single = max(classifier_accuracy(cnn, toy_feats, "cnn_only"),
                      classifier_accuracy(mlp, toy_feats, "mlp_only"))
    assert classifier_accuracy(fusion, toy_feats, "joint") >= best_single - 0.05


def test_fusion_rejects_mismatched_inputs(toy_run, toy_feats):
    cnn, mlp = toy_run["cnn"].weights, toy_run["mlp"].weights
    with pytest.raises(TrainingError):
        train_fusion_greedy(mlp, cnn, toy_feats, toy_train_config())


def test_joint_stage(toy_run, toy_feats):
    fusion, joint = toy_run["fusion"].weights, toy_run["joint"].weights
    assert (classifier_accuracy(joint, toy_feats, "joint")
            >= classifier_accuracy(fusion, toy_feats, "joint") - 0.02)
    before, after = fusion.named(), joint.named()
    for name, p in after.items():
        if p.trainable and not name.startswith(("head.cnn", "head.mlp")):
            assert not np.array_equal(p.value, before[name].value), name


# ---------------------------------------------------------------- Siamese stage


def test_siamese_separates_speakers(toy_run, toy_feats):
    report = evaluate(toy_feats, toy_run["siamese"].weights, Protocol(n_subpairs=100))
    g = np.mean([s.distance for s in report.scores if s.label == "genuine"])
    i = np.mean([s.distance for s in report.scores if s.label == "impostor"])
    assert i - g > 1.0
    w = toy_run["siamese"].weights
    assert w.config.n_classes == 0 and not w.tower_a.heads


def test_contrastive_batch_all_satisfied():
    za = np.zeros((4, 3))
    zb = np.array([[0, 0, 0], [10, 0, 0], [0, 0, 0], [0, 12, 0]], dtype=float)
    assert contrastive_loss(za, zb, [0, 1, 0, 1], 10.0)[0] == 0.0


def test_unshared_towers_diverge(toy_run, toy_feats):
    cfg = toy_train_config(epochs_siamese=1, pairs_per_epoch=32)
    res = train_siamese(toy_run["siamese"].weights, toy_feats, cfg, weight_sharing=False)
    w = res.weights
    assert len(w.towers) == 2 and w.meta["weight_sharing"] is False
    f = toy_feats[0]
    d = pair_distance(forward_embed(f.window(0), f.prosody, w, tower=0),
                      forward_embed(f.window(0), f.prosody, w, tower=1))
    assert d > 1e-6


def test_shared_towers_identical_after_training(toy_run, toy_feats):
    w = toy_run["siamese"].weights
    f = toy_feats[3]
    assert pair_distance(forward_embed(f.window(0), f.prosody, w, tower=0),
                         forward_embed(f.window(0), f.prosody, w, tower=1)) == 0


def test_siamese_deterministic(toy_run, toy_feats):
    cfg = toy_train_config(epochs_siamese=1, pairs_per_epoch=32)
    a = train_siamese(toy_run["joint"].weights, toy_feats, cfg)
    b = train_siamese(toy_run["joint"].weights, toy_feats, cfg)
    for p, q in zip(a.weights.params(), b.weights.params()):
        np.testing.assert_array_equal(p.value, q.value)


# ---------------------------------------------------------------- cross-validation hook


def test_speaker_folds(toy_feats):
    folds = speaker_folds(toy_feats, k=4, seed=0)
    assert len(folds) == 4
    seen = []
    for train, val in folds:
        assert not {toy_feats[i].speaker_id for i in train} & {toy_feats[i].speaker_id
                                                               for i in val}
        seen += val
    assert sorted(seen) == list(range(len(toy_feats)))
    with pytest.raises(ValueError):
        speaker_folds(toy_feats, k=5)


def test_cross_validate_ranks_grid(toy_feats):
    calls = []

    def run(train, val, overrides):
        calls.append(len(train) + len(val))
        return overrides["x"] ** 2

    out = cross_validate(toy_feats, [{"x": 2}, {"x": -1}, {"x": 3}], run, k=2)
    assert [r["overrides"]["x"] for r in out] == [-1, 2, 3]
    assert out[0]["folds"] == [1.0, 1.0]
    assert calls == [len(toy_feats)] * 6
