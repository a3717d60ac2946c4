"""Staged optimization: CNN and MLP classifiers, greedy fusion, joint fine-tuning, Siamese.

Every stage is a pure function of its input weights, the feature set, the
configuration and the seed. Each one returns a ``StageResult`` with the
trained weights and a per-step log (``epoch,step,lr,loss,metric``).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import UtteranceFeatures, speaker_labels
from .features import SHORT_FRAMES
from .model import VerifierConfig, VerifierWeights, build, classifier_forward
from .nn import SGDMomentum, contrastive_loss, softmax_cross_entropy
from .nn.layers import BatchNorm

STAGE_ORDER = ("cnn", "mlp", "fusion", "joint", "siamese")
_STAGE_SEED = {s: i for i, s in enumerate(STAGE_ORDER)}
LOG_FIELDS = ("epoch", "step", "lr", "loss", "metric")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """The loss became non-finite."""


class FreezeViolation(TrainingError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_initial: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_epochs: int = 2
    lr_mode: str = "staircase"
    bn_decay: float = 0.99
    dropout: float = 0.5
    margin: float = 10.0
    epochs_cnn: int = 10
    epochs_mlp: int = 10
    epochs_fusion: int = 5
    epochs_joint: int = 5
    epochs_siamese: int = 20
    # random 300-frame crops drawn per utterance in each CNN / joint epoch
    windows_per_utterance: int = 2
    # passes over the (one-row-per-utterance) prosody table per MLP epoch
    mlp_passes: int = 1
    pairs_per_epoch: int = 256
    # 0 means: start from the fusion stage rate
    joint_lr: float = 0.0
    siamese_lr: float = 0.01
    # dropout rate used while training on pairs; the classifier stages use ``dropout``
    siamese_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        positive = [self.batch_size, self.lr_initial, self.lr_decay_factor, self.lr_decay_epochs,
                    self.margin, self.windows_per_utterance, self.mlp_passes,
                    self.pairs_per_epoch, self.siamese_lr]
        if min(positive) <= 0:
            raise ValueError("batch size, rates, margin and counts must be positive")
        if min(self.momentum, self.weight_decay, self.joint_lr) < 0:
            raise ValueError("momentum, weight decay and joint_lr must be non-negative")
        if min(self.epochs_cnn, self.epochs_mlp, self.epochs_fusion, self.epochs_joint,
               self.epochs_siamese) < 0:
            raise ValueError("epoch counts must be non-negative")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.siamese_dropout < 1.0):
            raise ValueError("dropout rates must lie in [0, 1)")
        if not 0.0 < self.bn_decay < 1.0:
            raise ValueError("bn_decay must lie in (0, 1)")
        if self.lr_mode not in ("staircase", "exponential"):
            raise ValueError("lr_mode must be 'staircase' or 'exponential'")
        if self.pairs_per_epoch % 2:
            raise ValueError("pairs_per_epoch must be even for balanced sampling")
        if self.batch_size < 2:
            raise ValueError("batch norm needs batch_size >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig, base: float | None = None) -> float:
    """lr = base * factor ** floor(epoch / decay_epochs) (no floor in exponential mode)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    base = cfg.lr_initial if base is None else base
    k = epoch / cfg.lr_decay_epochs
    if cfg.lr_mode == "staircase":
        k = epoch // cfg.lr_decay_epochs
    return float(base * cfg.lr_decay_factor ** k)


def final_lr(epochs: int, cfg: TrainConfig, base: float | None = None) -> float:
    return lr_schedule(max(epochs - 1, 0), cfg, base)


@dataclass
class StageResult:
    stage: str
    weights: VerifierWeights
    log: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    epoch_metric: list = field(default_factory=list)
    final_lr: float = 0.0

    def write_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for row in self.log:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])


@dataclass(frozen=True)
class Pair:
    a: int
    start_a: int
    b: int
    start_b: int
    label: int  # 0 genuine, 1 impostor


# ---------------------------------------------------------------- helpers


def model_config_for(cfg: TrainConfig, model_cfg: VerifierConfig, n_classes: int):
    d = model_cfg.to_dict()
    d.update(bn_decay=cfg.bn_decay, dropout=cfg.dropout, margin=cfg.margin, n_classes=n_classes)
    return VerifierConfig.from_dict(d)


def _rngs(cfg: TrainConfig, stage: str):
    k = _STAGE_SEED[stage]
    return np.random.default_rng([cfg.seed, k, 0]), np.random.default_rng([cfg.seed, k, 1])


def _batches(order, batch_size):
    """Split into batches; a trailing singleton joins the previous batch (batch norm)."""
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _check_finite(loss, stage, epoch, step):
    if not np.isfinite(loss):
        raise TrainingDiverged(f"{stage}: loss became {loss} at epoch {epoch}, step {step}; "
                               "lower the learning rate")


def _labels(feats, speakers):
    index = {s: i for i, s in enumerate(speakers)}
    try:
        return np.array([index[f.speaker_id] for f in feats])
    except KeyError as exc:
        raise TrainingError(f"speaker {exc} not among the checkpoint's classes") from None


def _random_starts(feat: UtteranceFeatures, k: int, rng) -> np.ndarray:
    return rng.integers(0, feat.n_frames - SHORT_FRAMES + 1, size=k)


def _windows(feats, idx, starts) -> np.ndarray:
    return np.stack([feats[i].window(s) for i, s in zip(idx, starts)])


def _prosody(feats, idx) -> np.ndarray:
    return np.stack([feats[i].prosody for i in idx])


def recount_batch_norm(weights: VerifierWeights, feats, batch_size: int) -> None:
    """Replace BN running statistics by the average batch statistics over the first
    grid window of every utterance, so evaluation sees converged statistics."""
    x_all = np.stack([f.window(0) for f in feats])
    for tower in weights.towers:
        bns = [l for l in tower.cnn.layers if isinstance(l, BatchNorm)]
        if not bns:
            continue
        for bn in bns:
            bn.begin_recount()
        saved = [d.rng for d in tower.cnn.dropouts()]
        for d in tower.cnn.dropouts():
            d.rng = np.random.default_rng(0)
        try:
            for idx in _batches(np.arange(len(feats)), batch_size):
                tower.cnn_forward(x_all[idx], train=True)
        finally:
            for bn in bns:
                bn.end_recount()
            for d, r in zip(tower.cnn.dropouts(), saved):
                d.rng = r


def _fingerprint(params) -> dict:
    return {p.name: hashlib.sha256(p.value.tobytes()).hexdigest() for p in params}


# ---------------------------------------------------------------- classifier stages


def _run_classifier(stage, head_stage, weights, feats, cfg, epochs, params, lr_fn, sample_fn,
                    backward_fn):
    tower = weights.tower_a
    rng, drop_rng = _rngs(cfg, stage)
    tower.set_dropout_rng(drop_rng)
    labels = _labels(feats, weights.meta["speakers"])
    opt = SGDMomentum(params, cfg.momentum, cfg.weight_decay)
    res = StageResult(stage, weights)
    step = 0
    for epoch in range(epochs):
        lr = lr_fn(epoch)
        idx, starts = sample_fn(rng)
        order = rng.permutation(len(idx))
        total, correct, n = 0.0, 0, 0
        for b in _batches(order, cfg.batch_size):
            bi = idx[b]
            x = _windows(feats, bi, starts[b]) if starts is not None else None
            pv = _prosody(feats, bi)
            opt.zero_grad()
            logits = classifier_forward(head_stage, weights, x, pv, train=True)
            loss, g = softmax_cross_entropy(logits, labels[bi])
            _check_finite(loss, stage, epoch, step)
            backward_fn(tower.head(head_stage).backward(g.astype(logits.dtype)))
            opt.step(lr)
            acc = float(np.mean(logits.argmax(axis=1) == labels[bi]))
            res.log.append((epoch, step, lr, loss, acc))
            total += loss * len(b)
            correct += round(acc * len(b))
            n += len(b)
            step += 1
        res.epoch_loss.append(total / n)
        res.epoch_metric.append(correct / n)
    res.final_lr = lr_fn(max(epochs - 1, 0))
    return res


def _crop_sampler(feats, k):
    def sample(rng):
        idx = np.repeat(np.arange(len(feats)), k)
        starts = np.concatenate([_random_starts(f, k, rng) for f in feats])
        return idx, starts
    return sample


def _new_classifier(feats, model_cfg, cfg):
    if len(feats) < 2:
        raise TrainingError("need at least two utterances")
    speakers = speaker_labels(feats)
    if len(speakers) < 2:
        raise TrainingError("need at least two speakers")
    w = build(model_config_for(cfg, model_cfg, len(speakers)), cfg.seed)
    w.meta = {"speakers": speakers}
    return w


def pretrain_cnn_classifier(feats, model_cfg: VerifierConfig, cfg: TrainConfig) -> StageResult:
    """Softmax speaker classifier on random MFSC crops through conv1..FC7."""
    w = _new_classifier(feats, model_cfg, cfg)
    t = w.tower_a
    res = _run_classifier("cnn", "cnn_only", w, feats, cfg, cfg.epochs_cnn,
                          t.cnn.params() + t.head("cnn_only").params(),
                          lambda e: lr_schedule(e, cfg),
                          _crop_sampler(feats, cfg.windows_per_utterance), t.cnn.backward)
    recount_batch_norm(w, feats, cfg.batch_size)
    return _finish(res, cfg)


def prosody_statistics(feats) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature training mean and standard deviation (constant features get std 1)."""
    pv = np.stack([f.prosody for f in feats])
    mean = pv.mean(axis=0)
    std = pv.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def pretrain_mlp(feats, model_cfg: VerifierConfig, cfg: TrainConfig) -> StageResult:
    """Softmax speaker classifier on standardized prosodic vectors."""
    w = _new_classifier(feats, model_cfg, cfg)
    t = w.tower_a
    mean, std = prosody_statistics(feats)
    t.prosody_mean.value[...] = mean
    t.prosody_std.value[...] = std

    def sample(rng):
        return np.tile(np.arange(len(feats)), cfg.mlp_passes), None

    res = _run_classifier("mlp", "mlp_only", w, feats, cfg, cfg.epochs_mlp,
                          t.mlp.params() + t.head("mlp_only").params(),
                          lambda e: lr_schedule(e, cfg), sample, t.mlp.backward)
    return _finish(res, cfg)


def _check_compatible(a: VerifierWeights, b: VerifierWeights, what: str):
    if a.config.hash() != b.config.hash() or a.config.n_classes != b.config.n_classes:
        raise TrainingError(f"{what}: model configurations differ")
    if a.meta.get("speakers") != b.meta.get("speakers"):
        raise TrainingError(f"{what}: speaker label sets differ")


def _copy_params(dst, src):
    for d, s in zip(dst, src):
        if d.name != s.name:
            raise TrainingError(f"parameter order mismatch: {d.name} vs {s.name}")
        d.value[...] = s.value


def train_fusion_greedy(cnn: VerifierWeights, mlp: VerifierWeights, feats,
                        cfg: TrainConfig) -> StageResult:
    """Train FC8 and the joint head on frozen CNN (FC7) and MLP outputs."""
    _check_compatible(cnn, mlp, "fusion")
    for w, stage in ((cnn, "cnn"), (mlp, "mlp")):
        if w.meta.get("stage") != stage:
            raise TrainingError(f"fusion needs a '{stage}' checkpoint, got {w.meta.get('stage')!r}")
    w = build(cnn.config, cfg.seed)
    w.meta = {"speakers": cnn.meta["speakers"]}
    t, tc, tm = w.tower_a, cnn.tower_a, mlp.tower_a
    _copy_params(t.cnn.params() + t.cnn.buffers() + t.head("cnn_only").params(),
                 tc.cnn.params() + tc.cnn.buffers() + tc.head("cnn_only").params())
    _copy_params(t.mlp.params() + t.head("mlp_only").params() + [t.prosody_mean, t.prosody_std],
                 tm.mlp.params() + tm.head("mlp_only").params() + [tm.prosody_mean, tm.prosody_std])
    frozen = t.cnn.params() + t.cnn.buffers() + t.mlp.params() + [t.prosody_mean, t.prosody_std]
    before = _fingerprint(frozen)
    lr = min(cnn.meta["final_lr"], mlp.meta["final_lr"])

    # frozen sub-networks run in inference mode, so their outputs can be cached per window
    idx = np.array([i for i, f in enumerate(feats) for _ in f.grid_starts])
    starts = np.array([s for f in feats for s in f.grid_starts])
    fc7 = np.concatenate([t.cnn_forward(_windows(feats, idx[b], starts[b]))
                          for b in _batches(np.arange(len(idx)), cfg.batch_size)])
    m_out = t.mlp_forward(_prosody(feats, idx))
    fused = np.concatenate([fc7, m_out], axis=1)

    labels = _labels(feats, w.meta["speakers"])
    head = t.head("joint")
    opt = SGDMomentum(t.fc8.params() + head.params(), cfg.momentum, cfg.weight_decay)
    rng, _ = _rngs(cfg, "fusion")
    res = StageResult("fusion", w)
    step = 0
    for epoch in range(cfg.epochs_fusion):
        order = rng.permutation(len(idx))
        total, correct = 0.0, 0
        for b in _batches(order, cfg.batch_size):
            opt.zero_grad()
            logits = head.forward(t.fc8.forward(fused[b]))
            y = labels[idx[b]]
            loss, g = softmax_cross_entropy(logits, y)
            _check_finite(loss, "fusion", epoch, step)
            t.fc8.backward(head.backward(g.astype(logits.dtype)))
            opt.step(lr)
            acc = float(np.mean(logits.argmax(axis=1) == y))
            res.log.append((epoch, step, lr, loss, acc))
            total += loss * len(b)
            correct += round(acc * len(b))
            step += 1
        res.epoch_loss.append(total / len(idx))
        res.epoch_metric.append(correct / len(idx))
    if _fingerprint(frozen) != before:
        raise FreezeViolation("fusion stage modified frozen CNN/MLP parameters")
    res.final_lr = lr
    return _finish(res, cfg)


def finetune_joint_classifier(fusion: VerifierWeights, feats, cfg: TrainConfig) -> StageResult:
    """Train the whole classification network (CNN, MLP, FC8, joint head) end to end."""
    if fusion.meta.get("stage") != "fusion":
        raise TrainingError(f"joint fine-tuning needs a 'fusion' checkpoint, "
                            f"got {fusion.meta.get('stage')!r}")
    w = _clone(fusion)
    t = w.tower_a
    base = cfg.joint_lr or fusion.meta["final_lr"]
    params = t.cnn.params() + t.mlp.params() + t.fc8.params() + t.head("joint").params()
    res = _run_classifier("joint", "joint", w, feats, cfg, cfg.epochs_joint, params,
                          lambda e: lr_schedule(e, cfg, base),
                          _crop_sampler(feats, cfg.windows_per_utterance), t.backward_embed)
    recount_batch_norm(w, feats, cfg.batch_size)
    return _finish(res, cfg)


def _clone(weights: VerifierWeights, dropout: float | None = None) -> VerifierWeights:
    cfg = weights.config
    if dropout is not None:
        cfg = VerifierConfig.from_dict({**cfg.to_dict(), "dropout": dropout})
    w = build(cfg, 0, weights.tower_a.dtype)
    w.load_arrays(weights.state_arrays())
    w.meta = dict(weights.meta)
    return w


def _finish(res: StageResult, cfg: TrainConfig) -> StageResult:
    res.weights.meta.update(stage=res.stage, final_lr=res.final_lr, train_config=cfg.to_dict())
    return res


# ---------------------------------------------------------------- Siamese stage


def sample_balanced_pairs(feats, n_pairs: int, seed) -> list[Pair]:
    """Half genuine, half impostor pairs, interleaved in a seeded random order.

    Utterances are drawn first, then one random 300-frame window per side. A
    genuine pair uses two different utterances whenever the speaker has more
    than one, and never the same window twice.
    """
    if n_pairs < 2 or n_pairs % 2:
        raise ValueError("n_pairs must be a positive even number")
    by_spk: dict = {}
    for i, f in enumerate(feats):
        by_spk.setdefault(f.speaker_id, []).append(i)
    speakers = sorted(by_spk)
    if len(speakers) < 2:
        raise ValueError("balanced pairs need at least two speakers")
    rng = np.random.default_rng(seed)
    genuine_ok = [s for s in speakers
                  if len(by_spk[s]) > 1 or feats[by_spk[s][0]].n_frames > SHORT_FRAMES]
    if not genuine_ok:
        raise ValueError("no speaker offers two distinct windows for a genuine pair")

    def start(i):
        return int(rng.integers(0, feats[i].n_frames - SHORT_FRAMES + 1))

    pairs = []
    for _ in range(n_pairs // 2):
        utts = by_spk[genuine_ok[rng.integers(len(genuine_ok))]]
        if len(utts) > 1:
            a, b = rng.choice(utts, size=2, replace=False)
            sa, sb = start(a), start(b)
        else:
            a = b = utts[0]
            sa = start(a)
            sb = start(b)
            while sb == sa:
                sb = start(b)
        pairs.append(Pair(int(a), sa, int(b), sb, 0))
        s1, s2 = rng.choice(len(speakers), size=2, replace=False)
        a = by_spk[speakers[s1]][rng.integers(len(by_spk[speakers[s1]]))]
        b = by_spk[speakers[s2]][rng.integers(len(by_spk[speakers[s2]]))]
        pairs.append(Pair(int(a), start(a), int(b), start(b), 1))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def route_pair(feats, p: Pair) -> Pair:
    """Put the lower-order device on the left (tower A) for channel-dependent towers."""
    if feats[p.a].device_order > feats[p.b].device_order:
        return Pair(p.b, p.start_b, p.a, p.start_a, p.label)
    return p


def verification_weights(classifier: VerifierWeights, weight_sharing: bool = True,
                         dropout: float | None = None):
    """Copy of a classifier checkpoint without heads, shared or split into two towers."""
    d = {**classifier.config.to_dict(), "n_classes": 0, "weight_sharing": True}
    if dropout is not None:
        d["dropout"] = dropout
    w = build(VerifierConfig.from_dict(d), 0, classifier.tower_a.dtype)
    w.load_arrays(classifier.state_arrays(heads=False))
    w.meta = {k: v for k, v in classifier.meta.items() if k != "speakers"}
    return w if weight_sharing else w.unshared_copy()


def untrained_baseline(reference: VerifierWeights, seed: int = 0) -> VerifierWeights:
    """Freshly initialized verification network with the prosody standardization of
    ``reference``, so the null model sees inputs on the same scale as a trained one."""
    d = {**reference.config.to_dict(), "n_classes": 0, "weight_sharing": True}
    w = build(VerifierConfig.from_dict(d), seed, reference.tower_a.dtype)
    w.tower_a.prosody_mean.value[...] = reference.tower_a.prosody_mean.value
    w.tower_a.prosody_std.value[...] = reference.tower_a.prosody_std.value
    w.meta = {"stage": "untrained"}
    return w


def train_siamese(init: VerifierWeights, feats, cfg: TrainConfig,
                  weight_sharing: bool | None = None) -> StageResult:
    """Minimize the contrastive loss over balanced pairs of short utterances.

    ``init`` is a joint classifier checkpoint (heads are dropped) or a
    previous verification checkpoint. With ``weight_sharing=False`` the
    two towers start as copies of the shared tower and pairs are routed
    by device order.
    """
    if weight_sharing is None:
        weight_sharing = init.config.weight_sharing
    if init.config.n_classes or init.tower_a is init.tower_b:
        w = verification_weights(init, weight_sharing, cfg.siamese_dropout)
    else:
        w = _clone(init, cfg.siamese_dropout)
    w.meta["weight_sharing"] = weight_sharing
    if weight_sharing and len(w.towers) != 1:
        raise TrainingError("cannot re-share a channel-dependent checkpoint")
    margin = w.config.margin
    rng, drop_rng = _rngs(cfg, "siamese")
    for t in w.towers:
        t.set_dropout_rng(drop_rng)
    params = w.params()
    opt = SGDMomentum(params, cfg.momentum, cfg.weight_decay)
    res = StageResult("siamese", w)
    step = 0
    for epoch in range(cfg.epochs_siamese):
        lr = lr_schedule(epoch, cfg, cfg.siamese_lr)
        pairs = sample_balanced_pairs(feats, cfg.pairs_per_epoch, [cfg.seed, 4, epoch])
        if not weight_sharing:
            pairs = [route_pair(feats, p) for p in pairs]
        total, hits = 0.0, 0
        for b in _batches(np.arange(len(pairs)), cfg.batch_size):
            ps = [pairs[i] for i in b]
            xa = np.stack([feats[p.a].window(p.start_a) for p in ps])
            xb = np.stack([feats[p.b].window(p.start_b) for p in ps])
            pa = np.stack([feats[p.a].prosody for p in ps])
            pb = np.stack([feats[p.b].prosody for p in ps])
            y = np.array([p.label for p in ps])
            opt.zero_grad()
            if weight_sharing:
                t = w.tower_a
                z = t.embed(np.concatenate([xa, xb]), np.concatenate([pa, pb]), True, True)
                za, zb = z[:len(ps)], z[len(ps):]
                loss, ga, gb = contrastive_loss(za, zb, y, margin)
                _check_finite(loss, "siamese", epoch, step)
                t.backward_embed(np.concatenate([ga, gb]))
            else:
                za = w.tower_a.embed(xa, pa, True, True)
                zb = w.tower_b.embed(xb, pb, True, True)
                loss, ga, gb = contrastive_loss(za, zb, y, margin)
                _check_finite(loss, "siamese", epoch, step)
                w.tower_a.backward_embed(ga)
                w.tower_b.backward_embed(gb)
            opt.step(lr)
            d = np.sqrt(((za - zb) ** 2).sum(axis=1))
            acc = float(np.mean((d >= margin / 2) == (y == 1)))
            res.log.append((epoch, step, lr, loss, acc))
            total += loss * len(ps)
            hits += round(acc * len(ps))
            step += 1
        res.epoch_loss.append(total / len(pairs))
        res.epoch_metric.append(hits / len(pairs))
    if cfg.epochs_siamese:
        recount_batch_norm(w, feats, cfg.batch_size)
    res.final_lr = lr_schedule(max(cfg.epochs_siamese - 1, 0), cfg, cfg.siamese_lr)
    return _finish(res, cfg)


def train_all(feats, model_cfg: VerifierConfig, cfg: TrainConfig) -> dict:
    """Run the five stages in order and return ``{stage: StageResult}``."""
    out = {"cnn": pretrain_cnn_classifier(feats, model_cfg, cfg),
           "mlp": pretrain_mlp(feats, model_cfg, cfg)}
    out["fusion"] = train_fusion_greedy(out["cnn"].weights, out["mlp"].weights, feats, cfg)
    out["joint"] = finetune_joint_classifier(out["fusion"].weights, feats, cfg)
    out["siamese"] = train_siamese(out["joint"].weights, feats, cfg, model_cfg.weight_sharing)
    return out


def classifier_accuracy(weights: VerifierWeights, feats, stage: str, batch_size: int = 32):
    """Inference-mode accuracy of a classifier head over all grid windows of ``feats``."""
    labels = _labels(feats, weights.meta["speakers"])
    idx = np.array([i for i, f in enumerate(feats) for _ in f.grid_starts])
    starts = np.array([s for f in feats for s in f.grid_starts])
    if stage == "mlp_only":
        logits = classifier_forward(stage, weights, None, _prosody(feats, np.arange(len(feats))))
        return float(np.mean(logits.argmax(axis=1) == labels))
    hits = 0
    for b in _batches(np.arange(len(idx)), batch_size):
        logits = classifier_forward(stage, weights, _windows(feats, idx[b], starts[b]),
                                    _prosody(feats, idx[b]))
        hits += int(np.sum(logits.argmax(axis=1) == labels[idx[b]]))
    return hits / len(idx)


# ---------------------------------------------------------------- cross-validation hook


def speaker_folds(feats, k: int = 5, seed=0) -> list[tuple[list, list]]:
    """Split utterance indices into ``k`` folds with disjoint speaker sets."""
    speakers = speaker_labels(feats)
    if not 2 <= k <= len(speakers):
        raise ValueError(f"k must lie in [2, {len(speakers)}] for {len(speakers)} speakers")
    order = np.random.default_rng(seed).permutation(len(speakers))
    fold_of = {speakers[s]: n % k for n, s in enumerate(order)}
    folds = []
    for n in range(k):
        val = [i for i, f in enumerate(feats) if fold_of[f.speaker_id] == n]
        train = [i for i, f in enumerate(feats) if fold_of[f.speaker_id] != n]
        folds.append((train, val))
    return folds


def cross_validate(feats, grid, run_fn, k: int = 5, seed=0) -> list[dict]:
    """Score every grid point by mean validation score over speaker-disjoint folds.

    ``grid`` is a user-supplied list of override dicts; ``run_fn(train_feats,
    val_feats, overrides)`` trains and returns a scalar score (lower is better,
    e.g. EER). Results come back sorted best first.
    """
    folds = speaker_folds(feats, k, seed)
    out = []
    for overrides in grid:
        scores = [float(run_fn([feats[i] for i in tr], [feats[i] for i in va], dict(overrides)))
                  for tr, va in folds]
        out.append({"overrides": dict(overrides), "mean": float(np.mean(scores)),
                    "folds": scores})
    return sorted(out, key=lambda r: r["mean"])
