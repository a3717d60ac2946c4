"""The verifier network: MFSC CNN + prosody MLP fused into a 128-d embedding.

A ``Tower`` is one sub-network of the Siamese pair. ``VerifierWeights``
holds either one tower used for both sides (weight sharing) or two
independent towers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .nn import (BatchNorm, Conv2d, Dense, Dropout, Flatten, GlobalTimeAvgPool,
                 HeteroFreqMaxPool, MaxPoolTime, Parameter, ReLU, Sequential)
from .nn.checkpoint import (CheckpointError, config_hash, load_checkpoint,
                            save_checkpoint)

STAGES = ("cnn_only", "mlp_only", "joint")
# layer types whose outputs make up the architecture table's output column
_TRACED = (Conv2d, MaxPoolTime, HeteroFreqMaxPool, GlobalTimeAvgPool, Dense)


@dataclass
class VerifierConfig:
    n_mel: int = 40
    n_frames: int = 300
    prosodic_dim: int = 18
    mlp_hidden: tuple = (64, 64)
    mlp_out: int = 32
    fc6: int = 1024
    fc7: int = 128
    fc8: int = 128
    margin: float = 10.0
    weight_sharing: bool = True
    n_classes: int = 0
    conv_channels: tuple = (64, 128, 256, 256, 512)
    dropout: float = 0.5
    bn_decay: float = 0.99
    mlp_batch_norm: bool = False

    def __post_init__(self):
        self.mlp_hidden = tuple(int(v) for v in self.mlp_hidden)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        if len(self.conv_channels) != 5:
            raise ValueError("conv_channels needs five entries")
        positive = [self.n_mel, self.n_frames, self.prosodic_dim, self.mlp_out, self.fc6,
                    self.fc7, self.fc8, *self.mlp_hidden, *self.conv_channels]
        if min(positive) <= 0 or self.margin <= 0 or self.n_classes < 0:
            raise ValueError("dimensions and margin must be positive")
        if self.n_mel % 4:
            raise ValueError("n_mel must be divisible by 4 (two frequency poolings)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mlp_batch_norm:
            raise ValueError("batch norm inside the MLP is not supported")

    @property
    def fc6_in(self) -> int:
        return (self.n_mel // 4) * self.conv_channels[4]

    @property
    def fc8_in(self) -> int:
        return self.fc7 + self.mlp_out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VerifierConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        # classifier width does not change the embedding network
        d = self.to_dict()
        d.pop("n_classes")
        return config_hash(d)


class Tower:
    """One sub-network: CNN to FC7, MLP to 32, FC8 fusion, optional classifier heads."""

    def __init__(self, cfg: VerifierConfig, rng: np.random.Generator, prefix: str = "",
                 dtype=np.float32):
        self.cfg = cfg
        c1, c2, c3, c4, c5 = cfg.conv_channels
        p = prefix
        d = cfg.bn_decay

        def block(name, cin, cout):
            return [Conv2d(f"{p}cnn.{name}", cin, cout, rng, dtype),
                    BatchNorm(f"{p}cnn.{name}.bn", cout, d, dtype=dtype), ReLU()]

        self.cnn = Sequential(
            block("conv1", 3, c1) + [MaxPoolTime()]
            + block("conv2", c1, c2) + [MaxPoolTime(), HeteroFreqMaxPool()]
            + block("conv3", 3 * c2, c3) + [MaxPoolTime()]
            + block("conv4", c3, c4) + [MaxPoolTime(), HeteroFreqMaxPool()]
            + block("conv5", 3 * c4, c5)
            + [GlobalTimeAvgPool(), Flatten(),
               Dense(f"{p}cnn.fc6", cfg.fc6_in, cfg.fc6, rng, dtype), ReLU(),
               Dropout(cfg.dropout),
               Dense(f"{p}cnn.fc7", cfg.fc6, cfg.fc7, rng, dtype)])
        mlp_layers = []
        n_in = cfg.prosodic_dim
        for i, h in enumerate(cfg.mlp_hidden, 1):
            mlp_layers += [Dense(f"{p}mlp.fc{i}", n_in, h, rng, dtype), ReLU(),
                           Dropout(cfg.dropout)]
            n_in = h
        mlp_layers.append(Dense(f"{p}mlp.out", n_in, cfg.mlp_out, rng, dtype))
        self.mlp = Sequential(mlp_layers)
        self.fc8 = Dense(f"{p}fc8", cfg.fc8_in, cfg.fc8, rng, dtype, init="glorot")
        self.heads = {}
        if cfg.n_classes:
            self.heads = {
                "cnn_only": Dense(f"{p}head.cnn", cfg.fc7, cfg.n_classes, rng, dtype, "small"),
                "mlp_only": Dense(f"{p}head.mlp", cfg.mlp_out, cfg.n_classes, rng, dtype, "small"),
                "joint": Dense(f"{p}head.joint", cfg.fc8, cfg.n_classes, rng, dtype, "small"),
            }
        self.prosody_mean = Parameter(f"{p}prosody.mean", np.zeros(cfg.prosodic_dim, dtype),
                                      trainable=False)
        self.prosody_std = Parameter(f"{p}prosody.std", np.ones(cfg.prosodic_dim, dtype),
                                     trainable=False)
        self.dtype = dtype
        self._split = cfg.fc7

    # -- parameter bookkeeping

    def groups(self) -> dict:
        """Trainable parameters per sub-network."""
        g = {"cnn": self.cnn.params(), "mlp": self.mlp.params(), "fc8": self.fc8.params()}
        for k, h in self.heads.items():
            g[f"head.{k}"] = h.params()
        return g

    def params(self) -> list[Parameter]:
        return [p for ps in self.groups().values() for p in ps]

    def buffers(self) -> list[Parameter]:
        return self.cnn.buffers() + self.mlp.buffers() + [self.prosody_mean, self.prosody_std]

    def set_dropout_rng(self, rng):
        for layer in self.cnn.dropouts() + self.mlp.dropouts():
            layer.rng = rng

    # -- forward / backward

    def standardize(self, pv):
        return ((np.asarray(pv) - self.prosody_mean.value) / self.prosody_std.value).astype(self.dtype)

    def cnn_forward(self, x, train=False, trace=None):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        return self.cnn.forward(x, train, trace)

    def mlp_forward(self, pv, train=False):
        pv = np.asarray(pv)
        if pv.ndim == 1:
            pv = pv[None]
        return self.mlp.forward(self.standardize(pv), train)

    def fuse(self, fc7, mlp_out):
        return self.fc8.forward(np.concatenate([fc7, mlp_out], axis=1))

    def embed(self, x, pv, train_cnn=False, train_mlp=False):
        return self.fuse(self.cnn_forward(x, train_cnn), self.mlp_forward(pv, train_mlp))

    def backward_embed(self, dz, into_cnn=True, into_mlp=True):
        d = self.fc8.backward(dz)
        if into_cnn:
            self.cnn.backward(np.ascontiguousarray(d[:, :self._split]))
        if into_mlp:
            self.mlp.backward(np.ascontiguousarray(d[:, self._split:]))

    def head(self, stage):
        if stage not in self.heads:
            raise ValueError(f"no classifier head {stage!r} (n_classes={self.cfg.n_classes})")
        return self.heads[stage]


def build(config: VerifierConfig, seed: int, dtype=np.float32) -> "VerifierWeights":
    """Deterministically initialize a verifier (He fan-in init for ReLU layers)."""
    rng = np.random.default_rng(seed)
    a = Tower(config, rng, "", dtype)
    b = a if config.weight_sharing else Tower(config, rng, "tower_b.", dtype)
    return VerifierWeights(config, a, b)


@dataclass
class VerifierWeights:
    config: VerifierConfig
    tower_a: Tower
    tower_b: Tower
    meta: dict = field(default_factory=dict)

    @property
    def towers(self) -> list[Tower]:
        return [self.tower_a] if self.tower_a is self.tower_b else [self.tower_a, self.tower_b]

    def params(self) -> list[Parameter]:
        return [p for t in self.towers for p in t.params()]

    def buffers(self) -> list[Parameter]:
        return [b for t in self.towers for b in t.buffers()]

    def named(self, heads: bool = True) -> dict:
        out = {}
        for p in self.params() + self.buffers():
            if not heads and ".head." in f".{p.name}":
                continue
            out[p.name] = p
        return out

    def state_arrays(self, heads: bool = True) -> dict:
        return {k: p.value for k, p in self.named(heads).items()}

    def load_arrays(self, arrays: dict, strict: bool = True):
        named = self.named()
        missing = [k for k in named if k not in arrays]
        if strict and missing:
            raise ValueError(f"checkpoint lacks parameters: {missing[:5]}")
        for k, p in named.items():
            if k in arrays:
                if arrays[k].shape != p.value.shape:
                    raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.value.shape}")
                p.value[...] = arrays[k]

    def unshared_copy(self) -> "VerifierWeights":
        """Two independent towers, both initialized from this model's shared tower."""
        cfg = VerifierConfig.from_dict({**self.config.to_dict(), "weight_sharing": False})
        out = build(cfg, 0, self.tower_a.dtype)
        src = {p.name: p.value for p in self.tower_a.params() + self.tower_a.buffers()}
        for t, prefix in ((out.tower_a, ""), (out.tower_b, "tower_b.")):
            for p in t.params() + t.buffers():
                p.value[...] = src[p.name[len(prefix):]]
        out.meta = dict(self.meta)
        return out

    def trainable_count(self) -> int:
        return sum(p.value.size for p in self.params())


def trace_shapes(weights: VerifierWeights, x) -> list[tuple]:
    """Output shapes (without batch) of each conv, pool and dense layer of the CNN."""
    trace = []
    weights.tower_a.cnn_forward(x, False, trace)
    layers = [l for l in weights.tower_a.cnn.layers]
    return [shape for layer, (_, shape) in zip(layers, trace) if isinstance(layer, _TRACED)]


def forward_embed(short_utt, pv, weights: VerifierWeights, mode: str = "eval", tower: int = 0):
    """Embed one or a batch of (short utterance, prosodic vector) inputs."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    t = weights.tower_a if tower == 0 else weights.tower_b
    train = mode == "train"
    x = np.asarray(short_utt)
    cfg = weights.config
    if x.shape[-3] != cfg.n_mel or x.shape[-1] != 3:
        raise ValueError(f"expected (..., {cfg.n_mel}, T, 3) input, got {x.shape}")
    pv = np.asarray(pv)
    if pv.shape[-1] != cfg.prosodic_dim:
        raise ValueError(f"expected {cfg.prosodic_dim} prosodic features, got {pv.shape}")
    z = t.embed(x, pv, train, train)
    return z[0] if x.ndim == 3 else z


def classifier_forward(stage: str, weights: VerifierWeights, short_utt=None, pv=None,
                       train: bool = False):
    """Speaker logits from the FC7 (cnn_only), MLP (mlp_only) or FC8 (joint) head."""
    t = weights.tower_a
    if stage == "cnn_only":
        if short_utt is None:
            raise ValueError("cnn_only stage needs a short utterance")
        return t.head(stage).forward(t.cnn_forward(short_utt, train))
    if stage == "mlp_only":
        if pv is None:
            raise ValueError("mlp_only stage needs a prosodic vector")
        return t.head(stage).forward(t.mlp_forward(pv, train))
    if stage == "joint":
        if short_utt is None or pv is None:
            raise ValueError("joint stage needs a short utterance and a prosodic vector")
        return t.head(stage).forward(t.embed(short_utt, pv, train, train))
    raise ValueError(f"unknown stage {stage!r}")


def pair_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("embedding lengths differ")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def save_verifier(path, weights: VerifierWeights, metadata: dict | None = None,
                  heads: bool = True) -> None:
    """Write weights plus config to a checkpoint; ``heads=False`` drops classifier heads."""
    cfg = weights.config
    if not heads:
        cfg = VerifierConfig.from_dict({**cfg.to_dict(), "n_classes": 0})
    meta = {**weights.meta, **(metadata or {})}
    meta["model_config"] = cfg.to_dict()
    meta["config_hash"] = cfg.hash()
    save_checkpoint(path, weights.state_arrays(heads), meta)


def load_verifier(path) -> VerifierWeights:
    arrays, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: no model configuration in metadata")
    cfg = VerifierConfig.from_dict(meta["model_config"])
    if meta.get("config_hash", cfg.hash()) != cfg.hash():
        raise CheckpointError(f"{path}: config hash does not match stored configuration")
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    weights = build(cfg, 0, dtype)
    weights.load_arrays(arrays)
    weights.meta = {k: v for k, v in meta.items() if k not in ("model_config", "config_hash")}
    return weights
