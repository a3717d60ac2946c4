"""Run configuration: ``section.key = value`` text files plus command-line overrides.

Sections are ``model`` (VerifierConfig), ``train`` (TrainConfig), ``eval``
(Protocol) and ``run`` (``run.seed``, the global seed). Unknown keys are
rejected. ``run.seed`` fills ``train.seed`` and ``eval.seed`` unless they
are set explicitly.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, dataclass, field, fields

from .evaluate import Protocol
from .model import VerifierConfig
from .train import TrainConfig

_SECTIONS = {"model": VerifierConfig, "train": TrainConfig, "eval": Protocol}
# set by the pipeline itself, never by the user
_RESERVED = {("model", "n_classes"), ("eval", "device_pair")}


class ConfigError(ValueError):
    pass


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.strip("[]() ").split(",") if v.strip())
        if isinstance(default, str):
            return raw.strip("\"'")
        return json.loads(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    seed: int = 0

    def set(self, key: str, raw: str, where: str = "override") -> None:
        section, _, name = key.strip().partition(".")
        if section == "run" and name == "seed":
            self.seed = _parse_value(raw, 0, f"{where} ({key})")
            return
        cls = _SECTIONS.get(section)
        known = {f.name: f for f in fields(cls)} if cls else {}
        if name not in known or (section, name) in _RESERVED:
            raise ConfigError(f"{where}: unknown configuration key {key!r}")
        getattr(self, section)[name] = _parse_value(raw, _default(known[name]),
                                                    f"{where} ({key})")

    def update_from_text(self, text: str, source: str = "<config>") -> None:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            self.set(key, value, f"{source}:{lineno}")

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                cfg.update_from_text(fh.read(), str(path))
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r}: expected section.key=value")
            cfg.set(key, value)
        return cfg

    def model_config(self) -> VerifierConfig:
        return self._build(VerifierConfig, self.model)

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, {"seed": self.seed, **self.train})

    def protocol(self, **extra) -> Protocol:
        return self._build(Protocol, {"seed": self.seed, **self.eval, **extra})

    @staticmethod
    def _build(cls, values):
        try:
            return cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {cls.__name__}: {exc}") from None

    def effective(self) -> dict:
        """Every field with its effective value, as plain JSON types."""
        out = {"run.seed": self.seed}
        for name, obj in (("model", self.model_config()), ("train", self.train_config()),
                          ("eval", self.protocol())):
            for f in fields(obj):
                if (name, f.name) in _RESERVED:
                    continue
                v = getattr(obj, f.name)
                out[f"{name}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.effective().items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"
