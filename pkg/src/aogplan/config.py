"""Run configuration: one JSON document, overridden by command-line flags."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .nn import NetConfig

PAPER_HIDDEN = 512


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    grammar: str | None = None  # None means the bundled grammar set
    train: str = "data/train.jsonl"
    test: str = "data/test.jsonl"
    augmented: str = "data/augmented.jsonl"
    selector: str = "models/selector.ckpt"
    decoder: str = "models/decoder.ckpt"
    reports: str = "reports"


@dataclass
class Seeds:
    data: int = 7
    selector: int = 1
    augment: int = 2
    decoder: int = 3


@dataclass
class Hyper:
    hidden: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 40
    epochs: int = 100

    def net_config(self) -> NetConfig:
        return NetConfig(hidden=self.hidden, lr=self.lr, momentum=self.momentum,
                         weight_decay=self.weight_decay, batch_size=self.batch_size,
                         epochs=self.epochs)


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    selector: Hyper = field(default_factory=lambda: Hyper(epochs=150))
    decoder: Hyper = field(default_factory=Hyper)
    seeds: Seeds = field(default_factory=Seeds)
    n_max: int = 64
    b_max: int = 4
    max_len: int | None = None  # None: longest derivation + 1, at least 12
    # 100 scenes for each of the 11 annotated tasks, 600 of them for training;
    # held-out tasks get count_per_task test scenes and no training scenes
    count_per_task: int = 100
    train_fraction: float = 6 / 11
    augment_count: int = 2000
    held_out: tuple[str, ...] = ("make tea using water from the water dispenser",
                                 "pour water with the bowl")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["held_out"] = list(self.held_out)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def paper_scale(self) -> "RunConfig":
        return replace(self, selector=replace(self.selector, hidden=PAPER_HIDDEN),
                       decoder=replace(self.decoder, hidden=PAPER_HIDDEN))

    def override(self, dotted: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"decoder.epochs": 5, ...}``; ``None`` values are skipped."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            *parents, leaf = key.split(".")
            node = d
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config field {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config field {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        for name in ("selector", "decoder"):
            h: Hyper = getattr(self, name)
            if h.hidden <= 0 or h.batch_size <= 0 or h.epochs < 0:
                raise ConfigError(f"{name}: hidden, batch_size must be positive, epochs >= 0")
            if h.lr < 0 or h.weight_decay < 0 or not 0 <= h.momentum < 1:
                raise ConfigError(f"{name}: need lr >= 0, weight_decay >= 0, 0 <= momentum < 1")
        if self.n_max <= 0 or self.b_max < 2:
            raise ConfigError("n_max must be positive and b_max at least 2")
        if self.max_len is not None and self.max_len <= 0:
            raise ConfigError("max_len must be positive")
        if self.count_per_task <= 0 or not 0 < self.train_fraction < 1:
            raise ConfigError("count_per_task must be positive, train_fraction in (0, 1)")
        if self.augment_count < 0:
            raise ConfigError("augment_count must be non-negative")


def _build(cls, d: Mapping[str, Any], where: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config field(s) {', '.join(sorted(where + k for k in unknown))}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}{name}.")
        elif name == "held_out":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    cfg = cls(**kwargs)
    if cls is RunConfig:
        cfg.validate()
    return cfg
