"""Flat ``key = value`` run configuration and named random streams.

One file covers the search, trainer, augmentation and dataset settings::

    # comments and blank lines are ignored
    n_steps = 5
    n_neigh = 8
    sgdr_enabled = true
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # search
    n_steps: int = 5
    n_neigh: int = 8
    n_nm: int = 5
    epoch_neigh: int = 17
    epoch_final: int = 100
    epoch_pretrain: int = 20
    lr_start: float = 0.05
    lr_end: float = 0.0
    sgdr_enabled: bool = True
    seed: int = 0
    max_channels: int | None = None
    calibration_size: int = 256
    # trainer
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    # augmentation
    aug_enabled: bool = True
    aug_pad: int = 4
    aug_flip_prob: float = 0.5
    # data and initial model
    dataset: str = "synthetic"
    data_dir: str = ""
    val_size: int = 10000
    num_classes: int = 10
    image_size: int = 16
    synthetic_per_class: int = 400
    synthetic_val_per_class: int = 100
    synthetic_test_per_class: int = 100
    synthetic_noise: float = 1.3
    init_channels: int = 16

    def validate(self):
        if self.n_steps < 0 or self.n_neigh < 1 or self.n_nm < 1:
            raise ConfigError("need n_steps >= 0, n_neigh >= 1, n_nm >= 1")
        for name in ("epoch_neigh", "epoch_final", "epoch_pretrain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.lr_start >= self.lr_end >= 0:
            raise ConfigError("need lr_start >= lr_end >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        return self

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name, typ, raw):
    raw = raw.strip()
    typ = str(typ)
    if "None" in typ and raw.lower() in ("none", ""):
        return None
    try:
        if typ.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from exc
    return raw


def parse_config(text, base: RunConfig | None = None) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, known[key], raw)
    base = base or RunConfig()
    return dataclasses.replace(base, **values).validate()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


_STREAMS = ("data", "init", "pretrain", "morph", "train", "calib", "final", "scratch", "verify")


def rng_stream(seed, name, *index) -> np.random.Generator:
    """Independent generator for sub-stream ``name`` (and optional indices)
    derived from the master ``seed``."""
    if name in _STREAMS:
        key = _STREAMS.index(name)
    else:
        key = zlib.crc32(name.encode()) + len(_STREAMS)
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, index)]))


def stream_seed(seed, name, *index) -> int:
    return int(rng_stream(seed, name, *index).integers(2**31 - 1))
