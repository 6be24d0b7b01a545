"""Experiment configuration files.

A config is an INI-style text file::

    # comments start with '#'
    [experiment]
    model = mlp2
    seed = 0
    out = runs/mlp2

    [data]
    source = idx                     # or: synthetic
    train_images = data/mnist10k/train-images-idx3-ubyte.gz
    ...

    [train]      # TrainConfig fields for the original model
    [protect]    # TrainConfig fields for adversarial training (+ twin = true|false)
    [attack]     # AttackConfig fields (+ deepfool_samples)
    [evaluate]   # samples, deepfool_max_iter, deepfool_overshoot, limit

Relative paths resolve against the config file's directory. The experiment
seed is copied into every stochastic component.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attack import AttackConfig
from .data import LabeledDataset, load_idx_dataset, stratified_split, synthetic_blobs
from .models import ARCHITECTURES
from .tensor import ContractError
from .training import TrainConfig


class ConfigFileError(ValueError):
    """Invalid or inconsistent configuration (maps to exit status 2)."""


IDX_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


@dataclass
class DataConfig:
    source: str = "idx"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_limit: int = 0
    test_limit: int = 0
    classes: int = 2
    per_class: int = 50
    feature_dim: int = 8
    spread: float = 0.1
    test_fraction: float = 0.25


@dataclass
class ProtectOptions:
    train: TrainConfig
    twin: bool = False
    robustness_samples: int = 200


@dataclass
class EvaluateOptions:
    samples: int = 0
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    limit: int = 0


@dataclass
class ExperimentConfig:
    model: str
    seed: int
    out: Path
    data: DataConfig
    train: TrainConfig
    protect: ProtectOptions
    attack: AttackConfig
    deepfool_samples: int = 100
    evaluate: EvaluateOptions = field(default_factory=EvaluateOptions)

    def as_dict(self) -> dict:
        def plain(v):
            if isinstance(v, Path):
                return str(v)
            if dataclasses.is_dataclass(v):
                return {k: plain(x) for k, x in dataclasses.asdict(v).items()}
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v

        return {
            "model": self.model,
            "seed": self.seed,
            "data": plain(self.data),
            "train": plain(self.train),
            "protect": plain(self.protect),
            "attack": plain(self.attack),
            "deepfool_samples": self.deepfool_samples,
            "evaluate": plain(self.evaluate),
        }

    def digest(self) -> str:
        """Stable hash of everything that influences results (not the output dir)."""
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _coerce(section: str, key: str, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return lowered in ("true", "yes", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if default is None and text.lower() in ("", "none"):
                return None
            return float(text)
    except ValueError:
        raise ConfigFileError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return text


def _fill(cls, section: str, values: dict, fixed: dict = None):
    """Build dataclass ``cls`` from string ``values``; unknown keys are errors."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = dict(fixed or {})
    for key, raw in values.items():
        if key not in defaults or key in kwargs:
            raise ConfigFileError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _coerce(section, key, raw, defaults[key])
    try:
        return cls(**kwargs)
    except ContractError as exc:
        raise ConfigFileError(f"[{section}] {exc}") from None


def _take(values: dict, key: str, default, section: str):
    if key not in values:
        return default
    return _coerce(section, key, values.pop(key), default)


def load_config(path, out: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    known = {"experiment", "data", "train", "protect", "attack", "evaluate"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigFileError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sec = {name: dict(parser[name]) if parser.has_section(name) else {} for name in known}
    base = path.parent

    exp = sec["experiment"]
    model = exp.pop("model", "mlp2").strip()
    if model not in ARCHITECTURES:
        raise ConfigFileError(f"[experiment] model {model!r} not one of {sorted(ARCHITECTURES)}")
    file_seed = _take(exp, "seed", 0, "experiment")
    out_dir = exp.pop("out", "runs/default")
    if exp:
        raise ConfigFileError(f"[experiment] unknown key(s): {', '.join(sorted(exp))}")
    seed = file_seed if seed is None else seed
    out_path = Path(out) if out is not None else base / out_dir

    data = _fill(DataConfig, "data", sec["data"])
    if data.source == "idx":
        for key in IDX_KEYS:
            value = getattr(data, key)
            if not value:
                raise ConfigFileError(f"[data] {key} is required for source = idx")
            p = Path(value)
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ConfigFileError(f"[data] {key}: file not found: {p}")
            setattr(data, key, str(p))
    elif data.source == "synthetic":
        input_size = int(np.prod(ARCHITECTURES[model][0]))
        if data.feature_dim != input_size:
            raise ConfigFileError(f"[data] feature_dim {data.feature_dim} does not match {model} input size {input_size}")
    else:
        raise ConfigFileError(f"[data] source must be 'idx' or 'synthetic', got {data.source!r}")

    train = _fill(TrainConfig, "train", sec["train"], {"seed": seed})
    protect_values = sec["protect"]
    twin = _take(protect_values, "twin", False, "protect")
    rob_samples = _take(protect_values, "robustness_samples", 200, "protect")
    protect = ProtectOptions(_fill(TrainConfig, "protect", protect_values, {"seed": seed}), twin, rob_samples)
    attack_values = sec["attack"]
    deepfool_samples = _take(attack_values, "deepfool_samples", 100, "attack")
    attack = _fill(AttackConfig, "attack", attack_values, {"seed": seed})
    evaluate = _fill(EvaluateOptions, "evaluate", sec["evaluate"])
    if evaluate.samples < 0 or evaluate.deepfool_max_iter < 1:
        raise ConfigFileError("[evaluate] samples must be >= 0 and deepfool_max_iter >= 1")
    return ExperimentConfig(model, seed, out_path, data, train, protect, attack, deepfool_samples, evaluate)


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.data
    if d.source == "idx":
        train = load_idx_dataset(d.train_images, d.train_labels, "train")
        test = load_idx_dataset(d.test_images, d.test_labels, "test")
    else:
        full = synthetic_blobs(d.classes, d.per_class, d.feature_dim, d.spread, seed=cfg.seed)
        train, test = stratified_split(full, d.test_fraction, seed=cfg.seed)
    if d.train_limit:
        train = train.head(d.train_limit)
    if d.test_limit:
        test = test.head(d.test_limit)
    return train, test
