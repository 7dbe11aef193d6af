"""Run configuration: sections, YAML loading, overrides, seeds, hashes.

A config is a tree of dataclass sections. Stage seeds are derived from the
master seed by hashing, so stages draw from independent streams, and every
stage's parameter subset has a stable content hash used to detect stale
artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError
from .scenes import SceneConfig


@dataclass
class DatasetSection:
    height: int = 96
    width: int = 96
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 8
    max_size: int = 40
    variants_per_instance: int = 8
    distractors: int = 24
    pixel_noise: float = 0.03
    objectness_noise: float = 0.05
    n_train: int = 200
    n_val: int = 100


@dataclass
class ClassifierSection:
    window: int = 3
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8


@dataclass
class PseudoSection:
    tau: float = 0.5
    max_peaks: int = 8


@dataclass
class SegmenterSection:
    lr: float = 0.005
    momentum: float = 0.5
    epochs: int = 30
    roi_per_image: int = 64
    jitter_per_target: int = 3
    freeze_pseudo_masks: bool = False
    score_min: float = 0.5
    mask_threshold: float = 0.5
    nms_iou: float = 0.5


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    pseudo: PseudoSection = field(default_factory=PseudoSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)

    def validate(self) -> None:
        try:
            self.scene_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        d = self.dataset
        if d.n_train < 1 or d.n_val < 1:
            raise ConfigError("n_train and n_val must be at least 1")
        c = self.classifier
        if c.window < 3 or c.window % 2 == 0:
            raise ConfigError("classifier.window must be odd and >= 3")
        if c.lr <= 0 or c.momentum < 0 or c.momentum >= 1:
            raise ConfigError("classifier optimizer settings out of range")
        if c.epochs < 0 or c.batch_size < 1:
            raise ConfigError("classifier schedule out of range")
        p = self.pseudo
        if not 0 < p.tau <= 1:
            raise ConfigError("pseudo.tau must be in (0, 1]")
        if p.max_peaks < 1:
            raise ConfigError("pseudo.max_peaks must be at least 1")
        s = self.segmenter
        if s.lr <= 0 or s.momentum < 0 or s.momentum >= 1 or s.epochs < 0:
            raise ConfigError("segmenter optimizer settings out of range")
        if s.roi_per_image < 1 or s.jitter_per_target < 0:
            raise ConfigError("segmenter RoI settings out of range")
        for name in ("score_min", "mask_threshold", "nms_iou"):
            v = getattr(s, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"segmenter.{name} must be in [0, 1]")

    def scene_config(self) -> SceneConfig:
        d = self.dataset
        return SceneConfig(height=d.height, width=d.width,
                           num_classes=d.num_classes,
                           min_objects=d.min_objects,
                           max_objects=d.max_objects, min_size=d.min_size,
                           max_size=d.max_size,
                           variants_per_instance=d.variants_per_instance,
                           distractors=d.distractors,
                           pixel_noise=d.pixel_noise,
                           objectness_noise=d.objectness_noise,
                           seed=stage_seed(self.seed, "dataset"))


_SECTIONS = ("dataset", "classifier", "pseudo", "segmenter")


def default_config() -> PipelineConfig:
    return PipelineConfig()


def _coerce(value, target_type, where: str):
    """Turn a YAML or command-line value into the field's declared type."""
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        try:
            out = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        if isinstance(value, float) and value != out:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return out
    if target_type is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type")


def _set_field(config: PipelineConfig, path: str, value) -> None:
    parts = path.split(".")
    if len(parts) == 1:
        target, name = config, parts[0]
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        target, name = getattr(config, parts[0]), parts[1]
    else:
        raise ConfigError(f"unknown config key {path!r}")
    if name in _SECTIONS or not any(f.name == name for f in fields(target)):
        raise ConfigError(f"unknown config key {path!r}")
    setattr(target, name, _coerce(value, type(getattr(target, name)), path))


def apply_overrides(config: PipelineConfig, overrides) -> None:
    """Apply KEY=VALUE strings with dotted section paths."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        path, raw = item.split("=", 1)
        _set_field(config, path.strip(), raw.strip())


def load_config(path=None) -> PipelineConfig:
    """Build a config from defaults, optionally updated from a YAML file."""
    config = default_config()
    if path is None:
        return config
    try:
        raw = yaml.safe_load(open(path)) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            for sub, v in value.items():
                _set_field(config, f"{key}.{sub}", v)
        else:
            _set_field(config, key, value)
    return config


def config_to_dict(config: PipelineConfig) -> dict:
    return asdict(config)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(config: PipelineConfig) -> str:
    d = config_to_dict(config)
    d.pop("out")  # where a run lives does not change what it computes
    return sha256_hex(canonical_json(d))


def stage_seed(master_seed: int, stage: str) -> int:
    """Independent per-stage seed derived from the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def stage_hash(stage: str, params: dict, parents: list[str]) -> str:
    """Content hash of a stage: its parameters plus its parents' hashes."""
    return sha256_hex(canonical_json({"stage": stage, "params": params,
                                      "parents": list(parents)}))
