"""Experiment configuration: strict JSON in, canonical JSON out."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from . import augment
from .datasets import GlyphSpec
from .meta import MetaConfig, SnapshotProtocol
from .models import ModelSpec


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "conv_small"
    filters: Union[list, None] = None
    hidden: list = field(default_factory=lambda: [64])


@dataclass
class DatasetConfig:
    kind: str = "glyphs"
    classes: int = 100
    instances: int = 20
    image_size: int = 14
    seed: int = 0
    path: Union[str, None] = None
    layout: str = "per_class_subdirs"
    split: list = field(default_factory=lambda: [0.74, 0.06, 0.2])
    split_seed: int = 0


@dataclass
class EvalConfig:
    n_tasks: int = 500
    adapt_steps: int = 100
    lr: Union[float, None] = None  # None: use inner_lr
    seed: int = 1


@dataclass
class SnapshotConfig:
    every: int = 200
    n_tasks: int = 100
    adapt_steps: int = 10


@dataclass
class ExperimentConfig:
    mode: str = "umtra"
    n_way: int = 5
    k_shot_target: int = 1
    meta_batch: int = 8
    inner_updates: int = 1
    inner_lr: float = 0.2
    outer_lr: float = 0.02
    meta_iterations: int = 2000
    grad_mode: str = "second_order"
    aug: Union[str, dict] = "zero_shift"
    zero_rate: float = 0.4
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    snapshot: SnapshotConfig = field(default_factory=SnapshotConfig)
    checkpoint_every: int = 0
    output_dir: str = "runs/default"
    emit_plots: bool = False

    # -- derived objects --------------------------------------------------

    def augmentation(self) -> augment.Compose:
        if isinstance(self.aug, str):
            return augment.preset(self.aug, self.zero_rate)
        spec = augment.from_dict(self.aug)
        return spec if isinstance(spec, augment.Compose) else augment.Compose((spec,))

    def aug_label(self) -> str:
        return self.aug if isinstance(self.aug, str) else "custom"

    def meta_config(self) -> MetaConfig:
        return MetaConfig(
            n_way=self.n_way,
            k_shot_target=self.k_shot_target,
            meta_batch=self.meta_batch,
            inner_updates=self.inner_updates,
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            meta_iterations=self.meta_iterations,
            grad_mode=self.grad_mode,
            mode=self.mode,
            aug=self.augmentation(),
            seed=self.seed,
        )

    @property
    def eval_lr(self) -> float:
        return self.inner_lr if self.eval.lr is None else self.eval.lr

    def model_spec(self, image_shape) -> ModelSpec:
        filters = tuple(self.model.filters) if self.model.filters is not None else None
        return ModelSpec(self.model.kind, tuple(image_shape), self.n_way, filters, tuple(self.model.hidden))

    def glyph_spec(self) -> GlyphSpec:
        d = self.dataset
        return GlyphSpec(classes=d.classes, instances=d.instances, image_size=d.image_size, seed=d.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self, indent: int | None = 2) -> str:
        return canonical_json(self.to_dict(), indent)

    def digest(self) -> str:
        """Run identity: the canonical config minus where its outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(canonical_json(d, None).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with dotted-key overrides applied, e.g. ``{"eval.n_tasks": 10}``."""
        d = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"override {key!r}: unknown field")
            node[parts[-1]] = value
        return from_dict(d)


def canonical_json(obj: Any, indent: int | None = 2) -> str:
    seps = (",", ":") if indent is None else (",", ": ")
    return json.dumps(obj, sort_keys=True, indent=indent, separators=seps, allow_nan=False)


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    if not m:
        return ""
    return f" (line {text.count(chr(10), 0, m.start()) + 1})"


def _coerce(tp, value, where: str, text: str | None):
    key = where.rsplit(".", 1)[-1]
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected an object")
        return _build(tp, value, where, text)
    if origin is Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where, text)
            except ConfigError:
                continue
        raise ConfigError(f"{where}{_line_of(text, key)}: unexpected value {value!r}")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected a list, got {value!r}")
        return list(value)
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}{_line_of(text, key)}: expected an object, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str, text: str | None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(f"{where}{_line_of(text, unknown[0])}: unknown key")
    kwargs = {}
    for name, value in data.items():
        where = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(hints[name], value, where, text)
    return cls(**kwargs)


def from_dict(data: dict, text: str | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "", text)
    validate(cfg, text)
    return cfg


def validate(cfg: ExperimentConfig, text: str | None = None) -> None:
    try:
        cfg.meta_config()
        if cfg.dataset.kind not in ("glyphs", "dir"):
            raise ConfigError(f"dataset.kind must be 'glyphs' or 'dir', got {cfg.dataset.kind!r}")
        if cfg.dataset.kind == "dir" and not cfg.dataset.path:
            raise ConfigError("dataset.path is required when dataset.kind is 'dir'")
        if cfg.eval.n_tasks < 1 or cfg.eval.adapt_steps < 0 or cfg.eval_lr <= 0:
            raise ConfigError("eval needs n_tasks >= 1, adapt_steps >= 0 and lr > 0")
        if cfg.snapshot.every < 0 or cfg.snapshot.n_tasks < 1:
            raise ConfigError("snapshot.every must be >= 0 and snapshot.n_tasks >= 1")
        if cfg.meta_iterations < 0:
            raise ConfigError("meta_iterations must be >= 0")
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return from_dict(data, text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def snapshot_protocol(cfg: ExperimentConfig, val_dataset) -> SnapshotProtocol | None:
    if cfg.snapshot.every == 0 or val_dataset is None or len(val_dataset.classes()) < cfg.n_way:
        return None
    return SnapshotProtocol(
        val_dataset,
        every=cfg.snapshot.every,
        n_tasks=cfg.snapshot.n_tasks,
        adapt_steps=cfg.snapshot.adapt_steps,
        lr=cfg.eval_lr,
        k_shot=cfg.k_shot_target,
    )
