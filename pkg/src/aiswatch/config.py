"""Declarative engine configuration: a single YAML document whose every
value has a default and can be overridden by a CLI flag."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .changepoint import CpdConfig
from .checkpoint import load_checkpoint
from .engine import (
    DEFAULT_ENTITY_MIN_CONTEXT,
    DEFAULT_ENTITY_REFRESH,
    DEFAULT_QUEUE_DEPTH,
    Engine,
)
from .features import FeatureConfig
from .postprocess import GeoFenceSet, PostProcessConfig
from .trackstore import TrackStore, WINDOW_MAX_MESSAGES, WINDOW_MAX_SPAN_S


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or missing referenced files."""


@dataclass(slots=True)
class EngineConfig:
    activity_checkpoint: str | None = None
    entity_checkpoint: str | None = None
    fences: str | None = None
    input_format: str = "csv"
    entity_min_context: int = DEFAULT_ENTITY_MIN_CONTEXT
    entity_refresh_increment: int = DEFAULT_ENTITY_REFRESH
    metrics_port: int | None = None
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    store_max_messages: int = WINDOW_MAX_MESSAGES
    store_max_span_s: int = WINDOW_MAX_SPAN_S
    cpd: CpdConfig = field(default_factory=CpdConfig)
    post: PostProcessConfig = field(default_factory=PostProcessConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.input_format not in ("csv", "jsonl"):
            raise ConfigError(f"input_format must be csv or jsonl, "
                              f"got {self.input_format!r}")
        if self.entity_min_context < 1:
            raise ConfigError("entity_min_context must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        data = dict(data or {})
        kwargs = {}
        nested = {"cpd": CpdConfig, "postprocess": PostProcessConfig,
                  "features": FeatureConfig}
        for key, ctor in nested.items():
            sub = data.pop(key, None)
            if sub is not None:
                if not isinstance(sub, dict):
                    raise ConfigError(f"{key} section must be a mapping")
                try:
                    built = ctor(**sub)
                except TypeError as exc:
                    raise ConfigError(f"bad {key} section: {exc}") from exc
                kwargs["post" if key == "postprocess" else key] = built
        known = {f for f in cls.__dataclass_fields__
                 if f not in ("cpd", "post", "features")}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path: str | Path) -> "EngineConfig":
        with Path(path).open(encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "EngineConfig":
        """Apply non-None overrides (flag values) on top of this config."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **changes) if changes else self

    def build_engine(self) -> Engine:
        if self.activity_checkpoint is None:
            raise ConfigError("an activity checkpoint is required")
        activity = _load(self.activity_checkpoint)
        entity = _load(self.entity_checkpoint) if self.entity_checkpoint else None
        post = self.post
        if self.fences:
            post = post.with_fences(GeoFenceSet.from_file(self.fences))
        store = TrackStore(max_messages=self.store_max_messages,
                           max_span_s=self.store_max_span_s)
        return Engine(
            activity=activity,
            entity=entity,
            cpd=self.cpd,
            post=post,
            entity_min_context=self.entity_min_context,
            entity_refresh_increment=self.entity_refresh_increment,
            store=store,
        )


def _load(path: str):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)
