"""Run configuration: dataclass sections layered file < environment < flags.

Environment overrides look like ``TUBELOC_MIL__FOLDS=4`` (section, double
underscore, key). Values are parsed as JSON when possible, else kept as
strings. Unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

ENV_PREFIX = "TUBELOC_"


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


@dataclass
class TrackerSection:
    stride: float = 4.0
    C: float = 1.0
    suppression_iou: float = 0.3
    use_instance: bool = True
    warm_start: bool = True
    max_tubes: int | None = None


@dataclass
class CodebookSection:
    K: int = 16
    pca_factor: int = 2
    max_iter: int = 100
    max_samples: int = 20000


@dataclass
class MilSection:
    mode: str = "mil"
    classes: list = field(default_factory=list)  # empty: every label in the training split
    folds: int = 4
    iterations: int = 10
    hard_negative_rounds: int = 2
    C: float = 1.0


@dataclass
class DetectSection:
    windows: str = "default"
    alpha: float = 20.0
    stride: int = 10
    nms: bool = True
    nms_iou: float = 0.3


@dataclass
class EvalSection:
    theta: float = 0.5
    mode: str = "st"
    recall_mode: str = "trimmed"
    thetas: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    fpr_max: float = 0.6
    eleven_point: bool = False


@dataclass
class RunConfig:
    seed: int | None = None
    jobs: int = 1
    manifest: str | None = None
    world: dict | None = None  # world generator settings; when set, `run` generates data first
    tracker: TrackerSection = field(default_factory=TrackerSection)
    codebooks: CodebookSection = field(default_factory=CodebookSection)
    mil: MilSection = field(default_factory=MilSection)
    detect: DetectSection = field(default_factory=DetectSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is required (set it in the config file, TUBELOC_SEED or --seed)")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.mil.mode not in ("mil", "two-stage"):
            raise ConfigError(f"mil.mode must be 'mil' or 'two-stage', got {self.mil.mode!r}")
        if self.mil.folds < 1 or self.mil.iterations < 0 or self.mil.hard_negative_rounds < 0:
            raise ConfigError("mil.folds must be >= 1 and iterations, rounds >= 0")
        for name, v in (("tracker.C", self.tracker.C), ("mil.C", self.mil.C), ("tracker.stride", self.tracker.stride)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive")
        if self.codebooks.K < 1 or self.codebooks.pca_factor < 1:
            raise ConfigError("codebooks.K and codebooks.pca_factor must be >= 1")
        if self.eval.mode not in ("trimmed", "st", "daly") or self.eval.recall_mode not in ("trimmed", "st", "daly"):
            raise ConfigError("eval modes must be one of trimmed, st, daly")
        if not 0 <= self.eval.theta <= 1 or not 0 < self.eval.fpr_max <= 1:
            raise ConfigError("eval.theta must be in [0, 1] and eval.fpr_max in (0, 1]")
        if self.detect.alpha < 0 or self.detect.stride < 1:
            raise ConfigError("detect.alpha must be >= 0 and detect.stride >= 1")
        if self.world is not None:
            from tubeloc.synth import WorldConfig

            try:
                WorldConfig.from_dict(self.world).validate()
            except (TypeError, ValueError) as e:
                raise ConfigError(str(e)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every setting that can change outputs (``jobs`` cannot)."""
        body = self.to_dict()
        body.pop("jobs")
        return self.digest_of(body)

    @staticmethod
    def digest_of(body: dict) -> str:
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _section_types() -> dict[str, type]:
    return {f.name: f.default_factory for f in fields(RunConfig)
            if f.default_factory is not None and is_dataclass(f.default_factory)}


def _merge(cfg: RunConfig, data: Mapping[str, Any], origin: str) -> None:
    sections = _section_types()
    top = {f.name for f in fields(RunConfig)}
    for key, value in data.items():
        if key not in top:
            raise ConfigError(f"unknown config key {key!r} ({origin})")
        if key in sections:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {key!r} must be a table ({origin})")
            sec = getattr(cfg, key)
            known = {f.name for f in fields(sec)}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"unknown config key {key}.{k!r} ({origin})")
                setattr(sec, k, v)
        elif key == "world" and value is not None:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section 'world' must be a table ({origin})")
            cfg.world = {**(cfg.world or {}), **value}
        else:
            setattr(cfg, key, value)


def read_config_file(path) -> dict:
    p = Path(path)
    text = p.read_text()
    if p.suffix == ".json":
        return json.loads(text)
    import tomli

    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested dict from ``TUBELOC_*`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        if path == ["config"]:
            continue
        dst = out
        for part in path[:-1]:
            dst = dst.setdefault(part, {})
        # keys are case sensitive in a few places (C, K)
        dst[_restore_case(path)] = _parse_value(environ[name])
    return out


def _restore_case(path: list[str]) -> str:
    sections = _section_types()
    key = path[-1]
    if len(path) == 2 and path[0] in sections:
        for f in fields(sections[path[0]]):
            if f.name.lower() == key:
                return f.name
    return key


def parse_assignments(items) -> dict:
    """``section.key=value`` strings to a nested dict."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        dst = out
        for part in parts[:-1]:
            dst = dst.setdefault(part, {})
        dst[parts[-1]] = _parse_value(raw)
    return out


def load_config(path=None, flags: Mapping[str, Any] | None = None,
                environ: Mapping[str, str] | None = None, validate: bool = True) -> RunConfig:
    """Layer defaults < file < environment < flags and validate."""
    cfg = RunConfig()
    if path is not None:
        _merge(cfg, read_config_file(path), str(path))
    _merge(cfg, env_overrides(environ), "environment")
    if flags:
        _merge(cfg, flags, "command line")
    if validate:
        cfg.validate()
    return cfg


def config_from_dict(d: Mapping[str, Any]) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, d, "dict")
    return cfg.validate()
