"""Experiment configuration: one JSON document governs every tunable.

The document mirrors :class:`ExperimentConfig`::

    {
      "seed": 0, "folds": 10, "output_dir": "runs/default", "dataset": null,
      "phantom": {...PhantomSpec fields...},
      "slice_stream": {"kind": "slice", "input_size": 64, "widths": [...], "blocks": [...]},
      "patch_stream": {...},
      "stage1": {...TrainConfig fields...}, "stage2": {...}, "scratch": {...},
      "svm": {"c_grid": [0.1, 1.0, 10.0], "iterations": 100000},
      "fusion": {"alpha": 0.75, "step": 0.05}
    }

Missing keys take their defaults; unknown keys are an error. ``dataset``
names a directory written by ``kampnet generate``; when null, phantoms are
generated in memory from ``phantom``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .dataset import PhantomSpec
from .dsn import StreamConfig, TrainConfig, default_patch_config, default_slice_config


class ConfigError(ValueError):
    pass


@dataclass
class SvmConfig:
    c_grid: tuple = (0.1, 1.0, 10.0)
    iterations: int = 100_000

    def __post_init__(self):
        self.c_grid = tuple(float(c) for c in self.c_grid)
        if not self.c_grid or min(self.c_grid) <= 0:
            raise ValueError("c_grid must hold positive values")


@dataclass
class FusionConfig:
    alpha: float = 0.75       # reported fixed-alpha fusion and the tie-break preference
    step: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("fusion alpha must lie in [0, 1]")


@dataclass
class ExperimentConfig:
    seed: int = 0
    folds: int = 10
    output_dir: str = "runs/default"
    dataset: str | None = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    slice_stream: StreamConfig = field(default_factory=default_slice_config)
    patch_stream: StreamConfig = field(default_factory=default_patch_config)
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig = field(default_factory=TrainConfig)
    scratch: TrainConfig = field(default_factory=TrainConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring ``output_dir``."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            lines = text.splitlines()
            context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}: {context.strip()!r}") from exc
        return cls.from_dict(d)


_NESTED = {
    "phantom": PhantomSpec, "slice_stream": StreamConfig, "patch_stream": StreamConfig,
    "stage1": TrainConfig, "stage2": TrainConfig, "scratch": TrainConfig,
    "svm": SvmConfig, "fusion": FusionConfig,
}


def _build(cls, d, where):
    label = where.rstrip(".") or "config"
    if not isinstance(d, dict):
        raise ConfigError(f"{label}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{label}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get(k) if cls is ExperimentConfig else None
        kwargs[k] = _build(sub, v, f"{where}{k}.") if sub else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from exc


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``dotted.key=value`` strings; values parse as JSON, else as text."""
    d = config.to_dict()
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ presets

def default_config() -> ExperimentConfig:
    """Desk-scale geometry with the reference optimizer schedule (lr 1e-5, 200 epochs)."""
    return ExperimentConfig()


def full_scale_config() -> ExperimentConfig:
    """Full-size geometry: 512 px slices, 161 px ROI, 224 px inputs, 2048 + 512 features."""
    return ExperimentConfig(
        output_dir="runs/full-scale",
        phantom=PhantomSpec(size=512, depth=40),
        slice_stream=StreamConfig("slice", 224, (256, 512, 1024, 2048), (3, 4, 6, 3)),
        patch_stream=StreamConfig("patch", 224, (64, 128, 256, 512), (3, 4, 6, 3)),
    )


def strong_signal_config() -> ExperimentConfig:
    """Small, fast cohort where calcification nearly separates the classes.

    Every deceased phantom carries a (larger, brighter) calcification and one
    survivor in five carries a smaller one, so the image streams reach high
    but imperfect AUC in a few epochs; clinical effects keep their default
    (moderate) sizes. The learning rate is raised and the epoch budget cut so
    a 10-fold run fits in minutes on one core.
    """
    phantom = PhantomSpec(seed=1, subjects=180, size=64, depth=6, calc_prob=0.2, calc_prob_effect=0.8,
                          calc_radius=0.025, calc_radius_effect=0.01)
    fast = dict(lr=1e-3, max_epochs=4)
    return ExperimentConfig(
        seed=0,
        output_dir="runs/strong-signal",
        phantom=phantom,
        slice_stream=StreamConfig("slice", 32, (16, 32, 64), (1, 1, 1)),
        patch_stream=StreamConfig("patch", 24, (16, 32), (1, 1)),
        stage1=TrainConfig(**fast),
        stage2=TrainConfig(**fast),
        scratch=TrainConfig(**fast),
    )


def null_config() -> ExperimentConfig:
    """The strong-signal setup with every effect size set to zero."""
    cfg = strong_signal_config()
    cfg.phantom = cfg.phantom.null()
    cfg.output_dir = "runs/null"
    return cfg


PRESETS = {
    "default": default_config,
    "full-scale": full_scale_config,
    "strong-signal": strong_signal_config,
    "null": null_config,
}


def load_config(path=None, preset=None, overrides=()) -> ExperimentConfig:
    if path is not None and preset is not None:
        raise ConfigError("give either a config file or a preset, not both")
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            cfg = ExperimentConfig.from_json(text)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        name = preset or "default"
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        cfg = PRESETS[name]()
    return apply_overrides(cfg, overrides)
