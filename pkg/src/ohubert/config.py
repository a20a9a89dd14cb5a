"""Unified run configuration: one JSON document, every field defaulted."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPolicy
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    n_contents: int = 8
    utterances_per_speaker: int = 25
    duration_s: float = 2.5
    sample_rate: int = 16000
    seed: int = 7


@dataclass
class LabelConfig:
    n_mels: int = 40
    window: int = 400
    hop: int = 320
    iters: int = 50
    seed: int = 0


@dataclass
class TrainConfig:
    steps: int = 500
    batch_sources: int = 8
    segment_frames: int = 50
    lr: float = 5e-4
    warmup_steps: int | None = None  # default: 10% of steps
    alpha: float = 10.0
    simclr_temperature: float = 0.1
    am_margin: float = 0.2
    am_scale: float = 30.0
    usp_negatives: int = 16
    queue_capacity: int = 1024
    queue_sample: int = 64
    queue_activation_step: int = 500
    orth_mode: str = "literal"
    orth_eps: float = 1e-2
    grad_clip: float | None = 10.0
    seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 100
    dev_fraction: float = 0.1
    dev_every: int = 50
    float64: bool = False
    manifest: str = ""
    labels: str = ""

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("train.steps must be > 0")
        if self.warmup > self.steps:
            raise ConfigError("train.warmup_steps must not exceed train.steps")
        if self.orth_mode not in ("literal", "distinct"):
            raise ConfigError(f"train.orth_mode must be literal|distinct, got {self.orth_mode!r}")

    @property
    def warmup(self) -> int:
        return self.warmup_steps if self.warmup_steps is not None else max(1, self.steps // 10)


@dataclass
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.5
    seed: int = 0
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    gl_per_layer: bool = False
    r_seeds: int = 100


SECTIONS = {
    "corpus": CorpusConfig,
    "augment": AugmentPolicy,
    "labels": LabelConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) and cls is AugmentPolicy else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    labels: LabelConfig = field(default_factory=LabelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = data or {}
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        parts = {}
        for name, sect in SECTIONS.items():
            sub = data.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name} must be an object")
            parts[name] = _build(sect, sub, name)
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def override(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
        data = self.to_dict()
        for item in assignments or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value: {item!r}")
            path, raw = item.split("=", 1)
            section, key = path.split(".", 1)
            if section not in data:
                raise ConfigError(f"unknown config section: {section}")
            if key not in data[section]:
                raise ConfigError(f"unknown key in {section}: {key}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            data[section][key] = value
        return RunConfig.from_dict(data)
