"""Run configuration: a nested YAML/JSON document with every default echoed back."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from automac.encoder import EncoderConfig
from automac.ingestion import SplitSpec
from automac.motion_sim import GradeThresholds, MotionParams
from automac.training import AugmentConfig, TrainConfig
from automac.types import AutomacError, ConfigError


@dataclass
class DataSection:
    sources: str | None = None
    manifest: str | None = None
    train: str | None = None
    val: str | None = None
    test: str | None = None
    split_ratios: tuple[float, float, float] = (0.6, 0.1, 0.3)


@dataclass
class SimulatorSection:
    counts: tuple[int, int, int] = (300, 300, 300)
    subtle_min: float = 0.03
    severe_min: float = 0.15
    severe_max: float = 0.5
    max_rotation_deg: float = 6.0
    max_shift_px: float = 6.0
    n_motion_states: int = 2
    noise_std: float = 0.01
    image_format: str = "amac"
    phantom_size: int = 96


@dataclass
class EncoderSection:
    backbone: str = "resnet18"
    fc_widths: tuple[int, ...] = (512, 512)
    pretrained: bool = True
    final_relu: bool = False
    input_size: int = 224


@dataclass
class LossSection:
    temperature: float = 0.07


@dataclass
class AugmentSection:
    flip: bool = True
    max_rotation_deg: float = 10.0
    intensity_jitter: float = 0.1
    crop_scale: tuple[float, float] = (0.8, 1.0)


@dataclass
class TrainingSection:
    stage1_epochs: int = 50
    stage2_epochs: int = 30
    supervised_epochs: int = 50
    batch_size: int = 48
    lr: float = 1e-4
    head_lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "cosine"
    head_hidden: int | None = None
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class EvaluationSection:
    figures: bool = True
    tsne: bool = True
    normalized_templates: bool = False


@dataclass
class OutputSection:
    root: str = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def out_root(self) -> Path:
        return Path(self.output.root)

    def thresholds(self) -> GradeThresholds:
        return GradeThresholds(self.simulator.subtle_min, self.simulator.severe_min)

    def motion(self) -> MotionParams:
        s = self.simulator
        return MotionParams(0.0, s.max_rotation_deg, s.max_shift_px, s.n_motion_states)

    def split_spec(self, seed: int | None = None) -> SplitSpec:
        return SplitSpec(tuple(self.data.split_ratios), stage_seed(self.seed if seed is None else seed, "split"))

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(e.backbone, tuple(e.fc_widths), e.pretrained, e.final_relu, e.input_size)

    def train_config(self, method: str, checkpoint_dir: Path | None = None, seed: int | None = None) -> TrainConfig:
        t = self.training
        a = t.augment
        return TrainConfig(
            stage1_method=method,
            encoder=self.encoder_config(),
            stage1_epochs=t.stage1_epochs,
            stage2_epochs=t.stage2_epochs,
            supervised_epochs=t.supervised_epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            head_lr=t.head_lr,
            weight_decay=t.weight_decay,
            schedule=t.schedule,
            temperature=self.loss.temperature,
            head_hidden=t.head_hidden,
            augment=AugmentConfig(a.flip, a.max_rotation_deg, a.intensity_jitter, tuple(a.crop_scale)),
            seed=stage_seed(self.seed if seed is None else seed, "train"),
            checkpoint_dir=checkpoint_dir,
        )

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail before any long-running work."""
        try:
            self.thresholds()
            self.motion()
            self.split_spec()
            self.encoder_config()
            self.train_config("supcon")
        except AutomacError as exc:
            raise ConfigError(str(exc)) from None
        if len(self.simulator.counts) != 3 or any(int(c) < 0 for c in self.simulator.counts):
            raise ConfigError("simulator.counts must be three nonnegative integers")
        if self.simulator.image_format not in ("amac", "png"):
            raise ConfigError("simulator.image_format must be 'amac' or 'png'")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self


def stage_seed(seed: int, stage: str) -> int:
    """Derive an independent per-stage seed from the single top-level seed."""
    tag = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value or {}, f"{where}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Parse a YAML/JSON config; relative paths resolve against the config file's directory."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.resolve().parent
    cfg = _build(RunConfig, raw, "")
    for key, value in (overrides or {}).items():
        if value is not None:
            section, _, attr = key.rpartition(".")
            setattr(getattr(cfg, section) if section else cfg, attr, value)
    for name in ("sources", "manifest", "train", "val", "test"):
        value = getattr(cfg.data, name)
        if value is not None:
            setattr(cfg.data, name, str((base / value).resolve()))
    cfg.output.root = str((base / cfg.output.root).resolve())
    return cfg.validate()


def dump_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    return path
