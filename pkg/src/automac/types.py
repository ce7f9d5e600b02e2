"""Shared domain types: grades, slices, templates, affinity triples, predictions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

EMBEDDING_DIM = 512
MIN_SIDE = 32
SCORE_SLACK = 1e-9


class AutomacError(Exception):
    """Base class for all package errors."""


class ConfigError(AutomacError, ValueError):
    pass


class DataError(AutomacError, ValueError):
    """Malformed input data: bad pixels, unknown labels, unreadable files."""


class ContractError(AutomacError):
    """A cross-artifact contract was violated (e.g. encoder fingerprint drift)."""


class MotionGrade(enum.IntEnum):
    NO_MOTION = 0
    SUBTLE_MOTION = 1
    SEVERE_MOTION = 2

    @property
    def label(self) -> str:
        return _GRADE_NAMES[self]

    @property
    def short(self) -> str:
        return _GRADE_SHORT[self]

    @classmethod
    def parse(cls, value: Any) -> "MotionGrade":
        if isinstance(value, MotionGrade):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            try:
                return cls(int(value))
            except ValueError:
                raise DataError(f"unknown motion grade {value!r}") from None
        key = str(value).strip()
        for grade in cls:
            if key in (grade.label, grade.name, grade.short):
                return grade
        raise DataError(f"unknown motion grade {value!r}")


_GRADE_NAMES = {
    MotionGrade.NO_MOTION: "NoMotion",
    MotionGrade.SUBTLE_MOTION: "SubtleMotion",
    MotionGrade.SEVERE_MOTION: "SevereMotion",
}
_GRADE_SHORT = {
    MotionGrade.NO_MOTION: "NoMo",
    MotionGrade.SUBTLE_MOTION: "SuMo",
    MotionGrade.SEVERE_MOTION: "SeMo",
}

GRADES: tuple[MotionGrade, ...] = tuple(MotionGrade)


class _LabelledEnum(str, enum.Enum):
    @classmethod
    def parse(cls, value: Any):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip())
        except ValueError:
            allowed = ", ".join(m.value for m in cls)
            raise DataError(
                f"unknown {cls.__name__.lower()} {value!r} (expected one of: {allowed})"
            ) from None


class Contrast(_LabelledEnum):
    T1W = "T1w"
    T2W = "T2w"
    PDW = "PDw"
    FLAIR = "FLAIR"


class Orientation(_LabelledEnum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"
    OBLIQUE = "oblique"


class Provenance(_LabelledEnum):
    REAL = "real"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class SliceRecord:
    id: str
    pixels: np.ndarray
    contrast: Contrast
    orientation: Orientation
    grade: MotionGrade | None = None
    provenance: Provenance = Provenance.REAL
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64, copy=True)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "contrast", Contrast.parse(self.contrast))
        object.__setattr__(self, "orientation", Orientation.parse(self.orientation))
        object.__setattr__(self, "provenance", Provenance.parse(self.provenance))
        if self.grade is not None:
            object.__setattr__(self, "grade", MotionGrade.parse(self.grade))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def stratum(self) -> tuple[Contrast, Orientation, MotionGrade]:
        if self.grade is None:
            raise DataError(f"record {self.id!r} has no grade")
        return (self.contrast, self.orientation, self.grade)


def validate(record: SliceRecord) -> SliceRecord:
    """Return ``record`` unchanged if it satisfies every slice invariant, else raise DataError."""
    if not isinstance(record, SliceRecord):
        raise DataError(f"expected SliceRecord, got {type(record).__name__}")
    if not record.id:
        raise DataError("slice id must be non-empty")
    px = record.pixels
    if px.ndim != 2:
        raise DataError(f"slice {record.id!r}: pixels must be 2-D, got shape {px.shape}")
    h, w = px.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise DataError(f"slice {record.id!r}: image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    if not np.all(np.isfinite(px)):
        raise DataError(f"slice {record.id!r}: pixels contain NaN or Inf")
    return record


def check_embedding(values: np.ndarray, dim: int = EMBEDDING_DIM) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape[-1] != dim:
        raise DataError(f"embedding length {arr.shape[-1]} != {dim}")
    if not np.all(np.isfinite(arr)):
        raise DataError("embedding contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class GradeTemplateSet:
    """One median template row per grade, bound to the encoder that produced it."""

    templates: np.ndarray
    encoder_fingerprint: str
    created_from: Mapping[MotionGrade, int]
    created_at: str = ""

    def __post_init__(self):
        t = np.array(self.templates, dtype=np.float32, copy=True)
        if t.ndim != 2 or t.shape[0] != len(GRADES):
            raise DataError(f"templates must be {len(GRADES)} x D, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise DataError("templates contain NaN or Inf")
        for g in GRADES:
            if not np.any(t[g]):
                raise DataError(f"template for {g.label} is the zero vector")
        if not self.encoder_fingerprint:
            raise DataError("encoder fingerprint must be non-empty")
        t.setflags(write=False)
        object.__setattr__(self, "templates", t)
        object.__setattr__(
            self, "created_from", {MotionGrade.parse(k): int(v) for k, v in self.created_from.items()}
        )

    def __getitem__(self, grade: MotionGrade) -> np.ndarray:
        return self.templates[int(grade)]


@dataclass(frozen=True)
class MoGrASTriple:
    scores: Mapping[MotionGrade, float]

    def __post_init__(self):
        if set(self.scores) != set(GRADES):
            raise DataError("a MoGrAS triple needs exactly one score per grade")
        clean = {}
        for g in GRADES:
            s = float(self.scores[g])
            if not (-1.0 - SCORE_SLACK <= s <= 1.0 + SCORE_SLACK):
                raise DataError(f"MoGrAS for {g.label} = {s!r} is outside [-1, 1]")
            clean[g] = min(1.0, max(-1.0, s))
        object.__setattr__(self, "scores", clean)

    def __getitem__(self, grade: MotionGrade) -> float:
        return self.scores[grade]

    def as_array(self) -> np.ndarray:
        return np.array([self.scores[g] for g in GRADES])

    @property
    def best(self) -> MotionGrade:
        return argmax_severe(self.as_array())


def argmax_severe(values) -> MotionGrade:
    """Argmax over grades; ties go to the more severe grade."""
    v = np.asarray(values, dtype=np.float64)
    top = np.flatnonzero(v == v.max())
    return MotionGrade(int(top[-1]))


@dataclass(frozen=True)
class GradePrediction:
    grade: MotionGrade
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=np.float64, copy=True)
        if p.shape != (len(GRADES),):
            raise DataError(f"expected {len(GRADES)} probabilities, got shape {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise DataError("probabilities must be nonnegative and sum to 1")
        if MotionGrade.parse(self.grade) != argmax_severe(p):
            raise DataError("grade does not match the argmax of probabilities")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "grade", MotionGrade.parse(self.grade))

    @classmethod
    def from_logits(cls, logits) -> "GradePrediction":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        return cls(argmax_severe(p), p)
