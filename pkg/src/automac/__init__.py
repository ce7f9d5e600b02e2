"""Motion-artifact grading and per-grade affinity scoring for 2-D MR slices."""

from automac.types import (
    Contrast,
    GradePrediction,
    GradeTemplateSet,
    MoGrASTriple,
    MotionGrade,
    Orientation,
    Provenance,
    SliceRecord,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "Contrast",
    "GradePrediction",
    "GradeTemplateSet",
    "MoGrASTriple",
    "MotionGrade",
    "Orientation",
    "Provenance",
    "SliceRecord",
    "validate",
]
