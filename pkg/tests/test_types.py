import numpy as np
import pytest

from automac.types import (
    GRADES,
    Contrast,
    DataError,
    GradePrediction,
    GradeTemplateSet,
    MoGrASTriple,
    MotionGrade,
    SliceRecord,
    validate,
)
from conftest import make_record


class TestMotionGrade:
    def test_three_ordered_members(self):
        assert list(MotionGrade) == [MotionGrade.NO_MOTION, MotionGrade.SUBTLE_MOTION, MotionGrade.SEVERE_MOTION]
        assert MotionGrade.NO_MOTION < MotionGrade.SUBTLE_MOTION < MotionGrade.SEVERE_MOTION

    @pytest.mark.parametrize("g", list(MotionGrade))
    def test_name_round_trip(self, g):
        assert MotionGrade.parse(g.label) is g
        assert MotionGrade.parse(g.short) is g
        assert MotionGrade.parse(int(g)) is g

    def test_unknown(self):
        with pytest.raises(DataError):
            MotionGrade.parse("Mild")
        with pytest.raises(DataError):
            MotionGrade.parse(3)


class TestValidate:
    def test_well_formed_axial_t1w(self):
        rec = make_record()
        assert validate(rec) is rec

    def test_nan_pixel(self):
        px = np.ones((40, 40))
        px[3, 7] = np.nan
        with pytest.raises(DataError, match="NaN"):
            validate(SliceRecord("x", px, "T1w", "axial"))

    def test_undersized(self):
        with pytest.raises(DataError, match="smaller"):
            validate(SliceRecord("x", np.ones((16, 16)), "T1w", "axial"))

    def test_unknown_enum_rejected_at_construction(self):
        with pytest.raises(DataError, match="T1rho"):
            SliceRecord("x", np.ones((40, 40)), "T1rho", "axial")
        with pytest.raises(DataError):
            SliceRecord("x", np.ones((40, 40)), "T1w", "diagonal")

    def test_pixels_are_immutable_copy(self):
        px = np.ones((40, 40))
        rec = SliceRecord("x", px, Contrast.FLAIR, "sagittal")
        px[0, 0] = 5
        assert rec.pixels[0, 0] == 1
        with pytest.raises(ValueError):
            rec.pixels[0, 0] = 3


class TestMoGrASTriple:
    def test_clamps_tiny_overshoot(self):
        t = MoGrASTriple({g: 1 + 5e-10 for g in GRADES})
        assert all(t[g] == 1.0 for g in GRADES)
        t = MoGrASTriple({g: -1 - 5e-10 for g in GRADES})
        assert all(t[g] == -1.0 for g in GRADES)

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            MoGrASTriple({MotionGrade.NO_MOTION: 1.01, MotionGrade.SUBTLE_MOTION: 0, MotionGrade.SEVERE_MOTION: 0})

    def test_needs_all_grades(self):
        with pytest.raises(DataError):
            MoGrASTriple({MotionGrade.NO_MOTION: 0.5})


class TestGradePrediction:
    def test_from_logits(self):
        p = GradePrediction.from_logits([0.1, 2.0, -1.0])
        assert p.grade is MotionGrade.SUBTLE_MOTION
        assert p.probabilities.sum() == pytest.approx(1.0, abs=1e-12)

    def test_tie_goes_to_more_severe(self):
        assert GradePrediction.from_logits([1.0, 1.0, 0.0]).grade is MotionGrade.SUBTLE_MOTION
        assert GradePrediction.from_logits([2.0, 0.0, 2.0]).grade is MotionGrade.SEVERE_MOTION
        assert GradePrediction.from_logits([0.0, 0.0, 0.0]).grade is MotionGrade.SEVERE_MOTION

    def test_inconsistent_grade_rejected(self):
        with pytest.raises(DataError):
            GradePrediction(MotionGrade.NO_MOTION, np.array([0.1, 0.8, 0.1]))

    def test_probabilities_must_sum_to_one(self):
        with pytest.raises(DataError):
            GradePrediction(MotionGrade.SUBTLE_MOTION, np.array([0.1, 0.8, 0.2]))


class TestTemplateSet:
    def test_zero_row_rejected(self):
        t = np.ones((3, 8))
        t[1] = 0
        with pytest.raises(DataError, match="SubtleMotion"):
            GradeTemplateSet(t, "abc", {g: 1 for g in GRADES})

    def test_fingerprint_required(self):
        with pytest.raises(DataError):
            GradeTemplateSet(np.ones((3, 8)), "", {g: 1 for g in GRADES})
