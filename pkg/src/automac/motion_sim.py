"""Synthetic motion corruption by k-space phase-encode line substitution.

Stands in for expert-annotated clinical data: every generated slice carries the
grade implied by the fraction of k-space rows taken from rigidly moved copies
of the clean source. The grade thresholds are simulator configuration, not
clinical ground truth.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from automac.ingestion import Manifest, ManifestEntry, write_image, write_manifest
from automac.types import (
    Contrast,
    DataError,
    MotionGrade,
    Orientation,
    Provenance,
    SliceRecord,
    validate,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MotionParams:
    corrupt_fraction: float = 0.0
    max_rotation_deg: float = 6.0
    max_shift_px: float = 6.0
    n_motion_states: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise DataError(f"corrupt_fraction must lie in [0, 1], got {self.corrupt_fraction}")
        if self.max_rotation_deg < 0 or self.max_shift_px < 0:
            raise DataError("motion magnitudes must be nonnegative")
        if self.n_motion_states < 1:
            raise DataError("n_motion_states must be >= 1")


@dataclass(frozen=True)
class GradeThresholds:
    subtle_min: float = 0.03
    severe_min: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.subtle_min < self.severe_min <= 1.0:
            raise DataError(
                f"thresholds must satisfy 0 < subtle_min < severe_min <= 1, got "
                f"{self.subtle_min}, {self.severe_min}"
            )


def grade_from_params(params: MotionParams, thresholds: GradeThresholds) -> MotionGrade:
    f = params.corrupt_fraction
    if f < thresholds.subtle_min:
        return MotionGrade.NO_MOTION
    if f < thresholds.severe_min:
        return MotionGrade.SUBTLE_MOTION
    return MotionGrade.SEVERE_MOTION


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 32:
        raise DataError(f"expected a 2-D image of at least 32x32, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("image contains NaN or Inf")
    return img


def _shift_kspace(k: np.ndarray, dy: float, dx: float) -> np.ndarray:
    h, w = k.shape
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    return k * np.exp(-2j * np.pi * (ky * dy + kx * dx))


def motion_plan(shape: tuple[int, int], params: MotionParams):
    """Draw the seeded rigid transforms and the corrupted rows for one slice.

    Returns ``(transforms, rows, states)``: a list of ``(angle_deg, dy, dx)``,
    the replaced phase-encode row indices, and the motion state feeding each row.
    """
    h = shape[0]
    rng = np.random.default_rng(params.seed)
    # magnitudes in [max/2, max] with random sign, so every motion state actually moves
    def draw(limit: float) -> float:
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5 * limit, limit))

    transforms = [
        (draw(params.max_rotation_deg), draw(params.max_shift_px), draw(params.max_shift_px))
        for _ in range(params.n_motion_states)
    ]
    # any nonzero fraction corrupts at least one row, so the grade label is never vacuous
    n_rows = min(h, int(np.ceil(params.corrupt_fraction * h - 1e-9)))
    rows = np.sort(rng.choice(h, size=n_rows, replace=False))
    states = rng.integers(params.n_motion_states, size=n_rows)
    return transforms, rows, states


def moved_image(image: np.ndarray, angle_deg: float, dy: float, dx: float) -> np.ndarray:
    """Rigidly moved copy: in-plane rotation about the centre, then a sub-pixel shift."""
    rotated = ndimage.rotate(image, angle_deg, reshape=False, order=3, mode="constant")
    return np.real(np.fft.ifft2(_shift_kspace(np.fft.fft2(rotated), dy, dx)))


def simulate_motion(image, params: MotionParams, magnitude: bool = True) -> np.ndarray:
    """Replace a random subset of k-space rows with rows from moved copies of the image.

    Rows are the phase-encode direction. With ``magnitude=False`` the complex
    image is returned instead of its modulus (used for exactness checks).
    """
    img = _check_image(image)
    transforms, rows, states = motion_plan(img.shape, params)
    if rows.size == 0:
        return img.copy() if magnitude else img.astype(np.complex128)
    k = np.fft.fft2(img)
    for s, (angle, dy, dx) in enumerate(transforms):
        sel = rows[states == s]
        if sel.size == 0:
            continue
        k_moved = np.fft.fft2(moved_image(img, angle, dy, dx))
        k[sel] = k_moved[sel]
    out = np.fft.ifft2(k)
    return np.abs(out) if magnitude else out


# --------------------------------------------------------------------------
# clean sources
# --------------------------------------------------------------------------

# relative tissue intensities (background, skull/scalp, grey matter, white matter, csf, lesion)
_TISSUE = {
    Contrast.T1W: (0.0, 0.85, 0.55, 0.75, 0.15, 0.35),
    Contrast.T2W: (0.0, 0.45, 0.65, 0.45, 1.00, 0.90),
    Contrast.PDW: (0.0, 0.60, 0.80, 0.68, 0.90, 0.85),
    Contrast.FLAIR: (0.0, 0.50, 0.70, 0.55, 0.08, 1.00),
}


def _ellipse(shape, cy, cx, ry, rx, theta=0.0) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    y = (yy - cy) / (h / 2.0)
    x = (xx - cx) / (w / 2.0)
    c, s = np.cos(theta), np.sin(theta)
    u = c * x + s * y
    v = -s * x + c * y
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def make_phantom(
    contrast: Contrast | str, orientation: Orientation | str, size: int = 128, seed: int = 0
) -> np.ndarray:
    """Brain-like piecewise-smooth slice with contrast-dependent tissue intensities."""
    contrast = Contrast.parse(contrast)
    orientation = Orientation.parse(orientation)
    rng = np.random.default_rng(seed)
    bg, skull, gm, wm, csf, lesion = _TISSUE[contrast]
    shape = (size, size)
    c = size / 2.0
    aspect = {
        Orientation.AXIAL: (0.80, 0.68),
        Orientation.CORONAL: (0.78, 0.72),
        Orientation.SAGITTAL: (0.70, 0.84),
        Orientation.OBLIQUE: (0.76, 0.74),
    }[orientation]
    ry, rx = (a * rng.uniform(0.92, 1.05) for a in aspect)
    tilt = rng.uniform(-0.15, 0.15) + (0.5 if orientation is Orientation.OBLIQUE else 0.0)
    cy, cx = c + rng.uniform(-3, 3), c + rng.uniform(-3, 3)

    img = np.full(shape, bg)
    img[_ellipse(shape, cy, cx, ry, rx, tilt)] = skull
    img[_ellipse(shape, cy, cx, ry * 0.9, rx * 0.9, tilt)] = csf
    img[_ellipse(shape, cy, cx, ry * 0.86, rx * 0.86, tilt)] = gm
    img[_ellipse(shape, cy, cx, ry * 0.7, rx * 0.7, tilt)] = wm
    # gyral texture: grey-matter islands intruding into white matter
    for _ in range(rng.integers(8, 14)):
        ang = rng.uniform(0, 2 * np.pi)
        rr = rng.uniform(0.5, 0.66)
        py = cy + rr * ry * np.sin(ang) * c
        px = cx + rr * rx * np.cos(ang) * c
        img[_ellipse(shape, py, px, rng.uniform(0.03, 0.07), rng.uniform(0.03, 0.07), ang)] = gm
    for side in (-1, 1):
        img[_ellipse(shape, cy + rng.uniform(-2, 2), cx + side * size * 0.07,
                     rng.uniform(0.14, 0.22), rng.uniform(0.04, 0.07), side * 0.3)] = csf
    for _ in range(rng.integers(0, 4)):
        ang = rng.uniform(0, 2 * np.pi)
        rr = rng.uniform(0.1, 0.5)
        img[_ellipse(shape, cy + rr * ry * np.sin(ang) * c, cx + rr * rx * np.cos(ang) * c,
                     rng.uniform(0.02, 0.05), rng.uniform(0.02, 0.05))] = lesion
    img = ndimage.gaussian_filter(img, sigma=0.8)
    yy, xx = np.mgrid[0:size, 0:size] / size
    bias = 1.0 + 0.15 * (rng.uniform(-1, 1) * (yy - 0.5) + rng.uniform(-1, 1) * (xx - 0.5))
    return img * bias * 1000.0


def make_sources(
    n: int = 24, size: int = 128, seed: int = 0
) -> list[SliceRecord]:
    """``n`` clean phantom slices cycling through contrasts and orientations."""
    contrasts = list(Contrast)
    orientations = [Orientation.AXIAL, Orientation.CORONAL, Orientation.SAGITTAL,
                    Orientation.AXIAL, Orientation.CORONAL, Orientation.OBLIQUE]
    out = []
    for i in range(n):
        c = contrasts[i % len(contrasts)]
        o = orientations[(i // len(contrasts)) % len(orientations)]
        out.append(
            SliceRecord(
                id=f"source_{i:03d}",
                pixels=make_phantom(c, o, size=size, seed=seed * 100_003 + i),
                contrast=c,
                orientation=o,
                grade=MotionGrade.NO_MOTION,
                provenance=Provenance.SYNTHETIC,
            )
        )
    return out


# --------------------------------------------------------------------------
# dataset generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulatedSlice:
    image_path: str
    source_id: str
    grade: MotionGrade
    params: MotionParams
    noise_std: float


def _band(grade: MotionGrade, thresholds: GradeThresholds, severe_max: float) -> tuple[float, float]:
    if grade is MotionGrade.NO_MOTION:
        return (0.0, 0.0)
    if grade is MotionGrade.SUBTLE_MOTION:
        return (thresholds.subtle_min, thresholds.severe_min)
    return (thresholds.severe_min, max(severe_max, thresholds.severe_min))


def generate_dataset(
    sources: Sequence[SliceRecord],
    per_grade_counts: Sequence[int],
    thresholds: GradeThresholds,
    seed: int,
    out_dir: str | Path,
    motion: MotionParams = MotionParams(),
    severe_max: float = 0.4,
    noise_std: float = 0.01,
    image_format: str = "amac",
) -> tuple[Manifest, list[SimulatedSlice]]:
    """Write a labelled synthetic dataset under ``out_dir`` and return its manifest.

    Sources are visited round-robin. Each slice draws its corrupt fraction
    uniformly in its grade's band (zero for NoMotion) and gets independent
    Gaussian noise of ``noise_std`` times the source maximum, so NoMotion
    slices of one source are not pixel-identical. Alongside ``manifest.csv`` a
    ``params.jsonl`` records the exact simulation parameters of every row.
    """
    counts = [int(c) for c in per_grade_counts]
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise DataError(f"per_grade_counts must be three nonnegative integers, got {per_grade_counts}")
    if sum(counts) and not sources:
        raise DataError("no source images given")
    for s in sources:
        validate(s)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries, sims = [], []
    idx = 0
    for grade in MotionGrade:
        lo, hi = _band(grade, thresholds, severe_max)
        for _ in range(counts[grade]):
            rng = np.random.default_rng([seed, idx])
            src = sources[idx % len(sources)]
            frac = 0.0 if hi == lo == 0.0 else float(rng.uniform(lo, hi))
            params = replace(motion, corrupt_fraction=frac, seed=int(rng.integers(2**63)))
            assert grade_from_params(params, thresholds) is grade
            img = simulate_motion(src.pixels, params)
            scale = float(np.abs(src.pixels).max()) or 1.0
            img = img + rng.normal(0.0, noise_std * scale, size=img.shape)
            rel = f"slices/{idx:05d}_{grade.short}.{image_format}"
            write_image(out_dir / rel, img)
            entries.append(ManifestEntry(rel, src.contrast, src.orientation, grade, Provenance.SYNTHETIC))
            sims.append(SimulatedSlice(rel, src.id, grade, params, noise_std))
            idx += 1

    write_manifest(entries, out_dir / "manifest.csv")
    with (out_dir / "params.jsonl").open("w", encoding="utf-8") as fh:
        for s in sims:
            row = {"image_path": s.image_path, "source_id": s.source_id, "grade": s.grade.label,
                   "noise_std": s.noise_std, **asdict(s.params)}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("wrote %d synthetic slices to %s", len(entries), out_dir)
    return Manifest(tuple(entries), out_dir), sims
