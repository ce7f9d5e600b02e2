"""Manifest I/O, slice image readers/writers, preprocessing and stratified splitting."""

from __future__ import annotations

import csv
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

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

MANIFEST_HEADER = ("image_path", "contrast", "orientation", "grade", "provenance")
AMAC_MAGIC = b"AMAC"
DEFAULT_INPUT_SIZE = 224


# --------------------------------------------------------------------------
# raster I/O
# --------------------------------------------------------------------------

def read_image(path: str | Path) -> np.ndarray:
    """Read a grayscale slice as float64 from a 16-bit/8-bit PNG or an AMAC raw file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".amac":
        raw = path.read_bytes()
        if len(raw) < 12 or raw[:4] != AMAC_MAGIC:
            raise DataError(f"{path}: missing AMAC header")
        h, w = struct.unpack("<II", raw[4:12])
        body = raw[12:]
        if len(body) != 4 * h * w:
            raise DataError(f"{path}: expected {h}x{w} float32 payload, got {len(body)} bytes")
        return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
    if suffix in (".png", ".tif", ".tiff"):
        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L", "F"):
                im = im.convert("L")
            return np.asarray(im, dtype=np.float64)
    raise DataError(f"{path}: unsupported image format {suffix!r}")


def write_image(path: str | Path, pixels: np.ndarray) -> Path:
    """Write a slice. ``.amac`` stores float32 exactly; ``.png`` rescales to the 16-bit range."""
    path = Path(path)
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2:
        raise DataError(f"expected a 2-D image, got shape {px.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    if suffix == ".amac":
        h, w = px.shape
        path.write_bytes(AMAC_MAGIC + struct.pack("<II", h, w) + px.astype("<f4").tobytes())
    elif suffix == ".png":
        lo, hi = float(px.min()), float(px.max())
        scaled = np.zeros_like(px) if hi == lo else (px - lo) / (hi - lo) * 65535.0
        Image.fromarray(np.round(scaled).astype(np.uint16)).save(path)
    else:
        raise DataError(f"{path}: unsupported image format {suffix!r}")
    return path


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    contrast: Contrast
    orientation: Orientation
    grade: MotionGrade | None
    provenance: Provenance


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    root: Path

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.image_path)
        return p if p.is_absolute() else self.root / p

    def records(self) -> list[SliceRecord]:
        return [
            validate(
                SliceRecord(
                    id=e.image_path,
                    pixels=read_image(self.resolve(e)),
                    contrast=e.contrast,
                    orientation=e.orientation,
                    grade=e.grade,
                    provenance=e.provenance,
                )
            )
            for e in self.entries
        ]


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty manifest")
    header = tuple(c.strip() for c in rows[0])
    if header != MANIFEST_HEADER:
        raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
    if len(rows) == 1:
        raise DataError(f"{path}: empty manifest")
    root = path.parent
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise DataError(f"{path}, row {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        image_path, contrast, orientation, grade, provenance = (c.strip() for c in row)
        try:
            entry = ManifestEntry(
                image_path=image_path,
                contrast=Contrast.parse(contrast),
                orientation=Orientation.parse(orientation),
                grade=MotionGrade.parse(grade) if grade else None,
                provenance=Provenance.parse(provenance),
            )
        except DataError as exc:
            raise DataError(f"{path}, row {lineno}: {exc}") from None
        if not image_path:
            raise DataError(f"{path}, row {lineno}: empty image_path")
        entries.append(entry)
    manifest = Manifest(tuple(entries), root)
    if check_files:
        for lineno, e in enumerate(entries, start=2):
            if not manifest.resolve(e).is_file():
                raise DataError(f"{path}, row {lineno}: image not found: {manifest.resolve(e)}")
    return manifest


def write_manifest(entries: Iterable[ManifestEntry], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow(
                [
                    e.image_path,
                    e.contrast.value,
                    e.orientation.value,
                    "" if e.grade is None else e.grade.label,
                    e.provenance.value,
                ]
            )
    return path


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessedImage:
    tensor: np.ndarray  # 3 x S x S float32
    source_id: str
    constant_input: bool = False


def preprocess(record: SliceRecord, size: int = DEFAULT_INPUT_SIZE) -> PreprocessedImage:
    """Bilinear resize to ``size``, per-image standardization, grayscale replicated to 3 channels.

    A constant image cannot be standardized; it maps to zeros and the result is
    flagged with ``constant_input``.
    """
    validate(record)
    px = torch.from_numpy(np.array(record.pixels, dtype=np.float64))[None, None]
    if px.shape[-2:] != (size, size):
        px = F.interpolate(px, size=(size, size), mode="bilinear", align_corners=False)
    img = px[0, 0].numpy()
    std = img.std()
    constant = not std > 0.0
    if constant:
        log.warning("slice %s is constant; emitting a zero tensor", record.id)
        img = np.zeros_like(img)
    else:
        img = (img - img.mean()) / std
    out = np.repeat(img.astype(np.float32)[None], 3, axis=0)
    out.setflags(write=False)
    return PreprocessedImage(out, record.id, constant)


def stack(images: Sequence[PreprocessedImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.tensor for im in images]))


# --------------------------------------------------------------------------
# stratified splitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.1, 0.3)
    seed: int = 0

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be three positive numbers summing to 1, got {self.ratios}")
        object.__setattr__(self, "ratios", r)


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    quotas = [total * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda j: (-(quotas[j] - counts[j]), -ratios[j], j))
    for j in order[: total - sum(counts)]:
        counts[j] += 1
    return counts


def _allocate(sizes: dict, ratios: Sequence[float]) -> dict:
    """Per-stratum split counts, each within one element of its quota.

    Strata smaller than the number of splits fill splits in ratio-descending order.
    The remaining fractional units are placed by a min-cost flow so the global
    split sizes also land within one element of their quotas.
    """
    k = len(ratios)
    by_ratio = sorted(range(k), key=lambda j: (-ratios[j], j))
    alloc = {}
    floors = {}
    for key, n in sizes.items():
        if n < k:
            counts = [0] * k
            for j in by_ratio[:n]:
                counts[j] = 1
            alloc[key] = counts
        else:
            floors[key] = [int(np.floor(n * r)) for r in ratios]
    n_big = sum(sizes[key] for key in floors)
    targets = _largest_remainder(n_big, ratios)
    need = [targets[j] - sum(f[j] for f in floors.values()) for j in range(k)]
    extras = {key: sizes[key] - sum(f) for key, f in floors.items()}

    g = nx.DiGraph()
    scale = 10**6
    for idx, key in enumerate(floors):
        if extras[key]:
            g.add_edge("src", ("s", idx), capacity=extras[key], weight=0)
            for j in range(k):
                frac = sizes[key] * ratios[j] - floors[key][j]
                g.add_edge(("s", idx), ("t", j), capacity=1, weight=-int(round(frac * scale)))
    for j in range(k):
        if need[j] > 0:
            g.add_edge(("t", j), "sink", capacity=need[j], weight=0)
    flow = nx.max_flow_min_cost(g, "src", "sink") if g.number_of_edges() else {}
    for idx, key in enumerate(floors):
        counts = list(floors[key])
        for j in range(k):
            counts[j] += flow.get(("s", idx), {}).get(("t", j), 0)
        if sum(counts) != sizes[key]:
            counts = _largest_remainder(sizes[key], ratios)
        alloc[key] = counts
    return alloc


def stratified_split(
    records: Sequence[SliceRecord], spec: SplitSpec
) -> tuple[list[SliceRecord], list[SliceRecord], list[SliceRecord]]:
    """Partition records into train/val/test, stratified by contrast x orientation x grade."""
    strata: dict = defaultdict(list)
    for rec in records:
        if rec.grade is None:
            raise DataError(f"record {rec.id!r} has no grade; cannot stratify")
        strata[(rec.contrast.value, rec.orientation.value, int(rec.grade))].append(rec)
    keys = sorted(strata)
    alloc = _allocate({key: len(strata[key]) for key in keys}, spec.ratios)
    rng = np.random.default_rng(spec.seed)
    out: tuple[list, list, list] = ([], [], [])
    for key in keys:
        members = sorted(strata[key], key=lambda r: r.id)
        perm = rng.permutation(len(members))
        start = 0
        for j, count in enumerate(alloc[key]):
            out[j].extend(members[i] for i in perm[start : start + count])
            start += count
    return out
