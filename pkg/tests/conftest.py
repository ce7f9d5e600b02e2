import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from automac.encoder import EncoderConfig  # noqa: E402
from automac.motion_sim import GradeThresholds, generate_dataset, make_sources  # noqa: E402
from automac.ingestion import load_manifest  # noqa: E402
from automac.types import Contrast, MotionGrade, Orientation, SliceRecord  # noqa: E402

torch.set_num_threads(1)

TINY = EncoderConfig(backbone="tiny", pretrained=False, input_size=32, fc_widths=(64, 64), tiny_channels=(8, 16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_record(i=0, size=48, grade=MotionGrade.NO_MOTION, contrast="T1w", orientation="axial", seed=None):
    r = np.random.default_rng(i if seed is None else seed)
    return SliceRecord(
        id=f"s{i:04d}",
        pixels=r.uniform(0, 100, size=(size, size)),
        contrast=contrast,
        orientation=orientation,
        grade=grade,
    )


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Small synthetic train/val sets at 32 px for fast training tests."""
    root = tmp_path_factory.mktemp("toy")
    out = {}
    for split, counts, seed in (("train", (10, 10, 10), 1), ("val", (4, 4, 4), 2)):
        sources = make_sources(6, 32, seed=seed)
        generate_dataset(sources, counts, GradeThresholds(), seed=seed, out_dir=root / split)
        out[split] = load_manifest(root / split / "manifest.csv").records()
    return out
