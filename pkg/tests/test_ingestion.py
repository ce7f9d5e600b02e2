from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from automac.ingestion import (
    MANIFEST_HEADER,
    ManifestEntry,
    SplitSpec,
    load_manifest,
    preprocess,
    read_image,
    stratified_split,
    write_image,
    write_manifest,
)
from automac.types import Contrast, DataError, MotionGrade, Orientation, Provenance, SliceRecord
from conftest import make_record


def _write_rows(path, rows, header=",".join(MANIFEST_HEADER)):
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")


@pytest.fixture
def image_dir(tmp_path):
    for i in range(12):
        write_image(tmp_path / f"img{i}.amac", np.full((40, 40), float(i)))
    return tmp_path


class TestManifest:
    def test_twelve_rows(self, image_dir):
        rows = [f"img{i}.amac,T1w,axial,NoMotion,real" for i in range(12)]
        _write_rows(image_dir / "m.csv", rows)
        m = load_manifest(image_dir / "m.csv")
        assert len(m) == 12
        assert m.entries[0].contrast is Contrast.T1W

    def test_unknown_contrast_names_row(self, image_dir):
        rows = ["img0.amac,T1w,axial,NoMotion,real", "img1.amac,T1rho,axial,NoMotion,real"]
        _write_rows(image_dir / "m.csv", rows)
        with pytest.raises(DataError, match=r"row 3.*T1rho"):
            load_manifest(image_dir / "m.csv")

    def test_empty_file(self, tmp_path):
        (tmp_path / "m.csv").write_text("")
        with pytest.raises(DataError, match="empty manifest"):
            load_manifest(tmp_path / "m.csv")

    def test_header_only_is_empty(self, tmp_path):
        _write_rows(tmp_path / "m.csv", [])
        with pytest.raises(DataError, match="empty manifest"):
            load_manifest(tmp_path / "m.csv")

    def test_missing_image(self, tmp_path):
        _write_rows(tmp_path / "m.csv", ["nope.amac,T2w,coronal,SevereMotion,synthetic"])
        with pytest.raises(DataError, match="not found"):
            load_manifest(tmp_path / "m.csv")

    def test_malformed_row(self, image_dir):
        _write_rows(image_dir / "m.csv", ["img0.amac,T1w,axial"])
        with pytest.raises(DataError, match="row 2"):
            load_manifest(image_dir / "m.csv")

    def test_round_trip_and_blank_grade(self, image_dir):
        entries = [
            ManifestEntry("img0.amac", Contrast.PDW, Orientation.OBLIQUE, None, Provenance.REAL),
            ManifestEntry("img1.amac", Contrast.FLAIR, Orientation.SAGITTAL, MotionGrade.SUBTLE_MOTION, Provenance.SYNTHETIC),
        ]
        write_manifest(entries, image_dir / "m.csv")
        m = load_manifest(image_dir / "m.csv")
        assert m.entries == tuple(entries)
        recs = m.records()
        assert recs[0].grade is None and recs[1].grade is MotionGrade.SUBTLE_MOTION
        assert recs[1].pixels[0, 0] == 1.0


class TestImageIO:
    def test_amac_exact(self, tmp_path, rng):
        x = rng.normal(size=(33, 47)).astype(np.float32)
        write_image(tmp_path / "a.amac", x)
        raw = (tmp_path / "a.amac").read_bytes()
        assert raw[:4] == b"AMAC" and len(raw) == 12 + 4 * 33 * 47
        np.testing.assert_array_equal(read_image(tmp_path / "a.amac"), x.astype(np.float64))

    def test_png16(self, tmp_path):
        x = np.arange(64 * 64, dtype=np.float64).reshape(64, 64)
        write_image(tmp_path / "a.png", x)
        y = read_image(tmp_path / "a.png")
        assert y.max() == 65535
        np.testing.assert_allclose(y / 65535 * x.max(), x, atol=x.max() / 65535)

    def test_bad_header(self, tmp_path):
        (tmp_path / "b.amac").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(DataError):
            read_image(tmp_path / "b.amac")


class TestPreprocess:
    def test_shape_and_standardization(self):
        out = preprocess(make_record(size=50))
        assert out.tensor.shape == (3, 224, 224)
        assert abs(float(out.tensor[0].mean())) < 1e-4
        assert abs(float(out.tensor[0].std()) - 1) < 1e-4
        np.testing.assert_array_equal(out.tensor[0], out.tensor[1])
        np.testing.assert_array_equal(out.tensor[0], out.tensor[2])
        assert not out.constant_input

    def test_constant_image(self, caplog):
        rec = SliceRecord("c", np.full((40, 40), 7.0), "T1w", "axial")
        out = preprocess(rec, 64)
        assert out.constant_input
        assert not out.tensor.any()
        assert "constant" in caplog.text

    def test_deterministic(self):
        a = preprocess(make_record(3), 96)
        b = preprocess(make_record(3), 96)
        assert a.tensor.tobytes() == b.tensor.tobytes()

    def test_idempotent_in_distribution(self):
        once = preprocess(make_record(5, size=64), 64)
        again = preprocess(SliceRecord("again", once.tensor[0], "T1w", "axial"), 64)
        assert abs(float(again.tensor.mean()) - float(once.tensor.mean())) < 1e-4
        assert abs(float(again.tensor.std()) - float(once.tensor.std())) < 1e-4


def _records(keys):
    return [
        SliceRecord(f"r{i:05d}", np.zeros((32, 32)), c, o, g) for i, (c, o, g) in enumerate(keys)
    ]


def _cohort_population():
    """5,304 records with a realistic orientation and contrast mix."""
    rng = np.random.default_rng(7)
    orient = ["axial"] * 3183 + ["coronal"] * 1804 + ["sagittal"] * 313 + ["oblique"] * 4
    # FLAIR count trimmed so the contrasts sum to 5,304
    contrast = ["PDw"] * 1135 + ["T1w"] * 1879 + ["T2w"] * 646 + ["FLAIR"] * 1644
    rng.shuffle(contrast)
    grades = rng.choice(3, size=5304, p=[0.5, 0.3, 0.2])
    return _records(zip(contrast, orient, grades))


class TestStratifiedSplit:
    def test_large_cohort_sizes(self):
        tr, va, te = stratified_split(_cohort_population(), SplitSpec((0.481, 0.090, 0.429), seed=1))
        assert abs(len(tr) - 2552) + abs(len(va) - 478) + abs(len(te) - 2274) <= 3

    def test_single_stratum_exact(self):
        recs = _records([("T1w", "axial", 0)] * 10)
        tr, va, te = stratified_split(recs, SplitSpec((0.5, 0.2, 0.3), seed=0))
        assert (len(tr), len(va), len(te)) == (5, 2, 3)

    def test_seed_determinism_and_variation(self):
        recs = _cohort_population()[:400]
        spec = SplitSpec((0.6, 0.1, 0.3), seed=11)
        ids = lambda s: tuple(tuple(r.id for r in part) for part in s)
        assert ids(stratified_split(recs, spec)) == ids(stratified_split(recs, spec))
        base = ids(stratified_split(recs, spec))
        differing = sum(ids(stratified_split(recs, SplitSpec(spec.ratios, seed=100 + k))) != base for k in range(20))
        assert differing == 20

    def test_input_order_does_not_matter(self):
        recs = _cohort_population()[:300]
        spec = SplitSpec((0.6, 0.1, 0.3), seed=2)
        a = stratified_split(recs, spec)
        b = stratified_split(list(reversed(recs)), spec)
        assert [[r.id for r in p] for p in a] == [[r.id for r in p] for p in b]

    def test_tiny_strata_ratio_descending(self):
        recs = _records([("T1w", "oblique", 0)] * 2 + [("T2w", "oblique", 1)])
        tr, va, te = stratified_split(recs, SplitSpec((0.3, 0.2, 0.5), seed=0))
        assert sum(r.contrast is Contrast.T2W for r in te) == 1
        assert len(te) == 2 and len(tr) == 1 and len(va) == 0

    def test_missing_grade(self):
        with pytest.raises(DataError):
            stratified_split([SliceRecord("x", np.zeros((32, 32)), "T1w", "axial")], SplitSpec())

    def test_bad_ratios(self):
        with pytest.raises(DataError):
            SplitSpec((0.5, 0.5, 0.0))
        with pytest.raises(DataError):
            SplitSpec((0.5, 0.3, 0.3))


@settings(max_examples=60, deadline=None)
@given(
    keys=st.lists(
        st.tuples(st.sampled_from(["T1w", "T2w"]), st.sampled_from(["axial", "oblique"]), st.integers(0, 2)),
        min_size=1,
        max_size=120,
    ),
    ratios=st.sampled_from([(0.6, 0.1, 0.3), (0.481, 0.090, 0.429), (0.2, 0.3, 0.5), (1 / 3, 1 / 3, 1 / 3)]),
    seed=st.integers(0, 2**32),
)
def test_split_is_partition_within_one_per_stratum(keys, ratios, seed):
    recs = _records(keys)
    parts = stratified_split(recs, SplitSpec(ratios, seed))
    ids = [r.id for p in parts for r in p]
    assert sorted(ids) == sorted(r.id for r in recs)
    assert len(ids) == len(set(ids))
    sizes = Counter(r.stratum for r in recs)
    for j, part in enumerate(parts):
        got = Counter(r.stratum for r in part)
        for key, n in sizes.items():
            assert abs(got[key] - n * ratios[j]) <= 1 + 1e-9
