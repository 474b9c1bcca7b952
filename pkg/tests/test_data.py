"""Loaders, splitting, subsampling, fusion and batching."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetlab.data import (CLASS_NAMES, DataError, Dataset, Sample, SplitSpec,
                            load_image_manifest, load_pixel_csv, merge,
                            resize_bilinear, save_pixel_csv, sequential_batches,
                            shuffled_batches, split, take_fraction, write_pgm)


def _sample(label=0, subject=None, value=0.5, origin="t"):
    return Sample(image=np.full((1, 48, 48), value), label=label,
                  subject_id=subject, origin=origin)


def _dataset(labels, subjects=None, name="d"):
    ds = Dataset(name)
    for i, lab in enumerate(labels):
        subject = subjects[i] if subjects else None
        ds.samples.append(_sample(lab, subject, value=(i % 10) / 10.0))
    return ds


# ---------------------------------------------------------------------------
# Pixel CSV
# ---------------------------------------------------------------------------

def _csv_row(emotion, usage, fill=128, n=2304):
    return f"{emotion},{' '.join([str(fill)] * n)},{usage}"


class TestPixelCsv:
    def test_three_rows_three_subsets(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("emotion,pixels,Usage\n"
                        + _csv_row(0, "Training") + "\n"
                        + _csv_row(3, "PublicTest") + "\n"
                        + _csv_row(6, "PrivateTest") + "\n")
        train, val, test = load_pixel_csv(path)
        assert (len(train), len(val), len(test)) == (1, 1, 1)
        assert train[0].label == 0 and val[0].label == 3 and test[0].label == 6
        assert train[0].image.shape == (1, 48, 48)
        assert train[0].image[0, 0, 0] == 128 / 255.0

    def test_wrong_pixel_count_cites_row(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("emotion,pixels,Usage\n" + _csv_row(0, "Training", n=2303) + "\n")
        with pytest.raises(DataError, match=r":2: 2303 pixels"):
            load_pixel_csv(path)

    def test_emotion_out_of_range(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("emotion,pixels,Usage\n" + _csv_row(7, "Training") + "\n")
        with pytest.raises(DataError, match="outside 0..6"):
            load_pixel_csv(path)

    def test_unknown_usage(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("emotion,pixels,Usage\n" + _csv_row(1, "Eval") + "\n")
        with pytest.raises(DataError, match="unknown usage"):
            load_pixel_csv(path)

    def test_pixel_out_of_range(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("emotion,pixels,Usage\n" + _csv_row(1, "Training", fill=300) + "\n")
        with pytest.raises(DataError, match="outside 0..255"):
            load_pixel_csv(path)

    def test_round_trip_identical_tensors(self, tmp_path):
        rng = np.random.default_rng(0)
        subsets = []
        for tag in ("train", "val", "test"):
            ds = Dataset(tag)
            for i in range(4):
                img = rng.integers(0, 256, (1, 48, 48)) / 255.0
                ds.samples.append(Sample(image=img, label=int(rng.integers(0, 7))))
            subsets.append(ds)
        path = tmp_path / "rt.csv"
        save_pixel_csv(path, *subsets)
        reloaded = load_pixel_csv(path)
        for orig, back in zip(subsets, reloaded):
            assert len(orig) == len(back)
            for a, b in zip(orig, back):
                assert a.label == b.label
                assert a.image.tobytes() == b.image.tobytes()


# ---------------------------------------------------------------------------
# Image manifest
# ---------------------------------------------------------------------------

class TestManifest:
    def test_pgm_resized_to_48(self, tmp_path):
        rng = np.random.default_rng(1)
        write_pgm(tmp_path / "img.pgm", rng.random((256, 256)))
        (tmp_path / "m.tsv").write_text("img.pgm\thappy\ts01\n")
        ds = load_image_manifest(tmp_path / "m.tsv")
        assert len(ds) == 1
        assert ds[0].image.shape == (1, 48, 48)
        assert ds[0].label == CLASS_NAMES.index("happy")
        assert ds[0].subject_id == "s01"
        assert 0.0 <= ds[0].image.min() and ds[0].image.max() <= 1.0

    def test_constant_image_stays_constant(self, tmp_path):
        write_pgm(tmp_path / "c.pgm", np.full((96, 96), 200 / 255.0))
        (tmp_path / "m.tsv").write_text("c.pgm\tsad\ts01\n")
        ds = load_image_manifest(tmp_path / "m.tsv")
        assert np.ptp(ds[0].image) <= 1e-9        # bilinear of a constant

    def test_unknown_label_lists_valid_names(self, tmp_path):
        write_pgm(tmp_path / "i.pgm", np.zeros((8, 8)))
        (tmp_path / "m.tsv").write_text("i.pgm\tjoy\ts01\n")
        with pytest.raises(DataError, match="angry.*neutral"):
            load_image_manifest(tmp_path / "m.tsv")

    def test_duplicate_row_rejected(self, tmp_path):
        write_pgm(tmp_path / "i.pgm", np.zeros((8, 8)))
        (tmp_path / "m.tsv").write_text("i.pgm\thappy\ts01\ni.pgm\thappy\ts01\n")
        with pytest.raises(DataError, match="duplicate"):
            load_image_manifest(tmp_path / "m.tsv")

    def test_unreadable_image_cites_row(self, tmp_path):
        (tmp_path / "m.tsv").write_text("missing.pgm\thappy\ts01\n")
        with pytest.raises(DataError, match=r"m\.tsv:1"):
            load_image_manifest(tmp_path / "m.tsv")

    def test_ascii_pgm_supported(self, tmp_path):
        vals = " ".join(str(v) for v in range(64))
        (tmp_path / "a.pgm").write_text(f"P2\n# comment\n8 8\n255\n{vals}\n")
        (tmp_path / "m.tsv").write_text("a.pgm\tfear\ts02\n")
        ds = load_image_manifest(tmp_path / "m.tsv")
        assert ds[0].image.shape == (1, 48, 48)

    def test_png_color_uses_luma(self, tmp_path):
        from PIL import Image

        rgb = np.zeros((64, 64, 3), dtype=np.uint8)
        rgb[:, :, 0] = 255                        # pure red
        Image.fromarray(rgb).save(tmp_path / "red.png")
        (tmp_path / "m.tsv").write_text("red.png\tangry\ts03\n")
        ds = load_image_manifest(tmp_path / "m.tsv")
        assert ds[0].image.mean() == pytest.approx(0.299, abs=1e-6)


class TestResize:
    def test_identity_when_same_size(self):
        img = np.random.default_rng(2).random((48, 48))
        np.testing.assert_array_equal(resize_bilinear(img, 48, 48), img)

    def test_2x_downscale_of_linear_ramp(self):
        # a linear ramp is reproduced exactly by bilinear sampling
        img = np.tile(np.arange(8.0), (8, 1))
        out = resize_bilinear(img, 4, 4)
        np.testing.assert_allclose(out, np.tile([0.5, 2.5, 4.5, 6.5], (4, 1)), atol=1e-12)

    def test_upscale_range_preserved(self):
        img = np.random.default_rng(3).random((16, 16))
        out = resize_bilinear(img, 48, 48)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

class TestSplit:
    def test_ten_equal_subjects_6_1_3(self):
        labels = [i % 7 for i in range(100)]
        subjects = [f"s{i % 10}" for i in range(100)]
        ds = _dataset(labels, subjects)
        spec = SplitSpec(0.6, 0.1, 0.3, subject_disjoint=True, seed=0)
        train, val, test = split(ds, spec)
        assert (len(train.subjects()), len(val.subjects()), len(test.subjects())) == (6, 1, 3)

    @pytest.mark.parametrize("seed", range(5))
    def test_subject_sets_pairwise_disjoint(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 7, 200).tolist()
        subjects = [f"s{rng.integers(0, 17)}" for _ in range(200)]
        ds = _dataset(labels, subjects)
        train, val, test = split(ds, SplitSpec(0.6, 0.1, 0.3, True, seed))
        assert not (train.subjects() & val.subjects())
        assert not (train.subjects() & test.subjects())
        assert not (val.subjects() & test.subjects())
        assert len(train) + len(val) + len(test) == 200

    def test_small_cohort_regime(self):
        # 213 samples over 10 subjects at (0.615, 0.07, 0.315): the contract is
        # subject disjointness plus subject counts within one of the targets
        rng = np.random.default_rng(7)
        counts = [22, 21, 21, 22, 21, 21, 21, 22, 21, 21]
        labels, subjects = [], []
        for i, n in enumerate(counts):
            for _ in range(n):
                labels.append(int(rng.integers(0, 7)))
                subjects.append(f"s{i}")
        ds = _dataset(labels, subjects)
        train, val, test = split(ds, SplitSpec(0.615, 0.07, 0.315, True, 1))
        assert abs(len(train.subjects()) - 6) <= 1
        assert abs(len(val.subjects()) - 1) <= 1
        assert abs(len(test.subjects()) - 3) <= 1

    def test_dominant_subject_warns_best_effort(self, caplog):
        labels = [0] * 90 + [1] * 10
        subjects = ["big"] * 90 + [f"s{i}" for i in range(10)]
        ds = _dataset(labels, subjects)
        with caplog.at_level("WARNING"):
            train, val, test = split(ds, SplitSpec(0.6, 0.2, 0.2, True, 0))
        assert "best-effort" in caplog.text
        assert len(train) + len(val) + len(test) == 100

    def test_subject_disjoint_requires_ids(self):
        ds = _dataset([0, 1, 2] * 10)
        with pytest.raises(DataError, match="no subject_id"):
            split(ds, SplitSpec(0.6, 0.2, 0.2, True, 0))

    def test_stratified_split_deterministic_and_complete(self):
        labels = [i % 7 for i in range(70)]
        ds = _dataset(labels)
        a = split(ds, SplitSpec(0.6, 0.2, 0.2, False, 3))
        b = split(ds, SplitSpec(0.6, 0.2, 0.2, False, 3))
        for x, y in zip(a, b):
            assert [s.label for s in x] == [s.label for s in y]
        assert sum(len(x) for x in a) == 70

    def test_remainders_go_to_train(self):
        labels = [0] * 11                         # 0.6/0.2/0.2 of 11 -> 7/2/2
        train, val, test = split(_dataset(labels), SplitSpec(0.6, 0.2, 0.2, False, 0))
        assert (len(train), len(val), len(test)) == (7, 2, 2)

    def test_bad_fractions(self):
        with pytest.raises(DataError, match="sum to 1"):
            SplitSpec(0.5, 0.2, 0.2)
        with pytest.raises(DataError, match=r"in \(0,1\)"):
            SplitSpec(1.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# take_fraction
# ---------------------------------------------------------------------------

class TestTakeFraction:
    def test_full_fraction_is_identity_same_order(self):
        ds = _dataset([i % 7 for i in range(21)])
        out = take_fraction(ds, 1.0, seed=5)
        assert [id(s) for s in out] == [id(s) for s in ds]

    def test_half_of_balanced_70(self):
        ds = _dataset([i % 7 for i in range(70)])
        out = take_fraction(ds, 0.5, seed=1)
        assert len(out) == 35
        assert all(c == 5 for c in out.class_histogram())

    def test_subset_of_original(self):
        ds = _dataset([i % 7 for i in range(70)])
        out = take_fraction(ds, 0.5, seed=2)
        originals = {id(s) for s in ds}
        assert all(id(s) in originals for s in out)

    @given(hist=st.lists(st.integers(min_value=0, max_value=40), min_size=7, max_size=7),
           fraction=st.floats(min_value=0.05, max_value=0.95),
           seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_per_class_ceil_counts(self, hist, fraction, seed):
        labels = [c for c, n in enumerate(hist) for _ in range(n)]
        ds = _dataset(labels)
        out = take_fraction(ds, fraction, seed)
        got = out.class_histogram()
        for c, n in enumerate(hist):
            expected = int(np.ceil(fraction * n)) if n else 0
            assert got[c] == expected

    def test_fraction_bounds(self):
        ds = _dataset([0, 1])
        for f in (0.0, -0.5, 1.5):
            with pytest.raises(DataError, match="fraction"):
                take_fraction(ds, f)

    def test_deterministic(self):
        ds = _dataset([i % 7 for i in range(70)])
        a = take_fraction(ds, 0.4, seed=9)
        b = take_fraction(ds, 0.4, seed=9)
        assert [id(s) for s in a] == [id(s) for s in b]


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------

class TestMerge:
    def test_sizes_add(self):
        a, b = _dataset([0] * 5), _dataset([1] * 3)
        assert len(merge(a, b)) == 8

    def test_origin_tags_preserved(self):
        a = Dataset("src", samples=[_sample(0, origin="src")])
        b = Dataset("tgt", samples=[_sample(1, origin="tgt")])
        m = merge(a, b)
        assert [s.origin for s in m] == ["src", "tgt"]

    def test_label_space_mismatch(self):
        a = _dataset([0])
        b = Dataset("other", samples=[_sample(0)], class_names=("a",) * 7)
        with pytest.raises(DataError, match="label spaces"):
            merge(a, b)

    def test_content_associative(self):
        a, b, c = _dataset([0] * 2, name="a"), _dataset([1] * 3, name="b"), \
            _dataset([2] * 4, name="c")
        left = merge(merge(a, b), c)
        right = merge(a, merge(b, c))
        assert [id(s) for s in left] == [id(s) for s in right]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class TestBatches:
    def test_permutation_keyed_by_seed_epoch(self):
        ds = _dataset([i % 7 for i in range(20)])
        a = [y.tolist() for _, y in shuffled_batches(ds, 6, seed=1, epoch=0)]
        b = [y.tolist() for _, y in shuffled_batches(ds, 6, seed=1, epoch=0)]
        c = [y.tolist() for _, y in shuffled_batches(ds, 6, seed=1, epoch=1)]
        assert a == b
        assert a != c

    def test_short_tail_retained(self):
        ds = _dataset([0] * 10)
        sizes = [len(y) for _, y in shuffled_batches(ds, 4, seed=0, epoch=0)]
        assert sizes == [4, 4, 2]

    def test_every_sample_seen_once(self):
        ds = _dataset([i % 7 for i in range(23)])
        seen = np.concatenate([x.sum(axis=(1, 2, 3)) for x, _ in
                               shuffled_batches(ds, 5, seed=3, epoch=2)])
        assert len(seen) == 23

    def test_sequential_batches_preserve_order(self):
        ds = _dataset([i % 7 for i in range(11)])
        labels = np.concatenate([y for _, y in sequential_batches(ds, 4)])
        np.testing.assert_array_equal(labels, ds.labels())
