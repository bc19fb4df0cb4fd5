import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldgnet import hsidata
from ldgnet.hsidata import (
    DomainPair,
    FormatError,
    HsiCube,
    LabelRaster,
    Patch,
    SynthSpec,
    augment_patch,
    decode_cube,
    decode_labels,
    encode_cube,
    encode_labels,
    extract_patch,
    extract_patches,
    generate_synthetic_pair,
    load_cube,
    load_labels,
    load_pair,
    mirror_indices,
    normalize,
    save_cube,
    save_labels,
    save_pair,
    split_train_val,
)


def cube_of(values) -> HsiCube:
    return HsiCube(np.asarray(values, dtype=np.float64))


class TestCubeFormat:
    def test_single_value_layout(self):
        raw = encode_cube(cube_of([[[0.5]]]))
        header = b'{"h":1,"w":1,"d":1,"dtype":"f32","layout":"bsq"}'
        assert raw == b"HSIC1\n" + header + b"\n" + struct.pack("<f", 0.5)
        assert decode_cube(raw).values[0, 0, 0] == 0.5

    def test_band_sequential_order(self):
        values = np.arange(2 * 2 * 3, dtype=np.float64).reshape(3, 2, 2)
        raw = encode_cube(cube_of(values))
        payload = raw[raw.index(b"\n", 6) + 1:]
        np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), np.arange(12))

    def test_truncated_payload(self):
        raw = encode_cube(cube_of(np.zeros((3, 2, 2))))
        with pytest.raises(FormatError, match="truncated"):
            decode_cube(raw[:-4])  # 11 of the 12 declared floats

    def test_trailing_bytes(self):
        raw = encode_cube(cube_of(np.zeros((1, 1, 1))))
        with pytest.raises(FormatError):
            decode_cube(raw + b"\0\0\0\0")

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_cube(b"HSIC2\n{}\n")

    def test_random_cube_round_trips_exactly(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(4, 8, 8)).astype(np.float32).astype(np.float64)
        save_cube(cube_of(values), tmp_path / "c.hsic")
        np.testing.assert_array_equal(load_cube(tmp_path / "c.hsic").values, values)

    def test_values_are_stored_at_32_bit(self):
        cube = cube_of([[[0.1]]])
        assert decode_cube(encode_cube(cube)).values[0, 0, 0] == np.float64(np.float32(0.1))

    def test_non_finite_cube_rejected(self):
        with pytest.raises(ValueError):
            cube_of([[[np.nan]]])


class TestLabelFormat:
    def test_round_trip(self, tmp_path):
        ids = np.random.default_rng(1).integers(0, 6, size=(5, 7))
        save_labels(LabelRaster(ids), tmp_path / "l.hsil")
        np.testing.assert_array_equal(load_labels(tmp_path / "l.hsil").ids, ids)

    def test_uint16_payload(self):
        raw = encode_labels(LabelRaster(np.array([[1, 300]])))
        assert raw.endswith(struct.pack("<HH", 1, 300))

    def test_size_mismatch(self):
        raw = encode_labels(LabelRaster(np.zeros((2, 2), dtype=int)))
        with pytest.raises(FormatError):
            decode_labels(raw[:-1])

    def test_pair_round_trip(self, tmp_path):
        pair = generate_synthetic_pair(SynthSpec(classes=3, bands=4, source_hw=(10, 12), target_hw=(9, 9), blobs=4))
        save_pair(pair, tmp_path)
        back = load_pair(tmp_path, 3)
        for a, b in ((pair.source, back.source), (pair.target, back.target)):
            np.testing.assert_array_equal(a[0].values, b[0].values)
            np.testing.assert_array_equal(a[1].ids, b[1].ids)

    def test_pair_band_mismatch(self):
        a = (cube_of(np.zeros((2, 3, 3))), LabelRaster(np.ones((3, 3), dtype=int)))
        b = (cube_of(np.zeros((3, 3, 3))), LabelRaster(np.ones((3, 3), dtype=int)))
        with pytest.raises(ValueError, match="band"):
            DomainPair(a, b, 1)


class TestNormalize:
    def test_two_values(self):
        out = normalize(cube_of([[[2.0, 4.0]]]))
        np.testing.assert_array_equal(out.values, [[[0.0, 1.0]]])

    def test_constant_band(self):
        out = normalize(cube_of([[[7.0, 7.0]], [[1.0, 3.0]]]))
        np.testing.assert_array_equal(out.values[0], [[0.0, 0.0]])

    def test_random_band_order_preserved(self):
        v = np.random.default_rng(2).normal(size=(3, 6, 5))
        out = normalize(cube_of(v)).values
        for b in range(3):
            assert out[b].min() == 0.0 and out[b].max() == 1.0
            np.testing.assert_array_equal(np.argsort(out[b], axis=None), np.argsort(v[b], axis=None))


class TestPatches:
    def setup_method(self):
        self.values = np.arange(2 * 5 * 5, dtype=np.float64).reshape(2, 5, 5)
        self.cube = cube_of(self.values)

    def test_interior_window(self):
        p = extract_patch(self.cube, 2, 3, 3)
        np.testing.assert_array_equal(p.values, self.values[:, 1:4, 2:5])

    def test_corner_reflects(self):
        np.testing.assert_array_equal(mirror_indices(0, 3, 5), [1, 0, 1])
        p = extract_patch(self.cube, 0, 0, 3)
        np.testing.assert_array_equal(p.values, self.values[:, [1, 0, 1]][:, :, [1, 0, 1]])

    def test_even_size_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            extract_patch(self.cube, 2, 2, 4)

    def test_label_carried(self):
        labels = LabelRaster(np.full((5, 5), 3))
        assert extract_patch(self.cube, 1, 1, 3, labels).label == 3

    def test_batch_matches_single(self):
        coords = np.array([[0, 0], [4, 4], [2, 1], [0, 4]])
        batch = extract_patches(self.cube, coords, 5)
        for i, (r, c) in enumerate(coords):
            np.testing.assert_array_equal(batch[i], extract_patch(self.cube, r, c, 5).values)

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 9), st.integers(1, 9), st.integers(0, 20), st.integers(0, 20),
        st.sampled_from([1, 3, 5, 7, 13]),
    )
    def test_accessor_never_leaves_the_raster(self, h, w, r, c, s):
        r, c = r % h, c % w
        cube = cube_of(np.random.default_rng(0).normal(size=(2, h, w)))
        seen = []
        original = hsidata._gather

        def checked(values, rows, cols):
            assert rows.min() >= 0 and rows.max() < values.shape[1]
            assert cols.min() >= 0 and cols.max() < values.shape[2]
            seen.append(True)
            return original(values, rows, cols)

        hsidata._gather = checked
        try:
            extract_patch(cube, r, c, s)
            extract_patches(cube, np.array([[r, c]]), s)
        finally:
            hsidata._gather = original
        assert len(seen) == 2


class TestAugment:
    class Scripted:
        """Stands in for a Generator and replays chosen draws."""

        def __init__(self, flips, gain):
            self.flips, self.gain = list(flips), gain

        def random(self):
            return self.flips.pop(0)

        def uniform(self, lo, hi, size=None):
            if size is None:
                return self.gain
            return np.zeros(size)

    def test_identity(self):
        p = Patch(np.random.default_rng(3).normal(size=(2, 3, 3)), 4)
        out = augment_patch(p, self.Scripted([0.9, 0.9], 1.0))
        np.testing.assert_array_equal(out.values, p.values)
        assert out.label == 4

    def test_both_flips_rotate_180(self):
        p = Patch(np.random.default_rng(4).normal(size=(2, 3, 3)), 1)
        out = augment_patch(p, self.Scripted([0.1, 0.1], 1.0))
        np.testing.assert_array_equal(out.values, np.rot90(p.values, 2, axes=(1, 2)))

    def test_gain_and_noise_bounds(self):
        p = Patch(np.ones((3, 5, 5)), 1)
        out = augment_patch(p, np.random.default_rng(5)).values
        assert out.min() >= 0.9 - 0.02 and out.max() <= 1.1 + 0.02

    def test_seeded_replay(self):
        p = Patch(np.random.default_rng(6).normal(size=(2, 5, 5)), 1)
        a = augment_patch(p, np.random.default_rng(11)).values
        b = augment_patch(p, np.random.default_rng(11)).values
        np.testing.assert_array_equal(a, b)


class TestSplit:
    def test_eighty_twenty(self):
        ids = np.repeat([1, 2, 3], 10).reshape(5, 6)
        train, val = split_train_val(LabelRaster(ids), 0.8, 0)
        flat = ids.ravel()
        for c in (1, 2, 3):
            assert (flat[train] == c).sum() == 8
            assert (flat[val] == c).sum() == 2

    def test_two_pixels_half(self):
        train, val = split_train_val(LabelRaster(np.array([[1, 1, 2, 2]])), 0.5, 0)
        assert len(train) == 2 and len(val) == 2

    def test_disjoint_cover_deterministic(self):
        ids = np.random.default_rng(7).integers(0, 4, size=(12, 12))
        labels = LabelRaster(ids)
        train, val = split_train_val(labels, 0.7, 3)
        assert not set(train) & set(val)
        assert set(train) | set(val) == set(np.flatnonzero(ids.ravel() > 0))
        again = split_train_val(labels, 0.7, 3)
        np.testing.assert_array_equal(train, again[0])
        np.testing.assert_array_equal(val, again[1])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(2, 40), min_size=1, max_size=4), st.floats(0.05, 0.95))
    def test_per_class_counts(self, sizes, fraction):
        ids = np.concatenate([np.full(n, c + 1) for c, n in enumerate(sizes)])[None, :]
        train, _ = split_train_val(LabelRaster(ids), fraction, 0)
        flat = ids.ravel()
        for c, n in enumerate(sizes):
            want = min(max(int(np.floor(fraction * n + 0.5)), 1), n - 1)
            assert (flat[train] == c + 1).sum() == want

    def test_singleton_class(self):
        with pytest.raises(ValueError, match="fewer than 2"):
            split_train_val(LabelRaster(np.array([[1, 1, 2]])), 0.5, 0)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_train_val(LabelRaster(np.array([[1, 1]])), 1.0, 0)


def class_band_means(cube, labels, band):
    flat, vals = labels.ids.ravel(), cube.values[band].ravel()
    return {c: (vals[flat == c].mean(), (flat == c).sum()) for c in np.unique(flat[flat > 0])}


class TestSynthetic:
    def test_identity_shift_matches_source(self):
        spec = SynthSpec(classes=3, bands=5, gain=1.0, offset=0.0, nonlinearity=0.0, seed=2)
        pair = generate_synthetic_pair(spec)
        for band in range(spec.bands):
            src = class_band_means(*pair.source, band)
            tgt = class_band_means(*pair.target, band)
            for c in src:
                bound = 3 * spec.cov_scale * np.sqrt(1 / src[c][1] + 1 / tgt[c][1])
                assert abs(tgt[c][0] - src[c][0]) < bound

    def test_offset_on_band_zero(self):
        offset = np.zeros(5)
        offset[0] = 0.2
        spec = SynthSpec(classes=3, bands=5, gain=1.0, offset=offset, nonlinearity=0.0, seed=3)
        pair = generate_synthetic_pair(spec)
        src = class_band_means(*pair.source, 0)
        tgt = class_band_means(*pair.target, 0)
        for c in src:
            bound = 3 * spec.cov_scale * np.sqrt(1 / src[c][1] + 1 / tgt[c][1])
            assert abs(tgt[c][0] - src[c][0] - 0.2) < bound

    def test_same_seed_bit_identical(self):
        a = generate_synthetic_pair(SynthSpec(seed=9))
        b = generate_synthetic_pair(SynthSpec(seed=9))
        np.testing.assert_array_equal(a.target[0].values, b.target[0].values)
        np.testing.assert_array_equal(a.source[1].ids, b.source[1].ids)

    def test_every_class_present_with_unlabeled_borders(self):
        pair = generate_synthetic_pair(SynthSpec(classes=4, seed=1))
        ids = pair.source[1].ids
        assert set(np.unique(ids)) == {0, 1, 2, 3, 4}

    def test_shift_formula(self):
        v = np.random.default_rng(8).uniform(size=(3, 2, 2))
        out = hsidata.shift_values(v, 1.1, 0.1, 0.05)
        np.testing.assert_allclose(out, 1.1 * v + 0.1 + 0.05 * v**2, rtol=1e-15)

    @pytest.mark.parametrize(
        "kw",
        [{"gain": 0.0}, {"cov_scale": -1.0}, {"classes": 0}, {"blobs": 2, "classes": 3}, {"offset": np.zeros(3)}],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic_pair(SynthSpec(**kw))
