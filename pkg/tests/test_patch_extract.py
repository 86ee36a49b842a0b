import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octpad.errors import DomainError, TooSmallError
from octpad.oct_core import BScan
from octpad.patch_extract import (
    ExtractionConfig,
    PatchRecord,
    append_index,
    binarize,
    dilate,
    extract_patches,
    load_mask_png,
    load_patch_png,
    otsu,
    quantize_u8,
    read_index,
    save_mask_png,
    save_patch_png,
    surface_row,
)
from oracles import dilate_oracle, extract_centers_oracle, otsu_oracle


class TestDilate:
    def test_constant_image_unchanged(self):
        img = np.full((9, 9), 0.3, dtype=np.float32)
        np.testing.assert_array_equal(dilate(img), img)

    def test_single_bright_pixel_spreads_to_kernel_block(self):
        img = np.zeros((9, 9), dtype=np.float32)
        img[4, 4] = 1.0
        out = dilate(img, (5, 5))
        expected = np.zeros((9, 9), dtype=np.float32)
        expected[2:7, 2:7] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_monotone_under_repeat(self):
        rng = np.random.default_rng(0)
        img = rng.random((20, 30)).astype(np.float32)
        once = dilate(img)
        twice = dilate(once)
        assert (twice >= once).all()

    def test_even_kernel_rejected(self):
        with pytest.raises(DomainError):
            dilate(np.zeros((4, 4)), (4, 5))

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h, w = rng.integers(6, 40, size=2)
            img = rng.random((h, w)).astype(np.float32)
            kernel = (int(rng.choice([3, 5, 7])), int(rng.choice([3, 5])))
            np.testing.assert_array_equal(dilate(img, kernel), dilate_oracle(img, kernel))


class TestOtsu:
    def test_half_black_half_white(self):
        img = np.zeros((10, 10), dtype=np.float32)
        img[:, 5:] = 1.0
        t = otsu(img)
        assert t == 0
        fg = binarize(img, t)
        np.testing.assert_array_equal(fg[:, 5:], 1)
        np.testing.assert_array_equal(fg[:, :5], 0)

    def test_constant_image_all_background(self):
        img = np.full((8, 8), 0.4, dtype=np.float32)
        t = otsu(img)
        assert t == 255
        assert not binarize(img, t).any()

    def test_empty_image(self):
        with pytest.raises(DomainError):
            otsu(np.zeros((0, 4)))

    def test_quantization_is_floor(self):
        img = np.array([[0.999, 1.0], [0.0, 0.5]])
        np.testing.assert_array_equal(quantize_u8(img), [[254, 255], [0, 127]])

    def test_matches_exhaustive_sweep_oracle(self):
        rng = np.random.default_rng(21)
        for i in range(100):
            h, w = rng.integers(4, 64, size=2)
            if i % 3 == 0:
                img = rng.random((h, w))
            elif i % 3 == 1:  # bimodal
                img = np.where(rng.random((h, w)) < 0.5,
                               rng.normal(0.2, 0.05, (h, w)),
                               rng.normal(0.7, 0.05, (h, w))).clip(0, 1)
            else:  # few distinct levels, tie-prone
                img = rng.choice([0.0, 0.25, 0.5, 1.0], size=(h, w))
            assert otsu(img) == otsu_oracle(img)


class TestSurfaceRow:
    def test_constructed_max_row(self):
        rng = np.random.default_rng(3)
        binary = (rng.random((100, 400)) < 0.1).astype(np.uint8)
        binary[40, :300] = 1
        row, found = surface_row(binary)
        assert found and row == 40

    def test_tie_breaks_to_smallest(self):
        binary = np.zeros((30, 10), dtype=np.uint8)
        binary[10, :5] = 1
        binary[20, :5] = 1
        row, found = surface_row(binary)
        assert found and row == 10

    def test_all_zero_flags_no_foreground(self):
        row, found = surface_row(np.zeros((5, 5), dtype=np.uint8))
        assert row == 0 and not found

    def test_sum_width_restricts_columns(self):
        binary = np.zeros((10, 10), dtype=np.uint8)
        binary[2, :3] = 1
        binary[7, 5:] = 1  # more pixels but outside the summed columns
        row, _ = surface_row(binary, sum_width=4)
        assert row == 2


class TestExtractPatches:
    def test_all_zero_bscan_yields_nothing(self):
        b = BScan(data=np.zeros((300, 400), dtype=np.float32))
        assert extract_patches(b) == []

    def test_too_small(self):
        b = BScan(data=np.zeros((100, 400), dtype=np.float32))
        with pytest.raises(TooSmallError):
            extract_patches(b)

    def test_candidate_x_grid_arithmetic(self):
        # width 1800 with stride 64 from 128: 25 in-bounds positions
        xs = [x for x in range(128, 1800, 64) if x + 128 <= 1800]
        assert xs[0] == 128 and xs[-1] == 1664 and len(xs) == 25

    def test_patches_crop_original_not_dilated(self, bona_bscans):
        b = bona_bscans[0]
        for p in extract_patches(b):
            np.testing.assert_array_equal(
                p.data, b.data[p.z - 128 : p.z + 128, p.x - 128 : p.x + 128]
            )

    def test_matches_brute_force_oracle(self, bona_bscans):
        cfg = ExtractionConfig()
        for b in bona_bscans:
            got = [(p.z, p.x) for p in extract_patches(b, cfg)]
            want = extract_centers_oracle(b.data)
            assert got == want

    def test_oracle_equivalence_on_sparse_noise(self):
        rng = np.random.default_rng(5)
        for _ in range(4):
            img = (rng.random((300, 420)) < 0.02).astype(np.float32)
            img[rng.integers(100, 200)] = 1.0
            got = [(p.z, p.x) for p in extract_patches(BScan(data=img))]
            assert got == extract_centers_oracle(img)

    def test_output_sorted_and_on_grid(self, bona_bscans):
        cfg = ExtractionConfig()
        for b in bona_bscans:
            patches = extract_patches(b, cfg)
            coords = [(p.z, p.x) for p in patches]
            assert coords == sorted(coords)
            if patches:
                z0 = patches[0].z
                for p in patches:
                    assert (p.z - z0) % cfg.z_stride == 0
                    assert (p.x - cfg.x_start) % cfg.x_stride == 0

    def test_lower_threshold_is_superset(self, bona_bscans):
        b = bona_bscans[1]
        high = {(p.z, p.x) for p in extract_patches(b, ExtractionConfig(foreground_threshold=0.05))}
        low = {(p.z, p.x) for p in extract_patches(b, ExtractionConfig(foreground_threshold=0.01))}
        assert high <= low

    def test_deterministic(self, bona_bscans):
        b = bona_bscans[2]
        a = [(p.z, p.x) for p in extract_patches(b)]
        c = [(p.z, p.x) for p in extract_patches(b)]
        assert a == c

    def test_kept_patches_satisfy_threshold(self, bona_bscans):
        cfg = ExtractionConfig()
        b = bona_bscans[0]
        binary = binarize(dilate(b.data, cfg.kernel), otsu(dilate(b.data, cfg.kernel)))
        for p in extract_patches(b, cfg):
            window = binary[p.z - 128 : p.z + 128, p.x - 128 : p.x + 128]
            assert window.sum() > cfg.min_foreground


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9).filter(lambda k: k % 2 == 1), st.integers(0, 10_000))
def test_dilate_oracle_property(k, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((12, 15))
    np.testing.assert_array_equal(dilate(img, (k, 3)), dilate_oracle(img, (k, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_otsu_oracle_property(seed, n_levels):
    rng = np.random.default_rng(seed)
    levels = rng.choice(np.linspace(0, 1, n_levels), size=(16, 16))
    assert otsu(levels) == otsu_oracle(levels)


class TestDatasetIo:
    def test_patch_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = (rng.integers(0, 256, (256, 256)) / 255.0).astype(np.float32)
        save_patch_png(data, tmp_path / "p.png")
        np.testing.assert_array_equal(load_patch_png(tmp_path / "p.png"), data)

    def test_mask_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        onehot = np.eye(4, dtype=np.uint8)[rng.integers(0, 4, (32, 32))].transpose(2, 0, 1)
        save_mask_png(onehot, tmp_path / "m.png")
        np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), onehot)

    def test_index_roundtrip(self, tmp_path):
        recs = [
            PatchRecord("a.png", "s0", 1, 128, 150, "bonafide", "a_mask.png"),
            PatchRecord("b.png", "s1", 0, 192, 150, "pa", None),
        ]
        for r in recs:
            append_index(tmp_path, r)
        assert read_index(tmp_path) == recs
