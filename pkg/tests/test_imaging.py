import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctdenoise.imaging import (
    BadMagicError,
    HeaderError,
    Mask,
    NormalizedImage,
    PayloadSizeError,
    PhantomSpec,
    Slice,
    TissueRegion,
    default_phantom_spec,
    foreground_mask,
    generate_phantom,
    hu_window_normalize,
    list_pairs,
    load_pairs,
    load_slice,
    normalized_to_hu,
    save_pair,
    save_png16,
    save_slice,
)


def flat_slice(value: float, size: int = 16) -> Slice:
    return Slice(np.full((size, size), value, dtype=np.float32))


class TestSliceType:
    def test_rejects_small_dims(self):
        with pytest.raises(ValueError, match="divisible by 16"):
            Slice(np.zeros((8, 8), dtype=np.float32))

    def test_rejects_indivisible_dims(self):
        with pytest.raises(ValueError, match="divisible by 16"):
            Slice(np.zeros((48, 50), dtype=np.float32))

    def test_rejects_nonfinite_with_coordinate(self):
        arr = np.zeros((16, 16), dtype=np.float32)
        arr[3, 5] = np.nan
        with pytest.raises(ValueError, match=r"\(3, 5\)"):
            Slice(arr)

    def test_normalized_image_range(self):
        with pytest.raises(ValueError, match="outside"):
            NormalizedImage(np.full((16, 16), 1.5, dtype=np.float32))


class TestWindowing:
    def test_lower_bound_maps_to_zero(self):
        out = hu_window_normalize(flat_slice(-1000.0), -1000.0, 2000.0)
        assert np.all(out.values == 0.0)

    def test_upper_bound_maps_to_one(self):
        out = hu_window_normalize(flat_slice(2000.0), -1000.0, 2000.0)
        assert np.all(out.values == 1.0)

    def test_midpoint(self):
        # (500 + 1000) / 3000
        out = hu_window_normalize(flat_slice(500.0), -1000.0, 2000.0)
        assert np.allclose(out.values, 0.5, atol=1e-7)

    def test_clamps_out_of_window(self):
        out = hu_window_normalize(flat_slice(5000.0), -1000.0, 2000.0)
        assert np.all(out.values == 1.0)

    def test_rejects_bad_window(self):
        with pytest.raises(ValueError):
            hu_window_normalize(flat_slice(0.0), 100.0, -100.0)

    @given(
        v1=st.floats(-1000, 2000),
        v2=st.floats(-1000, 2000),
    )
    @settings(max_examples=100, deadline=None)
    def test_monotone(self, v1, v2):
        lo, hi = sorted([v1, v2])
        out = hu_window_normalize(
            Slice(np.array([[lo, hi]] * 8 + [[0.0] * 2] * 8, dtype=np.float32).repeat(8, axis=1))
        )
        assert out.values[0, 0] <= out.values[0, 8]

    @given(st.floats(-999.0, 1999.0))
    @settings(max_examples=50, deadline=None)
    def test_inverse_recovers_interior(self, hu):
        s = flat_slice(hu)
        back = normalized_to_hu(hu_window_normalize(s))
        rel = np.abs(back.values - s.values) / np.maximum(np.abs(s.values), 1.0)
        assert rel.max() <= 1e-6


class TestForegroundMask:
    def test_air_is_background(self):
        assert not foreground_mask(flat_slice(-1000.0), -500.0).values.any()

    def test_soft_tissue_is_foreground(self):
        assert foreground_mask(flat_slice(50.0), -500.0).values.all()

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(0)
        arr = rng.uniform(-1200, 500, size=(16, 16)).astype(np.float32)
        s = Slice(arr)
        mask = foreground_mask(s, -500.0).values
        for r in range(16):
            for c in range(16):
                assert mask[r, c] == (s.values[r, c] > -500.0)


class TestPhantom:
    def test_deterministic(self):
        spec = default_phantom_spec(seed=3, size=64)
        c1, n1 = generate_phantom(spec)
        c2, n2 = generate_phantom(spec)
        assert np.array_equal(c1.values, c2.values)
        assert np.array_equal(n1.values, n2.values)

    def test_zero_noise_everywhere(self):
        spec = PhantomSpec(
            seed=1,
            size=32,
            regions=(TissueRegion("ellipse", (16, 16, 8, 8), 40.0, 0.0),),
            background_noise_std_hu=0.0,
        )
        clean, noisy = generate_phantom(spec)
        assert np.array_equal(clean.values, noisy.values)

    def test_region_noise_std_matches_configuration(self):
        # sample-statistics oracle over a 64x64 region at the liver value
        spec = PhantomSpec(
            seed=5,
            size=64,
            regions=(TissueRegion("rect", (0, 0, 64, 64), 60.0, 63.23),),
            background_noise_std_hu=0.0,
        )
        clean, noisy = generate_phantom(spec)
        residual = noisy.values.astype(np.float64) - clean.values.astype(np.float64)
        measured = residual.std()
        assert abs(measured - 63.23) / 63.23 < 0.10

    def test_degenerate_region_rejected(self):
        spec = PhantomSpec(
            seed=1,
            size=32,
            regions=(TissueRegion("ellipse", (16, 16, 0.0, 4.0), 40.0, 1.0),),
        )
        with pytest.raises(ValueError, match="degenerate"):
            generate_phantom(spec)

    def test_out_of_bounds_region_rejected(self):
        spec = PhantomSpec(
            seed=1,
            size=32,
            regions=(TissueRegion("ellipse", (2, 2, 10, 10), 40.0, 1.0),),
        )
        with pytest.raises(ValueError, match="outside"):
            generate_phantom(spec)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            TissueRegion("rect", (0, 0, 4, 4), 40.0, -1.0)

    def test_default_spec_reproducible(self):
        assert default_phantom_spec(9, 64) == default_phantom_spec(9, 64)


class TestSliceIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        s = Slice(rng.uniform(-1000, 2000, size=(32, 48)).astype(np.float32))
        path = tmp_path / "x.asc"
        save_slice(s, path)
        loaded = load_slice(path)
        assert np.array_equal(s.values, loaded.values)
        assert loaded.values.dtype == np.float32

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.asc"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(BadMagicError):
            load_slice(path)

    def test_truncated_payload(self, tmp_path):
        s = flat_slice(0.0, 64)
        path = tmp_path / "x.asc"
        save_slice(s, path)
        data = path.read_bytes()
        # header claims 64x64, payload holds 63x64 values
        path.write_bytes(data[: 12 + 63 * 64 * 4])
        with pytest.raises(PayloadSizeError):
            load_slice(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        s = flat_slice(0.0, 16)
        path = tmp_path / "x.asc"
        save_slice(s, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(PayloadSizeError):
            load_slice(path)

    def test_unusable_header_dims(self, tmp_path):
        path = tmp_path / "x.asc"
        path.write_bytes(b"ASC1" + (8).to_bytes(4, "little") + (8).to_bytes(4, "little") + b"\x00" * 256)
        with pytest.raises(HeaderError):
            load_slice(path)

    def test_png16_export(self, tmp_path):
        img = NormalizedImage(np.linspace(0, 1, 16 * 16, dtype=np.float32).reshape(16, 16))
        save_png16(img, tmp_path / "x.png")
        from PIL import Image

        with Image.open(tmp_path / "x.png") as im:
            arr = np.array(im)
        assert arr.dtype == np.uint16 or arr.dtype == np.int32
        assert arr.max() == 65535

    def test_pair_listing(self, tmp_path):
        clean, noisy = generate_phantom(default_phantom_spec(1, 32))
        save_pair(tmp_path, 0, clean, noisy)
        save_pair(tmp_path, 1, clean, noisy)
        pairs = list_pairs(tmp_path)
        assert len(pairs) == 2
        loaded = load_pairs(tmp_path)
        assert np.array_equal(loaded[0][0].values, noisy.values)
        assert np.array_equal(loaded[0][1].values, clean.values)

    def test_missing_clean_counterpart(self, tmp_path):
        clean, noisy = generate_phantom(default_phantom_spec(1, 32))
        save_pair(tmp_path, 0, clean, noisy)
        (tmp_path / "pair_0000_clean.asc").unlink()
        with pytest.raises(FileNotFoundError):
            list_pairs(tmp_path)
