"""Imaging tests: PNG I/O, luma conversion, bicubic resampling against a
separable weight-table oracle, and PSNR/SSIM closed forms."""

import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smre.errors import DataError, ImageFormatError, ShapeError
from smre.imaging import (ImagePlane, bicubic_resize, load_png, psnr_from_y,
                          psnr_y, rgb_to_y, save_png, ssim_from_y, ssim_y)

RNG = np.random.default_rng(424242)


def random_image(h, w, seed=0):
    return ImagePlane(np.random.default_rng(seed).integers(0, 256, (h, w, 3),
                                                           dtype=np.uint8))


def make_png_bytes(width, height, bit_depth, color_type, raw_rows):
    """Minimal PNG encoder for fixtures (IHDR + IDAT + IEND)."""
    def chunk(tag, payload):
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(
            ">I", zlib.crc32(body) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", width, height, bit_depth, color_type, 0, 0, 0)
    idat = zlib.compress(raw_rows)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", idat) + chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# PNG I/O


class TestPngIO:
    def test_roundtrip_bitwise(self, tmp_path):
        img = random_image(13, 9, seed=1)
        path = tmp_path / "x.png"
        save_png(img, path)
        again = load_png(path)
        np.testing.assert_array_equal(again.pixels, img.pixels)

    def test_hand_assembled_fixture_decodes_exactly(self, tmp_path):
        # 2x2 RGB, rows carry a leading zero filter byte
        px = [(255, 0, 0), (0, 255, 0), (0, 0, 255), (7, 130, 202)]
        rows = b"\x00" + bytes(px[0] + px[1]) + b"\x00" + bytes(px[2] + px[3])
        path = tmp_path / "fixture.png"
        path.write_bytes(make_png_bytes(2, 2, 8, 2, rows))
        img = load_png(path)
        expect = np.array(px, dtype=np.uint8).reshape(2, 2, 3)
        np.testing.assert_array_equal(img.pixels, expect)

    def test_grayscale_replicates_channels(self, tmp_path):
        rows = b"\x00\x10\x80" + b"\x00\xff\x00"
        path = tmp_path / "gray.png"
        path.write_bytes(make_png_bytes(2, 2, 8, 0, rows))
        img = load_png(path)
        expect = np.array([[16, 128], [255, 0]], dtype=np.uint8)
        for ch in range(3):
            np.testing.assert_array_equal(img.pixels[:, :, ch], expect)

    def test_16bit_rejected(self, tmp_path):
        rows = b"\x00" + bytes(12)
        path = tmp_path / "deep.png"
        path.write_bytes(make_png_bytes(2, 1, 16, 2, rows))
        with pytest.raises(ImageFormatError):
            load_png(path)

    def test_palette_rejected(self, tmp_path):
        path = tmp_path / "pal.png"
        path.write_bytes(make_png_bytes(2, 2, 8, 3, b"\x00\x00\x00\x00\x00\x00"))
        with pytest.raises(ImageFormatError):
            load_png(path)

    def test_rgba_rejected(self, tmp_path):
        path = tmp_path / "alpha.png"
        path.write_bytes(make_png_bytes(1, 1, 8, 6, b"\x00\x01\x02\x03\x04"))
        with pytest.raises(ImageFormatError):
            load_png(path)

    def test_non_png_rejected(self, tmp_path):
        path = tmp_path / "not.png"
        path.write_bytes(b"GIF89a" + bytes(64))
        with pytest.raises(ImageFormatError):
            load_png(path)

    def test_plane_validation(self):
        with pytest.raises(ImageFormatError):
            ImagePlane(np.zeros((4, 4, 3), dtype=np.float32))
        with pytest.raises(ShapeError):
            ImagePlane(np.zeros((4, 4, 4), dtype=np.uint8))


class TestUnitFloatConversion:
    def test_roundtrip(self):
        img = random_image(6, 5, seed=2)
        again = ImagePlane.from_unit_floats(img.to_unit_floats())
        np.testing.assert_array_equal(again.pixels, img.pixels)

    def test_rounding_half_away_and_clamp(self):
        arr = np.zeros((3, 1, 4))
        arr[:, 0, 0] = 127.5 / 255.0   # exact half rounds away from zero
        arr[:, 0, 1] = -0.25           # clamps to 0
        arr[:, 0, 2] = 1.5             # clamps to 255
        arr[:, 0, 3] = 126.49 / 255.0
        img = ImagePlane.from_unit_floats(arr)
        np.testing.assert_array_equal(img.pixels[0, :, 0], [128, 0, 255, 126])


# ---------------------------------------------------------------------------
# luma


class TestRgbToY:
    def test_white(self):
        img = ImagePlane(np.full((2, 2, 3), 255, dtype=np.uint8))
        np.testing.assert_allclose(rgb_to_y(img), 235.0, atol=1e-9)

    def test_black(self):
        img = ImagePlane(np.zeros((2, 2, 3), dtype=np.uint8))
        np.testing.assert_allclose(rgb_to_y(img), 16.0, atol=0)

    def test_pure_red(self):
        arr = np.zeros((1, 1, 3), dtype=np.uint8)
        arr[0, 0, 0] = 255
        np.testing.assert_allclose(rgb_to_y(ImagePlane(arr)), 81.481, atol=1e-9)

    def test_range_is_studio_swing(self):
        img = random_image(32, 32, seed=3)
        y = rgb_to_y(img)
        assert y.min() >= 16.0 - 1e-9 and y.max() <= 235.0 + 1e-9

    def test_dtype_is_double(self):
        assert rgb_to_y(random_image(2, 2)).dtype == np.float64


# ---------------------------------------------------------------------------
# bicubic


def cubic_weight(x, a=-0.5):
    ax = abs(x)
    if ax <= 1:
        return (a + 2) * ax ** 3 - (a + 3) * ax ** 2 + 1
    if ax < 2:
        return a * ax ** 3 - 5 * a * ax ** 2 + 8 * a * ax - 4 * a
    return 0.0


def resample_1d_oracle(vec, out_len, scale, a=-0.5, antialias=True):
    """Scalar-loop resample of one line, mirroring the documented rules."""
    shrink = antialias and scale < 1
    hw = 2 / scale if shrink else 2
    ks = scale if shrink else 1.0
    out = np.zeros(out_len)
    for i in range(out_len):
        u = (i + 0.5) / scale - 0.5
        lo = int(np.floor(u - hw))
        hi = int(np.ceil(u + hw))
        ws, vs = [], []
        for j in range(lo, hi + 1):
            ws.append(cubic_weight((u - j) * ks, a) * ks)
            vs.append(vec[min(max(j, 0), len(vec) - 1)])
        ws = np.array(ws)
        out[i] = float(np.dot(ws / ws.sum(), np.array(vs)))
    return out


class TestBicubic:
    def test_identity_scale_is_bitwise(self):
        img = random_image(7, 11, seed=4)
        out = bicubic_resize(img, 1, 1)
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_constant_preserved(self):
        img = ImagePlane(np.full((9, 9, 3), 143, dtype=np.uint8))
        for num, den in [(1, 2), (2, 1), (1, 3), (3, 1), (1, 4), (3, 2)]:
            out = bicubic_resize(img, num, den)
            assert (out.pixels == 143).all(), (num, den)

    def test_output_dims_round_up(self):
        img = random_image(7, 10, seed=5)
        out = bicubic_resize(img, 1, 2)
        assert (out.height, out.width) == (4, 5)
        up = bicubic_resize(img, 3, 1)
        assert (up.height, up.width) == (21, 30)

    def test_gradient_halving_matches_separable_oracle(self):
        ramp = np.arange(64, dtype=np.uint8).reshape(8, 8)
        img = ImagePlane(np.stack([ramp, ramp.T, 255 - ramp], axis=2))
        got = bicubic_resize(img, 1, 2).pixels.astype(np.int64)
        planes = img.pixels.astype(np.float64)
        expect = np.zeros((4, 4, 3))
        for ch in range(3):
            tmp = np.stack([resample_1d_oracle(planes[:, j, ch], 4, 0.5)
                            for j in range(8)], axis=1)
            expect[:, :, ch] = np.stack(
                [resample_1d_oracle(tmp[i, :], 4, 0.5) for i in range(4)], axis=0)
        expect = np.floor(np.clip(expect, 0, 255) + 0.5).astype(np.int64)
        assert np.abs(got - expect).max() <= 1

    def test_upscale_matches_oracle_rows(self):
        line = np.array([0, 40, 90, 200, 255, 10, 77, 128], dtype=np.float64)
        img = ImagePlane(np.tile(line[None, :, None], (4, 1, 3)).astype(np.uint8))
        got = bicubic_resize(img, 2, 1)
        oracle = resample_1d_oracle(line, 16, 2.0)
        oracle = np.floor(np.clip(oracle, 0, 255) + 0.5)
        np.testing.assert_allclose(got.pixels[2, :, 0].astype(float), oracle, atol=1)

    def test_weights_sum_to_one(self):
        from smre.imaging import _contributions
        for in_len, out_len, scale in [(8, 4, 0.5), (8, 16, 2.0), (10, 4, 0.4),
                                       (5, 15, 3.0), (9, 3, 1 / 3)]:
            _, w = _contributions(in_len, out_len, scale, -0.5, True)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_zero_output_rejected(self):
        img = random_image(2, 2, seed=6)
        with pytest.raises(DataError):
            bicubic_resize(img, 0, 1)

    def test_downscale_then_check_energy(self):
        # antialiasing keeps a checkerboard's mean; the naive kernel aliases
        board = np.indices((16, 16)).sum(axis=0) % 2 * 255
        img = ImagePlane(np.repeat(board[:, :, None], 3, 2).astype(np.uint8))
        aa = bicubic_resize(img, 1, 2).pixels.mean()
        assert abs(aa - 127.5) < 4.0


# ---------------------------------------------------------------------------
# metrics


class TestPsnr:
    def test_identical_is_infinite(self):
        img = random_image(24, 24, seed=7)
        assert psnr_y(img, img, crop=2) == float("inf")

    def test_constant_offset_closed_form(self):
        y = RNG.uniform(30, 200, size=(40, 40))
        assert abs(psnr_from_y(y, y + 1.0) - 48.1308) < 1e-3

    def test_offset_sixteen_closed_form(self):
        y = RNG.uniform(30, 200, size=(40, 40))
        expect = 48.13080361 - 20 * np.log10(16.0)
        assert abs(psnr_from_y(y, y + 16.0) - expect) < 1e-6
        assert abs(expect - 24.0494) < 1e-3

    def test_symmetry(self):
        a = random_image(20, 20, seed=8)
        b = random_image(20, 20, seed=9)
        assert psnr_y(a, b, 2) == psnr_y(b, a, 2)

    def test_monotone_in_noise_amplitude(self):
        y = RNG.uniform(40, 210, size=(30, 30))
        noise = RNG.normal(size=(30, 30))
        vals = [psnr_from_y(y, y + amp * noise) for amp in (0.5, 1.0, 2.0, 4.0)]
        assert all(x > y2 for x, y2 in zip(vals, vals[1:]))

    def test_crop_changes_region(self):
        y = RNG.uniform(20, 230, size=(20, 20))
        noisy = y.copy()
        noisy[0, :] += 50.0  # damage confined to the border
        assert psnr_from_y(y, noisy, crop=1) == float("inf")
        assert psnr_from_y(y, noisy, crop=0) < 40.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr_y(random_image(8, 8), random_image(8, 9), 0)

    def test_crop_consuming_plane_rejected(self):
        with pytest.raises(DataError):
            psnr_from_y(np.zeros((4, 4)), np.zeros((4, 4)), crop=2)


class TestSsim:
    def test_self_similarity_is_exactly_one(self):
        img = random_image(32, 32, seed=10)
        assert ssim_y(img, img, crop=2) == 1.0

    def test_symmetry(self):
        a = random_image(24, 24, seed=11)
        b = random_image(24, 24, seed=12)
        assert abs(ssim_y(a, b, 0) - ssim_y(b, a, 0)) < 1e-12

    def test_constant_shift_closed_form(self):
        mu = 90.0
        c = 8.0
        y = np.full((25, 25), mu)
        got = ssim_from_y(y, y + c)
        c1 = (0.01 * 255) ** 2
        expect = (2 * mu * (mu + c) + c1) / (mu * mu + (mu + c) ** 2 + c1)
        assert abs(got - expect) < 1e-9

    def test_sliding_window_oracle(self):
        a = RNG.uniform(16, 235, size=(18, 16))
        b = RNG.uniform(16, 235, size=(18, 16))
        got = ssim_from_y(a, b)

        half = 5.0
        coords = np.arange(11) - half
        g1 = np.exp(-coords ** 2 / (2 * 1.5 ** 2))
        win = np.outer(g1, g1)
        win /= win.sum()
        c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
        vals = []
        for i in range(18 - 10):
            for j in range(16 - 10):
                pa = a[i:i + 11, j:j + 11]
                pb = b[i:i + 11, j:j + 11]
                mua = (pa * win).sum()
                mub = (pb * win).sum()
                va = (pa * pa * win).sum() - mua ** 2
                vb = (pb * pb * win).sum() - mub ** 2
                cov = (pa * pb * win).sum() - mua * mub
                vals.append(((2 * mua * mub + c1) * (2 * cov + c2))
                            / ((mua ** 2 + mub ** 2 + c1) * (va + vb + c2)))
        assert abs(got - float(np.mean(vals))) < 1e-9

    def test_too_small_rejected(self):
        with pytest.raises(DataError):
            ssim_from_y(np.zeros((10, 12)), np.zeros((10, 12)))

    def test_value_in_range(self):
        a = random_image(20, 20, seed=13)
        b = random_image(20, 20, seed=14)
        assert -1.0 <= ssim_y(a, b, 0) <= 1.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_property_ssim_self_one_psnr_self_inf(seed):
    img = random_image(16, 14, seed=seed)
    assert ssim_y(img, img, 0) == 1.0
    assert psnr_y(img, img, 0) == float("inf")


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 30), st.integers(2, 30), st.integers(0, 1000))
def test_property_constant_images_survive_resampling(h, w, seed):
    value = int(np.random.default_rng(seed).integers(0, 256))
    img = ImagePlane(np.full((h, w, 3), value, dtype=np.uint8))
    out = bicubic_resize(img, 1, 2)
    assert (out.pixels == value).all()
