"""Image I/O, color conversion, bicubic resampling, and the Y-channel
fidelity metrics (PSNR / SSIM).

Bytes are the interchange format: every image enters and leaves as 8-bit
RGB. Metric arithmetic always runs in float64 no matter which numeric
profile the network uses, so reported dB values are profile-independent.
"""

import numpy as np
from PIL import Image
from scipy.signal import correlate2d

from .errors import DataError, ImageFormatError, ShapeError

__all__ = [
    "ImagePlane", "load_png", "save_png", "rgb_to_y", "bicubic_resize",
    "psnr_y", "ssim_y", "psnr_from_y", "ssim_from_y",
]


class ImagePlane:
    """8-bit RGB raster, row-major, shape (height, width, 3)."""

    __slots__ = ("pixels",)

    def __init__(self, pixels):
        arr = np.asarray(pixels)
        if arr.dtype != np.uint8:
            raise ImageFormatError("pixel buffer must be uint8, got %s" % arr.dtype)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError("pixel buffer must be (H,W,3), got %s" % (arr.shape,))
        self.pixels = arr

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def to_unit_floats(self):
        """Channel-first float64 view in [0,1] for feeding the network."""
        return self.pixels.astype(np.float64).transpose(2, 0, 1) / 255.0

    @classmethod
    def from_unit_floats(cls, arr):
        """Quantize a (3,H,W) float array in [0,1] back to bytes.

        Values are clamped first, then rounded half away from zero.
        """
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError("expected (3,H,W) floats, got %s" % (arr.shape,))
        clamped = np.clip(arr, 0.0, 1.0)
        bytes_ = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
        return cls(bytes_.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# PNG I/O

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _check_png_header(path):
    # Pillow quietly down-converts some exotic depths, so the IHDR chunk
    # is inspected directly: bit depth must be 8 and the color type must
    # be grayscale (0) or truecolor (2).
    with open(str(path), "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != _PNG_SIGNATURE:
        raise ImageFormatError("%s is not a PNG file" % path)
    bit_depth, color_type = head[24], head[25]
    if bit_depth != 8:
        raise ImageFormatError("unsupported PNG bit depth %d (only 8-bit)" % bit_depth)
    if color_type not in (0, 2):
        kind = {3: "palette", 4: "gray+alpha", 6: "RGBA"}.get(color_type, str(color_type))
        raise ImageFormatError("unsupported PNG color type: %s" % kind)


def load_png(path):
    """Read an 8-bit RGB or grayscale PNG; grayscale is replicated to RGB."""
    _check_png_header(path)
    with Image.open(str(path)) as im:
        im.load()
        mode = im.mode
        if mode == "L":
            arr = np.asarray(im, dtype=np.uint8)
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        elif mode == "RGB":
            arr = np.asarray(im, dtype=np.uint8)
        else:
            raise ImageFormatError("unsupported PNG mode %r" % mode)
    return ImagePlane(arr.copy())


def save_png(img, path):
    Image.fromarray(img.pixels, "RGB").save(str(path), format="PNG")


# ---------------------------------------------------------------------------
# color


def rgb_to_y(img):
    """Luma plane (float64, shape (H,W)) in the studio-swing 16..235 range."""
    rgb = img.pixels.astype(np.float64)
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    return 16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic(x, a):
    ax = np.abs(x)
    inner = (a + 2.0) * ax ** 3 - (a + 3.0) * ax ** 2 + 1.0
    outer = a * ax ** 3 - 5.0 * a * ax ** 2 + 8.0 * a * ax - 4.0 * a
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _contributions(in_len, out_len, scale, a, antialias):
    """Per-output-sample source indices and normalized kernel weights."""
    shrink = antialias and scale < 1.0
    half_width = 2.0 / scale if shrink else 2.0
    kscale = scale if shrink else 1.0
    u = (np.arange(out_len) + 0.5) / scale - 0.5
    left = np.floor(u - half_width).astype(np.int64)
    n_taps = int(np.ceil(2.0 * half_width)) + 2
    idx = left[:, None] + np.arange(n_taps)[None, :]
    weights = _cubic((u[:, None] - idx) * kscale, a) * kscale
    weights = weights / weights.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_len - 1)  # edge replication
    return idx, weights


def _resample_axis(arr, axis, idx, weights):
    moved = np.moveaxis(arr, axis, -1)
    gathered = moved[..., idx]                 # (..., out, taps)
    out = (gathered * weights).sum(axis=-1)
    return np.moveaxis(out, -1, axis)


def bicubic_resize(img, scale_num, scale_den, a=-0.5, antialias=True):
    """Rational-factor cubic resample of an RGB image.

    The kernel is the classical two-lobe cubic with parameter a; when
    shrinking with antialias enabled its support widens by the inverse
    scale. Border handling replicates edge samples. Output dimensions
    round up: out = ceil(in * scale_num / scale_den).
    """
    scale_num, scale_den = int(scale_num), int(scale_den)
    if scale_num < 1 or scale_den < 1:
        raise DataError("scale must be a positive rational, got %d/%d"
                        % (scale_num, scale_den))
    h, w = img.height, img.width
    out_h = -(-h * scale_num // scale_den)
    out_w = -(-w * scale_num // scale_den)
    if out_h < 1 or out_w < 1:
        raise DataError("resampling %dx%d by %d/%d leaves no pixels"
                        % (h, w, scale_num, scale_den))
    scale = scale_num / scale_den
    planes = img.pixels.astype(np.float64)
    idx_h, w_h = _contributions(h, out_h, scale, a, antialias)
    idx_w, w_w = _contributions(w, out_w, scale, a, antialias)
    planes = _resample_axis(planes, 0, idx_h, w_h)
    planes = _resample_axis(planes, 1, idx_w, w_w)
    clamped = np.clip(planes, 0.0, 255.0)
    return ImagePlane(np.floor(clamped + 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# metrics


def _crop_plane(y, crop):
    crop = int(crop)
    if crop < 0:
        raise DataError("crop must be >= 0, got %d" % crop)
    if crop == 0:
        return y
    if y.shape[0] <= 2 * crop or y.shape[1] <= 2 * crop:
        raise DataError("crop %d consumes the whole %dx%d plane"
                        % (crop, y.shape[0], y.shape[1]))
    return y[crop:-crop, crop:-crop]


def psnr_from_y(y_a, y_b, crop=0):
    """PSNR in dB between two luma planes; inf for identical planes."""
    y_a = np.asarray(y_a, dtype=np.float64)
    y_b = np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape:
        raise ShapeError("plane shapes differ: %s vs %s" % (y_a.shape, y_b.shape))
    a = _crop_plane(y_a, crop)
    b = _crop_plane(y_b, crop)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(255.0 ** 2 / mse))


def psnr_y(sr, hr, crop):
    if (sr.height, sr.width) != (hr.height, hr.width):
        raise ShapeError("image sizes differ: %dx%d vs %dx%d"
                         % (sr.height, sr.width, hr.height, hr.width))
    return psnr_from_y(rgb_to_y(sr), rgb_to_y(hr), crop)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _gaussian_window():
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    return win / win.sum()


_WINDOW = _gaussian_window()


def ssim_from_y(y_a, y_b, crop=0, k1=0.01, k2=0.03, level=255.0):
    """Mean structural similarity over all fully valid 11x11 windows."""
    y_a = np.asarray(y_a, dtype=np.float64)
    y_b = np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape:
        raise ShapeError("plane shapes differ: %s vs %s" % (y_a.shape, y_b.shape))
    a = _crop_plane(y_a, crop)
    b = _crop_plane(y_b, crop)
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise DataError("plane %dx%d smaller than the %dx%d window"
                        % (a.shape[0], a.shape[1], _SSIM_WINDOW, _SSIM_WINDOW))
    c1 = (k1 * level) ** 2
    c2 = (k2 * level) ** 2
    mu_a = correlate2d(a, _WINDOW, mode="valid")
    mu_b = correlate2d(b, _WINDOW, mode="valid")
    # the covariance reuses the exact expression of the variances so that
    # identical inputs produce bitwise-equal numerator and denominator
    var_a = correlate2d(a * a, _WINDOW, mode="valid") - mu_a * mu_a
    var_b = correlate2d(b * b, _WINDOW, mode="valid") - mu_b * mu_b
    cov = correlate2d(a * b, _WINDOW, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_y(sr, hr, crop):
    if (sr.height, sr.width) != (hr.height, hr.width):
        raise ShapeError("image sizes differ: %dx%d vs %dx%d"
                         % (sr.height, sr.width, hr.height, hr.width))
    return ssim_from_y(rgb_to_y(sr), rgb_to_y(hr), crop)
