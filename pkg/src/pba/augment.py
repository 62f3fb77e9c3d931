"""The fifteen image operations of the policy search space.

Images are ``uint8`` arrays of shape ``(height, width, channels)`` with
``channels`` in ``{1, 3}``.  Every operation returns a new array of the same
shape and never touches its input.

Operations take a discrete magnitude level in ``[0, 9]`` which
:func:`magnitude_to_param` maps linearly onto the continuous parameter of the
underlying transform.  Randomness is drawn from a :class:`numpy.random.Generator`
and the number of draws depends only on the operation, never on the level:
the geometric operations draw one sign, Cutout draws one patch center, and
everything else draws nothing.
"""

from __future__ import annotations

import enum
from functools import lru_cache

import numpy as np

FILL_VALUE = 128
MAX_LEVEL = 9
IGNORED = None

# Parameter ranges reached at level 9.
MAX_SHEAR = 0.3
MAX_TRANSLATE_FRACTION = 10 / 32
MAX_ROTATE_DEGREES = 30.0
MAX_POSTERIZE_BITS_REMOVED = 4
MIN_ENHANCE = 0.1
ENHANCE_SPAN = 1.8
CUTOUT_PX_PER_LEVEL = 2


class OpKind(enum.Enum):
    SHEAR_X = "shearx"
    SHEAR_Y = "sheary"
    TRANSLATE_X = "translatex"
    TRANSLATE_Y = "translatey"
    ROTATE = "rotate"
    AUTO_CONTRAST = "autocontrast"
    INVERT = "invert"
    EQUALIZE = "equalize"
    SOLARIZE = "solarize"
    POSTERIZE = "posterize"
    CONTRAST = "contrast"
    COLOR = "color"
    BRIGHTNESS = "brightness"
    SHARPNESS = "sharpness"
    CUTOUT = "cutout"

    @classmethod
    def from_name(cls, name: str) -> "OpKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown operation name {name!r}") from None


OPS = tuple(OpKind)
GEOMETRIC_OPS = frozenset(
    {OpKind.SHEAR_X, OpKind.SHEAR_Y, OpKind.TRANSLATE_X, OpKind.TRANSLATE_Y, OpKind.ROTATE}
)
MAGNITUDE_IGNORED = frozenset({OpKind.AUTO_CONTRAST, OpKind.INVERT, OpKind.EQUALIZE})


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the image invariants and return ``img`` unchanged."""
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise ValueError("image must be a (height, width, channels) array")
    h, w, c = img.shape
    if h == 0 or w == 0:
        raise ValueError(f"zero-sized image {img.shape}")
    if c not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {c}")
    if img.dtype != np.uint8:
        raise ValueError(f"image dtype must be uint8, got {img.dtype}")
    return img


def _check_level(mag: int) -> int:
    mag = int(mag)
    if not 0 <= mag <= MAX_LEVEL:
        raise ValueError(f"magnitude level must be in [0, {MAX_LEVEL}], got {mag}")
    return mag


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def magnitude_to_param(op: OpKind, mag: int):
    """Continuous parameter for ``op`` at level ``mag``.

    Returns the shear factor, translate fraction of the image side, rotation
    in degrees, solarize threshold, number of bits kept by posterize,
    enhancement factor, or cutout edge in pixels.  Operations that ignore the
    magnitude return :data:`IGNORED`.
    """
    mag = _check_level(mag)
    t = mag / MAX_LEVEL
    if op in (OpKind.SHEAR_X, OpKind.SHEAR_Y):
        return MAX_SHEAR * t
    if op in (OpKind.TRANSLATE_X, OpKind.TRANSLATE_Y):
        return MAX_TRANSLATE_FRACTION * t
    if op is OpKind.ROTATE:
        return MAX_ROTATE_DEGREES * t
    if op is OpKind.SOLARIZE:
        return 256.0 * (1.0 - t)
    if op is OpKind.POSTERIZE:
        return 8 - _round_half_up(MAX_POSTERIZE_BITS_REMOVED * t)
    if op in (OpKind.CONTRAST, OpKind.COLOR, OpKind.BRIGHTNESS, OpKind.SHARPNESS):
        return MIN_ENHANCE + ENHANCE_SPAN * t
    if op is OpKind.CUTOUT:
        return CUTOUT_PX_PER_LEVEL * mag
    if op in MAGNITUDE_IGNORED:
        return IGNORED
    raise ValueError(f"unknown operation {op!r}")


# --- geometric -------------------------------------------------------------


@lru_cache(maxsize=64)
def _centered_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return ys - (h - 1) / 2.0, xs - (w - 1) / 2.0


def _affine_nearest(img: np.ndarray, matrix) -> np.ndarray:
    """Resample with nearest neighbour; ``matrix`` maps centered output
    ``(x, y)`` to centered input ``(x, y)``."""
    h, w, _ = img.shape
    yc, xc = _centered_grid(h, w)
    (a, b), (c, d) = matrix
    src_x = np.floor(a * xc + b * yc + (w - 1) / 2.0 + 0.5).astype(np.intp)
    src_y = np.floor(c * xc + d * yc + (h - 1) / 2.0 + 0.5).astype(np.intp)
    inside = (src_x >= 0) & (src_x < w) & (src_y >= 0) & (src_y < h)
    out = np.full_like(img, FILL_VALUE)
    out[inside] = img[src_y[inside], src_x[inside]]
    return out


def shear_x(img: np.ndarray, factor: float) -> np.ndarray:
    """Shear along x about the image center."""
    if factor == 0:
        return img.copy()
    return _affine_nearest(img, ((1.0, factor), (0.0, 1.0)))


def shear_y(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 0:
        return img.copy()
    return _affine_nearest(img, ((1.0, 0.0), (factor, 1.0)))


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center."""
    if degrees == 0:
        return img.copy()
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse rotation in image coordinates (y axis points down)
    return _affine_nearest(img, ((cos, -sin), (sin, cos)))


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift content by whole pixels, filling the vacated border."""
    h, w, _ = img.shape
    out = np.full_like(img, FILL_VALUE)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = img[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


# --- color -----------------------------------------------------------------


def invert(img: np.ndarray) -> np.ndarray:
    return 255 - img


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    mask = (0xFF << (8 - bits)) & 0xFF
    return img & np.uint8(mask)


def auto_contrast(img: np.ndarray) -> np.ndarray:
    """Stretch each channel so its darkest value maps to 0 and its
    brightest to 255."""
    out = img.copy()
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        lo, hi = int(plane.min()), int(plane.max())
        if hi <= lo:
            continue
        scale = 255.0 / (hi - lo)
        offset = -lo * scale
        lut = np.clip(np.trunc(np.arange(256) * scale + offset), 0, 255).astype(np.uint8)
        out[:, :, ch] = lut[plane]
    return out


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization using the cumulative-step lookup
    table of PIL's ``ImageOps.equalize``."""
    out = img.copy()
    for ch in range(img.shape[2]):
        plane = img[:, :, ch]
        hist = np.bincount(plane.ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if len(nonzero) <= 1:
            continue
        step = (int(nonzero.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            continue
        cum = np.concatenate(([0], np.cumsum(hist)[:-1]))
        lut = np.minimum((step // 2 + cum) // step, 255).astype(np.uint8)
        out[:, :, ch] = lut[plane]
    return out


def _grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0].astype(np.float64)
    f = img.astype(np.float64)
    return (f[:, :, 0] * 299 + f[:, :, 1] * 587 + f[:, :, 2] * 114) / 1000.0


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    f = img.astype(np.float64)
    out = degenerate + factor * (f - degenerate)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = np.floor(_grayscale(img).mean() + 0.5)
    return _blend(np.full(img.shape, mean), img, factor)


def color(img: np.ndarray, factor: float) -> np.ndarray:
    """Saturation; a single-channel image has none and is returned as is."""
    if img.shape[2] == 1:
        return img.copy()
    gray = np.floor(_grayscale(img) + 0.5)[:, :, None]
    return _blend(np.broadcast_to(gray, img.shape), img, factor)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(np.zeros(img.shape), img, factor)


def sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    f = img.astype(np.float64)
    degenerate = f.copy()
    h, w, _ = img.shape
    if h >= 3 and w >= 3:
        # 3x3 smoothing kernel, center weight 5, others 1; borders keep the original
        acc = np.zeros((h - 2, w - 2, img.shape[2]))
        for dy in range(3):
            for dx in range(3):
                acc += f[dy:dy + h - 2, dx:dx + w - 2]
        acc += 4 * f[1:-1, 1:-1]
        degenerate[1:-1, 1:-1] = np.floor(acc / 13.0 + 0.5)
    return _blend(degenerate, img, factor)


def cutout_patch(img: np.ndarray, size_px: int, rng: np.random.Generator) -> np.ndarray:
    """Fill a ``size_px`` square centered on a uniformly random pixel.

    The patch is clipped at the image border, so patches centered near an
    edge cover fewer pixels.
    """
    h, w, _ = img.shape
    if not 0 <= size_px <= min(h, w):
        raise ValueError(f"cutout size {size_px} outside [0, {min(h, w)}]")
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    return _fill_square(img, cy, cx, size_px)


def _fill_square(img: np.ndarray, cy: int, cx: int, size_px: int) -> np.ndarray:
    out = img.copy()
    if size_px == 0:
        return out
    y0, x0 = cy - size_px // 2, cx - size_px // 2
    out[max(0, y0):max(0, y0 + size_px), max(0, x0):max(0, x0 + size_px)] = FILL_VALUE
    return out


def apply_op(img: np.ndarray, op: OpKind, mag: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one operation at magnitude level ``mag``."""
    validate_image(img)
    param = magnitude_to_param(op, mag)
    if op in GEOMETRIC_OPS:
        sign = -1 if rng.random() < 0.5 else 1
        if op is OpKind.SHEAR_X:
            return shear_x(img, sign * param)
        if op is OpKind.SHEAR_Y:
            return shear_y(img, sign * param)
        if op is OpKind.ROTATE:
            return rotate(img, sign * param)
        if op is OpKind.TRANSLATE_X:
            return translate(img, sign * _round_half_up(img.shape[1] * param), 0)
        return translate(img, 0, sign * _round_half_up(img.shape[0] * param))
    if op is OpKind.CUTOUT:
        return cutout_patch(img, min(param, img.shape[0], img.shape[1]), rng)
    if op is OpKind.AUTO_CONTRAST:
        return auto_contrast(img)
    if op is OpKind.INVERT:
        return invert(img)
    if op is OpKind.EQUALIZE:
        return equalize(img)
    if op is OpKind.SOLARIZE:
        return solarize(img, param)
    if op is OpKind.POSTERIZE:
        return posterize(img, param)
    if op is OpKind.CONTRAST:
        return contrast(img, param)
    if op is OpKind.COLOR:
        return color(img, param)
    if op is OpKind.BRIGHTNESS:
        return brightness(img, param)
    return sharpness(img, param)
