"""Raster types and low-level image operations.

Everything downstream works on single-channel planes with values in [0, 1].
All sampling uses the pixel-center (align-corners-false) convention:
resampling an image to a new size samples the input at
``x = (i + 0.5) * old / new - 0.5``.

Types are immutable after construction; every operation returns a new object.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit, prange
from PIL import Image
from scipy.ndimage import correlate1d

from .errors import CorruptPyramidManifest, OutputWriteFailure, UnreadableInput

# ITU-R 601 luma weights.
_LUMA_R = 0.299
_LUMA_G = 0.587
_LUMA_B = 0.114

# Catmull-Rom cubic parameter.
_CUBIC_A = -0.5

CLAHE_BINS = 256


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImagePlane:
    """Single-channel 2-D raster, float64, row-major, values nominally in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"ImagePlane requires a 2-D array, got shape {arr.shape}")
        if arr.flags.writeable:
            arr = np.ascontiguousarray(arr).copy()
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "ImagePlane":
        """Zero-copy constructor for freshly allocated float64 arrays."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "data", _freeze(np.ascontiguousarray(arr, dtype=np.float64)))
        return obj

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class RgbImage:
    """8-bit interleaved RGB raster."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"RgbImage requires an (h, w, 3) array, got shape {arr.shape}")
        if arr.flags.writeable:
            arr = np.ascontiguousarray(arr).copy()
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def to_grayscale(img: RgbImage) -> ImagePlane:
    """ITU-R 601 luminance of an 8-bit RGB image, scaled into [0, 1]."""
    rgb = img.data.astype(np.float64)
    lum = (_LUMA_R * rgb[..., 0] + _LUMA_G * rgb[..., 1] + _LUMA_B * rgb[..., 2]) / 255.0
    np.clip(lum, 0.0, 1.0, out=lum)
    return ImagePlane._wrap(lum)


def raster_to_plane(arr: np.ndarray) -> ImagePlane:
    """Convert a loaded uint8 raster (2-D grayscale or (h, w, 3) RGB) to a plane."""
    if arr.ndim == 2:
        return ImagePlane._wrap(arr.astype(np.float64) / 255.0)
    return to_grayscale(RgbImage(arr))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian with radius ceil(3*sigma), normalized to sum 1."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(data: np.ndarray, sigma: float, axis: int) -> np.ndarray:
    if sigma <= 0.0:
        return data
    # mode="nearest" replicates the edge sample (clamp-to-border).
    return correlate1d(data, gaussian_kernel(sigma), axis=axis, mode="nearest")


def gaussian_blur(p: ImagePlane, sigma: float) -> ImagePlane:
    """Separable Gaussian smoothing with clamp-to-border edge handling.

    sigma = 0 returns the input plane unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return p
    out = _blur_axis(_blur_axis(p.data, sigma, 0), sigma, 1)
    return ImagePlane._wrap(out)


def _sample_axis_coords(old: int, new: int) -> np.ndarray:
    return (np.arange(new, dtype=np.float64) + 0.5) * (old / new) - 0.5


def _resample_1d(data: np.ndarray, new_n: int, axis: int, mode: str) -> np.ndarray:
    """Resample one axis at pixel-center coordinates, clamped to the grid."""
    old_n = data.shape[axis]
    if new_n == old_n:
        return data
    moved = np.moveaxis(data, axis, -1)
    x = np.clip(_sample_axis_coords(old_n, new_n), 0.0, old_n - 1.0)
    if mode == "bilinear":
        i0 = np.floor(x).astype(np.intp)
        f = x - i0
        i1 = np.minimum(i0 + 1, old_n - 1)
        out = moved[..., i0] * (1.0 - f) + moved[..., i1] * f
    elif mode == "bicubic":
        i = np.floor(x).astype(np.intp)
        f = x - i
        w0, w1, w2, w3 = _cubic_weights_vec(f)
        t0 = np.clip(i - 1, 0, old_n - 1)
        t1 = np.clip(i, 0, old_n - 1)
        t2 = np.clip(i + 1, 0, old_n - 1)
        t3 = np.clip(i + 2, 0, old_n - 1)
        out = moved[..., t0] * w0 + moved[..., t1] * w1 + moved[..., t2] * w2 + moved[..., t3] * w3
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return np.moveaxis(out, -1, axis)


def resample(p: ImagePlane, new_w: int, new_h: int, mode: str = "bilinear") -> ImagePlane:
    """Resize a plane by separable interpolation (``bilinear`` or ``bicubic``).

    Sample coordinates are clamped to the grid, so constants are preserved at
    any size. Downsampling should normally go through
    :func:`resample_antialiased` to get the aliasing pre-blur.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError("target size must be at least 1x1")
    out = _resample_1d(p.data, new_w, 1, mode)
    out = _resample_1d(out, new_h, 0, mode)
    return ImagePlane._wrap(np.ascontiguousarray(out))


def resample_antialiased(p: ImagePlane, new_w: int, new_h: int, mode: str = "bilinear") -> ImagePlane:
    """Resample preceded, per axis, by a Gaussian pre-blur of sigma = factor / 2.

    The pre-blur applies only to axes that shrink (factor = old / new > 1).
    """
    data = p.data
    fy = p.height / new_h
    fx = p.width / new_w
    if fy > 1.0:
        data = _blur_axis(data, fy / 2.0, 0)
    if fx > 1.0:
        data = _blur_axis(data, fx / 2.0, 1)
    out = _resample_1d(data, new_w, 1, mode)
    out = _resample_1d(out, new_h, 0, mode)
    return ImagePlane._wrap(np.ascontiguousarray(out))


def fit_max_side(width: int, height: int, side: int) -> tuple[int, int]:
    """Dimensions with max side exactly ``side``, aspect preserved (rounded, >= 1)."""
    s = side / max(width, height)
    return max(1, round(width * s)), max(1, round(height * s))


# ---------------------------------------------------------------------------
# CLAHE


def _tile_starts(n: int, tiles: int) -> np.ndarray:
    return np.floor(np.arange(tiles + 1) * (n / tiles)).astype(np.intp)


def quantize_bins(data: np.ndarray, bins: int = CLAHE_BINS) -> np.ndarray:
    """Uniform quantization of [0, 1] values into ``bins`` buckets."""
    return np.minimum((data * bins).astype(np.intp), bins - 1)


def _clahe_tile_luts(
    data: np.ndarray, clip_limit: float, nx: int, ny: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-tile bin-to-value mappings.

    Returns ``(luts, passthrough)`` where ``luts`` has shape (ny, nx, bins) and
    ``passthrough`` marks degenerate tiles (single occupied bin) whose mapping
    is the identity on raw values.
    """
    h, w = data.shape
    bins = CLAHE_BINS
    xs = _tile_starts(w, nx)
    ys = _tile_starts(h, ny)
    b = quantize_bins(data, bins)
    luts = np.zeros((ny, nx, bins), dtype=np.float64)
    passthrough = np.zeros((ny, nx), dtype=bool)
    for ty in range(ny):
        for tx in range(nx):
            tile = b[ys[ty] : ys[ty + 1], xs[tx] : xs[tx + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            occupied = np.nonzero(hist)[0]
            if occupied.size <= 1:
                passthrough[ty, tx] = True
                continue
            if math.isfinite(clip_limit):
                limit = clip_limit * n / bins
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            cdf = np.cumsum(hist)
            cdf_min = cdf[np.nonzero(hist)[0][0]]
            lut = (cdf - cdf_min) / (n - cdf_min)
            luts[ty, tx] = np.clip(lut, 0.0, 1.0)
    return luts, passthrough


def _tile_interp_axis(n: int, tiles: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Neighbor tile indices and blend weight for every pixel along one axis."""
    starts = _tile_starts(n, tiles)
    centers = (starts[:-1] + starts[1:] - 1) / 2.0
    x = np.arange(n, dtype=np.float64)
    i1 = np.searchsorted(centers, x, side="right")
    i0 = np.clip(i1 - 1, 0, tiles - 1)
    i1 = np.clip(i1, 0, tiles - 1)
    span = centers[i1] - centers[i0]
    weight = np.where(span > 0, (x - centers[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0.astype(np.intp), i1.astype(np.intp), weight


def clahe(p: ImagePlane, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> ImagePlane:
    """Contrast-limited adaptive histogram equalization.

    Values are quantized to 256 bins; each tile's histogram is clipped at
    ``clip_limit * tile_pixels / 256`` with the clipped mass redistributed
    uniformly across all bins, and mapped through its normalized CDF. Each
    output pixel bilinearly blends the mappings of the four surrounding tile
    centers. Degenerate tiles (no contrast) pass raw values through, so a
    constant plane is returned unchanged.
    """
    nx, ny = tiles
    if clip_limit <= 0:
        raise ValueError("clip_limit must be > 0")
    if nx < 1 or ny < 1:
        raise ValueError("tile counts must be >= 1")
    data = p.data
    luts, passthrough = _clahe_tile_luts(data, clip_limit, nx, ny)
    bins = quantize_bins(data)
    tx0, tx1, wx = _tile_interp_axis(p.width, nx)
    ty0, ty1, wy = _tile_interp_axis(p.height, ny)

    def tile_values(ty_idx: np.ndarray, tx_idx: np.ndarray) -> np.ndarray:
        ty_g = ty_idx[:, None]
        tx_g = tx_idx[None, :]
        vals = luts[ty_g, tx_g, bins]
        mask = passthrough[ty_g, tx_g]
        return np.where(mask, data, vals)

    v00 = tile_values(ty0, tx0)
    v01 = tile_values(ty0, tx1)
    v10 = tile_values(ty1, tx0)
    v11 = tile_values(ty1, tx1)
    wxg = wx[None, :]
    wyg = wy[:, None]
    top = v00 * (1.0 - wxg) + v01 * wxg
    bot = v10 * (1.0 - wxg) + v11 * wxg
    out = top * (1.0 - wyg) + bot * wyg
    return ImagePlane._wrap(out)


# ---------------------------------------------------------------------------
# Bicubic sampling (Catmull-Rom, a = -0.5)


def _cubic_weights_vec(f: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    a = _CUBIC_A
    f2 = f * f
    f3 = f2 * f
    # Taps at offsets -1, 0, +1, +2 relative to floor(x); distances 1+f, f, 1-f, 2-f.
    w0 = a * (f3 - 2.0 * f2 + f)
    w1 = (a + 2.0) * f3 - (a + 3.0) * f2 + 1.0
    w2 = -(a + 2.0) * f3 + (2.0 * a + 3.0) * f2 - a * f
    w3 = a * (f2 - f3)
    return w0, w1, w2, w3


@njit(cache=True)
def _cubic_w(f):
    a = -0.5
    f2 = f * f
    f3 = f2 * f
    w0 = a * (f3 - 2.0 * f2 + f)
    w1 = (a + 2.0) * f3 - (a + 3.0) * f2 + 1.0
    w2 = -(a + 2.0) * f3 + (2.0 * a + 3.0) * f2 - a * f
    w3 = a * (f2 - f3)
    return w0, w1, w2, w3


@njit(cache=True)
def _cubic_dw(f):
    a = -0.5
    f2 = f * f
    d0 = a * (3.0 * f2 - 4.0 * f + 1.0)
    d1 = 3.0 * (a + 2.0) * f2 - 2.0 * (a + 3.0) * f
    d2 = -3.0 * (a + 2.0) * f2 + 2.0 * (2.0 * a + 3.0) * f - a
    d3 = a * (2.0 * f - 3.0 * f2)
    return d0, d1, d2, d3


@njit(cache=True, parallel=True)
def _bicubic_grid_kernel(src, xs, ys, border, out):
    h, w = src.shape
    oh, ow = xs.shape
    for i in prange(oh):
        for j in range(ow):
            x = xs[i, j]
            y = ys[i, j]
            if x < 0.0 or x > w - 1.0 or y < 0.0 or y > h - 1.0 or x != x or y != y:
                out[i, j] = border
                continue
            ix = int(math.floor(x))
            iy = int(math.floor(y))
            fx = x - ix
            fy = y - iy
            wx0, wx1, wx2, wx3 = _cubic_w(fx)
            wy0, wy1, wy2, wy3 = _cubic_w(fy)
            x0 = ix - 1 if ix - 1 >= 0 else 0
            x1 = ix
            x2 = ix + 1 if ix + 1 <= w - 1 else w - 1
            x3 = ix + 2 if ix + 2 <= w - 1 else w - 1
            acc = 0.0
            for k in range(4):
                yy = iy - 1 + k
                if yy < 0:
                    yy = 0
                elif yy > h - 1:
                    yy = h - 1
                row = wx0 * src[yy, x0] + wx1 * src[yy, x1] + wx2 * src[yy, x2] + wx3 * src[yy, x3]
                if k == 0:
                    acc += wy0 * row
                elif k == 1:
                    acc += wy1 * row
                elif k == 2:
                    acc += wy2 * row
                else:
                    acc += wy3 * row
            out[i, j] = acc


@njit(cache=True, parallel=True)
def _bicubic_grid_grad_kernel(src, xs, ys, border, out, gx, gy):
    h, w = src.shape
    oh, ow = xs.shape
    for i in prange(oh):
        for j in range(ow):
            x = xs[i, j]
            y = ys[i, j]
            if x < 0.0 or x > w - 1.0 or y < 0.0 or y > h - 1.0 or x != x or y != y:
                out[i, j] = border
                gx[i, j] = 0.0
                gy[i, j] = 0.0
                continue
            ix = int(math.floor(x))
            iy = int(math.floor(y))
            fx = x - ix
            fy = y - iy
            wx0, wx1, wx2, wx3 = _cubic_w(fx)
            wy0, wy1, wy2, wy3 = _cubic_w(fy)
            dx0, dx1, dx2, dx3 = _cubic_dw(fx)
            dy0, dy1, dy2, dy3 = _cubic_dw(fy)
            x0 = ix - 1 if ix - 1 >= 0 else 0
            x1 = ix
            x2 = ix + 1 if ix + 1 <= w - 1 else w - 1
            x3 = ix + 2 if ix + 2 <= w - 1 else w - 1
            val = 0.0
            dvx = 0.0
            dvy = 0.0
            for k in range(4):
                yy = iy - 1 + k
                if yy < 0:
                    yy = 0
                elif yy > h - 1:
                    yy = h - 1
                s0 = src[yy, x0]
                s1 = src[yy, x1]
                s2 = src[yy, x2]
                s3 = src[yy, x3]
                row = wx0 * s0 + wx1 * s1 + wx2 * s2 + wx3 * s3
                drow = dx0 * s0 + dx1 * s1 + dx2 * s2 + dx3 * s3
                if k == 0:
                    val += wy0 * row
                    dvx += wy0 * drow
                    dvy += dy0 * row
                elif k == 1:
                    val += wy1 * row
                    dvx += wy1 * drow
                    dvy += dy1 * row
                elif k == 2:
                    val += wy2 * row
                    dvx += wy2 * drow
                    dvy += dy2 * row
                else:
                    val += wy3 * row
                    dvx += wy3 * drow
                    dvy += dy3 * row
            out[i, j] = val
            gx[i, j] = dvx
            gy[i, j] = dvy


def bicubic_grid(data: np.ndarray, xs: np.ndarray, ys: np.ndarray, border: float = 0.0) -> np.ndarray:
    """Sample ``data`` at continuous coordinate grids with the Catmull-Rom kernel.

    Coordinates outside [0, w-1] x [0, h-1] produce ``border``; in-bounds taps
    that fall off the grid are clamped to the nearest edge sample. The output
    dtype follows ``data`` (float32 or float64).
    """
    if data.dtype != np.float32:
        data = np.ascontiguousarray(data, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    out = np.empty(xs.shape, dtype=data.dtype)
    _bicubic_grid_kernel(np.ascontiguousarray(data), xs, ys, float(border), out)
    return out


def bicubic_grid_with_grad(
    data: np.ndarray, xs: np.ndarray, ys: np.ndarray, border: float = 0.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like :func:`bicubic_grid` but also returns the spatial derivatives
    of the interpolant with respect to the sample coordinates."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    out = np.empty(xs.shape, dtype=np.float64)
    gx = np.empty(xs.shape, dtype=np.float64)
    gy = np.empty(xs.shape, dtype=np.float64)
    _bicubic_grid_grad_kernel(
        np.ascontiguousarray(data, dtype=np.float64), xs, ys, float(border), out, gx, gy
    )
    return out, gx, gy


def bicubic_sample(p: ImagePlane, x: float, y: float, border: float = 0.0) -> float:
    """Catmull-Rom bicubic sample at a continuous coordinate.

    Coordinates outside [0, w-1] x [0, h-1] return ``border``.
    """
    out = bicubic_grid(p.data, np.array([[x]]), np.array([[y]]), border)
    return float(out[0, 0])


# ---------------------------------------------------------------------------
# Raster file IO (8-bit PNG / single-level TIFF)


def load_raster(path: str | Path) -> np.ndarray:
    """Load an 8-bit image file as a uint8 array, (h, w) or (h, w, 3)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if getattr(im, "n_frames", 1) > 1:
                raise UnreadableInput(f"{path}: multi-page images are not supported")
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8)
            if im.mode in ("RGB", "RGBA", "P", "LA", "1"):
                return np.asarray(im.convert("RGB"), dtype=np.uint8)
            raise UnreadableInput(f"{path}: unsupported image mode {im.mode!r} (8-bit only)")
    except UnreadableInput:
        raise
    except (OSError, ValueError) as exc:
        raise UnreadableInput(f"cannot read image {path}: {exc}") from exc


def save_raster(path: str | Path, arr: np.ndarray) -> None:
    """Write a uint8 array ((h, w) or (h, w, 3)) as PNG/TIFF by extension."""
    path = Path(path)
    if arr.dtype != np.uint8 or arr.ndim not in (2, 3):
        raise ValueError("save_raster expects a uint8 (h, w) or (h, w, 3) array")
    try:
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise OutputWriteFailure(f"cannot write {path}: {exc}") from exc


def quantize_u8(data: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-to-even."""
    return np.clip(np.rint(data * 255.0), 0.0, 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Pyramid directory format
#
# A pyramid directory holds ``pyramid.json`` plus per-level tiles named
# ``L{level}_x{col}_y{row}.png``. Tiles are tile_size square except at the
# right/bottom edges. Level 0 is the highest resolution and levels shrink
# strictly in width.

MANIFEST_NAME = "pyramid.json"


@dataclass(frozen=True)
class PyramidLevelInfo:
    level: int
    width: int
    height: int
    tile_size: int
    path_pattern: str

    @property
    def max_side(self) -> int:
        return max(self.width, self.height)


class _TileStore:
    """Reads rectangular regions out of one tiled pyramid level."""

    def __init__(self, root: Path, info: PyramidLevelInfo):
        self.root = root
        self.info = info
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def _tile_path(self, col: int, row: int) -> Path:
        return self.root / self.info.path_pattern.format(level=self.info.level, col=col, row=row)

    def _get_tile(self, col: int, row: int) -> np.ndarray:
        key = (col, row)
        tile = self._cache.get(key)
        if tile is None:
            path = self._tile_path(col, row)
            if not path.exists():
                raise CorruptPyramidManifest(f"missing tile {path}")
            try:
                tile = load_raster(path)
            except UnreadableInput as exc:
                raise CorruptPyramidManifest(str(exc)) from exc
            if len(self._cache) > 32:
                self._cache.clear()
            self._cache[key] = tile
        return tile

    def read_region(self, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        info = self.info
        if x0 < 0 or y0 < 0 or x0 + w > info.width or y0 + h > info.height or w < 1 or h < 1:
            raise ValueError("region out of level bounds")
        ts = info.tile_size
        first = self._get_tile(x0 // ts, y0 // ts)
        channels = 1 if first.ndim == 2 else first.shape[2]
        shape = (h, w) if channels == 1 else (h, w, channels)
        out = np.empty(shape, dtype=np.uint8)
        for row in range(y0 // ts, (y0 + h - 1) // ts + 1):
            for col in range(x0 // ts, (x0 + w - 1) // ts + 1):
                tile = self._get_tile(col, row)
                exp_w = min(ts, info.width - col * ts)
                exp_h = min(ts, info.height - row * ts)
                if tile.shape[0] != exp_h or tile.shape[1] != exp_w:
                    raise CorruptPyramidManifest(
                        f"tile ({col},{row}) of level {info.level} has shape "
                        f"{tile.shape[:2]}, expected ({exp_h}, {exp_w})"
                    )
                tx0 = max(x0, col * ts)
                ty0 = max(y0, row * ts)
                tx1 = min(x0 + w, col * ts + exp_w)
                ty1 = min(y0 + h, row * ts + exp_h)
                out[ty0 - y0 : ty1 - y0, tx0 - x0 : tx1 - x0] = tile[
                    ty0 - row * ts : ty1 - row * ts, tx0 - col * ts : tx1 - col * ts
                ]
        return out


class PyramidImage:
    """Multi-resolution raster: an ordered list of progressively smaller levels.

    Backed either by a pyramid directory or by a single in-memory raster (the
    degenerate one-level pyramid used for plain image files).
    """

    def __init__(
        self,
        levels: Sequence[PyramidLevelInfo],
        region_reader: Callable[[int, int, int, int, int], np.ndarray],
        spacing_level0: float | None = None,
    ):
        levels = tuple(levels)
        if not levels:
            raise ValueError("pyramid requires at least one level")
        for a, b in zip(levels, levels[1:]):
            if b.width >= a.width:
                raise ValueError("pyramid levels must shrink strictly in width")
        self.levels = levels
        self._read = region_reader
        self.spacing_level0 = spacing_level0

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def read_region(self, level: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
        return self._read(level, x0, y0, w, h)

    def read_level(self, level: int) -> np.ndarray:
        info = self.levels[level]
        return self.read_region(level, 0, 0, info.width, info.height)

    @classmethod
    def from_array(cls, arr: np.ndarray, spacing: float | None = None) -> "PyramidImage":
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.uint8))
        info = PyramidLevelInfo(0, arr.shape[1], arr.shape[0], 0, "")

        def read(level: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
            if level != 0:
                raise ValueError("single-level pyramid")
            return arr[y0 : y0 + h, x0 : x0 + w].copy()

        return cls([info], read, spacing)

    @classmethod
    def from_file(cls, path: str | Path, spacing: float | None = None) -> "PyramidImage":
        return cls.from_array(load_raster(path), spacing)

    @classmethod
    def from_directory(cls, root: str | Path) -> "PyramidImage":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        try:
            manifest = json.loads(manifest_path.read_text())
        except FileNotFoundError as exc:
            raise CorruptPyramidManifest(f"no {MANIFEST_NAME} in {root}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptPyramidManifest(f"cannot parse {manifest_path}: {exc}") from exc
        try:
            infos = [
                PyramidLevelInfo(
                    int(entry["level"]),
                    int(entry["width"]),
                    int(entry["height"]),
                    int(entry["tile_size"]),
                    str(entry["path_pattern"]),
                )
                for entry in manifest["levels"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptPyramidManifest(f"{manifest_path}: bad level entry: {exc}") from exc
        if not infos:
            raise CorruptPyramidManifest(f"{manifest_path}: no levels")
        stores = {info.level: _TileStore(root, info) for info in infos}

        def read(level: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
            return stores[infos[level].level].read_region(x0, y0, w, h)

        spacing = manifest.get("spacing_level0")
        try:
            return cls(infos, read, spacing)
        except ValueError as exc:
            raise CorruptPyramidManifest(f"{manifest_path}: {exc}") from exc


def open_input(path: str | Path) -> PyramidImage:
    """Open a registration input: a pyramid directory or a single image file."""
    path = Path(path)
    if path.is_dir():
        return PyramidImage.from_directory(path)
    if not path.exists():
        raise UnreadableInput(f"no such input: {path}")
    return PyramidImage.from_file(path)


class PyramidDirWriter:
    """Streams tiles into a new pyramid directory; the manifest is written last."""

    def __init__(self, root: str | Path, tile_size: int = 1024, spacing_level0: float | None = None):
        self.root = Path(root)
        self.tile_size = tile_size
        self.spacing_level0 = spacing_level0
        self._levels: list[PyramidLevelInfo] = []
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OutputWriteFailure(f"cannot create {self.root}: {exc}") from exc

    def begin_level(self, width: int, height: int) -> PyramidLevelInfo:
        level = len(self._levels)
        info = PyramidLevelInfo(level, width, height, self.tile_size, f"L{level}_x{{col}}_y{{row}}.png")
        self._levels.append(info)
        return info

    def write_tile(self, info: PyramidLevelInfo, col: int, row: int, tile: np.ndarray) -> None:
        save_raster(self.root / info.path_pattern.format(col=col, row=row), tile)

    def reader(self, info: PyramidLevelInfo) -> _TileStore:
        return _TileStore(self.root, info)

    def finish(self) -> None:
        manifest = {
            "levels": [
                {
                    "level": info.level,
                    "width": info.width,
                    "height": info.height,
                    "tile_size": info.tile_size,
                    "path_pattern": info.path_pattern,
                }
                for info in self._levels
            ]
        }
        if self.spacing_level0 is not None:
            manifest["spacing_level0"] = self.spacing_level0
        try:
            (self.root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        except OSError as exc:
            raise OutputWriteFailure(f"cannot write manifest in {self.root}: {exc}") from exc
