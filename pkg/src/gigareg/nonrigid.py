"""Multilevel instance-optimization nonrigid registration.

The objective per resolution level is

    cost(u) = [1 - mean local NCC(warp(src, u), tgt)] + theta * Reg(u)

where Reg is the diffusive regularizer (mean squared forward differences of
the displacement channels). The global affine from the initial alignment is
applied as a fixed pre-warp of the source, so the optimized field ``u`` holds
only the nonrigid residual and the regularizer never penalizes the affine
part. Each level runs a fixed number of adaptive first-order steps and keeps
the best-objective iterate; fields are carried between levels by prefiltered
cubic B-spline upsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry
from .core_imaging import (
    ImagePlane,
    bicubic_grid,
    bicubic_grid_with_grad,
    fit_max_side,
    resample_antialiased,
)
from .dfield import DisplacementField, load_field, save_field  # noqa: F401  (re-exported)
from .errors import ShapeMismatch
from .geometry import AffineTransform, affine_to_displacement

NCC_EPS = 1e-5
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
_SPLINE_PAD = 16


@dataclass(frozen=True)
class LevelConfig:
    """Hyperparameters for one resolution level, coarse levels listed first."""

    max_side: int
    iterations: int = 100
    learning_rate: float = 1.0
    theta: float = 0.5

    def __post_init__(self) -> None:
        if self.max_side < 1:
            raise ValueError("max_side must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")


def default_levels() -> list[LevelConfig]:
    return [
        LevelConfig(max_side=512, iterations=100, learning_rate=2.0, theta=0.25),
        LevelConfig(max_side=1024, iterations=100, learning_rate=1.0, theta=0.5),
        LevelConfig(max_side=2048, iterations=100, learning_rate=0.5, theta=1.0),
    ]


@dataclass(frozen=True)
class NonrigidConfig:
    levels: list[LevelConfig] = field(default_factory=default_levels)
    ncc_window: int = 7

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("at least one level is required")
        sides = [lc.max_side for lc in self.levels]
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise ValueError("level max_side values must be strictly increasing")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")


@dataclass(frozen=True)
class RegistrationResult:
    field: DisplacementField
    per_level_objective_trace: list[list[float]]
    folding_ratio: float


# ---------------------------------------------------------------------------
# Warping


def _grid(w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    xs = np.broadcast_to(np.arange(w, dtype=np.float64)[None, :], (h, w))
    ys = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, w))
    return np.ascontiguousarray(xs), np.ascontiguousarray(ys)


def warp(p: ImagePlane, u: DisplacementField, border: float = 0.0) -> ImagePlane:
    """Backward-warp a plane: out(x, y) = bicubic(p, x + ux, y + uy).

    Out-of-bounds samples take the border value.
    """
    if u.shape != p.shape:
        raise ShapeMismatch(f"field shape {u.shape} != plane shape {p.shape}")
    xs, ys = _grid(p.width, p.height)
    out = bicubic_grid(p.data, xs + u.ux, ys + u.uy, border)
    return ImagePlane._wrap(out)


def warp_affine(
    p: ImagePlane, t: AffineTransform, out_w: int | None = None, out_h: int | None = None, border: float = 0.0
) -> ImagePlane:
    """Backward-warp a plane with an affine over an output grid of the given size.

    Unlike :func:`warp`, the output grid may differ from the input dimensions;
    this is how a source plane is brought into the target frame.
    """
    ow = p.width if out_w is None else out_w
    oh = p.height if out_h is None else out_h
    xs, ys = _grid(ow, oh)
    m = t.m
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return ImagePlane._wrap(bicubic_grid(p.data, sx, sy, border))


# ---------------------------------------------------------------------------
# Local NCC similarity


def _box_sum(data: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)-square window around each pixel, clipped at borders."""
    h, w = data.shape
    c = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(data, axis=0, out=c[1:, 1:])
    np.cumsum(c[1:, 1:], axis=1, out=c[1:, 1:])
    y0 = np.maximum(np.arange(h) - r, 0)
    y1 = np.minimum(np.arange(h) + r, h - 1) + 1
    x0 = np.maximum(np.arange(w) - r, 0)
    x1 = np.minimum(np.arange(w) + r, w - 1) + 1
    return c[np.ix_(y1, x1)] - c[np.ix_(y0, x1)] - c[np.ix_(y1, x0)] + c[np.ix_(y0, x0)]


def _box_count(h: int, w: int, r: int) -> np.ndarray:
    ny = np.minimum(np.arange(h) + r, h - 1) - np.maximum(np.arange(h) - r, 0) + 1
    nx = np.minimum(np.arange(w) + r, w - 1) - np.maximum(np.arange(w) - r, 0) + 1
    return ny[:, None].astype(np.float64) * nx[None, :]


def _local_ncc_arrays(a: np.ndarray, b: np.ndarray, window: int) -> tuple[float, np.ndarray]:
    h, w = a.shape
    r = window // 2
    n = _box_count(h, w, r)
    mu_a = _box_sum(a, r) / n
    mu_b = _box_sum(b, r) / n
    cov = _box_sum(a * b, r) / n - mu_a * mu_b
    var_a = _box_sum(a * a, r) / n - mu_a * mu_a
    var_b = _box_sum(b * b, r) / n - mu_b * mu_b
    va = var_a + NCC_EPS
    vb = var_b + NCC_EPS
    denom = np.sqrt(va * vb)
    ncc = cov / denom
    cost = 1.0 - float(ncc.mean())

    # d cost / d a_p  =  -(1/wh) sum over window centers x covering p of
    #   (1/n(x)) [ (b_p - mu_b(x)) / denom(x) - ncc(x) (a_p - mu_a(x)) / va(x) ]
    alpha = 1.0 / (n * denom)
    beta = ncc / (n * va)
    grad = (
        b * _box_sum(alpha, r)
        - _box_sum(mu_b * alpha, r)
        - a * _box_sum(beta, r)
        + _box_sum(mu_a * beta, r)
    )
    grad *= -1.0 / (h * w)
    return cost, grad


def local_ncc(a: ImagePlane, b: ImagePlane, window: int = 7) -> tuple[float, np.ndarray]:
    """Windowed NCC dissimilarity and its gradient with respect to ``a``.

    Returns ``1 - mean(ncc)`` over all pixels, with per-window
    ``ncc = cov / sqrt((var_a + eps)(var_b + eps))`` and windows clipped at the
    image border. The cost lies in [0, 2]; lower is better.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"plane shapes differ: {a.shape} vs {b.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    return _local_ncc_arrays(a.data, b.data, window)


# ---------------------------------------------------------------------------
# Diffusive regularization


def _forward_diffs(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences with zero in the last column/row."""
    dx = np.zeros_like(c)
    dy = np.zeros_like(c)
    dx[:, :-1] = c[:, 1:] - c[:, :-1]
    dy[:-1, :] = c[1:, :] - c[:-1, :]
    return dx, dy


def _diffusive_arrays(ux: np.ndarray, uy: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    h, w = ux.shape
    total = 0.0
    grads = []
    for c in (ux, uy):
        dx, dy = _forward_diffs(c)
        total += float((dx * dx).sum() + (dy * dy).sum())
        g = -dx - dy
        g[:, 1:] += dx[:, :-1]
        g[1:, :] += dy[:-1, :]
        g /= h * w
        grads.append(g)
    value = total / (2.0 * h * w)
    return value, grads[0], grads[1]


def diffusive_reg(u: DisplacementField) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared displacement gradient and its analytic gradient.

    Uses forward differences with the last row/column difference set to zero,
    so constant fields cost nothing. Returns ``(value, d/dux, d/duy)``.
    """
    return _diffusive_arrays(u.ux, u.uy)


# ---------------------------------------------------------------------------
# Combined objective


def _objective_arrays(
    src: np.ndarray,
    tgt: np.ndarray,
    ux: np.ndarray,
    uy: np.ndarray,
    theta: float,
    window: int,
    xs: np.ndarray,
    ys: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    warped, dwx, dwy = bicubic_grid_with_grad(src, xs + ux, ys + uy)
    cost, grad_img = _local_ncc_arrays(warped, tgt, window)
    gux = grad_img * dwx
    guy = grad_img * dwy
    if theta != 0.0:
        reg, rux, ruy = _diffusive_arrays(ux, uy)
        cost += theta * reg
        gux += theta * rux
        guy += theta * ruy
    return cost, gux, guy


def objective(
    src: ImagePlane, tgt: ImagePlane, u: DisplacementField, theta: float, window: int = 7
) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity-plus-regularization cost and its gradient with respect to ``u``.

    The similarity gradient is chained through the analytic spatial
    derivatives of the bicubic warp.
    """
    if src.shape != tgt.shape or u.shape != src.shape:
        raise ShapeMismatch(
            f"inconsistent shapes: src {src.shape}, tgt {tgt.shape}, field {u.shape}"
        )
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    xs, ys = _grid(src.width, src.height)
    return _objective_arrays(src.data, tgt.data, u.ux, u.uy, theta, window, xs, ys)


# ---------------------------------------------------------------------------
# B-spline field upsampling


def _pad_linear(c: np.ndarray, pad: int) -> np.ndarray:
    h, w = c.shape
    out = np.empty((h + 2 * pad, w + 2 * pad), dtype=np.float64)
    out[pad : pad + h, pad : pad + w] = c
    k = np.arange(1, pad + 1, dtype=np.float64)
    block = out[pad : pad + h]
    sl = block[:, pad + 1] - block[:, pad] if w > 1 else np.zeros(h)
    sr = block[:, pad + w - 1] - block[:, pad + w - 2] if w > 1 else np.zeros(h)
    block[:, pad - 1 :: -1] = block[:, pad, None] - np.outer(sl, k)
    block[:, pad + w :] = block[:, pad + w - 1, None] + np.outer(sr, k)
    st = out[pad + 1] - out[pad] if h > 1 else np.zeros(w + 2 * pad)
    sb = out[pad + h - 1] - out[pad + h - 2] if h > 1 else np.zeros(w + 2 * pad)
    out[pad - 1 :: -1] = out[pad][None, :] - np.outer(k, st)
    out[pad + h :] = out[pad + h - 1][None, :] + np.outer(k, sb)
    return out


class FieldResampler:
    """Evaluates a coarse displacement field at finer resolutions.

    Channels are linearly extrapolated into a guard margin, prefiltered once
    into cubic B-spline coefficients, and then evaluated at pixel-center
    coordinates of the requested output grid. Displacement values are
    rescaled to stay in pixel units at the output resolution. Evaluation is
    per-pixel, so tiled and monolithic queries agree bit for bit.
    """

    def __init__(self, f: DisplacementField):
        self.src_w = f.width
        self.src_h = f.height
        self._coeff = [
            ndimage.spline_filter(_pad_linear(c, _SPLINE_PAD), order=3, mode="mirror")
            for c in (f.ux, f.uy)
        ]

    def eval_block(
        self, new_w: int, new_h: int, x0: int, y0: int, bw: int, bh: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Field values for output pixels [x0, x0+bw) x [y0, y0+bh) at resolution (new_w, new_h)."""
        xs = (np.arange(x0, x0 + bw, dtype=np.float64) + 0.5) * (self.src_w / new_w) - 0.5
        ys = (np.arange(y0, y0 + bh, dtype=np.float64) + 0.5) * (self.src_h / new_h) - 0.5
        coords = np.empty((2, bh, bw), dtype=np.float64)
        coords[0] = ys[:, None] + _SPLINE_PAD
        coords[1] = xs[None, :] + _SPLINE_PAD
        ux = ndimage.map_coordinates(self._coeff[0], coords, order=3, prefilter=False)
        uy = ndimage.map_coordinates(self._coeff[1], coords, order=3, prefilter=False)
        ux *= new_w / self.src_w
        uy *= new_h / self.src_h
        return ux, uy


def upsample_field(u: DisplacementField, new_w: int, new_h: int) -> DisplacementField:
    """Resample a field to a finer grid with prefiltered cubic B-splines.

    Displacement magnitudes are scaled by ``new_w / old_w`` (x channel) and
    ``new_h / old_h`` (y channel) so they remain in pixel units.
    """
    if new_w < u.width or new_h < u.height:
        raise ValueError("upsample_field target must not shrink the field")
    ux, uy = FieldResampler(u).eval_block(new_w, new_h, 0, 0, new_w, new_h)
    return DisplacementField._wrap(ux, uy)


# ---------------------------------------------------------------------------
# Optimization


def optimize_level(
    src: ImagePlane,
    tgt: ImagePlane,
    u0: DisplacementField,
    lc: LevelConfig,
    window: int = 7,
) -> tuple[DisplacementField, list[float]]:
    """Run exactly ``lc.iterations`` adaptive first-order steps on one level.

    Per-parameter steps are scaled by running first/second gradient-moment
    averages (decay 0.9 / 0.999, epsilon 1e-8) with the base step
    ``lc.learning_rate``. No early stopping; the returned field is the
    best-objective iterate over the whole trace (iterate 0 included).
    """
    if src.shape != tgt.shape or u0.shape != src.shape:
        raise ShapeMismatch(
            f"inconsistent shapes: src {src.shape}, tgt {tgt.shape}, field {u0.shape}"
        )
    xs, ys = _grid(src.width, src.height)
    ux = u0.ux.copy()
    uy = u0.uy.copy()
    val, gx, gy = _objective_arrays(src.data, tgt.data, ux, uy, lc.theta, window, xs, ys)
    trace = [val]
    best_val = val
    best = (ux.copy(), uy.copy())
    mx = np.zeros_like(ux)
    my = np.zeros_like(uy)
    vx = np.zeros_like(ux)
    vy = np.zeros_like(uy)
    for it in range(1, lc.iterations + 1):
        mx = _ADAM_BETA1 * mx + (1.0 - _ADAM_BETA1) * gx
        my = _ADAM_BETA1 * my + (1.0 - _ADAM_BETA1) * gy
        vx = _ADAM_BETA2 * vx + (1.0 - _ADAM_BETA2) * gx * gx
        vy = _ADAM_BETA2 * vy + (1.0 - _ADAM_BETA2) * gy * gy
        c1 = 1.0 - _ADAM_BETA1**it
        c2 = 1.0 - _ADAM_BETA2**it
        ux = ux - lc.learning_rate * (mx / c1) / (np.sqrt(vx / c2) + _ADAM_EPS)
        uy = uy - lc.learning_rate * (my / c1) / (np.sqrt(vy / c2) + _ADAM_EPS)
        val, gx, gy = _objective_arrays(src.data, tgt.data, ux, uy, lc.theta, window, xs, ys)
        trace.append(val)
        if val < best_val:
            best_val = val
            best = (ux.copy(), uy.copy())
    return DisplacementField._wrap(best[0], best[1]), trace


def register_multilevel(
    src: ImagePlane, tgt: ImagePlane, init: AffineTransform, cfg: NonrigidConfig
) -> RegistrationResult:
    """Coarse-to-fine nonrigid registration of a preprocessed pair.

    The initial affine is applied once as a fixed pre-warp of the source
    (converted to a displacement field and sampled bicubically); level images
    are produced by anti-aliased resampling of the pre-warped source and the
    target. The optimized residual field starts at zero on the coarsest
    level and is B-spline-upsampled between levels. The result carries the
    finest-level residual field; composing it with the affine reproduces the
    full transform.
    """
    u_init = affine_to_displacement(init, tgt.width, tgt.height)
    xs, ys = _grid(tgt.width, tgt.height)
    src_warped = ImagePlane._wrap(bicubic_grid(src.data, xs + u_init.ux, ys + u_init.uy))

    field: DisplacementField | None = None
    traces: list[list[float]] = []
    for lc in cfg.levels:
        lw, lh = fit_max_side(tgt.width, tgt.height, lc.max_side)
        src_l = resample_antialiased(src_warped, lw, lh)
        tgt_l = resample_antialiased(tgt, lw, lh)
        if field is None:
            field = DisplacementField.zero(lw, lh)
        else:
            field = upsample_field(field, lw, lh)
        field, trace = optimize_level(src_l, tgt_l, field, lc, cfg.ncc_window)
        traces.append(trace)
    assert field is not None
    return RegistrationResult(field, traces, folding_ratio(field))


# ---------------------------------------------------------------------------
# Folding diagnostics


def _edge_replicated_diff(c: np.ndarray, axis: int) -> np.ndarray:
    """Forward differences; the last index reuses the preceding difference."""
    d = np.empty_like(c)
    n = c.shape[axis]
    if n == 1:
        d[:] = 0.0
        return d
    head = [slice(None)] * 2
    tail = [slice(None)] * 2
    head[axis] = slice(0, n - 1)
    tail[axis] = slice(1, n)
    d[tuple(head)] = c[tuple(tail)] - c[tuple(head)]
    last = [slice(None)] * 2
    last[axis] = slice(n - 1, n)
    prev = [slice(None)] * 2
    prev[axis] = slice(n - 2, n - 1)
    d[tuple(last)] = d[tuple(prev)]
    return d


def folding_ratio(u: DisplacementField) -> float:
    """Fraction of pixels where the mapping (x + ux, y + uy) has Jacobian <= 0."""
    j11 = 1.0 + _edge_replicated_diff(u.ux, 1)
    j12 = _edge_replicated_diff(u.ux, 0)
    j21 = _edge_replicated_diff(u.uy, 1)
    j22 = 1.0 + _edge_replicated_diff(u.uy, 0)
    det = j11 * j22 - j12 * j21
    return float(np.count_nonzero(det <= 0.0)) / det.size
