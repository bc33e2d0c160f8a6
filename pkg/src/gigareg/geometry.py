"""Affine transform algebra.

Transforms use the backward-mapping convention throughout: a 2x3 matrix
``[[a, b, tx], [c, d, ty]]`` maps an output (target-frame) pixel ``(x, y)``
to the input (source-frame) pixel ``(a*x + b*y + tx, c*x + d*y + ty)``.
Warping with a transform therefore samples the source at the mapped
coordinates, which avoids holes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .dfield import DisplacementField
from .errors import DegenerateConfiguration, UnreadableInput

_DET_EPS = 1e-12


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class AffineTransform:
    """2x3 backward-mapping affine matrix."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("affine matrix entries must be finite")
        m = np.ascontiguousarray(m).copy()
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @property
    def linear(self) -> np.ndarray:
        return self.m[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:, 2]

    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.allclose(self.m, AffineTransform.identity().m, atol=tol, rtol=0.0))

    def rotation_deg(self) -> float:
        """Rotation angle of the polar decomposition of the linear part."""
        u, _, vt = np.linalg.svd(self.linear)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] = -u[:, -1]
            r = u @ vt
        return math.degrees(math.atan2(r[1, 0], r[0, 0]))


def affine_apply(t: AffineTransform, pts: Sequence[Point2] | np.ndarray) -> np.ndarray:
    """Map points (array-like of shape (n, 2)) through the matrix."""
    p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    return p @ t.linear.T + t.translation


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Transform equivalent to applying ``outer`` first, then ``inner``.

    ``affine_apply(compose(outer, inner), p) == affine_apply(inner, affine_apply(outer, p))``.
    """
    lin = inner.linear @ outer.linear
    tr = inner.linear @ outer.translation + inner.translation
    return AffineTransform(np.column_stack([lin, tr]))


def invert(t: AffineTransform) -> AffineTransform:
    """Inverse transform; raises for singular matrices."""
    det = t.det()
    if abs(det) < _DET_EPS:
        raise DegenerateConfiguration(f"affine is singular (det={det:g})")
    lin = np.linalg.inv(t.linear)
    tr = -lin @ t.translation
    return AffineTransform(np.column_stack([lin, tr]))


def rotation_about_center(theta_deg: float, w: int, h: int) -> AffineTransform:
    """Rotation by ``theta_deg`` about the pixel-center image midpoint.

    The center is ((w-1)/2, (h-1)/2); theta = 0 yields the identity.
    """
    th = math.radians(theta_deg)
    c, s = math.cos(th), math.sin(th)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    tx = cx - (c * cx - s * cy)
    ty = cy - (s * cx + c * cy)
    return AffineTransform(np.array([[c, -s, tx], [s, c, ty]]))


def translation(tx: float, ty: float) -> AffineTransform:
    return AffineTransform(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))


def affine_to_displacement(t: AffineTransform, w: int, h: int) -> DisplacementField:
    """Dense field u with u(x, y) = t(x, y) - (x, y) at every grid point.

    Warping with the returned field is equivalent to warping with ``t``.
    """
    if w < 1 or h < 1:
        raise ValueError("field size must be at least 1x1")
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]
    m = t.m
    ux = (m[0, 0] - 1.0) * xs + m[0, 1] * ys + m[0, 2]
    uy = m[1, 0] * xs + (m[1, 1] - 1.0) * ys + m[1, 2]
    ux, uy = np.broadcast_arrays(ux, uy)
    return DisplacementField._wrap(np.ascontiguousarray(ux), np.ascontiguousarray(uy))


def _center_rescale(n_from: tuple[int, int], n_to: tuple[int, int]) -> AffineTransform:
    """Pixel-center change of resolution: maps (w_from, h_from) coords to (w_to, h_to)."""
    sx = n_to[0] / n_from[0]
    sy = n_to[1] / n_from[1]
    return AffineTransform(np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5]]))


def rescale_transform(
    t: AffineTransform,
    src_from: tuple[int, int],
    src_to: tuple[int, int],
    tgt_from: tuple[int, int],
    tgt_to: tuple[int, int],
) -> AffineTransform:
    """Conjugate a transform to new source/target resolutions.

    ``t`` maps target coords at ``tgt_from`` (w, h) to source coords at
    ``src_from``; the result maps target coords at ``tgt_to`` to source coords
    at ``src_to``, under pixel-center resolution changes.
    """
    to_old_tgt = _center_rescale(tgt_to, tgt_from)
    to_new_src = _center_rescale(src_from, src_to)
    return compose(compose(to_old_tgt, t), to_new_src)


def to_json_dict(t: AffineTransform) -> dict:
    return {"matrix": [[float(v) for v in row] for row in t.m]}


def from_json_dict(d: dict) -> AffineTransform:
    try:
        return AffineTransform(np.asarray(d["matrix"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise UnreadableInput(f"bad affine JSON: {exc}") from exc


def save_affine(path: str | Path, t: AffineTransform) -> None:
    Path(path).write_text(json.dumps(to_json_dict(t), indent=2, sort_keys=True))


def load_affine(path: str | Path) -> AffineTransform:
    try:
        return from_json_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise UnreadableInput(f"cannot read affine {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UnreadableInput(f"cannot parse affine {path}: {exc}") from exc
