"""Keypoint detection, description, matching, and robust consensus.

Two interchangeable backends produce a :class:`MatchSet`: the built-in
classical backend (difference-of-Gaussian keypoints with upright
gradient-histogram descriptors) and an external matcher reached through a
subprocess adapter. The descriptors are deliberately *not* rotation
invariant: like the learned extractors they stand in for, they degrade as the
relative rotation grows, which is what makes the multi-angle candidate search
upstream meaningful.
"""

from __future__ import annotations

import json
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .core_imaging import ImagePlane, gaussian_kernel, quantize_u8, save_raster
from .errors import AdapterFailure, DegenerateConfiguration, InsufficientMatches
from .geometry import AffineTransform, affine_apply, invert, rotation_about_center

N_OCTAVES = 3
SCALES_PER_OCTAVE = 3
CONTRAST_THRESHOLD = 0.01
_SIGMA0 = 1.6
_INPUT_SIGMA = 0.5
_EDGE_RATIO = 10.0
_PATCH_MARGIN = 9  # 16x16 patch plus central-difference gradients
_MIN_SIDE = 32
DESCRIPTOR_DIM = 128
ADAPTER_TIMEOUT = 120.0
ADAPTER_PROTOCOL = 1


class Keypoint(NamedTuple):
    x: float
    y: float
    scale: float
    score: float


class Match(NamedTuple):
    source: Keypoint
    target: Keypoint
    confidence: float


@dataclass(frozen=True)
class MatchSet:
    matches: tuple[Match, ...]
    descriptor_dim: int
    backend_id: str

    def __len__(self) -> int:
        return len(self.matches)

    def source_points(self) -> np.ndarray:
        return np.array([[m.source.x, m.source.y] for m in self.matches], dtype=np.float64).reshape(-1, 2)

    def target_points(self) -> np.ndarray:
        return np.array([[m.target.x, m.target.y] for m in self.matches], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Detection


def _gaussian_stack(base: np.ndarray) -> list[np.ndarray]:
    """Per-octave Gaussian scale stack: sigma0 * 2^(i/3) for i = 0..5."""
    k = 2.0 ** (1.0 / SCALES_PER_OCTAVE)
    stack = [base]
    for i in range(1, SCALES_PER_OCTAVE + 3):
        prev_sigma = _SIGMA0 * k ** (i - 1)
        inc = math.sqrt((_SIGMA0 * k**i) ** 2 - prev_sigma**2)
        kern = gaussian_kernel(inc)
        blurred = ndimage.correlate1d(stack[-1], kern, axis=0, mode="nearest")
        blurred = ndimage.correlate1d(blurred, kern, axis=1, mode="nearest")
        stack.append(blurred)
    return stack


@njit(cache=True, parallel=True)
def _extrema_kernel(dogs, thr, margin, mask):
    ns, h, w = dogs.shape
    for y in prange(margin, h - margin):
        for s in range(1, ns - 1):
            for x in range(margin, w - margin):
                v = dogs[s, y, x]
                if v > thr:
                    ok = True
                    for ds in range(-1, 2):
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                if ds == 0 and dy == 0 and dx == 0:
                                    continue
                                if dogs[s + ds, y + dy, x + dx] >= v:
                                    ok = False
                                    break
                            if not ok:
                                break
                        if not ok:
                            break
                    if ok:
                        mask[s, y, x] = True
                elif v < -thr:
                    ok = True
                    for ds in range(-1, 2):
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                if ds == 0 and dy == 0 and dx == 0:
                                    continue
                                if dogs[s + ds, y + dy, x + dx] <= v:
                                    ok = False
                                    break
                            if not ok:
                                break
                        if not ok:
                            break
                    if ok:
                        mask[s, y, x] = True


def _dog_extrema(dogs: np.ndarray, margin: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(scale, y, x) integer indices of strict 26-neighborhood extrema above threshold."""
    mask = np.zeros(dogs.shape, dtype=np.bool_)
    _extrema_kernel(dogs, CONTRAST_THRESHOLD, margin, mask)
    return np.nonzero(mask)


def _edge_like(dog: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Principal-curvature ratio test on the 2x2 Hessian of one DoG slice."""
    dxx = dog[ys, xs + 1] + dog[ys, xs - 1] - 2.0 * dog[ys, xs]
    dyy = dog[ys + 1, xs] + dog[ys - 1, xs] - 2.0 * dog[ys, xs]
    dxy = 0.25 * (dog[ys + 1, xs + 1] - dog[ys + 1, xs - 1] - dog[ys - 1, xs + 1] + dog[ys - 1, xs - 1])
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    limit = (_EDGE_RATIO + 1.0) ** 2 / _EDGE_RATIO
    return (det <= 0) | (tr * tr >= limit * det)


def _subpixel_offsets(dog: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """In-plane quadratic refinement; offsets clamped to +/- 0.6 pixel."""
    gx = 0.5 * (dog[ys, xs + 1] - dog[ys, xs - 1])
    gy = 0.5 * (dog[ys + 1, xs] - dog[ys - 1, xs])
    dxx = dog[ys, xs + 1] + dog[ys, xs - 1] - 2.0 * dog[ys, xs]
    dyy = dog[ys + 1, xs] + dog[ys - 1, xs] - 2.0 * dog[ys, xs]
    dxy = 0.25 * (dog[ys + 1, xs + 1] - dog[ys + 1, xs - 1] - dog[ys - 1, xs + 1] + dog[ys - 1, xs - 1])
    det = dxx * dyy - dxy * dxy
    safe = np.abs(det) > 1e-12
    ox = np.where(safe, -(dyy * gx - dxy * gy) / np.where(safe, det, 1.0), 0.0)
    oy = np.where(safe, -(dxx * gy - dxy * gx) / np.where(safe, det, 1.0), 0.0)
    return np.clip(ox, -0.6, 0.6), np.clip(oy, -0.6, 0.6)


def _descriptor_spatial_weights() -> np.ndarray:
    """Fixed map from the 256 patch pixels to the 16 spatial cells (4x4 grid)."""
    offsets = np.arange(-8, 8, dtype=np.float64)
    cell = (offsets + 8.0 + 0.5) / 4.0 - 0.5
    c0 = np.floor(cell).astype(int)
    f = cell - c0
    w_axis = np.zeros((16, 4), dtype=np.float64)
    for i in range(16):
        if 0 <= c0[i] < 4:
            w_axis[i, c0[i]] += 1.0 - f[i]
        if 0 <= c0[i] + 1 < 4:
            w_axis[i, c0[i] + 1] += f[i]
    # (py, px) pixel -> (cy, cx) cell, flattened to (256, 16)
    w = np.einsum("ya,xb->yxab", w_axis, w_axis)
    return w.reshape(256, 16)


_SPATIAL_W = _descriptor_spatial_weights()
_PATCH_GAUSS = np.exp(
    -(
        (np.arange(-8, 8, dtype=np.float64)[:, None] ** 2)
        + (np.arange(-8, 8, dtype=np.float64)[None, :] ** 2)
    )
    / (2.0 * 8.0**2)
).reshape(256)


def _bin_patch_gradients(pgx: np.ndarray, pgy: np.ndarray) -> np.ndarray:
    """Histogram (n, 256) patch gradients into normalized 4x4x8 descriptors."""
    n = pgx.shape[0]
    mag = np.hypot(pgx, pgy) * _PATCH_GAUSS[None, :]
    ori = np.arctan2(pgy, pgx) / (2.0 * np.pi) * 8.0  # in [-4, 4)
    desc = np.zeros((n, 16, 8), dtype=np.float64)
    for ob in range(8):
        d = np.abs((ori - ob + 4.0) % 8.0 - 4.0)
        wt = mag * np.maximum(0.0, 1.0 - d)
        desc[:, :, ob] = wt @ _SPATIAL_W
    desc = desc.reshape(n, DESCRIPTOR_DIM)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = desc / np.maximum(norms, 1e-12)
    np.clip(desc, 0.0, 0.2, out=desc)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    return desc / np.maximum(norms, 1e-12)


def _patch_to_gradients(nb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients of (n, 18, 18) patches, flattened to (n, 256)."""
    n = nb.shape[0]
    pgx = (0.5 * (nb[:, 1:-1, 2:] - nb[:, 1:-1, :-2])).reshape(n, 256)
    pgy = (0.5 * (nb[:, 2:, 1:-1] - nb[:, :-2, 1:-1])).reshape(n, 256)
    return pgx, pgy


def _describe_batch(gauss: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Upright 4x4x8 gradient-orientation descriptors for keypoints on one image."""
    off = np.arange(-9, 9)
    yy = ys[:, None, None] + off[None, :, None]
    xx = xs[:, None, None] + off[None, None, :]
    nb = gauss[yy, xx]  # (n, 18, 18) patch with a 1-px gradient apron
    return _bin_patch_gradients(*_patch_to_gradients(nb))


def _blur2(data: np.ndarray, sigma: float) -> np.ndarray:
    kern = gaussian_kernel(sigma)
    out = ndimage.correlate1d(data, kern, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kern, axis=1, mode="nearest")


@dataclass
class FeatureField:
    """Detection result that can re-describe its keypoints under a rotation.

    Gaussian scale space commutes with rotation, so keypoints detected once
    can be re-described for a rotated copy of the image by sampling their
    patches along rotated axes; :func:`describe_rotated` exploits this to
    avoid rebuilding the pyramid per angle.
    """

    width: int
    height: int
    keypoints: list[Keypoint]
    descriptors: np.ndarray  # (n, 128) upright, zero rotation
    octaves: np.ndarray  # (n,) octave index per keypoint
    levels: np.ndarray  # (n,) Gaussian level per keypoint
    iy: np.ndarray  # (n,) integer row in octave coordinates
    ix: np.ndarray  # (n,) integer column in octave coordinates
    gauss: dict[tuple[int, int], np.ndarray]  # retained Gaussian levels


def detect_and_describe(p: ImagePlane, max_keypoints: int = 1024) -> tuple[list[Keypoint], np.ndarray]:
    """Difference-of-Gaussian keypoints with 128-length upright descriptors.

    Runs 3 octaves with 3 scales each (contrast threshold 0.01, edge-response
    rejection, in-plane quadratic refinement). Returns at most
    ``max_keypoints`` keypoints, strongest first, with coordinates in the
    input plane, plus the (n, 128) unit-norm descriptor array. Planes smaller
    than 32 pixels per side yield no keypoints.
    """
    field = detect_feature_field(p.data.astype(np.float32), max_keypoints)
    return field.keypoints, field.descriptors


def detect_feature_field(data: np.ndarray, max_keypoints: int) -> FeatureField:
    """Array-level detector returning keypoints plus patch metadata."""
    h0, w0 = data.shape
    empty = FeatureField(
        w0, h0, [], np.zeros((0, DESCRIPTOR_DIM)),
        np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), {},
    )
    if min(h0, w0) < _MIN_SIDE or max_keypoints < 1:
        return empty
    k = 2.0 ** (1.0 / SCALES_PER_OCTAVE)
    base = _blur2(data, math.sqrt(_SIGMA0**2 - _INPUT_SIGMA**2))

    cand: list[tuple[float, float, float, float, int]] = []  # score, y, x, scale_px, row
    desc_blocks: list[np.ndarray] = []
    meta_blocks: list[np.ndarray] = []
    gauss: dict[tuple[int, int], np.ndarray] = {}
    n_rows = 0
    per_octave_cap = 3 * max_keypoints
    for octave in range(N_OCTAVES):
        if min(base.shape) < 2 * _PATCH_MARGIN + 2:
            break
        stack = _gaussian_stack(base)
        dogs = np.empty((len(stack) - 1,) + base.shape, dtype=base.dtype)
        for i in range(len(stack) - 1):
            np.subtract(stack[i + 1], stack[i], out=dogs[i])
        ss, ys, xs = _dog_extrema(dogs, _PATCH_MARGIN)
        if ss.size:
            keep = np.ones(ss.size, dtype=bool)
            for s in np.unique(ss):
                sel = ss == s
                keep[sel] &= ~_edge_like(dogs[s], ys[sel], xs[sel])
            ss, ys, xs = ss[keep], ys[keep], xs[keep]
        if ss.size > per_octave_cap:
            scores = np.abs(dogs[ss, ys, xs])
            top = np.lexsort((ss, xs, ys, -scores))[:per_octave_cap]
            ss, ys, xs = ss[top], ys[top], xs[top]
        scale_pow = 2.0**octave
        for s in np.unique(ss):
            sel = ss == s
            sy, sx = ys[sel], xs[sel]
            ox, oy = _subpixel_offsets(dogs[s], sy, sx)
            scores = np.abs(dogs[s][sy, sx])
            gauss[(octave, int(s))] = stack[int(s)]
            desc_blocks.append(_describe_batch(stack[int(s)], sy, sx))
            meta = np.empty((sy.size, 4), dtype=np.int64)
            meta[:, 0] = octave
            meta[:, 1] = int(s)
            meta[:, 2] = sy
            meta[:, 3] = sx
            meta_blocks.append(meta)
            for yi, xi, oxi, oyi, sc in zip(sy, sx, ox, oy, scores):
                cand.append(
                    (
                        float(sc),
                        (yi + oyi) * scale_pow,
                        (xi + oxi) * scale_pow,
                        _SIGMA0 * k ** int(s) * scale_pow,
                        n_rows,
                    )
                )
                n_rows += 1
        base = stack[SCALES_PER_OCTAVE][::2, ::2].copy()
    if not cand:
        return empty
    # Strongest first; spatial tie-breaking keeps the ordering deterministic.
    cand.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
    cand = cand[:max_keypoints]
    rows = [r[4] for r in cand]
    descriptors = np.vstack(desc_blocks)[rows]
    meta = np.vstack(meta_blocks)[rows]
    keypoints = [Keypoint(x, y, scale, score) for score, y, x, scale, _ in cand]
    used = {(int(o), int(s)) for o, s in meta[:, :2]}
    return FeatureField(
        w0, h0, keypoints, descriptors,
        meta[:, 0].copy(), meta[:, 1].copy(), meta[:, 2].copy(), meta[:, 3].copy(),
        {key: img for key, img in gauss.items() if key in used},
    )


def _bilinear_patch(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinear samples at (n, 18, 18) coordinate arrays, clamped to the grid."""
    h, w = img.shape
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(px.astype(np.intp), w - 2) if w > 1 else np.zeros(px.shape, np.intp)
    y0 = np.minimum(py.astype(np.intp), h - 2) if h > 1 else np.zeros(py.shape, np.intp)
    fx = px - x0
    fy = py - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy


_ROT_MARGIN = 14  # ceil(9 * sqrt(2)) + 1: rotated patch support


def describe_rotated(field: FeatureField, angle_deg: float) -> tuple[list[Keypoint], np.ndarray]:
    """Keypoints and descriptors as they would appear on the rotated image.

    Equivalent (up to interpolation) to rotating the image about its center by
    ``angle_deg`` and re-running detection and description there: keypoint
    coordinates are mapped through the inverse rotation and each descriptor
    patch is resampled along axes rotated by the angle. Keypoints whose
    rotated patch leaves the frame are dropped, mirroring the content loss an
    actual rotation would cause at the borders.
    """
    if angle_deg == 0.0 or not field.keypoints:
        return field.keypoints, field.descriptors
    th = math.radians(angle_deg)
    lin = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    off = np.arange(-9, 9, dtype=np.float64)
    grid = np.stack(np.meshgrid(off, off, indexing="xy"), axis=-1)  # (18, 18, 2) as (dx, dy)
    rot_grid = grid @ lin.T  # patch offsets rotated into the original frame

    full_rot = rotation_about_center(angle_deg, field.width, field.height)
    pts = np.array([[kp.x, kp.y] for kp in field.keypoints])
    rotated_pts = affine_apply(invert(full_rot), pts)

    kept: list[int] = []
    desc_out = np.zeros((len(field.keypoints), DESCRIPTOR_DIM))
    for (octave, level), img in sorted(field.gauss.items()):
        sel = np.nonzero((field.octaves == octave) & (field.levels == level))[0]
        if sel.size == 0:
            continue
        oh, ow = img.shape
        oct_rot = rotation_about_center(angle_deg, ow, oh)
        centers = np.column_stack([field.ix[sel], field.iy[sel]]).astype(np.float64)
        rot_centers = np.rint(affine_apply(invert(oct_rot), centers))
        ok = (
            (rot_centers[:, 0] >= _ROT_MARGIN)
            & (rot_centers[:, 0] <= ow - 1 - _ROT_MARGIN)
            & (rot_centers[:, 1] >= _ROT_MARGIN)
            & (rot_centers[:, 1] <= oh - 1 - _ROT_MARGIN)
        )
        sel = sel[ok]
        if sel.size == 0:
            continue
        base_pts = affine_apply(oct_rot, rot_centers[ok])  # patch centers back in image coords
        px = base_pts[:, 0][:, None, None] + rot_grid[None, :, :, 0]
        py = base_pts[:, 1][:, None, None] + rot_grid[None, :, :, 1]
        nb = _bilinear_patch(img, px, py)
        desc_out[sel] = _bin_patch_gradients(*_patch_to_gradients(nb))
        kept.extend(sel.tolist())
    kept_idx = np.array(sorted(kept), dtype=np.intp)
    keypoints = [
        Keypoint(rotated_pts[i, 0], rotated_pts[i, 1], field.keypoints[i].scale, field.keypoints[i].score)
        for i in kept_idx
    ]
    return keypoints, desc_out[kept_idx]


# ---------------------------------------------------------------------------
# Matching


def match_descriptors(
    a: np.ndarray, b: np.ndarray, ratio: float = 0.8
) -> list[tuple[int, int, float]]:
    """Mutual-nearest-neighbor matches passing a two-sided Lowe ratio test.

    Confidence is ``1 - distance_ratio`` using the worse of the two ratios;
    a nearest neighbor without competitors (single candidate) is accepted.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        return []
    sim = a @ b.T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    out = []
    for ia in range(na):
        ib = int(nn_ab[ia])
        if int(nn_ba[ib]) != ia:
            continue
        d1 = math.sqrt(d2[ia, ib])
        r_ab = _second_ratio(d2[ia, :], ib, d1)
        r_ba = _second_ratio(d2[:, ib], ia, d1)
        worst = max(r_ab, r_ba)
        if worst < ratio:
            out.append((ia, ib, 1.0 - worst))
    return out


def _second_ratio(row: np.ndarray, best_idx: int, d1: float) -> float:
    if row.size < 2:
        return 0.0
    masked = row.copy()
    masked[best_idx] = np.inf
    d2nd = math.sqrt(masked.min())
    if d2nd <= 0.0:
        return 1.0  # duplicate descriptor elsewhere: ambiguous, fails any ratio
    return d1 / d2nd


def fit_affine_lstsq(t_pts: np.ndarray, s_pts: np.ndarray) -> AffineTransform:
    """Normal-equations affine fit mapping target points onto source points."""
    n = len(t_pts)
    if n < 3:
        raise InsufficientMatches(f"need at least 3 correspondences, got {n}")
    x = np.column_stack([t_pts, np.ones(n)])
    g = x.T @ x
    if abs(np.linalg.det(g)) < 1e-12:
        raise DegenerateConfiguration("normal equations are singular (collinear points)")
    beta = np.linalg.solve(g, x.T @ s_pts)  # (3, 2)
    return AffineTransform(np.column_stack([beta[:2].T, beta[2]]))


def _canonical_order(ms: MatchSet) -> np.ndarray:
    s = ms.source_points()
    t = ms.target_points()
    conf = np.array([m.confidence for m in ms.matches])
    return np.lexsort((conf, t[:, 1], t[:, 0], s[:, 1], s[:, 0]))


def robust_affine(
    ms: MatchSet, inlier_tol: float = 5.0, iterations: int = 2000, rng_seed: int = 42
) -> tuple[AffineTransform, np.ndarray]:
    """RANSAC consensus affine over a match set.

    Samples 3 matches per round, fits the exact affine (target to source),
    counts matches with reprojection error below ``inlier_tol``, and refits
    by least squares on the best inlier set. Matches are canonically
    pre-sorted, so the result depends only on their content and the seed.
    Returns the transform and the inlier indices into ``ms.matches``.
    """
    n = len(ms)
    if n < 3:
        raise InsufficientMatches(f"RANSAC needs at least 3 matches, got {n}")
    order = _canonical_order(ms)
    s = ms.source_points()[order]
    t = ms.target_points()[order]

    rng = np.random.default_rng(rng_seed)
    # Triples with repeated indices fall out through the collinearity filter.
    picks = rng.integers(0, n, size=(iterations, 3))
    tri_t = t[picks]  # (iters, 3, 2)
    tri_s = s[picks]
    ones = np.ones((iterations, 3, 1))
    design = np.concatenate([tri_t, ones], axis=2)  # (iters, 3, 3)
    dets = np.linalg.det(design)
    # det of [[tx,ty,1]...] equals twice the signed triangle area
    valid = np.abs(dets) > 2e-6
    if not valid.any():
        raise DegenerateConfiguration("every sampled triple is collinear")
    sol = np.linalg.solve(design[valid], tri_s[valid])  # (v, 3, 2)
    mapped = np.einsum("nk,vkd->vnd", np.column_stack([t, np.ones(n)]), sol)
    err2 = ((mapped - s[None, :, :]) ** 2).sum(axis=2)
    inlier_mask = err2 < inlier_tol**2
    counts = inlier_mask.sum(axis=1)
    best = int(np.argmax(counts))
    best_mask = inlier_mask[best]
    refit = fit_affine_lstsq(t[best_mask], s[best_mask])
    inlier_sorted = np.nonzero(best_mask)[0]
    return refit, np.sort(order[inlier_sorted])


def matchset_from_features(
    kp_s: list[Keypoint],
    d_s: np.ndarray,
    kp_t: list[Keypoint],
    d_t: np.ndarray,
    ratio: float = 0.8,
) -> MatchSet:
    """Pair already-extracted features into a MatchSet."""
    pairs = match_descriptors(d_s, d_t, ratio)
    matches = tuple(Match(kp_s[ia], kp_t[ib], conf) for ia, ib, conf in pairs)
    return MatchSet(matches, DESCRIPTOR_DIM, "classical-dog")


def matchset_from_planes(
    src: ImagePlane,
    tgt: ImagePlane,
    max_keypoints: int = 1024,
    ratio: float = 0.8,
) -> MatchSet:
    """Classical backend: detect, describe, and pair keypoints on two planes."""
    kp_s, d_s = detect_and_describe(src, max_keypoints)
    kp_t, d_t = detect_and_describe(tgt, max_keypoints)
    return matchset_from_features(kp_s, d_s, kp_t, d_t, ratio)


# ---------------------------------------------------------------------------
# External matcher adapter


def external_match(adapter_cmd: str, src: ImagePlane, tgt: ImagePlane) -> MatchSet:
    """Run an external matcher subprocess and validate its reply.

    The engine writes both planes as 8-bit PNGs, sends one JSON request on
    stdin (``{"protocol": 1, "src_path": ..., "tgt_path": ...,
    "max_keypoints": n}``), and expects one JSON reply on stdout
    (``{"backend": name, "matches": [{"sx", "sy", "tx", "ty", "conf"}]}``).
    Any nonzero exit, malformed reply, invariant violation, or timeout raises
    :class:`AdapterFailure`.
    """
    tmp_root = os.environ.get("GIGAREG_TMP") or None
    with tempfile.TemporaryDirectory(prefix="gigareg_adapter_", dir=tmp_root) as tmp:
        src_path = Path(tmp) / "src.png"
        tgt_path = Path(tmp) / "tgt.png"
        save_raster(src_path, quantize_u8(src.data))
        save_raster(tgt_path, quantize_u8(tgt.data))
        request = json.dumps(
            {
                "protocol": ADAPTER_PROTOCOL,
                "src_path": str(src_path),
                "tgt_path": str(tgt_path),
                "max_keypoints": 1024,
            }
        )
        try:
            proc = subprocess.run(
                shlex.split(adapter_cmd),
                input=request.encode(),
                capture_output=True,
                timeout=ADAPTER_TIMEOUT,
            )
        except subprocess.TimeoutExpired as exc:
            raise AdapterFailure(f"adapter timed out after {ADAPTER_TIMEOUT:.0f} s") from exc
        except OSError as exc:
            raise AdapterFailure(f"cannot launch adapter: {exc}") from exc
    if proc.returncode != 0:
        raise AdapterFailure(f"adapter exited with status {proc.returncode}")
    try:
        reply = json.loads(proc.stdout.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AdapterFailure(f"adapter reply is not valid JSON: {exc}") from exc
    return _parse_adapter_reply(reply, src, tgt)


def _parse_adapter_reply(reply: object, src: ImagePlane, tgt: ImagePlane) -> MatchSet:
    if not isinstance(reply, dict) or not isinstance(reply.get("backend"), str):
        raise AdapterFailure("adapter reply must be an object with a 'backend' name")
    raw = reply.get("matches")
    if not isinstance(raw, list):
        raise AdapterFailure("adapter reply must carry a 'matches' list")
    matches = []
    for i, entry in enumerate(raw):
        try:
            sx, sy = float(entry["sx"]), float(entry["sy"])
            tx, ty = float(entry["tx"]), float(entry["ty"])
            conf = float(entry["conf"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AdapterFailure(f"match {i}: missing or non-numeric fields") from exc
        if not all(math.isfinite(v) for v in (sx, sy, tx, ty, conf)):
            raise AdapterFailure(f"match {i}: non-finite values")
        if not 0.0 <= conf <= 1.0:
            raise AdapterFailure(f"match {i}: confidence {conf} outside [0, 1]")
        if not (0.0 <= sx <= src.width - 1 and 0.0 <= sy <= src.height - 1):
            raise AdapterFailure(f"match {i}: source point ({sx}, {sy}) outside image bounds")
        if not (0.0 <= tx <= tgt.width - 1 and 0.0 <= ty <= tgt.height - 1):
            raise AdapterFailure(f"match {i}: target point ({tx}, {ty}) outside image bounds")
        matches.append(Match(Keypoint(sx, sy, 1.0, conf), Keypoint(tx, ty, 1.0, conf), conf))
    return MatchSet(tuple(matches), 0, reply["backend"])
