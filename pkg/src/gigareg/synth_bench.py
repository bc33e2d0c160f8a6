"""Synthetic registration benchmark: textured pairs with known ground truth.

Each case holds a band-limited random texture, a ground-truth affine
(rotation about the center plus a small random translation), a smooth
ground-truth deformation (sum of Gaussian bumps), and a 10x10 grid of
landmarks. The target image is constructed exactly as the source warped by
the composed truths, optionally with a gamma perturbation standing in for
stain differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core_imaging import ImagePlane, bicubic_grid, quantize_u8, save_raster
from .dfield import DisplacementField, save_field
from .evaluation import LandmarkSet, save_landmarks
from .geometry import AffineTransform, affine_apply, compose, rotation_about_center, save_affine, translation

N_TEXTURE_BLOBS = 120
LANDMARK_GRID = 10
LANDMARK_MARGIN = 0.15


@dataclass(frozen=True)
class SyntheticCase:
    source: ImagePlane
    target: ImagePlane
    true_affine: AffineTransform
    true_field: DisplacementField
    landmarks_source: LandmarkSet
    landmarks_target: LandmarkSet
    seed: int
    spacing: float = 1.0


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Band-limited random texture: oriented Gaussian blobs plus blurred noise."""
    xs, ys = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    tex = 0.6 * gaussian_filter(rng.random((size, size)), 1.0)
    n = N_TEXTURE_BLOBS * size // 512
    for _ in range(max(n, 30)):
        cx, cy = rng.uniform(0, size, 2)
        s1, s2 = rng.uniform(size / 170.0, size / 36.0, 2)
        th = rng.uniform(0, np.pi)
        amp = rng.uniform(0.3, 1.0) * rng.choice((-1.0, 1.0))
        dx = (xs - cx) * np.cos(th) + (ys - cy) * np.sin(th)
        dy = -(xs - cx) * np.sin(th) + (ys - cy) * np.cos(th)
        tex += amp * np.exp(-(dx**2 / (2 * s1**2) + dy**2 / (2 * s2**2)))
    tex -= tex.min()
    tex /= tex.max()
    return tex


def _bump_field(
    rng: np.random.Generator,
    size: int,
    max_deform_px: float,
    n_blobs: int,
    sigma_range: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    ux = np.zeros((size, size))
    uy = np.zeros((size, size))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, 2)
        sig = rng.uniform(*sigma_range)
        direction = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        bump = amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sig**2))
        ux += bump * np.cos(direction)
        uy += bump * np.sin(direction)
    if max_deform_px > 0:
        mag = np.hypot(ux, uy).max()
        if mag > 0:
            ux *= max_deform_px / mag
            uy *= max_deform_px / mag
    else:
        ux[:] = 0.0
        uy[:] = 0.0
    return ux, uy


def _landmark_grid(size: int) -> np.ndarray:
    lo = round(LANDMARK_MARGIN * (size - 1))
    hi = round((1.0 - LANDMARK_MARGIN) * (size - 1))
    line = np.round(np.linspace(lo, hi, LANDMARK_GRID)).astype(np.float64)
    gx, gy = np.meshgrid(line, line)
    return np.column_stack([gx.ravel(), gy.ravel()])


def generate_case(
    seed: int,
    size: int = 512,
    rot_deg: float = 0.0,
    max_deform_px: float = 0.0,
    n_blobs: int = 3,
    gamma_jitter: float = 0.1,
    deform_sigma_fractions: tuple[float, float] = (1.0 / 16.0, 1.0 / 8.0),
) -> SyntheticCase:
    """Build one deterministic synthetic registration case.

    The full backward ground truth maps a target pixel x to the source pixel
    ``A(x + u(x))``: the bump field is applied first, then the affine, which
    matches how the engine composes its own artifacts. Landmarks sit on an
    interior 10x10 integer grid of the target frame so the stored discrete
    field is exact at their locations.
    """
    if size < 256:
        raise ValueError("size must be >= 256")
    if max_deform_px < 0:
        raise ValueError("max_deform_px must be >= 0")
    rng = np.random.default_rng(seed)
    source = _texture(rng, size)

    sig_lo = deform_sigma_fractions[0] * size
    sig_hi = deform_sigma_fractions[1] * size
    ux, uy = _bump_field(rng, size, max_deform_px, n_blobs, (sig_lo, max(sig_lo, sig_hi)))

    t = rng.uniform(-0.05 * size, 0.05 * size, 2)
    affine = compose(rotation_about_center(rot_deg, size, size), translation(t[0], t[1]))

    xs, ys = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    px = xs + ux
    py = ys + uy
    m = affine.m
    sx = m[0, 0] * px + m[0, 1] * py + m[0, 2]
    sy = m[1, 0] * px + m[1, 1] * py + m[1, 2]
    target = np.clip(bicubic_grid(source, sx, sy), 0.0, 1.0)
    if gamma_jitter > 0:
        gamma = 1.0 + rng.uniform(-gamma_jitter, gamma_jitter)
        target = target**gamma

    grid = _landmark_grid(size)
    gi = grid.astype(np.intp)
    lm_src = affine_apply(
        affine, grid + np.column_stack([ux[gi[:, 1], gi[:, 0]], uy[gi[:, 1], gi[:, 0]]])
    )
    ids = tuple(str(i) for i in range(len(grid)))
    return SyntheticCase(
        source=ImagePlane(source),
        target=ImagePlane(target),
        true_affine=affine,
        true_field=DisplacementField(ux, uy),
        landmarks_source=LandmarkSet(ids, lm_src),
        landmarks_target=LandmarkSet(ids, grid),
        seed=seed,
    )


def write_case(case: SyntheticCase, out_dir: str | Path) -> None:
    """Write a case directory: images, truth artifacts, and landmark CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_raster(out / "source.png", quantize_u8(case.source.data))
    save_raster(out / "target.png", quantize_u8(case.target.data))
    save_affine(out / "truth_affine.json", case.true_affine)
    save_field(out / "truth_field.bin", case.true_field)
    save_landmarks(out / "landmarks_src.csv", case.landmarks_source)
    save_landmarks(out / "landmarks_tgt.csv", case.landmarks_target)
