"""Exhaustive multi-scale, multi-angle global alignment.

Feature extractors are never perfectly scale- or rotation-invariant, so the
search resamples both images to a ladder of sizes, rotates the source through
a grid of angles, matches features for every (scale, angle) pair, and keeps
the candidate with the most matches. The winning per-candidate affine is
composed with its search rotation and rescaled to the working resolution.
A pair where every candidate fails falls back to the identity transform
rather than aborting, so the downstream nonrigid stage always runs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import features
from .core_imaging import ImagePlane, bicubic_grid, fit_max_side, resample_antialiased
from .errors import AdapterFailure, DegenerateConfiguration, InsufficientMatches
from .features import MatchSet
from .geometry import (
    AffineTransform,
    affine_apply,
    compose,
    rescale_transform,
    rotation_about_center,
    to_json_dict,
)

DEFAULT_SCALES = (256, 362, 512, 724, 1024, 1448, 2048, 2896)


@dataclass(frozen=True)
class InitialAlignmentConfig:
    """Search ladder and backend knobs for the global alignment."""

    scales: tuple[int, ...] = DEFAULT_SCALES
    angle_step: float = 30.0
    min_matches: int = 8
    backend: str = "classical"  # "classical" or "adapter"
    adapter_cmd: str | None = None
    max_keypoints: int = 1024
    match_ratio: float = 0.8
    ransac_tol: float = 5.0
    ransac_iterations: int = 2000
    rng_seed: int = 42
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.scales or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be a strictly increasing sequence")
        if not 0.0 < self.angle_step <= 360.0:
            raise ValueError("angle_step must be in (0, 360]")
        if self.min_matches < 3:
            raise ValueError("min_matches must be >= 3")
        if self.backend not in ("classical", "adapter"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "adapter" and not self.adapter_cmd:
            raise ValueError("adapter backend requires adapter_cmd")

    def angles(self) -> list[float]:
        n = math.ceil(360.0 / self.angle_step - 1e-9)
        return [i * self.angle_step for i in range(n)]


@dataclass(frozen=True)
class CandidateResult:
    scale: int
    angle: float
    match_count: int
    affine_at_scale: AffineTransform
    mean_inlier_error: float
    reason: str | None = None


@dataclass(frozen=True)
class InitialAlignmentResult:
    affine: AffineTransform
    candidates: list[CandidateResult]
    fallback_identity: bool
    winner: CandidateResult | None
    adapter_fallbacks: int = 0

    def report_dict(self) -> dict:
        winner = (
            {
                "scale": self.winner.scale,
                "angle": self.winner.angle,
                "match_count": self.winner.match_count,
            }
            if self.winner is not None
            else None
        )
        return {
            "winner": winner,
            "candidates": [
                {
                    "scale": c.scale,
                    "angle": c.angle,
                    "match_count": c.match_count,
                    "mean_inlier_error": c.mean_inlier_error,
                    "reason": c.reason,
                }
                for c in self.candidates
            ],
            "fallback_identity": self.fallback_identity,
            "adapter_fallbacks": self.adapter_fallbacks,
            "affine": to_json_dict(self.affine),
        }


def estimate_affine_least_squares(ms: MatchSet) -> AffineTransform:
    """Least-squares affine over all matches, mapping target to source coords.

    Solves the normal equations of the 6-parameter fit. Raises
    ``InsufficientMatches`` below 3 matches and ``DegenerateConfiguration``
    when the normal-equation matrix is singular.
    """
    if len(ms) < 3:
        raise InsufficientMatches(f"need at least 3 matches, got {len(ms)}")
    return features.fit_affine_lstsq(ms.target_points(), ms.source_points())


def _zero_candidate(scale: int, angle: float, reason: str) -> CandidateResult:
    return CandidateResult(scale, angle, 0, AffineTransform.identity(), math.inf, reason)


class _ScaleContext:
    """Shared per-scale state: resampled planes and reusable feature fields."""

    def __init__(self, src: ImagePlane, tgt: ImagePlane, scale: int, cfg: InitialAlignmentConfig):
        self.scale = scale
        self.src_dims = fit_max_side(src.width, src.height, scale)
        self.tgt_dims = fit_max_side(tgt.width, tgt.height, scale)
        self.src_plane = resample_antialiased(src, *self.src_dims)
        self.tgt_plane = resample_antialiased(tgt, *self.tgt_dims)
        self.src_field = features.detect_feature_field(
            self.src_plane.data.astype(np.float32), cfg.max_keypoints
        )
        self.tgt_field = features.detect_feature_field(
            self.tgt_plane.data.astype(np.float32), cfg.max_keypoints
        )

    def rotated_source(self, angle: float) -> ImagePlane:
        if angle == 0.0:
            return self.src_plane
        w, h = self.src_dims
        rot = rotation_about_center(angle, w, h)
        xs = np.arange(w, dtype=np.float64)[None, :]
        ys = np.arange(h, dtype=np.float64)[:, None]
        m = rot.m
        sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
        sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
        sx, sy = np.broadcast_arrays(sx, sy)
        data = bicubic_grid(self.src_plane.data, np.ascontiguousarray(sx), np.ascontiguousarray(sy))
        return ImagePlane._wrap(data)


def _evaluate_in_context(ctx: _ScaleContext, angle: float, cfg: InitialAlignmentConfig) -> CandidateResult:
    scale = ctx.scale
    rot = rotation_about_center(angle, *ctx.src_dims)

    reason = None
    ms: MatchSet | None = None
    if cfg.backend == "adapter":
        try:
            ms = features.external_match(cfg.adapter_cmd, ctx.rotated_source(angle), ctx.tgt_plane)
        except AdapterFailure as exc:
            reason = f"adapter failed ({exc}); classical fallback"
    if ms is None:
        # Classical path: re-describe the cached detections under the rotation
        # instead of resampling the image and rebuilding its scale space.
        kp_s, d_s = features.describe_rotated(ctx.src_field, angle)
        kp_t, d_t = ctx.tgt_field.keypoints, ctx.tgt_field.descriptors
        ms = features.matchset_from_features(kp_s, d_s, kp_t, d_t, cfg.match_ratio)

    if len(ms) < 3:
        return _zero_candidate(scale, angle, _join(reason, f"only {len(ms)} raw matches"))
    try:
        fit, inliers = features.robust_affine(ms, cfg.ransac_tol, cfg.ransac_iterations, cfg.rng_seed)
    except (InsufficientMatches, DegenerateConfiguration) as exc:
        return _zero_candidate(scale, angle, _join(reason, f"estimator failed: {exc}"))
    s_pts = ms.source_points()[inliers]
    t_pts = ms.target_points()[inliers]
    errs = np.linalg.norm(affine_apply(fit, t_pts) - s_pts, axis=1)
    mean_err = float(errs.mean())
    # Adapter match counts rank candidates as reported; the classical backend
    # ranks by consensus inliers.
    count = len(ms) if (cfg.backend == "adapter" and reason is None) else len(inliers)
    full = compose(fit, rot)
    if count < cfg.min_matches:
        return CandidateResult(
            scale, angle, 0, full, mean_err, _join(reason, f"{count} matches below min_matches")
        )
    return CandidateResult(scale, angle, count, full, mean_err, reason)


def evaluate_candidate(
    src: ImagePlane, tgt: ImagePlane, scale: int, angle: float, cfg: InitialAlignmentConfig
) -> CandidateResult:
    """Match features for one (scale, angle) search cell.

    Both images are anti-alias resampled so their max side equals ``scale``;
    the source is additionally rotated about its center. The candidate affine
    is the robust fit composed with the search rotation, still expressed at
    the candidate scale. All failures fold into ``match_count = 0`` with a
    reason string; they never abort the search.
    """
    return _evaluate_in_context(_ScaleContext(src, tgt, scale, cfg), angle, cfg)


def _join(a: str | None, b: str) -> str:
    return b if a is None else f"{a}; {b}"


def run_initial_alignment(
    src: ImagePlane, tgt: ImagePlane, cfg: InitialAlignmentConfig | None = None
) -> InitialAlignmentResult:
    """Evaluate every (scale, angle) candidate and keep the best one.

    The winner has the highest match count; ties break toward lower mean
    inlier error, then larger scale, then smaller angle, so the outcome does
    not depend on evaluation order. The winning affine is rescaled to the
    resolution of the input planes. If every candidate scores below
    ``min_matches`` the identity transform is returned with a fallback flag.
    """
    cfg = cfg or InitialAlignmentConfig()
    angles = cfg.angles()
    candidates: list[CandidateResult] = []
    for scale in cfg.scales:
        ctx = _ScaleContext(src, tgt, scale, cfg)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                candidates.extend(pool.map(lambda a: _evaluate_in_context(ctx, a, cfg), angles))
        else:
            candidates.extend(_evaluate_in_context(ctx, angle, cfg) for angle in angles)

    adapter_fallbacks = sum(1 for c in candidates if c.reason and "adapter failed" in c.reason)
    ranked = sorted(
        range(len(candidates)),
        key=lambda i: (
            -candidates[i].match_count,
            candidates[i].mean_inlier_error,
            -candidates[i].scale,
            candidates[i].angle,
        ),
    )
    best = candidates[ranked[0]]
    if best.match_count == 0:
        return InitialAlignmentResult(
            AffineTransform.identity(), candidates, True, None, adapter_fallbacks
        )
    sw, sh = fit_max_side(src.width, src.height, best.scale)
    tw, th = fit_max_side(tgt.width, tgt.height, best.scale)
    affine = rescale_transform(
        best.affine_at_scale,
        src_from=(sw, sh),
        src_to=(src.width, src.height),
        tgt_from=(tw, th),
        tgt_to=(tgt.width, tgt.height),
    )
    return InitialAlignmentResult(affine, candidates, False, best, adapter_fallbacks)
