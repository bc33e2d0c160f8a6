"""Landmark-based accuracy metrics: TRE, rTRE, and dataset aggregates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput, LandmarkMismatch, MalformedCsv, MissingSpacing

UNITS = ("pixels", "micrometers", "millimeters")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LandmarkSet:
    """Named 2-D points, stored in pixels at the declared evaluation resolution."""

    ids: tuple[str, ...]
    points: np.ndarray  # (n, 2) float64 pixel coordinates
    units: str = "pixels"  # units of the original file
    spacing: float | None = None  # micrometers per pixel

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("landmark sets must be nonempty")
        if len(pts) != len(self.ids):
            raise ValueError("ids and points must have equal lengths")
        if not np.isfinite(pts).all():
            raise ValueError("landmark coordinates must be finite")
        if self.units not in UNITS:
            raise ValueError(f"unknown units {self.units!r}")
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "points", _freeze(pts.copy()))

    def __len__(self) -> int:
        return len(self.ids)

    def with_points(self, points: np.ndarray) -> "LandmarkSet":
        return LandmarkSet(self.ids, points, self.units, self.spacing)


def load_landmarks(path: str | Path, units: str = "pixels", spacing: float | None = None) -> LandmarkSet:
    """Parse an ``id,x,y`` CSV and convert coordinates to pixels.

    Physical units (micrometers/millimeters) require ``spacing`` in
    micrometers per pixel; pixel units pass through unchanged.
    """
    if units not in UNITS:
        raise MalformedCsv(f"unknown landmark units {units!r}")
    if units != "pixels" and spacing is None:
        raise MissingSpacing(f"units {units!r} require a pixel spacing")
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            rows = [row for row in reader if row]
    except OSError as exc:
        raise MalformedCsv(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip().lower() for c in rows[0]] != ["id", "x", "y"]:
        raise MalformedCsv(f"{path}: expected header 'id,x,y'")
    body = rows[1:]
    if not body:
        raise MalformedCsv(f"{path}: no landmarks")
    ids = []
    pts = []
    for i, row in enumerate(body):
        if len(row) != 3:
            raise MalformedCsv(f"{path}: row {i + 2} has {len(row)} fields")
        try:
            pts.append((float(row[1]), float(row[2])))
        except ValueError as exc:
            raise MalformedCsv(f"{path}: row {i + 2}: non-numeric coordinate") from exc
        ids.append(row[0].strip())
    arr = np.asarray(pts, dtype=np.float64)
    if units == "millimeters":
        arr = arr * 1000.0 / spacing
    elif units == "micrometers":
        arr = arr / spacing
    return LandmarkSet(tuple(ids), arr, units, spacing)


def save_landmarks(path: str | Path, lm: LandmarkSet) -> None:
    """Write pixel-coordinate landmarks as an ``id,x,y`` CSV (UTF-8, LF)."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("id,x,y\n")
        for i, (x, y) in zip(lm.ids, lm.points):
            fh.write(f"{i},{x:.9g},{y:.9g}\n")


def tre(warped_source_landmarks: LandmarkSet, target_landmarks: LandmarkSet, spacing: float = 1.0) -> np.ndarray:
    """Per-landmark Euclidean distances in micrometers."""
    a, b = warped_source_landmarks, target_landmarks
    if len(a) != len(b):
        raise LandmarkMismatch(f"landmark counts differ: {len(a)} vs {len(b)}")
    if a.ids != b.ids:
        raise LandmarkMismatch("landmark ids differ")
    return np.linalg.norm(a.points - b.points, axis=1) * spacing


def rtre(distances_px: np.ndarray, image_w: int, image_h: int) -> np.ndarray:
    """Distances normalized by the image diagonal."""
    if image_w < 1 or image_h < 1:
        raise ValueError("image dimensions must be >= 1")
    return np.asarray(distances_px, dtype=np.float64) / math.hypot(image_w, image_h)


@dataclass(frozen=True)
class PairEvaluation:
    """Per-pair landmark errors plus their medians and averages."""

    tre_per_landmark: tuple[float, ...]  # micrometers
    median_tre: float
    average_tre: float
    median_rtre: float
    average_rtre: float

    @classmethod
    def from_distances(cls, dist_px: np.ndarray, spacing: float, image_w: int, image_h: int) -> "PairEvaluation":
        d_um = np.asarray(dist_px, dtype=np.float64) * spacing
        d_r = rtre(dist_px, image_w, image_h)
        return cls(
            tuple(float(v) for v in d_um),
            float(np.median(d_um)),
            float(np.mean(d_um)),
            float(np.median(d_r)),
            float(np.mean(d_r)),
        )


@dataclass(frozen=True)
class DatasetSummary:
    """Median/average aggregates over pairs, for both TRE (um) and rTRE."""

    med_med_tre: float
    med_avg_tre: float
    avg_med_tre: float
    avg_avg_tre: float
    med_med_rtre: float
    med_avg_rtre: float
    avg_med_rtre: float
    avg_avg_rtre: float

    def report_dict(self) -> dict:
        return {
            "tre_um": {
                "med_med": self.med_med_tre,
                "med_avg": self.med_avg_tre,
                "avg_med": self.avg_med_tre,
                "avg_avg": self.avg_avg_tre,
            },
            "rtre": {
                "med_med": self.med_med_rtre,
                "med_avg": self.med_avg_rtre,
                "avg_med": self.avg_med_rtre,
                "avg_avg": self.avg_avg_rtre,
            },
        }


def aggregate(per_pair: list[PairEvaluation]) -> DatasetSummary:
    """Dataset-level aggregates: median/average over per-pair medians/averages.

    Medians of even-length lists are the mean of the two central values.
    """
    if not per_pair:
        raise EmptyInput("no pair evaluations to aggregate")
    med_t = np.array([p.median_tre for p in per_pair])
    avg_t = np.array([p.average_tre for p in per_pair])
    med_r = np.array([p.median_rtre for p in per_pair])
    avg_r = np.array([p.average_rtre for p in per_pair])
    return DatasetSummary(
        float(np.median(med_t)),
        float(np.median(avg_t)),
        float(np.mean(med_t)),
        float(np.mean(avg_t)),
        float(np.median(med_r)),
        float(np.median(avg_r)),
        float(np.mean(med_r)),
        float(np.mean(avg_r)),
    )


def robustness(initial_tre: list[np.ndarray], final_tre: list[np.ndarray]) -> float:
    """Fraction of pairs whose median TRE strictly decreased."""
    if len(initial_tre) != len(final_tre):
        raise LandmarkMismatch(
            f"pair counts differ: {len(initial_tre)} vs {len(final_tre)}"
        )
    if not initial_tre:
        raise EmptyInput("no pairs")
    improved = sum(
        1 for ini, fin in zip(initial_tre, final_tre) if np.median(fin) < np.median(ini)
    )
    return improved / len(initial_tre)
