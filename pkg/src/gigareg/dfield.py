"""Dense displacement fields and their binary serialization.

A field stores pixel-unit displacements in the backward convention: warping
samples the source image at ``(x + ux(x, y), y + uy(x, y))``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UnreadableInput

MAGIC = b"GIGAREGFIELDv001"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DisplacementField:
    """Two-channel pixel-displacement grid, float64, row-major."""

    ux: np.ndarray
    uy: np.ndarray

    def __post_init__(self) -> None:
        ux = np.asarray(self.ux, dtype=np.float64)
        uy = np.asarray(self.uy, dtype=np.float64)
        if ux.ndim != 2 or ux.shape != uy.shape or ux.shape[0] < 1 or ux.shape[1] < 1:
            raise ValueError(f"field channels must be equal 2-D shapes, got {ux.shape} / {uy.shape}")
        if not (np.isfinite(ux).all() and np.isfinite(uy).all()):
            raise ValueError("displacement fields must be finite")
        if ux.flags.writeable:
            ux = np.ascontiguousarray(ux).copy()
        if uy.flags.writeable:
            uy = np.ascontiguousarray(uy).copy()
        object.__setattr__(self, "ux", _freeze(ux))
        object.__setattr__(self, "uy", _freeze(uy))

    @classmethod
    def _wrap(cls, ux: np.ndarray, uy: np.ndarray) -> "DisplacementField":
        obj = object.__new__(cls)
        object.__setattr__(obj, "ux", _freeze(np.ascontiguousarray(ux, dtype=np.float64)))
        object.__setattr__(obj, "uy", _freeze(np.ascontiguousarray(uy, dtype=np.float64)))
        return obj

    @classmethod
    def zero(cls, width: int, height: int) -> "DisplacementField":
        return cls._wrap(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def width(self) -> int:
        return self.ux.shape[1]

    @property
    def height(self) -> int:
        return self.ux.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ux.shape


def save_field(path: str | Path, field: DisplacementField) -> None:
    """Write the binary field format: magic, u32 LE width/height, float32 ux then uy."""
    payload = b"".join(
        (
            MAGIC,
            struct.pack("<II", field.width, field.height),
            field.ux.astype("<f4").tobytes(),
            field.uy.astype("<f4").tobytes(),
        )
    )
    Path(path).write_bytes(payload)


def load_field(path: str | Path) -> DisplacementField:
    """Read a field written by :func:`save_field`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableInput(f"cannot read field {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise UnreadableInput(f"{path}: not a displacement field file")
    w, h = struct.unpack_from("<II", raw, len(MAGIC))
    expected = len(MAGIC) + 8 + 2 * 4 * w * h
    if len(raw) != expected:
        raise UnreadableInput(f"{path}: truncated field ({len(raw)} bytes, expected {expected})")
    body = np.frombuffer(raw, dtype="<f4", offset=len(MAGIC) + 8)
    ux = body[: w * h].reshape(h, w).astype(np.float64)
    uy = body[w * h :].reshape(h, w).astype(np.float64)
    return DisplacementField._wrap(ux, uy)
