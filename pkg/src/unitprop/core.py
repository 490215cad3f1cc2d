"""Domain types and temporal interval arithmetic."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
import numpy as np


@dataclass(frozen=True)
class UnitInterval:
    """Half-open run of units ``[start_unit, end_unit)``."""

    start_unit: int
    end_unit: int

    def __post_init__(self):
        if int(self.start_unit) != self.start_unit or int(self.end_unit) != self.end_unit:
            raise ValueError(f"unit indices must be integers: {self.start_unit}, {self.end_unit}")
        if self.start_unit < 0:
            raise ValueError(f"start_unit must be >= 0, got {self.start_unit}")
        if self.start_unit >= self.end_unit:
            raise ValueError(f"empty unit interval [{self.start_unit}, {self.end_unit})")

    @property
    def length(self) -> int:
        return self.end_unit - self.start_unit


@dataclass(frozen=True)
class SecondsInterval:
    """Closed time segment in seconds."""

    start_s: float
    end_s: float

    def __post_init__(self):
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            raise ValueError(f"non-finite interval [{self.start_s}, {self.end_s}]")
        if self.start_s < 0:
            raise ValueError(f"start_s must be >= 0, got {self.start_s}")
        if self.start_s >= self.end_s:
            raise ValueError(f"empty interval [{self.start_s}, {self.end_s}]")

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    span: SecondsInterval
    label: str

    def __post_init__(self):
        if not self.label:
            raise ValueError(f"ground truth in {self.video_id!r} has an empty label")


@dataclass(frozen=True)
class Proposal:
    video_id: str
    span: SecondsInterval
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite proposal score {self.score}")


@dataclass(frozen=True)
class Detection:
    """Class-labelled proposal, the input to detection mAP."""

    video_id: str
    span: SecondsInterval
    score: float
    label: str

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


def tiou(a: SecondsInterval, b: SecondsInterval) -> float:
    """Temporal intersection over union. Touching segments score 0."""
    overlap = min(a.end_s, b.end_s) - max(a.start_s, b.start_s)
    if overlap <= 0:
        return 0.0
    union = (a.end_s - a.start_s) + (b.end_s - b.start_s) - overlap
    return overlap / union


def tiou_matrix(starts_a, ends_a, starts_b, ends_b) -> np.ndarray:
    """Pairwise tIoU, shape ``(len(a), len(b))``.

    Uses the same operation order as :func:`tiou` so results are bitwise equal.
    """
    sa = np.asarray(starts_a, dtype=np.float64)[:, None]
    ea = np.asarray(ends_a, dtype=np.float64)[:, None]
    sb = np.asarray(starts_b, dtype=np.float64)[None, :]
    eb = np.asarray(ends_b, dtype=np.float64)[None, :]
    overlap = np.minimum(ea, eb) - np.maximum(sa, sb)
    union = (ea - sa) + (eb - sb) - overlap
    out = np.zeros(overlap.shape, dtype=np.float64)
    np.divide(overlap, union, out=out, where=overlap > 0)
    return out


def units_to_seconds(u: UnitInterval, unit_frames: int, fps: float) -> SecondsInterval:
    if unit_frames < 1 or not fps > 0:
        raise ValueError(f"invalid unit_frames={unit_frames} / fps={fps}")
    return SecondsInterval(u.start_unit * unit_frames / fps, u.end_unit * unit_frames / fps)


def seconds_to_units(t: float, unit_frames: int, fps: float) -> float:
    """Real-valued unit coordinate of time ``t`` (not rounded)."""
    return t * fps / unit_frames


def derive_seed(seed: int, purpose: str) -> int:
    """Per-purpose 64-bit seed: first 8 bytes (LE) of ``sha256(f"{seed}/{purpose}")``."""
    digest = hashlib.sha256(f"{int(seed)}/{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
