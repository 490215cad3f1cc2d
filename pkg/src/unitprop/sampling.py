"""Clip pyramids, training label assignment and class-balanced minibatches."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from unitprop.core import GroundTruth, UnitInterval, seconds_to_units, tiou_matrix
from unitprop.featurestore import VideoRecord

POSITIVE_TIOU = 0.5


class TrainingConfigError(ValueError):
    """The labeled pool cannot produce a minibatch."""


@dataclass(frozen=True)
class PyramidConfig:
    scales: Tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    n_ctx: int = 4

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.scales:
            raise ValueError("pyramid needs at least one scale")
        if any(s < 1 for s in self.scales):
            raise ValueError(f"scales must be >= 1: {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing: {self.scales}")
        if self.n_ctx < 1:
            raise ValueError(f"n_ctx must be >= 1, got {self.n_ctx}")


@dataclass(frozen=True)
class ClipCandidate:
    video_id: str
    anchor: int
    scale: int
    clip: UnitInterval


class Label(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


@dataclass(frozen=True)
class TrainingSample:
    video_id: str
    clip: UnitInterval
    label: Label
    target_offsets: Optional[Tuple[float, float]] = None
    matched_gt: Optional[GroundTruth] = None

    def __post_init__(self):
        if (self.label is Label.POSITIVE) != (self.target_offsets is not None):
            raise ValueError("target offsets are present iff the sample is positive")


def pyramid_arrays(n_units: int, scales: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Start and end units of every pyramid clip, anchor-major then scale."""
    scales = np.asarray(scales, dtype=np.int64)
    anchors = np.arange(n_units, dtype=np.int64)
    starts = np.repeat(anchors, len(scales))
    ends = starts + np.tile(scales, n_units)
    keep = ends <= n_units
    return starts[keep], ends[keep]


def build_pyramid(rec: VideoRecord, cfg: PyramidConfig) -> List[ClipCandidate]:
    starts, ends = pyramid_arrays(rec.n_units, cfg.scales)
    return [
        ClipCandidate(rec.video_id, int(s), int(e - s), UnitInterval(int(s), int(e)))
        for s, e in zip(starts, ends)
    ]


def label_arrays(starts, ends, gts: Sequence[GroundTruth], unit_frames: int, fps: float):
    """Vectorized label rules on unit arrays.

    Returns ``(labels, matched, off_s, off_e)``: labels as int8 (1 positive,
    0 negative, -1 ignored), index of the matched GT (or -1), and the
    regression targets ``clip_start - gt_start`` / ``clip_end - gt_end`` in units.
    """
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    n = starts.shape[0]
    labels = np.full(n, -1, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    off_s = np.zeros(n)
    off_e = np.zeros(n)
    if n == 0:
        return labels, matched, off_s, off_e
    if not gts:
        labels[:] = 0
        return labels, matched, off_s, off_e

    sec = unit_frames / fps
    gs = np.array([g.span.start_s for g in gts])
    ge = np.array([g.span.end_s for g in gts])
    ious = tiou_matrix(starts * sec, ends * sec, gs, ge)

    best_per_gt = ious.max(axis=0)
    positive = np.any((ious == best_per_gt[None, :]) & (best_per_gt[None, :] > 0), axis=1)
    positive |= np.any(ious > POSITIVE_TIOU, axis=1)
    negative = np.all(ious == 0, axis=1)

    labels[negative] = 0
    labels[positive] = 1
    # highest tIoU wins; ties go to the earliest GT start, then annotation order
    order = np.lexsort((np.arange(len(gts)), gs))
    best = order[np.argmax(ious[:, order], axis=1)]
    pos_idx = np.flatnonzero(positive)
    matched[pos_idx] = best[pos_idx]
    gt_su = np.array([seconds_to_units(g.span.start_s, unit_frames, fps) for g in gts])
    gt_eu = np.array([seconds_to_units(g.span.end_s, unit_frames, fps) for g in gts])
    off_s[pos_idx] = starts[pos_idx] - gt_su[best[pos_idx]]
    off_e[pos_idx] = ends[pos_idx] - gt_eu[best[pos_idx]]
    return labels, matched, off_s, off_e


_LABELS = {1: Label.POSITIVE, 0: Label.NEGATIVE, -1: Label.IGNORED}


def assign_labels(clips: Sequence[ClipCandidate], gts: Sequence[GroundTruth],
                  rec: VideoRecord) -> List[TrainingSample]:
    if not clips:
        return []
    for c in clips:
        if c.video_id != rec.video_id:
            raise ValueError(f"clip from {c.video_id!r} passed with video {rec.video_id!r}")
    for g in gts:
        if g.video_id != rec.video_id:
            raise ValueError(f"ground truth from {g.video_id!r} passed with video {rec.video_id!r}")
    starts = [c.clip.start_unit for c in clips]
    ends = [c.clip.end_unit for c in clips]
    labels, matched, off_s, off_e = label_arrays(starts, ends, gts, rec.unit_frames, rec.fps)
    out = []
    for i, c in enumerate(clips):
        lab = _LABELS[int(labels[i])]
        if lab is Label.POSITIVE:
            out.append(TrainingSample(rec.video_id, c.clip, lab,
                                      (float(off_s[i]), float(off_e[i])), gts[matched[i]]))
        else:
            out.append(TrainingSample(rec.video_id, c.clip, lab))
    return out


@dataclass
class SamplePool:
    """Labeled samples split by class; ignored samples are dropped."""

    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "SamplePool":
        pool = cls()
        for s in samples:
            if s.label is Label.POSITIVE:
                pool.positives.append(s)
            elif s.label is Label.NEGATIVE:
                pool.negatives.append(s)
        return pool


def positive_quota(batch_size: int, bg_ratio: int) -> int:
    """Positives per batch: ``batch_size / (bg_ratio + 1)`` rounded half up, at least 1."""
    return max(1, math.floor(batch_size / (bg_ratio + 1) + 0.5))


def draw_indices(n_pool: int, quota: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw, with replacement only when the pool is short."""
    return rng.choice(n_pool, size=quota, replace=n_pool < quota)


def sample_minibatch(pool, batch_size: int, bg_ratio: int,
                     rng: np.random.Generator) -> List[TrainingSample]:
    if not isinstance(pool, SamplePool):
        pool = SamplePool.from_samples(pool)
    if not pool.positives or not pool.negatives:
        raise TrainingConfigError(
            f"minibatch needs positives and negatives, pool has "
            f"{len(pool.positives)} positive / {len(pool.negatives)} negative")
    n_pos = positive_quota(batch_size, bg_ratio)
    if n_pos >= batch_size:
        raise TrainingConfigError(f"batch_size={batch_size} leaves no room for negatives")
    pi = draw_indices(len(pool.positives), n_pos, rng)
    ni = draw_indices(len(pool.negatives), batch_size - n_pos, rng)
    return [pool.positives[i] for i in pi] + [pool.negatives[i] for i in ni]
