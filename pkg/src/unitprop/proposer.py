"""Inference: score pyramid clips, refine boundaries, suppress duplicates.

Also home to the two reference baselines (randomly scored sliding windows
and uniformly random spans) and the JSON-lines proposal file format::

    {"video_id": "...", "start_s": 1.0, "end_s": 3.0, "score": 0.9}

one object per line, sorted by video then descending score.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from unitprop.core import Detection, Proposal, SecondsInterval, UnitInterval, tiou_matrix
from unitprop.featurestore import FeatureBank, FeatureStore, VideoRecord
from unitprop.model import ModelParams, forward_batch
from unitprop.sampling import PyramidConfig, pyramid_arrays

DEFAULT_WINDOW_FRAMES = (16, 32, 64, 128, 256, 512)


@dataclass(frozen=True)
class RawScoredClip:
    clip: UnitInterval
    action_prob: float
    offsets: Tuple[float, float]


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def refine(clip: UnitInterval, offsets: Tuple[float, float],
           n_units: int) -> Optional[UnitInterval]:
    """Shift clip boundaries by the predicted offsets; None when the result is empty."""
    s, e = refine_arrays([clip.start_unit], [clip.end_unit], np.array([offsets], dtype=np.float64), n_units)
    if s[0] >= e[0]:
        return None
    return UnitInterval(int(s[0]), int(e[0]))


def refine_arrays(starts, ends, offsets, n_units: int):
    """Vectorized :func:`refine`; returns rounded, clamped ``(starts, ends)``.

    Rows with ``start >= end`` are rejections and must be dropped by the caller.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    s = _round_half_up(np.asarray(starts, dtype=np.float64) - offsets[:, 0])
    e = _round_half_up(np.asarray(ends, dtype=np.float64) - offsets[:, 1])
    s = np.clip(s, 0, n_units).astype(np.int64)
    e = np.clip(e, 0, n_units).astype(np.int64)
    return s, e


def _nms_order(starts, ends, scores) -> np.ndarray:
    # descending score, then earlier start, then longer span, then input order
    return np.lexsort((np.arange(len(scores)), -(ends - starts), starts, -scores))


def nms_arrays(starts, ends, scores, threshold: float) -> np.ndarray:
    """Greedy NMS on one video's spans; returns kept indices in rank order."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    order = _nms_order(starts, ends, scores)
    alive = np.ones(len(order), dtype=bool)
    s, e = starts[order], ends[order]
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(order[i])
        rest = slice(i + 1, None)
        ious = tiou_matrix(s[i:i + 1], e[i:i + 1], s[rest], e[rest])[0]
        alive[rest] &= ~(ious > threshold)
    return np.array(kept, dtype=np.int64)


def nms(proposals: Sequence[Proposal], threshold: float) -> List[Proposal]:
    """Greedy NMS. Only proposals of the same video suppress each other."""
    by_video: Dict[str, List[int]] = defaultdict(list)
    for i, p in enumerate(proposals):
        by_video[p.video_id].append(i)
    kept: List[Proposal] = []
    for idx in by_video.values():
        ps = [proposals[i] for i in idx]
        keep = nms_arrays([p.span.start_s for p in ps], [p.span.end_s for p in ps],
                          [p.score for p in ps], threshold)
        kept.extend(ps[k] for k in keep)
    return sort_proposals(kept)


def sort_proposals(proposals: Iterable[Proposal]) -> List[Proposal]:
    """Video, descending score, earlier start, longer span."""
    return sorted(proposals, key=lambda p: (p.video_id, -p.score, p.span.start_s,
                                            -(p.span.end_s - p.span.start_s)))


def score_clips(params: ModelParams, bank: FeatureBank, video_index: int, starts, ends,
                chunk: int = 8192):
    """Action probabilities and offsets for a batch of clips of one video."""
    probs, offs = [], []
    for lo in range(0, len(starts), chunk):
        X = bank.features(video_index, starts[lo:lo + chunk], ends[lo:lo + chunk])
        _, p, o, _ = forward_batch(params, X)
        probs.append(p)
        offs.append(o)
    if not probs:
        return np.zeros(0), np.zeros((0, 2))
    return np.concatenate(probs), np.concatenate(offs)


def raw_scored_clips(params: ModelParams, rec: VideoRecord, pyramid_cfg: PyramidConfig,
                     context: bool = True) -> List[RawScoredClip]:
    bank = FeatureBank([rec], pyramid_cfg.n_ctx, context)
    starts, ends = pyramid_arrays(rec.n_units, pyramid_cfg.scales)
    probs, offs = score_clips(params, bank, 0, starts, ends)
    return [RawScoredClip(UnitInterval(int(s), int(e)), float(p), (float(o[0]), float(o[1])))
            for s, e, p, o in zip(starts, ends, probs, offs)]


def propose_video(params: ModelParams, rec: VideoRecord, pyramid_cfg: PyramidConfig,
                  nms_threshold: float, context: bool = True,
                  regression: bool = True) -> List[Proposal]:
    bank = FeatureBank([rec], pyramid_cfg.n_ctx, context)
    starts, ends = pyramid_arrays(rec.n_units, pyramid_cfg.scales)
    probs, offs = score_clips(params, bank, 0, starts, ends)
    if regression:
        starts, ends = refine_arrays(starts, ends, offs, rec.n_units)
        ok = starts < ends
        starts, ends, probs = starts[ok], ends[ok], probs[ok]
    sec = rec.unit_seconds
    s_sec = starts * sec
    e_sec = ends * sec
    keep = nms_arrays(s_sec, e_sec, probs, nms_threshold)
    return [Proposal(rec.video_id, SecondsInterval(float(s_sec[k]), float(e_sec[k])), float(probs[k]))
            for k in keep]


def propose(params: ModelParams, store: FeatureStore, video_id: str,
            pyramid_cfg: PyramidConfig, nms_threshold: float = 0.5,
            context: bool = True, regression: bool = True) -> List[Proposal]:
    return propose_video(params, store[video_id], pyramid_cfg, nms_threshold, context, regression)


def propose_all(params: ModelParams, store: FeatureStore, pyramid_cfg: PyramidConfig,
                nms_threshold: float = 0.5, context: bool = True,
                regression: bool = True) -> List[Proposal]:
    out: List[Proposal] = []
    for vid in store.ids:
        out.extend(propose(params, store, vid, pyramid_cfg, nms_threshold, context, regression))
    return sort_proposals(out)


# --------------------------------------------------------------------------
# baselines


def sliding_window_baseline(rec: VideoRecord, window_frames: Sequence[int] = DEFAULT_WINDOW_FRAMES,
                            overlap: float = 0.75,
                            rng: Optional[np.random.Generator] = None) -> List[Proposal]:
    """Windows of each length, stepped by ``round(w * (1 - overlap))`` frames, random scores."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    rng = rng if rng is not None else np.random.default_rng()
    spans = []
    for w in window_frames:
        if w < 1:
            raise ValueError(f"window length must be positive, got {w}")
        stride = max(1, int(math.floor(w * (1 - overlap) + 0.5)))
        for start in range(0, rec.total_frames - w + 1, stride):
            spans.append((start / rec.fps, (start + w) / rec.fps))
    scores = rng.random(len(spans))
    return [Proposal(rec.video_id, SecondsInterval(s, e), float(sc))
            for (s, e), sc in zip(spans, scores)]


def random_baseline(rec: VideoRecord, count: int,
                    rng: Optional[np.random.Generator] = None) -> List[Proposal]:
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rng = rng if rng is not None else np.random.default_rng()
    duration = rec.duration_s
    out = []
    for _ in range(count):
        a, b = rng.uniform(0.0, duration, size=2)
        while a == b:
            a, b = rng.uniform(0.0, duration, size=2)
        a, b = min(a, b), max(a, b)
        out.append(Proposal(rec.video_id, SecondsInterval(float(a), float(b)), float(rng.random())))
    return out


# --------------------------------------------------------------------------
# proposal files


def proposal_record(p) -> dict:
    rec = {"video_id": p.video_id, "start_s": p.span.start_s, "end_s": p.span.end_s, "score": p.score}
    if isinstance(p, Detection):
        rec["label"] = p.label
    return rec


def write_proposals(path, proposals: Iterable[Proposal]) -> None:
    ordered = sort_proposals(proposals)
    with open(path, "w") as fh:
        for p in ordered:
            fh.write(json.dumps(proposal_record(p)) + "\n")


class ProposalFormatError(ValueError):
    pass


def read_proposals(path) -> List[Proposal]:
    """Read a JSON-lines file; lines carrying ``label`` come back as :class:`Detection`."""
    out: List[Proposal] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                span = SecondsInterval(float(d["start_s"]), float(d["end_s"]))
                if "label" in d:
                    out.append(Detection(str(d["video_id"]), span, float(d["score"]), str(d["label"])))
                else:
                    out.append(Proposal(str(d["video_id"]), span, float(d["score"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ProposalFormatError(f"{path}:{lineno}: {exc}") from None
    return out
