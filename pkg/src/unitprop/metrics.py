"""Proposal and detection evaluation.

Recall is measured per ground truth: a GT counts as recalled at threshold
``t`` when some retained proposal of the same video has tIoU >= ``t`` with
it. How many proposals each video retains is set by a retrieval rule:

* :class:`TopN` -- the same N for every video (AR-N),
* :class:`Frequency` -- ``F`` proposals per second of video (AR-F),
* :class:`Ratio` -- a fraction of each video's proposals (AR-AN).

Average recall (AR) averages recall over the tIoU grid 0.50:0.05:1.00.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from unitprop.core import Detection, GroundTruth, Proposal, tiou_matrix
from unitprop.proposer import sort_proposals

DEFAULT_AR_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(11))
DEFAULT_TIOU_GRID = tuple(round(0.05 * i, 2) for i in range(21))


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class TopN:
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"N must be >= 0, got {self.n}")


@dataclass(frozen=True)
class Frequency:
    f: float

    def __post_init__(self):
        if not self.f >= 0:
            raise ValueError(f"F must be >= 0, got {self.f}")


@dataclass(frozen=True)
class Ratio:
    rho: float

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError(f"ratio must be in (0, 1], got {self.rho}")


RetrievalRule = Union[TopN, Frequency, Ratio]


@dataclass(frozen=True)
class CurvePoint:
    x: float
    y: float


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def retrieval_count(rule: RetrievalRule, available: int, length_s: float) -> int:
    if isinstance(rule, TopN):
        k = rule.n
    elif isinstance(rule, Frequency):
        k = max(1, _half_up(rule.f * length_s)) if rule.f > 0 else 0
    elif isinstance(rule, Ratio):
        k = _half_up(rule.rho * available)
    else:
        raise TypeError(f"unknown retrieval rule {rule!r}")
    return min(k, available)


def group_by_video(proposals: Sequence[Proposal]) -> Dict[str, List[Proposal]]:
    out: Dict[str, List[Proposal]] = defaultdict(list)
    for p in sort_proposals(proposals):
        out[p.video_id].append(p)
    return dict(out)


def retrieve(per_video: Mapping[str, Sequence[Proposal]], rule: RetrievalRule,
             lengths: Mapping[str, float]) -> Dict[str, List[Proposal]]:
    """Top proposals of each video under ``rule``; lists are re-sorted first."""
    out = {}
    for vid, props in per_video.items():
        ranked = sort_proposals(props)
        k = retrieval_count(rule, len(ranked), lengths.get(vid, 0.0))
        out[vid] = ranked[:k]
    return out


def _as_grouped(retained) -> Dict[str, List[Proposal]]:
    if isinstance(retained, Mapping):
        return {k: list(v) for k, v in retained.items()}
    return group_by_video(retained)


def _best_tiou_per_gt(gts: Sequence[GroundTruth], retained) -> np.ndarray:
    grouped = _as_grouped(retained)
    # -1 marks "no proposal in the video", so threshold 0 does not match it
    best = np.full(len(gts), -1.0)
    gts_by_video: Dict[str, List[int]] = defaultdict(list)
    for i, g in enumerate(gts):
        gts_by_video[g.video_id].append(i)
    for vid, idx in gts_by_video.items():
        props = grouped.get(vid)
        if not props:
            continue
        ious = tiou_matrix([p.span.start_s for p in props], [p.span.end_s for p in props],
                           [gts[i].span.start_s for i in idx], [gts[i].span.end_s for i in idx])
        best[idx] = ious.max(axis=0)
    return best


def recall_at(gts: Sequence[GroundTruth], retained, tiou_threshold: float) -> float:
    if not gts:
        raise EvaluationError("recall is undefined without ground truths")
    best = _best_tiou_per_gt(gts, retained)
    return int((best >= tiou_threshold).sum()) / len(gts)


def average_recall(gts: Sequence[GroundTruth], retained,
                   tiou_grid: Sequence[float] = DEFAULT_AR_GRID) -> float:
    if not gts:
        raise EvaluationError("recall is undefined without ground truths")
    if not len(tiou_grid):
        raise EvaluationError("empty tIoU grid")
    best = _best_tiou_per_gt(gts, retained)
    return float(np.mean([int((best >= t).sum()) / len(gts) for t in tiou_grid]))


class ProposalEvaluator:
    """Precomputed per-video prefix maxima of tIoU for fast curve sweeps.

    ``lengths`` maps every test video to its duration in seconds; it defines
    the evaluated video set. Proposals of other videos are ignored; test
    videos without GTs still count toward the average proposal number.
    """

    def __init__(self, gts: Sequence[GroundTruth], proposals: Sequence[Proposal],
                 lengths: Mapping[str, float]):
        self.lengths = dict(lengths)
        self.gts = [g for g in gts if g.video_id in self.lengths]
        if not self.gts:
            raise EvaluationError("recall is undefined without ground truths")
        grouped = group_by_video([p for p in proposals if p.video_id in self.lengths])
        self.n_props = {vid: len(grouped.get(vid, ())) for vid in self.lengths}
        gts_by_video: Dict[str, List[GroundTruth]] = defaultdict(list)
        for g in self.gts:
            gts_by_video[g.video_id].append(g)
        # prefix[vid][k] = best tIoU of each of the video's GTs among its top-k proposals
        self.prefix: Dict[str, np.ndarray] = {}
        for vid, vg in gts_by_video.items():
            props = grouped.get(vid, [])
            table = np.full((len(props) + 1, len(vg)), -1.0)
            if props:
                ious = tiou_matrix([p.span.start_s for p in props], [p.span.end_s for p in props],
                                   [g.span.start_s for g in vg], [g.span.end_s for g in vg])
                table[1:] = np.maximum.accumulate(ious, axis=0)
            self.prefix[vid] = table

    @property
    def mean_proposals(self) -> float:
        return float(np.mean(list(self.n_props.values())))

    def counts(self, rule: RetrievalRule) -> Dict[str, int]:
        return {vid: retrieval_count(rule, n, self.lengths[vid]) for vid, n in self.n_props.items()}

    def _best(self, counts: Mapping[str, int]) -> np.ndarray:
        return np.concatenate([self.prefix[vid][counts[vid]] for vid in self.prefix])

    def recall(self, rule: RetrievalRule, tiou_threshold: float) -> float:
        best = self._best(self.counts(rule))
        return int((best >= tiou_threshold).sum()) / len(best)

    def average_recall(self, rule: RetrievalRule,
                       tiou_grid: Sequence[float] = DEFAULT_AR_GRID) -> float:
        best = self._best(self.counts(rule))
        return float(np.mean([int((best >= t).sum()) / len(best) for t in tiou_grid]))

    def ratio_for_average_number(self, an: float) -> float:
        phi = self.mean_proposals
        if phi == 0:
            return 1.0
        return min(1.0, max(an / phi, 1e-12))


def _rule(family: str, x: float) -> RetrievalRule:
    if family == "F":
        return Frequency(x)
    if family == "N":
        return TopN(int(x))
    if family == "AN":
        return Ratio(x)
    raise ValueError(f"unknown curve family {family!r} (expected F, N or AN)")


def ar_curve(gts: Sequence[GroundTruth], proposals: Sequence[Proposal], family: str,
             xs: Sequence[float], lengths: Mapping[str, float],
             tiou_grid: Sequence[float] = DEFAULT_AR_GRID) -> List[CurvePoint]:
    """AR-F, AR-N or AR-AN curve.

    For ``family="AN"`` the ``xs`` are retrieval ratios in (0, 1] and each
    point's x is the realized average number of retrieved proposals.
    """
    ev = ProposalEvaluator(gts, proposals, lengths)
    return evaluator_curve(ev, family, xs, tiou_grid)


def evaluator_curve(ev: ProposalEvaluator, family: str, xs: Sequence[float],
                    tiou_grid: Sequence[float] = DEFAULT_AR_GRID) -> List[CurvePoint]:
    points = []
    for x in xs:
        rule = _rule(family, x)
        y = ev.average_recall(rule, tiou_grid)
        if family == "AN":
            x = float(np.mean(list(ev.counts(rule).values())))
        points.append(CurvePoint(float(x), y))
    return points


def recall_x_tiou(gts: Sequence[GroundTruth], proposals: Sequence[Proposal],
                  rule: RetrievalRule, lengths: Mapping[str, float],
                  tiou_grid: Sequence[float] = DEFAULT_TIOU_GRID) -> List[CurvePoint]:
    """Recall against tIoU threshold at one fixed retrieval level."""
    ev = ProposalEvaluator(gts, proposals, lengths)
    return [CurvePoint(float(t), ev.recall(rule, t)) for t in tiou_grid]


def average_precision(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                      tiou_threshold: float) -> float:
    """All-points (uninterpolated) AP for detections and GTs of one class."""
    if not gts:
        raise EvaluationError("AP is undefined without ground truths")
    gts_by_video: Dict[str, List[GroundTruth]] = defaultdict(list)
    for g in gts:
        gts_by_video[g.video_id].append(g)
    used = {vid: np.zeros(len(v), dtype=bool) for vid, v in gts_by_video.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    tp = 0
    ap = 0.0
    for rank, i in enumerate(order, 1):
        d = detections[i]
        vg = gts_by_video.get(d.video_id)
        if not vg:
            continue
        ious = tiou_matrix([d.span.start_s], [d.span.end_s],
                           [g.span.start_s for g in vg], [g.span.end_s for g in vg])[0]
        ious[used[d.video_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= tiou_threshold:
            used[d.video_id][j] = True
            tp += 1
            ap += tp / rank
    return ap / len(gts)


def detection_map(detections: Sequence[Detection], gts: Sequence[GroundTruth],
                  tiou_threshold: float = 0.5) -> float:
    """Mean AP over every label that has at least one ground truth."""
    if not gts:
        raise EvaluationError("mAP is undefined without ground truths")
    gt_by_label: Dict[str, List[GroundTruth]] = defaultdict(list)
    for g in gts:
        gt_by_label[g.label].append(g)
    det_by_label: Dict[str, List[Detection]] = defaultdict(list)
    for d in detections:
        det_by_label[d.label].append(d)
    aps = [average_precision(det_by_label.get(lab, []), g, tiou_threshold)
           for lab, g in sorted(gt_by_label.items())]
    return float(np.mean(aps))


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise EvaluationError("pearson needs two equal-length series of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise EvaluationError("pearson is undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def format_curve_csv(points: Sequence[CurvePoint], header: Tuple[str, str] = ("x", "average_recall")) -> str:
    lines = [",".join(header)]
    lines += [f"{p.x:.6g},{p.y:.6g}" for p in points]
    return "\n".join(lines) + "\n"
