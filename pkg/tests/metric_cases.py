"""Randomized small instances compared against the brute-force oracles."""

import numpy as np

from unitprop.core import Detection, GroundTruth, Proposal, SecondsInterval, tiou
from unitprop.metrics import DEFAULT_AR_GRID, average_recall, detection_map, recall_at
from unitprop.proposer import nms

from oracles import average_recall_ref, map_ref, nms_ref, recall_ref, tiou_ref

LABELS = ("a", "b", "c")


def _span(rng, length):
    # mix of grid-aligned and continuous endpoints so exact ties occur
    if rng.random() < 0.5:
        a, b = sorted(rng.choice(int(length) + 1, size=2, replace=False))
        return float(a), float(b)
    while True:
        a, b = sorted(rng.uniform(0, length, size=2))
        if b > a:
            return float(a), float(b)


def random_instance(rng):
    n_videos = int(rng.integers(1, 6))
    vids = [f"v{i}" for i in range(n_videos)]
    length = 20.0
    gts = [GroundTruth(str(rng.choice(vids)), SecondsInterval(*_span(rng, length)), str(rng.choice(LABELS)))
           for _ in range(int(rng.integers(1, 6)))]
    props = []
    for _ in range(int(rng.integers(0, 21))):
        vid = str(rng.choice(vids))
        if gts and rng.random() < 0.4:
            # jitter a GT so high overlaps are common
            g = gts[int(rng.integers(len(gts)))]
            s = max(0.0, g.span.start_s + float(rng.normal(0, 1)))
            e = max(s + 0.01, g.span.end_s + float(rng.normal(0, 1)))
            vid = g.video_id
        else:
            s, e = _span(rng, length)
        props.append(Proposal(vid, SecondsInterval(s, e), float(rng.integers(0, 5)) / 4))
    return vids, gts, props


def run(n_instances=1000, seed=0):
    """Max absolute deviation per metric over ``n_instances`` random instances."""
    rng = np.random.default_rng(seed)
    worst = {"tiou": 0.0, "nms": 0.0, "recall_at": 0.0, "average_recall": 0.0, "detection_map": 0.0}
    for _ in range(n_instances):
        vids, gts, props = random_instance(rng)
        for p in props:
            for g in gts:
                d = abs(tiou(p.span, g.span) - tiou_ref((p.span.start_s, p.span.end_s),
                                                         (g.span.start_s, g.span.end_s)))
                worst["tiou"] = max(worst["tiou"], d)

        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
        got = nms(props, thr)
        want = []
        for vid in sorted(set(p.video_id for p in props)):
            items = [(p.span.start_s, p.span.end_s, p.score, i) for i, p in enumerate(props) if p.video_id == vid]
            want.extend(props[it[3]] for it in nms_ref(items, thr))
        if got != want:
            worst["nms"] = float("inf")

        g3 = [(g.video_id, g.span.start_s, g.span.end_s) for g in gts]
        p3 = [(p.video_id, p.span.start_s, p.span.end_s) for p in props]
        t = float(rng.choice([0.1, 0.5, 0.75, 0.95, 1.0]))
        worst["recall_at"] = max(worst["recall_at"], abs(recall_at(gts, props, t) - recall_ref(g3, p3, t)))
        worst["average_recall"] = max(worst["average_recall"], abs(
            average_recall(gts, props) - average_recall_ref(g3, p3, DEFAULT_AR_GRID)))

        dets = [Detection(p.video_id, p.span, p.score + float(rng.random()) * 0.1, str(rng.choice(LABELS)))
                for p in props]
        mthr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        d4 = [(d.video_id, d.span.start_s, d.span.end_s, d.score, d.label) for d in dets]
        g4 = [(g.video_id, g.span.start_s, g.span.end_s, g.label) for g in gts]
        worst["detection_map"] = max(worst["detection_map"], abs(
            detection_map(dets, gts, mthr) - map_ref(d4, g4, mthr)))
    return worst
