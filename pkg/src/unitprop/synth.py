"""Seeded synthetic unit-feature datasets with planted action spans.

Background units are isotropic Gaussian noise. An action of class ``k``
adds ``signal_gain * w_j * mu_k`` to each of its units, where the ``mu_k``
are orthonormal class directions and ``w_j`` ramps linearly from the span
edges over ``boundary_ramp_units`` units. Spans take lengths from
``duration_scales`` and are separated by at least two background units.

Each dataset ships with a matched-filter score: the likelihood-ratio
detector that knows the directions and the ramp template. Its AR@F=1.0
says how learnable the data is before any model is involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from unitprop.core import GroundTruth, Proposal, SecondsInterval, derive_seed
from unitprop.featurestore import (
    AnnotatedVideo,
    FeatureStore,
    VideoRecord,
    manifest_entry,
    write_annotations,
    write_manifest,
    write_trnf,
)
from unitprop.metrics import Frequency, ProposalEvaluator
from unitprop.proposer import nms_arrays

MIN_GAP_UNITS = 2


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 200
    n_test_videos: int = 50
    units_per_video: int = 256
    feature_dim: int = 32
    unit_frames: int = 16
    fps: float = 16.0
    n_classes: int = 4
    actions_per_video: Tuple[int, int] = (1, 4)
    duration_scales: Tuple[int, ...] = (2, 4, 8, 16, 32)
    noise_sigma: float = 1.0
    signal_gain: float = 2.5
    boundary_ramp_units: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "actions_per_video", tuple(int(a) for a in self.actions_per_video))
        object.__setattr__(self, "duration_scales", tuple(int(d) for d in self.duration_scales))
        lo, hi = self.actions_per_video
        if self.n_videos < 1 or self.n_test_videos < 0:
            raise SynthError("need n_videos >= 1 and n_test_videos >= 0")
        if self.units_per_video < 1 or self.feature_dim < 1 or self.unit_frames < 1 or not self.fps > 0:
            raise SynthError("units_per_video, feature_dim, unit_frames and fps must be positive")
        if not 1 <= self.n_classes <= self.feature_dim:
            raise SynthError(f"n_classes must be in [1, feature_dim], got {self.n_classes}")
        if not 1 <= lo <= hi:
            raise SynthError(f"bad actions_per_video range {self.actions_per_video}")
        if not self.duration_scales or min(self.duration_scales) < 1:
            raise SynthError(f"bad duration_scales {self.duration_scales}")
        if self.noise_sigma <= 0 or self.signal_gain < 0 or self.boundary_ramp_units < 0:
            raise SynthError("noise_sigma must be > 0, signal_gain and boundary_ramp_units >= 0")
        worst = hi * max(self.duration_scales) + MIN_GAP_UNITS * (hi - 1)
        if worst > self.units_per_video:
            raise SynthError(
                f"{hi} actions of {max(self.duration_scales)} units need {worst} units, "
                f"videos have {self.units_per_video}")

    @property
    def total_frames(self) -> int:
        return self.units_per_video * self.unit_frames

    @property
    def duration_s(self) -> float:
        return self.total_frames / self.fps


def class_directions(dim: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal class directions: distinct signed coordinate axes.

    Axis-aligned so the construction is exact and platform independent.
    """
    axes = rng.permutation(dim)[:n_classes]
    signs = rng.choice(np.array([-1.0, 1.0]), size=n_classes)
    dirs = np.zeros((n_classes, dim))
    dirs[np.arange(n_classes), axes] = signs
    return dirs


def ramp_template(length: int, ramp_units: int) -> np.ndarray:
    """Per-unit signal weight: ``(d + 1) / (ramp + 1)`` at distance ``d`` from the nearest edge, capped at 1."""
    j = np.arange(length)
    d = np.minimum(j, length - 1 - j)
    return np.minimum(1.0, (d + 1) / (ramp_units + 1))


def _place_actions(cfg: SynthConfig, rng: np.random.Generator):
    lo, hi = cfg.actions_per_video
    k = int(rng.integers(lo, hi + 1))
    lengths = rng.choice(np.asarray(cfg.duration_scales), size=k)
    classes = rng.integers(0, cfg.n_classes, size=k)
    slack = cfg.units_per_video - int(lengths.sum()) - MIN_GAP_UNITS * (k - 1)
    if slack < 0:
        raise SynthError(f"{k} actions of lengths {lengths.tolist()} do not fit")
    cuts = np.sort(rng.integers(0, slack + 1, size=k))
    gaps = np.diff(np.concatenate([[0], cuts, [slack]]))
    spans = []
    pos = int(gaps[0])
    for i in range(k):
        spans.append((pos, pos + int(lengths[i]), int(classes[i])))
        pos += int(lengths[i]) + MIN_GAP_UNITS + int(gaps[i + 1])
    return spans


def generate_video(cfg: SynthConfig, video_id: str, directions: np.ndarray,
                   rng: np.random.Generator) -> Tuple[VideoRecord, AnnotatedVideo]:
    spans = _place_actions(cfg, rng)
    feats = rng.normal(0.0, cfg.noise_sigma, size=(cfg.units_per_video, cfg.feature_dim))
    sec = cfg.unit_frames / cfg.fps
    gts = []
    for s, e, k in spans:
        w = ramp_template(e - s, cfg.boundary_ramp_units)
        feats[s:e] += cfg.signal_gain * w[:, None] * directions[k][None, :]
        gts.append(GroundTruth(video_id, SecondsInterval(s * sec, e * sec), f"class_{k}"))
    rec = VideoRecord(video_id, cfg.fps, cfg.total_frames, cfg.unit_frames, feats.astype(np.float32))
    return rec, AnnotatedVideo(video_id, cfg.duration_s, cfg.fps, tuple(gts))


def generate_split(cfg: SynthConfig, split: str, n_videos: int,
                   directions: np.ndarray) -> Tuple[FeatureStore, Dict[str, AnnotatedVideo]]:
    rng = np.random.default_rng(derive_seed(cfg.seed, f"synth/{split}"))
    records, annotations = [], {}
    for i in range(n_videos):
        rec, ann = generate_video(cfg, f"{split}_{i:04d}", directions, rng)
        records.append(rec)
        annotations[rec.video_id] = ann
    return FeatureStore(records), annotations


def dataset_directions(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(cfg.seed, "synth/directions"))
    return class_directions(cfg.feature_dim, cfg.n_classes, rng)


# --------------------------------------------------------------------------
# matched filter


def matched_filter_scores(features: np.ndarray, directions: np.ndarray, cfg: SynthConfig):
    """Log-likelihood ratio of every (start, length) span against pure background.

    Returns ``(starts, ends, llr)`` maximized over classes.
    """
    proj = np.asarray(features, dtype=np.float64) @ directions.T  # (U, K)
    n_units = proj.shape[0]
    g, var = cfg.signal_gain, cfg.noise_sigma ** 2
    starts, ends, llrs = [], [], []
    for length in cfg.duration_scales:
        if length > n_units:
            continue
        w = ramp_template(length, cfg.boundary_ramp_units)
        windows = np.lib.stride_tricks.sliding_window_view(proj, length, axis=0)  # (S, K, L)
        llr = (g * (windows @ w) - 0.5 * g * g * float(w @ w)) / var
        s = np.arange(n_units - length + 1)
        starts.append(s)
        ends.append(s + length)
        llrs.append(llr.max(axis=1))
    return np.concatenate(starts), np.concatenate(ends), np.concatenate(llrs)


def matched_filter_proposals(rec: VideoRecord, directions: np.ndarray, cfg: SynthConfig,
                             nms_threshold: float = 0.5) -> List[Proposal]:
    starts, ends, llr = matched_filter_scores(rec.unit_features, directions, cfg)
    # monotone squashing into (0, 1) that keeps large ratios distinguishable
    scores = 0.5 + np.arctan(llr) / math.pi
    sec = rec.unit_seconds
    keep = nms_arrays(starts * sec, ends * sec, scores, nms_threshold)
    return [Proposal(rec.video_id, SecondsInterval(float(starts[k] * sec), float(ends[k] * sec)),
                     float(scores[k])) for k in keep]


def matched_filter_ar(store: FeatureStore, annotations: Dict[str, AnnotatedVideo],
                      directions: np.ndarray, cfg: SynthConfig, frequency: float = 1.0) -> float:
    props = []
    for rec in store:
        props.extend(matched_filter_proposals(rec, directions, cfg))
    gts = [g for a in annotations.values() for g in a.actions]
    lengths = {vid: a.duration_s for vid, a in annotations.items()}
    return ProposalEvaluator(gts, props, lengths).average_recall(Frequency(frequency))


# --------------------------------------------------------------------------
# on-disk datasets


def write_split(out_dir, store: FeatureStore, annotations: Dict[str, AnnotatedVideo]) -> None:
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in store:
        rel = f"features/{rec.video_id}.trnf"
        write_trnf(out_dir / rel, rec.unit_features)
        entries.append(manifest_entry(rec.video_id, rel, rec.fps, rec.total_frames, rec.unit_frames))
    write_manifest(out_dir / "manifest.json", entries)
    write_annotations(out_dir / "annotations.json", [annotations[v] for v in store.ids])


def config_echo(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["actions_per_video"] = list(cfg.actions_per_video)
    d["duration_scales"] = list(cfg.duration_scales)
    return d


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Write ``train/`` and ``test/`` splits plus ``synth_meta.json`` under ``out_dir``.

    Returns the metadata document (config echo and matched-filter AR@F=1.0).
    """
    out_dir = Path(out_dir)
    directions = dataset_directions(cfg)
    meta = {"config": config_echo(cfg), "class_directions": directions.tolist(), "oracle": {}}
    splits = [("train", cfg.n_videos), ("test", cfg.n_test_videos)]
    for split, n in splits:
        if n == 0:
            continue
        store, annotations = generate_split(cfg, split, n, directions)
        write_split(out_dir / split, store, annotations)
        meta["oracle"][split] = {"matched_filter_ar_f1": matched_filter_ar(store, annotations, directions, cfg)}
    (out_dir / "synth_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta
