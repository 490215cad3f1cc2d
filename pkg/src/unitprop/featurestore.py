"""Unit-level feature storage and clip feature assembly.

Feature files (``.trnf``, one per video) are laid out as::

    offset 0   b"TRNF"
    offset 4   version   u32 LE (= 1)
    offset 8   D         u32 LE
    offset 12  U         u32 LE
    offset 16  U*D float32 LE, row-major (unit j occupies row j)

A JSON manifest lists the videos of a store; annotations live in a separate
JSON file (see :func:`load_annotations`).
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Sequence

import numpy as np

from unitprop.core import GroundTruth, SecondsInterval, UnitInterval

MAGIC = b"TRNF"
VERSION = 1
HEADER = struct.Struct("<4sIII")


class FeatureFormatError(ValueError):
    """A feature file or manifest failed validation."""

    def __init__(self, message: str, path=None, video_id=None, offset=None):
        self.path = None if path is None else str(path)
        self.video_id = video_id
        self.offset = offset
        where = []
        if video_id is not None:
            where.append(f"video {video_id!r}")
        if path is not None:
            where.append(f"file {self.path}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class MissingInputError(FeatureFormatError):
    """A feature file, manifest or annotation file does not exist."""


@dataclass(frozen=True, eq=False)
class VideoRecord:
    video_id: str
    fps: float
    total_frames: int
    unit_frames: int
    unit_features: np.ndarray  # (U, D) float32

    @property
    def n_units(self) -> int:
        return self.unit_features.shape[0]

    @property
    def dim(self) -> int:
        return self.unit_features.shape[1]

    @property
    def duration_s(self) -> float:
        return self.total_frames / self.fps

    @property
    def unit_seconds(self) -> float:
        return self.unit_frames / self.fps


class FeatureStore:
    """Immutable collection of :class:`VideoRecord` sharing one feature dim."""

    def __init__(self, records: Sequence[VideoRecord]):
        if not records:
            raise FeatureFormatError("feature store has no videos")
        self.dim = records[0].dim
        self.unit_frames = records[0].unit_frames
        self.videos: Dict[str, VideoRecord] = {}
        for rec in records:
            if rec.video_id in self.videos:
                raise FeatureFormatError("duplicate video id", video_id=rec.video_id)
            if rec.dim != self.dim:
                raise FeatureFormatError(
                    f"dimension mismatch: D={rec.dim}, store has D={self.dim}",
                    video_id=rec.video_id, offset=8)
            if rec.unit_frames != self.unit_frames:
                raise FeatureFormatError(
                    f"unit_frames={rec.unit_frames} differs from store unit_frames={self.unit_frames}",
                    video_id=rec.video_id)
            self.videos[rec.video_id] = rec

    def __getitem__(self, video_id: str) -> VideoRecord:
        try:
            return self.videos[video_id]
        except KeyError:
            raise KeyError(f"video {video_id!r} not in feature store") from None

    def __contains__(self, video_id) -> bool:
        return video_id in self.videos

    def __iter__(self) -> Iterator[VideoRecord]:
        return iter(self.videos.values())

    def __len__(self) -> int:
        return len(self.videos)

    @property
    def ids(self) -> List[str]:
        return list(self.videos)


# --------------------------------------------------------------------------
# TRNF files


def encode_trnf(features: np.ndarray) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D (U, D), got shape {arr.shape}")
    n_units, dim = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, VERSION, dim, n_units) + payload


def write_trnf(path, features: np.ndarray) -> None:
    Path(path).write_bytes(encode_trnf(features))


def decode_trnf(data: bytes, path=None, video_id=None) -> np.ndarray:
    if len(data) < HEADER.size:
        raise FeatureFormatError(
            f"truncated header ({len(data)} bytes)", path, video_id, len(data))
    magic, version, dim, n_units = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", path, video_id, 0)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}", path, video_id, 4)
    if dim == 0:
        raise FeatureFormatError("feature dimension D is 0", path, video_id, 8)
    if n_units == 0:
        raise FeatureFormatError("unit count U is 0", path, video_id, 12)
    expected = HEADER.size + 4 * dim * n_units
    if len(data) != expected:
        raise FeatureFormatError(
            f"payload size mismatch: file has {len(data)} bytes, header implies {expected}",
            path, video_id, min(len(data), expected))
    feats = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n_units, dim)
    bad = ~np.isfinite(feats)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise FeatureFormatError(
            f"non-finite feature value at unit {idx // dim}, component {idx % dim}",
            path, video_id, HEADER.size + 4 * idx)
    return feats.astype(np.float32)


def read_trnf(path, video_id=None) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise MissingInputError("feature file not found", path, video_id) from None
    return decode_trnf(data, path, video_id)


# --------------------------------------------------------------------------
# manifests and annotations


def write_manifest(path, entries: Sequence[dict]) -> None:
    """Write a manifest. Each entry: id, path, fps, total_frames, unit_frames."""
    doc = {"videos": [dict(e) for e in entries]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


_MANIFEST_KEYS = {"id", "path", "fps", "total_frames", "unit_frames"}


def _load_record(entry: dict, base: Path) -> VideoRecord:
    vid = entry["id"]
    path = base / entry["path"]
    fps = float(entry["fps"])
    total_frames = int(entry["total_frames"])
    unit_frames = int(entry["unit_frames"])
    if not fps > 0 or unit_frames < 1 or total_frames < 1:
        raise FeatureFormatError(
            f"invalid fps/total_frames/unit_frames {fps}/{total_frames}/{unit_frames}",
            video_id=vid)
    feats = read_trnf(path, vid)
    n_units = total_frames // unit_frames
    if feats.shape[0] != n_units:
        raise FeatureFormatError(
            f"unit count U={feats.shape[0]} but total_frames // unit_frames = {n_units}",
            path, vid, 12)
    return VideoRecord(vid, fps, total_frames, unit_frames, feats)


def load_store(manifest_path, threads: int = 1) -> FeatureStore:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise MissingInputError("manifest not found", manifest_path) from None
    except json.JSONDecodeError as exc:
        raise FeatureFormatError(f"manifest is not valid JSON: {exc}", manifest_path) from None
    entries = doc.get("videos") if isinstance(doc, dict) else None
    if not isinstance(entries, list):
        raise FeatureFormatError("manifest must be an object with a 'videos' list", manifest_path)
    for e in entries:
        missing = _MANIFEST_KEYS - set(e)
        if missing:
            raise FeatureFormatError(
                f"manifest entry missing keys {sorted(missing)}", manifest_path, e.get("id"))
    base = manifest_path.parent
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            records = list(pool.map(lambda e: _load_record(e, base), entries))
    else:
        records = [_load_record(e, base) for e in entries]
    return FeatureStore(records)


@dataclass(frozen=True)
class AnnotatedVideo:
    video_id: str
    duration_s: float
    fps: float
    actions: tuple  # of GroundTruth


def load_annotations(path) -> Dict[str, AnnotatedVideo]:
    """Read ``[{video_id, duration_s, fps, actions: [{start_s, end_s, label}]}]``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise MissingInputError("annotation file not found", path) from None
    except json.JSONDecodeError as exc:
        raise FeatureFormatError(f"annotations are not valid JSON: {exc}", path) from None
    if not isinstance(doc, list):
        raise FeatureFormatError("annotation file must hold a JSON list", path)
    out: Dict[str, AnnotatedVideo] = {}
    for entry in doc:
        vid = entry["video_id"]
        if vid in out:
            raise FeatureFormatError("duplicate video in annotations", path, vid)
        try:
            gts = tuple(
                GroundTruth(vid, SecondsInterval(float(a["start_s"]), float(a["end_s"])), str(a["label"]))
                for a in entry.get("actions", []))
        except (KeyError, ValueError) as exc:
            raise FeatureFormatError(f"bad action: {exc}", path, vid) from None
        out[vid] = AnnotatedVideo(vid, float(entry["duration_s"]), float(entry["fps"]), gts)
    return out


def write_annotations(path, videos: Sequence[AnnotatedVideo]) -> None:
    doc = [
        {
            "video_id": v.video_id,
            "duration_s": v.duration_s,
            "fps": v.fps,
            "actions": [
                {"start_s": g.span.start_s, "end_s": g.span.end_s, "label": g.label}
                for g in v.actions
            ],
        }
        for v in videos
    ]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# --------------------------------------------------------------------------
# pooling


def mean_pool(rec, start: int, end: int) -> np.ndarray:
    """Mean of unit rows ``[start, end)`` clamped to the video.

    ``rec`` is a :class:`VideoRecord` or a ``(U, D)`` array. An empty range
    after clamping pools to the zero vector.
    """
    feats = rec.unit_features if isinstance(rec, VideoRecord) else np.asarray(rec)
    lo, hi = max(0, start), min(feats.shape[0], end)
    if hi <= lo:
        return np.zeros(feats.shape[1], dtype=np.float64)
    return feats[lo:hi].astype(np.float64).mean(axis=0)


def clip_feature(rec: VideoRecord, clip: UnitInterval, n_ctx: int) -> np.ndarray:
    """``[before-context || internal || after-context]``, length ``3*D``."""
    if clip.end_unit > rec.n_units:
        raise ValueError(f"clip [{clip.start_unit}, {clip.end_unit}) outside video of {rec.n_units} units")
    s, e = clip.start_unit, clip.end_unit
    return np.concatenate([
        mean_pool(rec, s - n_ctx, s),
        mean_pool(rec, s, e),
        mean_pool(rec, e, e + n_ctx),
    ])


class FeatureBank:
    """Prefix sums over the unit features of one or more videos.

    Each unit row is read once, at construction; every clip feature
    afterwards is two prefix-sum lookups per block, whatever the clip count.
    ``rows_read`` records how many unit rows were consumed.
    """

    def __init__(self, records: Sequence[VideoRecord], n_ctx: int = 4, context: bool = True):
        if n_ctx < 0:
            raise ValueError("n_ctx must be >= 0")
        self.n_ctx = n_ctx
        self.context = context
        self.dim = records[0].dim
        self.index = {r.video_id: i for i, r in enumerate(records)}
        self.n_units = np.array([r.n_units for r in records], dtype=np.int64)
        # video i's prefix table occupies rows offsets[i] .. offsets[i] + U_i
        self.offsets = np.concatenate([[0], np.cumsum(self.n_units + 1)[:-1]]).astype(np.int64)
        table = np.zeros((int((self.n_units + 1).sum()), self.dim), dtype=np.float64)
        self.rows_read = 0
        for i, rec in enumerate(records):
            o = self.offsets[i]
            np.cumsum(rec.unit_features, axis=0, dtype=np.float64, out=table[o + 1:o + 1 + rec.n_units])
            self.rows_read += rec.n_units
        self._table = table

    @property
    def out_dim(self) -> int:
        return 3 * self.dim if self.context else self.dim

    def _pool(self, vidx, lo, hi):
        n = self.n_units[vidx]
        lo = np.clip(lo, 0, n)
        hi = np.clip(hi, 0, n)
        count = np.maximum(hi - lo, 0)
        hi = np.maximum(hi, lo)
        base = self.offsets[vidx]
        sums = self._table[base + hi] - self._table[base + lo]
        return sums / np.maximum(count, 1)[:, None]

    def features(self, vidx, starts, ends) -> np.ndarray:
        """Clip features for arrays of (video index, start unit, end unit)."""
        vidx = np.broadcast_to(np.asarray(vidx, dtype=np.int64), np.shape(starts))
        starts = np.asarray(starts, dtype=np.int64)
        ends = np.asarray(ends, dtype=np.int64)
        if np.any(starts < 0) or np.any(ends > self.n_units[vidx]) or np.any(starts >= ends):
            raise ValueError("clip outside its video or empty")
        inner = self._pool(vidx, starts, ends)
        if not self.context:
            return inner
        before = self._pool(vidx, starts - self.n_ctx, starts)
        after = self._pool(vidx, ends, ends + self.n_ctx)
        return np.concatenate([before, inner, after], axis=1)


def manifest_entry(video_id: str, rel_path: str, fps: float, total_frames: int,
                   unit_frames: int) -> dict:
    return {"id": video_id, "path": rel_path, "fps": fps,
            "total_frames": total_frames, "unit_frames": unit_frames}


def find_dataset_files(data_dir) -> tuple:
    """``(manifest.json, annotations.json)`` paths inside a dataset directory."""
    data_dir = Path(data_dir)
    return data_dir / "manifest.json", data_dir / "annotations.json"
