"""Two-head unit regression network, multi-task loss, Adam and training.

The network is a single hidden ReLU layer shared by two sibling heads::

    h       = relu(W1 @ fc + b1)
    logits  = Wc @ h + bc          # (background, action)
    offsets = Wr @ h + br          # (start, end) offsets in units

Everything is float64 numpy; gradients are derived by hand.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from unitprop.core import derive_seed
from unitprop.featurestore import AnnotatedVideo, FeatureBank, FeatureStore
from unitprop.sampling import (
    Label,
    PyramidConfig,
    TrainingConfigError,
    TrainingSample,
    draw_indices,
    label_arrays,
    positive_quota,
    pyramid_arrays,
)

log = logging.getLogger(__name__)

BLOCKS = ("W1", "b1", "Wc", "bc", "Wr", "br")


class NonFiniteError(FloatingPointError):
    """A forward or backward quantity became NaN or infinite."""

    def __init__(self, block: str):
        self.block = block
        super().__init__(f"non-finite values in gradient block {block}")


@dataclass
class ModelParams:
    W1: np.ndarray  # (H, in_dim)
    b1: np.ndarray  # (H,)
    Wc: np.ndarray  # (2, H)
    bc: np.ndarray  # (2,)
    Wr: np.ndarray  # (2, H)
    br: np.ndarray  # (2,)

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def blocks(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.blocks().items()})

    def map(self, fn, *others) -> "ModelParams":
        return ModelParams(**{
            k: fn(v, *(getattr(o, k) for o in others)) for k, v in self.blocks().items()
        })

    @classmethod
    def zeros(cls, in_dim: int, hidden: int) -> "ModelParams":
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros((2, hidden)),
                   np.zeros(2), np.zeros((2, hidden)), np.zeros(2))

    def check(self) -> None:
        h, d = self.W1.shape
        shapes = {"W1": (h, d), "b1": (h,), "Wc": (2, h), "bc": (2,), "Wr": (2, h), "br": (2,)}
        for name, arr in self.blocks().items():
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(name)


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_params(in_dim: int, hidden: int, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    return ModelParams(
        W1=_glorot(rng, hidden, in_dim), b1=np.zeros(hidden),
        Wc=_glorot(rng, 2, hidden), bc=np.zeros(2),
        Wr=_glorot(rng, 2, hidden), br=np.zeros(2),
    )


@dataclass(frozen=True)
class ModelOutput:
    logits: Tuple[float, float]
    action_prob: float
    offsets: Tuple[float, float]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward_batch(params: ModelParams, X: np.ndarray):
    """Batched forward. Returns ``(logits, action_prob, offsets, (pre, hid))``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ValueError(f"expected features of shape (B, {params.in_dim}), got {X.shape}")
    pre = X @ params.W1.T + params.b1
    hid = np.maximum(pre, 0.0)
    logits = hid @ params.Wc.T + params.bc
    offsets = hid @ params.Wr.T + params.br
    prob = softmax(logits)[:, 1]
    return logits, prob, offsets, (pre, hid)


def forward(params: ModelParams, fc) -> ModelOutput:
    fc = np.asarray(fc, dtype=np.float64)
    if fc.ndim != 1:
        raise ValueError(f"forward takes one feature vector, got shape {fc.shape}")
    if not np.all(np.isfinite(fc)):
        raise ValueError("non-finite clip feature")
    logits, prob, offsets, _ = forward_batch(params, fc[None, :])
    return ModelOutput((float(logits[0, 0]), float(logits[0, 1])), float(prob[0]),
                       (float(offsets[0, 0]), float(offsets[0, 1])))


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls: float
    reg: float
    n_pos: int


def loss_terms(logits, offsets, labels, targets, lam: float) -> LossBreakdown:
    """Multi-task loss on arrays.

    ``labels`` are 0/1 (1 = action); ``targets`` are ``(B, 2)`` unit offsets,
    read only on positive rows. Classification is the batch-mean softmax
    cross-entropy; regression is the per-coordinate L1 residual summed over
    positives and divided by their count (0 when there are none).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("loss needs at least one sample")
    logp = _log_softmax(logits)
    l_cls = float(-logp[np.arange(n), labels].mean())
    pos = labels == 1
    n_pos = int(pos.sum())
    if n_pos:
        resid = np.asarray(offsets, dtype=np.float64)[pos] - np.asarray(targets, dtype=np.float64)[pos]
        l_reg = float(np.abs(resid).sum() / n_pos)
    else:
        l_reg = 0.0
    return LossBreakdown(l_cls + lam * l_reg, l_cls, l_reg, n_pos)


def _sample_arrays(samples: Sequence[TrainingSample]):
    labels = np.empty(len(samples), dtype=np.int64)
    targets = np.zeros((len(samples), 2))
    for i, s in enumerate(samples):
        if s.label is Label.IGNORED:
            raise ValueError("ignored samples carry no training signal")
        labels[i] = 1 if s.label is Label.POSITIVE else 0
        if s.target_offsets is not None:
            targets[i] = s.target_offsets
    return labels, targets


def loss(outputs: Sequence[ModelOutput], samples: Sequence[TrainingSample],
         lam: float) -> LossBreakdown:
    if len(outputs) != len(samples):
        raise ValueError(f"{len(outputs)} outputs for {len(samples)} samples")
    labels, targets = _sample_arrays(samples)
    logits = np.array([o.logits for o in outputs], dtype=np.float64).reshape(-1, 2)
    offsets = np.array([o.offsets for o in outputs], dtype=np.float64).reshape(-1, 2)
    return loss_terms(logits, offsets, labels, targets, lam)


def loss_and_gradients(params: ModelParams, X, labels, targets,
                       lam: float) -> Tuple[LossBreakdown, ModelParams]:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    n = labels.shape[0]
    logits, _, offsets, (pre, hid) = forward_batch(params, X)
    breakdown = loss_terms(logits, offsets, labels, targets, lam)

    d_logits = softmax(logits)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    d_off = np.zeros_like(offsets)
    pos = labels == 1
    if breakdown.n_pos:
        # sign(0) = 0 is the L1 subgradient at a zero residual
        d_off[pos] = lam * np.sign(offsets[pos] - targets[pos]) / breakdown.n_pos

    d_hid = d_logits @ params.Wc + d_off @ params.Wr
    d_pre = d_hid * (pre > 0)
    grads = ModelParams(
        W1=d_pre.T @ X, b1=d_pre.sum(axis=0),
        Wc=d_logits.T @ hid, bc=d_logits.sum(axis=0),
        Wr=d_off.T @ hid, br=d_off.sum(axis=0),
    )
    for name, g in grads.blocks().items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name)
    return breakdown, grads


def gradients(params: ModelParams, features, samples: Sequence[TrainingSample],
              lam: float) -> ModelParams:
    """Exact gradient of the total loss for a batch of (feature, sample) pairs."""
    labels, targets = _sample_arrays(samples)
    return loss_and_gradients(params, np.asarray(features), labels, targets, lam)[1]


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 0.005, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = params.map(np.zeros_like)
        return cls(zeros, zeros.copy(), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: ModelParams,
              grads: ModelParams) -> Tuple[AdamState, ModelParams]:
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = state.m.map(lambda m, g: b1 * m + (1 - b1) * g, grads)
    v = state.v.map(lambda v, g: b2 * v + (1 - b2) * g * g, grads)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = params.map(lambda p, m, v: p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps), m, v)
    return replace(state, m=m, v=v, step=t), new


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 128
    bg_ratio: int = 10
    lam: float = 2.0
    hidden: int = 1000
    steps: int = 2000
    seed: int = 0
    weight_decay: float = 0.0
    context: bool = True
    regression: bool = True

    def __post_init__(self):
        for name in ("lr", "batch_size", "bg_ratio", "hidden"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0 or self.lam < 0 or self.weight_decay < 0:
            raise ValueError("steps, lam and weight_decay must be >= 0")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.regression else 0.0


@dataclass
class LossTrace:
    total: List[float] = field(default_factory=list)
    cls: List[float] = field(default_factory=list)
    reg: List[float] = field(default_factory=list)

    def append(self, b: LossBreakdown) -> None:
        self.total.append(b.total)
        self.cls.append(b.cls)
        self.reg.append(b.reg)

    def __len__(self) -> int:
        return len(self.total)

    def to_csv(self) -> str:
        rows = ["step,total,cls,reg"]
        rows += [f"{i},{t!r},{c!r},{r!r}" for i, (t, c, r)
                 in enumerate(zip(self.total, self.cls, self.reg))]
        return "\n".join(rows) + "\n"


@dataclass
class LabeledPool:
    """Array form of the positive/negative training samples of a dataset."""

    pos_video: np.ndarray
    pos_start: np.ndarray
    pos_end: np.ndarray
    pos_target: np.ndarray  # (P, 2)
    neg_video: np.ndarray
    neg_start: np.ndarray
    neg_end: np.ndarray


def build_labeled_pool(store: FeatureStore, annotations: Mapping[str, AnnotatedVideo],
                       pyramid_cfg: PyramidConfig, bank: FeatureBank) -> LabeledPool:
    pv, ps, pe, pt, nv, ns, ne = [], [], [], [], [], [], []
    for rec in store:
        ann = annotations.get(rec.video_id)
        if ann is None:
            log.warning("video %s has no annotation entry; skipped for training", rec.video_id)
            continue
        vidx = bank.index[rec.video_id]
        starts, ends = pyramid_arrays(rec.n_units, pyramid_cfg.scales)
        labels, _, off_s, off_e = label_arrays(starts, ends, ann.actions, rec.unit_frames, rec.fps)
        pos = labels == 1
        neg = labels == 0
        pv.append(np.full(pos.sum(), vidx)); ps.append(starts[pos]); pe.append(ends[pos])
        pt.append(np.stack([off_s[pos], off_e[pos]], axis=1))
        nv.append(np.full(neg.sum(), vidx)); ns.append(starts[neg]); ne.append(ends[neg])
    cat = lambda xs, dt=np.int64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)
    return LabeledPool(cat(pv), cat(ps), cat(pe),
                       np.concatenate(pt) if pt else np.zeros((0, 2)),
                       cat(nv), cat(ns), cat(ne))


def train(store: FeatureStore, annotations: Mapping[str, AnnotatedVideo],
          pyramid_cfg: PyramidConfig, train_cfg: TrainConfig,
          rng: Optional[np.random.Generator] = None,
          init: Optional[ModelParams] = None) -> Tuple[ModelParams, LossTrace]:
    """Label the pyramid once, then run Adam on balanced minibatches.

    Without ``rng`` the initialization and sampling streams are seeded with
    ``derive_seed(train_cfg.seed, "init")`` and ``derive_seed(train_cfg.seed,
    "sampling")``; a given ``rng`` is split into the two streams instead.
    """
    if rng is None:
        init_rng = np.random.default_rng(derive_seed(train_cfg.seed, "init"))
        sample_rng = np.random.default_rng(derive_seed(train_cfg.seed, "sampling"))
    else:
        init_rng, sample_rng = rng.spawn(2)
    bank = FeatureBank(list(store), pyramid_cfg.n_ctx, train_cfg.context)
    params = init if init is not None else init_params(bank.out_dim, train_cfg.hidden, init_rng)
    if params.in_dim != bank.out_dim:
        raise ValueError(f"initial params take {params.in_dim} inputs, features have {bank.out_dim}")
    trace = LossTrace()
    if train_cfg.steps == 0:
        return params, trace

    pool = build_labeled_pool(store, annotations, pyramid_cfg, bank)
    n_pos_pool, n_neg_pool = len(pool.pos_start), len(pool.neg_start)
    if not n_pos_pool or not n_neg_pool:
        raise TrainingConfigError(
            f"labeled pool has {n_pos_pool} positive / {n_neg_pool} negative clips")
    quota = positive_quota(train_cfg.batch_size, train_cfg.bg_ratio)
    if quota >= train_cfg.batch_size:
        raise TrainingConfigError(f"batch_size={train_cfg.batch_size} leaves no room for negatives")
    n_neg = train_cfg.batch_size - quota
    labels = np.concatenate([np.ones(quota, np.int64), np.zeros(n_neg, np.int64)])
    targets = np.zeros((train_cfg.batch_size, 2))
    lam = train_cfg.effective_lam
    state = AdamState.fresh(params, lr=train_cfg.lr)
    log.info("training on %d positive / %d negative clips", n_pos_pool, n_neg_pool)

    for step in range(train_cfg.steps):
        pi = draw_indices(n_pos_pool, quota, sample_rng)
        ni = draw_indices(n_neg_pool, n_neg, sample_rng)
        vidx = np.concatenate([pool.pos_video[pi], pool.neg_video[ni]])
        starts = np.concatenate([pool.pos_start[pi], pool.neg_start[ni]])
        ends = np.concatenate([pool.pos_end[pi], pool.neg_end[ni]])
        targets[:quota] = pool.pos_target[pi]
        X = bank.features(vidx, starts, ends)
        breakdown, grads = loss_and_gradients(params, X, labels, targets, lam)
        if train_cfg.weight_decay:
            wd = train_cfg.weight_decay
            grads = replace(grads, W1=grads.W1 + wd * params.W1,
                            Wc=grads.Wc + wd * params.Wc, Wr=grads.Wr + wd * params.Wr)
        state, params = adam_step(state, params, grads)
        trace.append(breakdown)
        if (step + 1) % 500 == 0:
            log.info("step %d loss %.4f (cls %.4f reg %.4f)", step + 1,
                     breakdown.total, breakdown.cls, breakdown.reg)
    return params, trace


# --------------------------------------------------------------------------
# checkpoints
#
#   b"TRNC" | u32 LE version | u32 LE header length | JSON header (UTF-8)
#   | W1 b1 Wc bc Wr br as little-endian float64, row-major


CKPT_MAGIC = b"TRNC"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ModelParams, meta: Optional[dict] = None) -> bytes:
    header = dict(meta or {})
    header["in_dim"] = params.in_dim
    header["hidden"] = params.hidden
    header["blocks"] = [[name, list(arr.shape)] for name, arr in params.blocks().items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes()
                    for arr in params.blocks().values())
    return _CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(raw)) + raw + body


def decode_checkpoint(data: bytes) -> Tuple[ModelParams, dict]:
    if len(data) < _CKPT_PREFIX.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[_CKPT_PREFIX.size:_CKPT_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    pos = _CKPT_PREFIX.size + hlen
    arrays = {}
    for name, shape in header["blocks"]:
        n = int(np.prod(shape)) * 8
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated in block {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += n
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after parameter blocks")
    if set(arrays) != set(BLOCKS):
        raise CheckpointError(f"checkpoint blocks {sorted(arrays)} != {list(BLOCKS)}")
    params = ModelParams(**arrays)
    params.check()
    return params, header


def save_checkpoint(path, params: ModelParams, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, meta))


def load_checkpoint(path) -> Tuple[ModelParams, dict]:
    return decode_checkpoint(Path(path).read_bytes())
