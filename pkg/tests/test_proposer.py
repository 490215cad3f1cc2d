import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitprop.core import Detection, Proposal, SecondsInterval, UnitInterval, tiou
from unitprop.model import ModelParams
from unitprop.proposer import (
    ProposalFormatError,
    nms,
    propose,
    random_baseline,
    read_proposals,
    refine,
    refine_arrays,
    score_clips,
    sliding_window_baseline,
    write_proposals,
)
from unitprop.featurestore import FeatureBank, FeatureStore
from unitprop.sampling import PyramidConfig, pyramid_arrays

from conftest import make_record
from oracles import nms_ref


def P(s, e, score, vid="v"):
    return Proposal(vid, SecondsInterval(float(s), float(e)), float(score))


def test_refine_examples():
    assert refine(UnitInterval(10, 20), (0, 0), 100) == UnitInterval(10, 20)
    assert refine(UnitInterval(10, 20), (2, -2), 100) == UnitInterval(8, 22)
    assert refine(UnitInterval(0, 2), (5, 0), 100) == UnitInterval(0, 2)


def test_refine_rounding_clamping_and_rejection():
    # half rounds up
    assert refine(UnitInterval(10, 20), (0.5, -0.5), 100) == UnitInterval(10, 21)
    assert refine(UnitInterval(10, 20), (0, -50), 30) == UnitInterval(10, 30)
    assert refine(UnitInterval(10, 20), (-15, 0), 100) is None


def test_nms_examples():
    assert nms([P(0, 1, 0.3)], 0.5) == [P(0, 1, 0.3)]
    assert nms([P(2, 6, 0.4), P(2, 6, 0.9)], 0.5) == [P(2, 6, 0.9)]


def test_nms_only_within_video():
    out = nms([P(0, 4, 0.9, "a"), P(0, 4, 0.8, "b")], 0.5)
    assert len(out) == 2


def test_nms_tie_break_prefers_earlier_then_longer():
    out = nms([P(1, 5, 0.5), P(0, 4, 0.5), P(0, 5, 0.5)], 0.5)
    assert out[0] == P(0, 5, 0.5)


def _random_props(rng, n, grid=12):
    out = []
    for _ in range(n):
        a, b = sorted(rng.choice(grid + 1, size=2, replace=False))
        # coarse scores make ties common
        out.append(P(a, b, rng.integers(0, 4) / 4))
    return out


def test_nms_matches_bruteforce():
    rng = np.random.default_rng(11)
    for _ in range(500):
        props = _random_props(rng, int(rng.integers(1, 21)))
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
        items = [(p.span.start_s, p.span.end_s, p.score, i) for i, p in enumerate(props)]
        want = [props[it[3]] for it in nms_ref(items, thr)]
        assert nms(props, thr) == want


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_postconditions(seed, thr):
    rng = np.random.default_rng(seed)
    props = _random_props(rng, 20)
    kept = nms(props, thr)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            assert tiou(a.span, b.span) <= thr
    for p in props:
        if p not in kept:
            assert any(tiou(p.span, k.span) > thr and k.score >= p.score for k in kept)
    assert nms(kept, thr) == kept
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)


def _store(n_units=20, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureStore([make_record(rng.normal(size=(n_units, dim)), video_id="v")])


def test_zero_model_proposes_nms_over_raw_pyramid():
    store = _store()
    cfg = PyramidConfig(scales=(1, 2, 4))
    out = propose(ModelParams.zeros(9, 5), store, "v", cfg, 0.5)
    assert all(p.score == 0.5 for p in out)
    starts, ends = pyramid_arrays(20, cfg.scales)
    raw = [P(s, e, 0.5) for s, e in zip(starts, ends)]
    assert out == nms(raw, 0.5)


def test_threshold_one_keeps_every_candidate():
    store = _store()
    rng = np.random.default_rng(2)
    params = ModelParams(rng.normal(size=(6, 9)), rng.normal(size=6), rng.normal(size=(2, 6)),
                         rng.normal(size=2), rng.normal(size=(2, 6)), rng.normal(size=2))
    cfg = PyramidConfig(scales=(1, 2, 4, 8))
    out = propose(params, store, "v", cfg, 1.0)
    n_raw = len(pyramid_arrays(20, cfg.scales)[0])
    assert 0 < len(out) <= n_raw
    # identical spans are kept too, so the count is the non-rejected candidates
    s, e = pyramid_arrays(20, cfg.scales)
    _, offs = score_clips(params, FeatureBank(list(store), 4), 0, s, e)
    rs, re = refine_arrays(s, e, offs, 20)
    assert len(out) == int((rs < re).sum())
    assert all(0 <= p.span.start_s < p.span.end_s <= store["v"].duration_s for p in out)


def test_sliding_window_stride_and_tiling():
    rec = make_record(np.zeros((4, 2)), fps=16.0)  # 64 frames
    props = sliding_window_baseline(rec, [16], 0.75, np.random.default_rng(0))
    starts = [round(p.span.start_s * 16) for p in props]
    assert starts == list(range(0, 49, 4))
    props = sliding_window_baseline(rec, [16], 0.0, np.random.default_rng(0))
    assert [(p.span.start_s, p.span.end_s) for p in props] == [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 4.0)]
    # windows longer than the video are skipped
    assert sliding_window_baseline(rec, [128], 0.75, np.random.default_rng(0)) == []


def test_sliding_window_reproducible():
    rec = make_record(np.zeros((32, 2)))
    a = sliding_window_baseline(rec, rng=np.random.default_rng(4))
    b = sliding_window_baseline(rec, rng=np.random.default_rng(4))
    assert a == b
    with pytest.raises(ValueError):
        sliding_window_baseline(rec, overlap=1.0)


def test_random_baseline():
    rec = make_record(np.zeros((10, 2)))
    assert random_baseline(rec, 0, np.random.default_rng(0)) == []
    a = random_baseline(rec, 200, np.random.default_rng(1))
    assert a == random_baseline(rec, 200, np.random.default_rng(1))
    assert all(0 <= p.span.start_s < p.span.end_s <= rec.duration_s for p in a)
    with pytest.raises(ValueError):
        random_baseline(rec, -1)


def test_proposal_file_roundtrip(tmp_path):
    props = [P(0, 1.5, 0.25, "b"), P(0.1, 2, 0.75, "a"),
             Detection("a", SecondsInterval(1.0, 2.0), 0.5, "jump")]
    write_proposals(tmp_path / "p.jsonl", props)
    back = read_proposals(tmp_path / "p.jsonl")
    assert back == [props[1], props[2], props[0]]
    assert isinstance(back[1], Detection)
    first = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
    assert first == {"video_id": "a", "start_s": 0.1, "end_s": 2.0, "score": 0.75}


def test_proposal_file_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"video_id": "a", "start_s": 2, "end_s": 1, "score": 0.5}\n')
    with pytest.raises(ProposalFormatError, match="bad.jsonl:1"):
        read_proposals(p)
    p.write_text("not json\n")
    with pytest.raises(ProposalFormatError):
        read_proposals(p)
