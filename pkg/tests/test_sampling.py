from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unitprop.core import UnitInterval
from unitprop.sampling import (
    ClipCandidate,
    Label,
    PyramidConfig,
    SamplePool,
    TrainingConfigError,
    TrainingSample,
    assign_labels,
    build_pyramid,
    positive_quota,
    sample_minibatch,
)

from conftest import gt, make_record
from oracles import labels_ref


def _rec(n_units=64):
    return make_record(np.zeros((n_units, 2)))


def _spans(rec, scales):
    return [(c.clip.start_unit, c.clip.end_unit) for c in build_pyramid(rec, PyramidConfig(scales))]


def test_pyramid_examples():
    assert _spans(_rec(4), (1,)) == [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert len(_spans(_rec(4), (1, 2, 4))) == 8
    assert _spans(_rec(1), (2,)) == []


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 80), st.lists(st.integers(1, 40), min_size=1, max_size=6, unique=True))
def test_pyramid_count_and_bounds(n_units, scales):
    scales = sorted(scales)
    spans = _spans(_rec(n_units), scales)
    assert len(spans) == sum(max(0, n_units - s + 1) for s in scales)
    assert len(set(spans)) == len(spans)
    assert all(0 <= s < e <= n_units for s, e in spans)


def test_pyramid_config_validation():
    with pytest.raises(ValueError):
        PyramidConfig(scales=())
    with pytest.raises(ValueError):
        PyramidConfig(scales=(2, 1))
    with pytest.raises(ValueError):
        PyramidConfig(n_ctx=0)


def _cands(rec, spans):
    return [ClipCandidate(rec.video_id, s, e - s, UnitInterval(s, e)) for s, e in spans]


def test_label_examples():
    # unit_frames=16, fps=16 -> one unit per second
    rec = _rec(40)
    gts = [gt(8, 22)]
    clips = _cands(rec, [(8, 22), (10, 20), (9, 13), (30, 34)])
    out = assign_labels(clips, gts, rec)
    assert out[0].label is Label.POSITIVE and out[0].target_offsets == (0.0, 0.0)
    # tIoU 10/14 > 0.5
    assert out[1].label is Label.POSITIVE and out[1].target_offsets == (2.0, -2.0)
    # tIoU 4/14 ~ 0.29, not the best for any GT
    assert out[2].label is Label.IGNORED and out[2].target_offsets is None
    assert out[3].label is Label.NEGATIVE


def test_best_match_rule_labels_low_overlap_positive():
    rec = _rec(40)
    out = assign_labels(_cands(rec, [(0, 4), (30, 34)]), [gt(2, 20)], rec)
    # tIoU 2/20, but it is the best clip for the GT
    assert out[0].label is Label.POSITIVE
    assert out[0].target_offsets == (-2.0, -16.0)


def test_assign_labels_rejects_foreign_inputs():
    rec = _rec(10)
    with pytest.raises(ValueError):
        assign_labels(_cands(rec, [(0, 2)]), [gt(0, 2, video_id="other")], rec)


def _random_case(rng):
    n_units = int(rng.integers(4, 48))
    scales = sorted(rng.choice(np.arange(1, 17), size=int(rng.integers(1, 5)), replace=False).tolist())
    gts = []
    for _ in range(int(rng.integers(0, 5))):
        # half of the GTs lie off the unit grid
        if rng.random() < 0.5:
            a, b = sorted(rng.choice(n_units + 1, size=2, replace=False))
            gts.append((float(a), float(b)))
        else:
            a, b = sorted(rng.uniform(0, n_units, size=2))
            if b - a > 1e-6:
                gts.append((float(a), float(b)))
    return n_units, scales, gts


def test_label_assignment_matches_exhaustive_rules():
    rng = np.random.default_rng(123)
    for _ in range(300):
        n_units, scales, gt_spans = _random_case(rng)
        rec = _rec(n_units)
        cands = build_pyramid(rec, PyramidConfig(tuple(scales)))
        gts = [gt(a, b) for a, b in gt_spans]
        got = assign_labels(cands, gts, rec)
        spans = [(c.clip.start_unit, c.clip.end_unit) for c in cands]
        want = labels_ref(spans, gt_spans, rec.unit_seconds)
        for s, (lab, offs) in zip(got, want):
            assert s.label.value == lab
            if offs is None:
                assert s.target_offsets is None
            else:
                np.testing.assert_allclose(s.target_offsets, offs, rtol=0, atol=1e-12)
        # every overlapped GT has a positive
        for a, b in gt_spans:
            overlapped = any(min(e, b) - max(s, a) > 0 for s, e in spans)
            if overlapped:
                assert any(s.label is Label.POSITIVE and s.matched_gt is not None for s in got)
                assert any(s.label is Label.POSITIVE
                           and min(s.clip.end_unit, b) - max(s.clip.start_unit, a) > 0 for s in got)


def _pool(n_pos=30, n_neg=300, n_ign=5):
    pos = [TrainingSample("v", UnitInterval(i, i + 1), Label.POSITIVE, (0.0, 0.0)) for i in range(n_pos)]
    neg = [TrainingSample("v", UnitInterval(i, i + 2), Label.NEGATIVE) for i in range(n_neg)]
    ign = [TrainingSample("v", UnitInterval(i, i + 3), Label.IGNORED) for i in range(n_ign)]
    return pos + neg + ign


def test_minibatch_composition():
    assert positive_quota(128, 10) == 12
    assert positive_quota(11, 10) == 1
    rng = np.random.default_rng(0)
    batch = sample_minibatch(_pool(), 128, 10, rng)
    counts = Counter(s.label for s in batch)
    assert counts == {Label.POSITIVE: 12, Label.NEGATIVE: 116}
    batch = sample_minibatch(_pool(), 11, 10, rng)
    assert Counter(s.label for s in batch) == {Label.POSITIVE: 1, Label.NEGATIVE: 10}


def test_minibatch_never_contains_ignored_and_is_reproducible():
    pool = SamplePool.from_samples(_pool(n_pos=3, n_neg=50))
    a = sample_minibatch(pool, 128, 10, np.random.default_rng(5))
    b = sample_minibatch(pool, 128, 10, np.random.default_rng(5))
    assert a == b
    assert all(s.label is not Label.IGNORED for s in a)


def test_minibatch_needs_both_classes():
    with pytest.raises(TrainingConfigError):
        sample_minibatch(_pool(0, 0, 10), 128, 10, np.random.default_rng(0))
    with pytest.raises(TrainingConfigError):
        sample_minibatch(_pool(5, 0, 0), 128, 10, np.random.default_rng(0))


def test_training_sample_invariant():
    with pytest.raises(ValueError):
        TrainingSample("v", UnitInterval(0, 1), Label.NEGATIVE, (1.0, 1.0))
    with pytest.raises(ValueError):
        TrainingSample("v", UnitInterval(0, 1), Label.POSITIVE)
