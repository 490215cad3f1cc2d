import math

import numpy as np
import pytest

from unitprop.core import UnitInterval
from unitprop.model import (
    AdamState,
    CheckpointError,
    ModelOutput,
    ModelParams,
    NonFiniteError,
    TrainConfig,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    gradients,
    init_params,
    load_checkpoint,
    loss,
    loss_and_gradients,
    save_checkpoint,
    softmax,
    train,
)
from unitprop.sampling import Label, PyramidConfig, TrainingSample
from unitprop.synth import SynthConfig, dataset_directions, generate_split

from gradcase import check_case, random_case
from oracles import forward_ref


def _pos(offs):
    return TrainingSample("v", UnitInterval(0, 1), Label.POSITIVE, offs)


NEG = TrainingSample("v", UnitInterval(0, 1), Label.NEGATIVE)


def test_zero_params_forward():
    out = forward(ModelParams.zeros(5, 7), np.arange(5.0))
    assert out == ModelOutput((0.0, 0.0), 0.5, (0.0, 0.0))


def test_zero_input_depends_only_on_biases(rng):
    p = init_params(4, 6, rng)
    p.b1[:] = rng.normal(size=6)
    p.bc[:] = [0.3, -0.2]
    out = forward(p, np.zeros(4))
    hid = np.maximum(p.b1, 0)
    np.testing.assert_allclose(out.logits, p.Wc @ hid + p.bc, rtol=1e-12)
    np.testing.assert_allclose(out.offsets, p.Wr @ hid + p.br, rtol=1e-12)


def test_forward_matches_loop_reference(rng):
    for _ in range(10):
        p = init_params(5, 9, rng)
        p.b1[:] = rng.normal(size=9)
        p.br[:] = rng.normal(size=2)
        x = rng.normal(size=5)
        logits, offsets = forward_ref(p.W1.tolist(), p.b1.tolist(), p.Wc.tolist(), p.bc.tolist(),
                                      p.Wr.tolist(), p.br.tolist(), x.tolist())
        out = forward(p, x)
        np.testing.assert_allclose(out.logits, logits, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(out.offsets, offsets, rtol=1e-12, atol=1e-15)
        assert out.action_prob == pytest.approx(1 / (1 + math.exp(logits[0] - logits[1])), rel=1e-12)


def test_forward_rejects_bad_input():
    p = ModelParams.zeros(3, 2)
    with pytest.raises(ValueError):
        forward(p, np.zeros(4))
    with pytest.raises(ValueError):
        forward(p, np.array([0.0, np.nan, 0.0]))


def test_softmax_properties(rng):
    z = rng.normal(size=(50, 2)) * 30
    s = softmax(z)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(z + 123.0), s, atol=1e-12)


def test_loss_examples():
    out = ModelOutput((0.0, 0.0), 0.5, (0.0, 0.0))
    b = loss([out], [_pos((1.0, -1.0))], 2.0)
    assert b.cls == pytest.approx(math.log(2), abs=1e-12)
    assert b.reg == 2.0 and b.n_pos == 1
    assert b.total == pytest.approx(math.log(2) + 4.0, abs=1e-12)

    b = loss([out, out], [NEG, NEG], 7.5)
    assert b.total == b.cls and b.n_pos == 0

    exact = ModelOutput((1.0, 2.0), 0.7, (0.5, -3.0))
    assert loss([exact], [_pos((0.5, -3.0))], 2.0).reg == 0.0


def test_loss_decomposition_is_exact(rng):
    params, X, labels, targets = random_case(3, 2.0)
    b, _ = loss_and_gradients(params, X, labels, targets, 2.0)
    assert b.total == b.cls + 2.0 * b.reg


def test_zero_lambda_leaves_regression_head_alone():
    params, X, labels, targets = random_case(4, 0.0)
    _, g = loss_and_gradients(params, X, labels, targets, 0.0)
    assert not g.Wr.any() and not g.br.any()


def test_duplicated_batch_has_identical_gradients(rng):
    p = init_params(4, 5, rng)
    X = rng.normal(size=(3, 4))
    samples = [_pos((1.0, 2.0)), NEG, _pos((-1.0, 0.5))]
    g1 = gradients(p, X, samples, 2.0)
    g2 = gradients(p, np.concatenate([X, X]), samples + samples, 2.0)
    for name, a in g1.blocks().items():
        np.testing.assert_allclose(getattr(g2, name), a, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("lam", [0.0, 2.0])
def test_gradients_match_finite_differences(seed, lam):
    rel, worst = check_case(seed, lam)
    assert rel < 1e-4, worst


def test_nonfinite_gradient_names_block():
    params, X, labels, targets = random_case(1, 2.0)
    X[0, :] = 1e308
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError) as exc:
        loss_and_gradients(params, X, labels, targets, 2.0)
    assert exc.value.block in ("W1", "b1", "Wc", "bc", "Wr", "br")


def test_adam_zero_gradient_is_noop(rng):
    p = init_params(3, 4, rng)
    state = AdamState.fresh(p)
    state, q = adam_step(state, p, p.map(np.zeros_like))
    assert state.step == 1
    for name, a in p.blocks().items():
        np.testing.assert_array_equal(getattr(q, name), a)


def test_adam_constant_gradient_step_tends_to_lr():
    p = ModelParams.zeros(1, 1)
    g = p.map(lambda a: np.full_like(a, -0.37))
    state = AdamState.fresh(p, lr=0.005)
    for _ in range(10_000):
        prev = p.W1.copy()
        state, p = adam_step(state, p, g)
    step = float((p.W1 - prev)[0, 0])
    assert step == pytest.approx(0.005, rel=0.01)


def test_adam_first_step_matches_closed_form():
    p = ModelParams.zeros(2, 1)
    g = p.map(lambda a: np.full_like(a, 2.0))
    _, q = adam_step(AdamState.fresh(p, lr=0.1), p, g)
    # bias-corrected m/sqrt(v) = g/|g| on the first step
    np.testing.assert_allclose(q.W1, -0.1 * 2.0 / (2.0 + 1e-8))


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    p = init_params(6, 4, rng)
    p.b1[0] = -0.0
    save_checkpoint(tmp_path / "m.ckpt", p, {"note": "x"})
    q, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["note"] == "x" and meta["in_dim"] == 6 and meta["hidden"] == 4
    for name, a in p.blocks().items():
        assert getattr(q, name).tobytes() == a.tobytes()
    assert encode_checkpoint(q, {"note": "x"}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_corruption():
    data = encode_checkpoint(ModelParams.zeros(2, 3))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-8])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(data + b"\0" * 8)


@pytest.fixture(scope="module")
def small_data():
    cfg = SynthConfig(n_videos=12, n_test_videos=0, units_per_video=96,
                      duration_scales=(2, 4, 8, 16), seed=3)
    store, ann = generate_split(cfg, "train", cfg.n_videos, dataset_directions(cfg))
    return store, ann


def test_zero_steps_returns_initial_params(small_data):
    store, ann = small_data
    cfg = TrainConfig(steps=0, hidden=16)
    p0, trace = train(store, ann, PyramidConfig(), cfg, np.random.default_rng(1))
    ref = init_params(96, 16, np.random.default_rng(1).spawn(2)[0])
    assert len(trace) == 0
    for name, a in ref.blocks().items():
        np.testing.assert_array_equal(getattr(p0, name), a)


def test_training_is_deterministic(small_data):
    store, ann = small_data
    cfg = TrainConfig(steps=30, hidden=32, seed=9)
    a, ta = train(store, ann, PyramidConfig(), cfg)
    b, tb = train(store, ann, PyramidConfig(), cfg)
    assert ta.to_csv() == tb.to_csv()
    for name, x in a.blocks().items():
        assert getattr(b, name).tobytes() == x.tobytes()


def test_training_reduces_loss(small_data):
    store, ann = small_data
    _, trace = train(store, ann, PyramidConfig(), TrainConfig(steps=400, hidden=64))
    assert np.mean(trace.total[-50:]) < np.mean(trace.total[:50])
    assert trace.to_csv().startswith("step,total,cls,reg\n0,")


def test_no_context_variant_uses_unit_dim(small_data):
    store, ann = small_data
    p, _ = train(store, ann, PyramidConfig(), TrainConfig(steps=2, hidden=8, context=False))
    assert p.in_dim == store.dim


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    assert TrainConfig(regression=False).effective_lam == 0.0
