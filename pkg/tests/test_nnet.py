import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geokr import nnet
from geokr.errors import GraphNotEvaluated, MissingGradients, ShapeMismatch
from geokr.nnet import (
    EncoderConfig,
    ParameterSet,
    backward,
    entropy,
    finite_diff_check,
    forward,
    init_params,
    load_checkpoint,
    loss_consistency,
    loss_kl,
    loss_kl_grad,
    loss_supervised,
    loss_supervised_grad,
    loss_total,
    objective_grad,
    save_checkpoint,
    sgd_step,
    softmax,
    zero_params,
)

TINY = EncoderConfig(3, 8, 8, ((4, 3, 2), (6, 3, 1)), 8)


def distribution(n=8):
    """Strategy for probability vectors, with some exact zeros."""
    return arrays(np.float64, n, elements=st.floats(0, 1)).filter(lambda v: v.sum() > 1e-3).map(lambda v: v / v.sum())


# softmax


def test_softmax_zero_row_uniform():
    assert np.all(softmax(np.zeros((1, 8))) == 0.125)


def test_softmax_closed_form():
    row = np.zeros(8)
    row[0] = math.log(2)
    np.testing.assert_allclose(softmax(row), [2 / 9] + [1 / 9] * 7, rtol=0, atol=1e-15)


@given(arrays(np.float64, (3, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift(logits, c):
    s = softmax(logits)
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(softmax(logits + c), s, atol=1e-12)


# losses


def test_loss_supervised_examples():
    a = [0.5, 0.5, 0, 0, 0, 0, 0, 0]
    s = [0.25, 0.75, 0, 0, 0, 0, 0, 0]
    assert loss_supervised(a, s) == pytest.approx(-(0.5 * math.log(0.25) + 0.5 * math.log(0.75)))
    assert loss_supervised(a, s) == pytest.approx(0.836988, abs=5e-7)
    onehot = np.eye(8)[3]
    assert loss_supervised(onehot, onehot) == 0


def test_loss_kl_examples():
    a = np.array([0.5, 0.5])
    s = np.array([0.25, 0.75])
    assert loss_kl(a, s) == pytest.approx(0.143841, abs=5e-7)
    assert loss_kl(a, a) == 0
    assert loss_kl(a, s) == pytest.approx(loss_supervised(a, s) - math.log(2))


def test_loss_consistency_examples():
    assert loss_consistency([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.836988, abs=5e-7)
    onehot = np.eye(8)[2]
    assert loss_consistency(onehot, onehot) == 0


def test_loss_total():
    assert loss_total(0.5, 0.25) == 0.75
    assert loss_total(0.5, 0.25, 1, 0) == 0.5
    assert loss_total(0.5, 0.25, 3, 3) == pytest.approx(3 * loss_total(0.5, 0.25))


@settings(max_examples=300)
@given(distribution(), distribution())
def test_loss_identities(a, s):
    ls, lkl, h = loss_supervised(a, s), loss_kl(a, s), entropy(a)
    assert abs(lkl - (ls - h)) <= 1e-9
    np.testing.assert_allclose(loss_kl_grad(a, s), loss_supervised_grad(a, s), atol=1e-9, rtol=0)
    assert ls >= -1e-12 and lkl >= -1e-9 and loss_consistency(s, a) >= 0
    assert ls >= h - 1e-9


def test_loss_supervised_grad_matches_difference_quotient():
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(8), size=3)
    s = rng.dirichlet(np.ones(8), size=3)
    g = loss_supervised_grad(a, s)
    eps = 1e-7
    for i, j in [(0, 0), (1, 4), (2, 7)]:
        up, down = s.copy(), s.copy()
        up[i, j] += eps
        down[i, j] -= eps
        assert g[i, j] == pytest.approx((loss_supervised(a, up) - loss_supervised(a, down)) / (2 * eps), rel=1e-6)


# forward


def test_zero_weights_give_uniform_softmax():
    g = forward(zero_params(TINY), TINY, np.random.default_rng(0).random((2, 3, 8, 8)))
    assert np.all(g.logits == 0)
    assert np.all(softmax(g.logits) == 0.125)


def test_output_shapes():
    cfg = EncoderConfig(3, 8, 8, ((5, 3, 2),), 8)
    g = forward(init_params(cfg, np.random.default_rng(0)), cfg, np.zeros((2, 3, 8, 8)))
    assert g.h.shape == (2, 5) and g.logits.shape == (2, 8)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(init_params(TINY, np.random.default_rng(0)), TINY, np.zeros((2, 3, 9, 8)))


def test_identity_1x1_config_is_affine_in_channel_means():
    cfg = EncoderConfig(3, 4, 4, ((3, 1, 1),), 8)
    p = zero_params(cfg)
    p.values["conv0.weight"][:, :, 0, 0] = np.eye(3)
    w = np.arange(24, dtype=np.float64).reshape(3, 8) / 10
    b = np.linspace(-1, 1, 8)
    p.values["head.weight"][...] = w
    p.values["head.bias"][...] = b
    x = np.random.default_rng(1).random((2, 3, 4, 4))  # non-negative, so ReLU is the identity
    g = forward(p, cfg, x)
    means = x.mean(axis=(2, 3))
    np.testing.assert_allclose(g.h, means, atol=1e-14)
    np.testing.assert_allclose(g.logits, means @ w + b, atol=1e-13)


def naive_conv(x, w, b, stride):
    """Direct loops, (C, H, W) input, zero padding k // 2."""
    o, c, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (x.shape[1] + 2 * pad - k) // stride + 1
    wo = (x.shape[2] + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for q in range(o):
        for i in range(ho):
            for j in range(wo):
                out[q, i, j] = b[q] + np.sum(w[q] * xp[:, i * stride : i * stride + k, j * stride : j * stride + k])
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_direct_loops(stride):
    cfg = EncoderConfig(3, 7, 7, ((4, 3, stride),), 8)
    rng = np.random.default_rng(stride)
    p = init_params(cfg, rng)
    p.values["conv0.bias"][...] = rng.standard_normal(4)
    x = rng.standard_normal((2, 3, 7, 7))
    g = forward(p, cfg, x)
    for n in range(2):
        z = np.maximum(naive_conv(x[n], p["conv0.weight"], p["conv0.bias"], stride), 0)
        np.testing.assert_allclose(g.h[n], z.mean(axis=(1, 2)), atol=1e-12)


def test_forward_deterministic():
    p = init_params(TINY, np.random.default_rng(0))
    x = np.random.default_rng(1).random((3, 3, 8, 8))
    assert forward(p, TINY, x).logits.tobytes() == forward(p, TINY, x).logits.tobytes()


# backward


def test_backward_needs_recorded_graph():
    p = init_params(TINY, np.random.default_rng(0))
    g = forward(p, TINY, np.zeros((1, 3, 8, 8)), record=False)
    with pytest.raises(GraphNotEvaluated):
        backward(g, np.zeros((1, 8)))
    g = forward(p, TINY, np.zeros((1, 3, 8, 8)))
    backward(g, np.zeros((1, 8)))
    with pytest.raises(GraphNotEvaluated):
        backward(g, np.zeros((1, 8)))  # consumed


def test_constant_loss_zero_gradients():
    p = init_params(TINY, np.random.default_rng(0))
    backward(forward(p, TINY, np.random.default_rng(1).random((2, 3, 8, 8))), np.zeros((2, 8)))
    assert all(np.all(g == 0) for g in p.grads.values())


def test_linear_head_squared_error_closed_form():
    cfg = EncoderConfig(3, 2, 2, (), 8)  # no conv stages: h is the channel mean
    rng = np.random.default_rng(0)
    p = init_params(cfg, rng)
    x = rng.standard_normal((4, 3, 2, 2))
    y = rng.standard_normal((4, 8))
    g = forward(p, cfg, x)
    # loss = 0.5 * sum((logits - y)^2)
    backward(g, g.logits - y)
    h = x.mean(axis=(2, 3))
    residual = h @ p["head.weight"] + p["head.bias"] - y
    np.testing.assert_allclose(p.grads["head.weight"], h.T @ residual, atol=1e-12)
    np.testing.assert_allclose(p.grads["head.bias"], residual.sum(axis=0), atol=1e-12)


def gradcheck_inputs(cfg, seed, batch=2):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng)
    p.values["conv0.bias"][...] = 0.1 * rng.standard_normal(p["conv0.bias"].shape)
    x = rng.standard_normal((batch, 3, cfg.height, cfg.width))
    a = rng.dirichlet(np.ones(8), size=batch)
    return p, x, a


def test_gradcheck_small_model():
    p, x, a = gradcheck_inputs(TINY, 0)
    res = finite_diff_check(p, TINY, x, a, n_samples=200)
    assert res["n_checked"] == 200
    assert res["max_rel_error"] < 1e-4


def test_gradcheck_with_teacher_term():
    p, x, a = gradcheck_inputs(TINY, 1)
    t = np.random.default_rng(5).dirichlet(np.ones(8), size=2)
    assert finite_diff_check(p, TINY, x, a, n_samples=100, teacher_probs=t)["max_rel_error"] < 1e-4


def test_gradcheck_catches_mutation():
    p, x, a = gradcheck_inputs(TINY, 0)
    assert finite_diff_check(p, TINY, x, a, n_samples=100, mutation="relu_mask")["max_rel_error"] > 1e-2


def test_gradcheck_degenerate_is_finite():
    res = finite_diff_check(zero_params(TINY), TINY, np.zeros((2, 3, 8, 8)), np.full((2, 8), 0.125), n_samples=50)
    assert math.isfinite(res["max_rel_error"])


def test_gradcheck_requires_double():
    p, x, a = gradcheck_inputs(TINY, 0)
    with pytest.raises(ValueError):
        finite_diff_check(p.astype(np.float32), TINY, x, a)


def test_objective_grad_teacher_term_matches_chain_rule():
    p, x, a = gradcheck_inputs(TINY, 2)
    t = np.random.default_rng(3).dirichlet(np.ones(8), size=2)
    g = forward(p, TINY, x)
    terms, dlogits = objective_grad(g, a, t)
    s = softmax(g.logits)
    assert terms["loss_total"] == pytest.approx(loss_supervised(a, s) + loss_consistency(s, t))
    eps = 1e-6
    for i, j in [(0, 1), (1, 6)]:
        up, down = g.logits.copy(), g.logits.copy()
        up[i, j] += eps
        down[i, j] -= eps
        f = lambda z: loss_supervised(a, softmax(z)) + loss_consistency(softmax(z), t)
        assert dlogits[i, j] == pytest.approx((f(up) - f(down)) / (2 * eps), rel=1e-6)


# sgd


def test_sgd_step():
    p = ParameterSet({"w": np.array([1.0])})
    p.grads["w"] = np.array([2.0])
    sgd_step(p, 0.1)
    assert p["w"][0] == pytest.approx(0.8)
    assert not p.has_grads()
    with pytest.raises(MissingGradients):
        sgd_step(p, 0.1)


def test_sgd_zero_gradient_and_linearity():
    p = ParameterSet({"w": np.array([0.3, -0.7])})
    p.grads["w"] = np.zeros(2)
    sgd_step(p, 1.0)
    assert p["w"].tolist() == [0.3, -0.7]
    q = p.copy()
    for _ in range(2):
        p.grads["w"] = np.array([0.25, 0.5])
        sgd_step(p, 0.5)
    q.grads["w"] = np.array([0.5, 1.0])
    sgd_step(q, 0.5)
    np.testing.assert_allclose(p["w"], q["w"], atol=1e-15)


# checkpoints


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    p = init_params(TINY, np.random.default_rng(0), dtype)
    path = save_checkpoint(p, TINY, tmp_path / "ck", step=7, extra={"mode": "x"})
    q, cfg, manifest = load_checkpoint(path)
    assert cfg == TINY and manifest["step"] == 7 and manifest["mode"] == "x"
    assert q.checksum() == p.checksum() and q.dtype == dtype
    blob = (tmp_path / "ck.ck.blob").read_bytes()
    assert blob == b"".join(v.astype(np.dtype(dtype).newbyteorder("<")).tobytes() for v in p.values.values())


def test_encode_matches_forward():
    p = init_params(TINY, np.random.default_rng(0))
    x = np.random.default_rng(1).random((5, 3, 8, 8))
    np.testing.assert_allclose(nnet.encode(p, TINY, x, chunk=2), forward(p, TINY, x).h, atol=1e-15)
