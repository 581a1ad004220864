import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aprnet.model import (
    ModelConfig, backward, batch_loss_and_grad, cross_entropy, dropout_mask, extract_embedding,
    forward, init_params, joint_loss, load_checkpoint, predict, save_checkpoint, softmax,
)

from .oracles import scalar_joint_loss


def random_instance(rng, hidden=True, kink_margin=1e-2):
    """Random tiny model and sample, redrawn while any ReLU input sits within
    ``kink_margin`` of zero (central differences are meaningless there)."""
    while True:
        inst = _draw_instance(rng, hidden)
        cfg, params, x, _, _ = inst
        pre = x
        ok = True
        for w, b in params.hidden:
            a = w @ pre + b
            ok &= bool(np.abs(a).min() > kink_margin)
            pre = np.maximum(a, 0)
        if ok:
            return inst


def _draw_instance(rng, hidden):
    D = int(rng.integers(1, 9))
    K = int(rng.integers(2, 6))
    M = int(rng.integers(1, 4))
    counts = tuple(int(rng.integers(2, 5)) for _ in range(M))
    hid = (int(rng.integers(1, 7)),) if hidden and rng.random() < 0.7 else ()
    cfg = ModelConfig(D, K, counts, hid, dropout_rate=float(rng.choice([0.0, 0.5])), lam=float(rng.uniform(0, 10)))
    params = init_params(cfg, int(rng.integers(1 << 30)))
    # move biases off zero so ReLU units are not all sitting on the same side
    for a in params.arrays():
        a += rng.normal(scale=0.3, size=a.shape)
    x = rng.normal(size=D)
    y = int(rng.integers(K))
    atts = [int(rng.integers(m)) for m in counts]
    return cfg, params, x, y, atts


def numeric_grad(fn, params, step=1e-3):
    flat = params.flat()
    grad = np.zeros_like(flat)
    probe = params.copy()
    for i in range(len(flat)):
        for sign in (1, -1):
            v = flat.copy()
            v[i] += sign * step
            probe.set_flat(v)
            grad[i] += sign * fn(probe) / (2 * step)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


# -- softmax / cross entropy ---------------------------------------------------


def test_softmax_uniform():
    assert np.allclose(softmax([0, 0, 0]), [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_stable():
    p = softmax([1000.0, 0.0])
    assert np.isfinite(p).all()
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    z = [1, 2, 3]
    denom = sum(mpmath.e ** v for v in z)
    expected = [float(mpmath.e ** v / denom) for v in z]
    assert np.allclose(softmax(z), expected, rtol=0, atol=1e-12)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(z, shift):
    p = softmax(z)
    assert abs(p.sum() - 1) <= 1e-6
    assert ((p >= 0) & (p <= 1)).all()
    assert np.allclose(softmax(z + shift), p, rtol=0, atol=1e-9)


@pytest.mark.parametrize("K", [2, 5, 751])
def test_cross_entropy_uniform(K):
    assert cross_entropy(np.full(K, 1 / K), K - 1) == pytest.approx(math.log(K))


def test_cross_entropy_cases():
    assert cross_entropy([0.0, 1.0, 0.0], 1) == 0.0
    assert cross_entropy([0.7, 0.2, 0.1], 1) == pytest.approx(-math.log(0.2), rel=1e-15)
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)), st.data())
def test_cross_entropy_nonnegative(z, data):
    p = softmax(z)
    t = data.draw(st.integers(0, len(z) - 1))
    ce = cross_entropy(p, t)
    assert ce >= 0
    # zero up to the log floor exactly when the target is (numerically) certain
    assert (ce <= -math.log1p(-1e-12)) == (p[t] >= 1 - 1e-12)


# -- loss ------------------------------------------------------------------------


def test_lambda_zero_is_baseline2():
    rng = np.random.default_rng(0)
    cfg, params, x, y, atts = random_instance(rng)
    loss = joint_loss(params, x, y, atts, 0.0, cfg)
    assert loss.total == np.mean(loss.l_att)


def test_single_attribute_unit_lambda():
    cfg = ModelConfig(3, 4, (3,), (), 0.0, 1.0)
    params = init_params(cfg, 5)
    loss = joint_loss(params, np.array([0.3, -1.0, 2.0]), 2, [1], 1.0, cfg)
    assert loss.total == pytest.approx(loss.l_id + loss.l_att[0], rel=1e-15)


def test_loss_matches_scalar_recomputation():
    cfg = ModelConfig(4, 3, (2, 3), (5,), 0.0, 2.5)
    params = init_params(cfg, 9)
    rng = np.random.default_rng(9)
    for a in params.arrays():
        a += rng.normal(scale=0.2, size=a.shape)
    x = rng.normal(size=4)
    loss = joint_loss(params, x, 1, [1, 2], 2.5, cfg)
    l_id, l_att, total = scalar_joint_loss(params, x, 1, [1, 2], 2.5)
    assert loss.l_id == pytest.approx(l_id, rel=1e-12)
    assert np.allclose(loss.l_att, l_att, rtol=1e-12)
    assert loss.total == pytest.approx(total, rel=1e-12)


def test_loss_linear_in_lambda():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cfg, params, x, y, atts = random_instance(rng)
        offsets = []
        for lam in (0, 1, 8):
            loss = joint_loss(params, x, y, atts, lam, cfg)
            offsets.append(loss.total - lam * loss.l_id)
        assert max(offsets) - min(offsets) <= 1e-12


# -- gradients -----------------------------------------------------------------


def test_zero_weights_closed_form():
    cfg = ModelConfig(3, 4, (2,), (), 0.0, 3.0)
    params = init_params(cfg, 0).map(np.zeros_like)
    _, grads = backward(params, np.ones(3), 2, [1], 3.0, cfg)
    onehot = np.eye(4)[2]
    assert np.allclose(grads.heads[0][1], 3.0 * (np.full(4, 0.25) - onehot), rtol=0, atol=1e-15)


def test_lambda_zero_disconnects_identity_head():
    rng = np.random.default_rng(2)
    cfg, params, x, y, atts = random_instance(rng)
    _, grads = backward(params, x, y, atts, 0.0, cfg)
    assert not grads.heads[0][0].any()
    assert not grads.heads[0][1].any()


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for trial in range(100):
        cfg, params, x, y, atts = random_instance(rng)
        train = cfg.dropout_rate > 0
        _, grads = backward(params, x, y, atts, cfg.lam, cfg, train_mode=train, seed=trial, index=7)
        num = numeric_grad(
            lambda p: joint_loss(p, x, y, atts, cfg.lam, cfg, train_mode=train, seed=trial, index=7).total, params)
        worst = max(worst, relative_error(grads.flat(), num))
    assert worst < 1e-4


def test_batch_gradient_is_mean_of_samples():
    rng = np.random.default_rng(5)
    cfg = ModelConfig(5, 4, (2, 3), (6,), 0.5, 8.0)
    params = init_params(cfg, 3)
    X = rng.normal(size=(7, 5))
    ids = rng.integers(4, size=7)
    atts = np.stack([rng.integers(2, size=7), rng.integers(3, size=7)], axis=1)
    loss, grads = batch_loss_and_grad(params, X, ids, atts, 8.0, dropout_rate=0.5, train_mode=True,
                                      seed=11, indices=np.arange(100, 107))
    singles = [backward(params, X[i], ids[i], atts[i], 8.0, cfg, True, 11, 100 + i) for i in range(7)]
    assert loss.total == pytest.approx(np.mean([s[0].total for s in singles]), rel=1e-12)
    mean = np.mean([s[1].flat() for s in singles], axis=0)
    assert np.allclose(grads.flat(), mean, rtol=1e-10, atol=1e-14)


# -- forward / inference ---------------------------------------------------------


def test_dropout_mask_deterministic():
    a = dropout_mask(0.9, 50, seed=3, index=17)
    assert np.array_equal(a, dropout_mask(0.9, 50, seed=3, index=17))
    assert not np.array_equal(a, dropout_mask(0.9, 50, seed=3, index=18))
    assert np.all(np.isclose(a, 0.0) | np.isclose(a, 10.0))


def test_forward_modes():
    cfg = ModelConfig(4, 3, (2,), (6,), 0.5, 1.0)
    params = init_params(cfg, 0)
    x = np.arange(4.0)
    h1, z1 = forward(params, x, cfg)
    h2, z2 = forward(params, x, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(z1, z2))
    t1 = forward(params, x, cfg, train_mode=True, seed=4, index=2)[1]
    t2 = forward(params, x, cfg, train_mode=True, seed=4, index=2)[1]
    assert all(np.array_equal(a, b) for a, b in zip(t1, t2))
    assert [len(z) for z in z1] == [3, 2]
    with pytest.raises(ValueError):
        forward(params, np.zeros(5), cfg)


def test_embedding_identity_without_hidden():
    cfg = ModelConfig(6, 3, (2,))
    params = init_params(cfg, 0)
    x = np.linspace(-1, 1, 6)
    assert np.array_equal(extract_embedding(params, x), x)


def test_embedding_by_hand():
    cfg = ModelConfig(4, 2, (2,), (2,))
    params = init_params(cfg, 0)
    params.hidden[0] = (np.array([[1.0, 0, -1, 2], [0.5, 0.5, 0.5, 0.5]]), np.array([0.0, -3.0]))
    x = np.array([1.0, 2.0, 3.0, 4.0])
    # row 0: 1 - 3 + 8 = 6; row 1: 5 - 3 = 2
    assert np.array_equal(extract_embedding(params, x), [6.0, 2.0])
    params.hidden[0][1][1] = -6.0
    assert np.array_equal(extract_embedding(params, x), [6.0, 0.0])


def test_predict_ties_and_scaling():
    cfg = ModelConfig(2, 3, (2,), ())
    params = init_params(cfg, 0).map(np.zeros_like)
    pred = predict(params, np.ones(2))
    assert pred.identity[0] == 0
    assert pred.attributes[0, 0] == 0
    rng = np.random.default_rng(0)
    params = init_params(cfg, 1)
    X = rng.normal(size=(20, 2))
    base = predict(params, X)
    for w, b in params.heads:
        w *= 3.7
        b *= 3.7
    scaled = predict(params, X)
    assert np.array_equal(base.identity, scaled.identity)
    assert np.array_equal(base.attributes, scaled.attributes)


def test_init_deterministic_and_scaled():
    cfg = ModelConfig(16, 5, (3, 4), (8,))
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a.equal(b)
    assert not a.equal(init_params(cfg, 8))
    w, bias = a.hidden[0]
    assert np.abs(w).max() <= 1 / 4
    assert not bias.any()


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(5, 4, (2, 3), (6, 3), 0.25, 8.0)
    params = init_params(cfg, 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params)
    assert path.read_bytes()[:4] == b"APRM"
    cfg2, p2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert p2.equal(params.map(lambda a: a.astype(np.float32).astype(np.float64)))
    with pytest.raises(ValueError):
        (tmp_path / "bad").write_bytes(b"XXXX")
        load_checkpoint(tmp_path / "bad")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(4, 1)
    with pytest.raises(ValueError):
        ModelConfig(4, 3, (1,))
    with pytest.raises(ValueError):
        ModelConfig(4, 3, dropout_rate=1.0)
    with pytest.raises(ValueError):
        ModelConfig(4, 3, lam=float("inf"))
    assert ModelConfig(4, 3).mode == "baseline-1"
    assert ModelConfig(4, 3, (2,), lam=0).mode == "baseline-2"
    assert ModelConfig(4, 3, (2,)).mode == "apr"
