import math

import numpy as np
import pytest

from patchmimic.errors import DataError, NumericError
from patchmimic.feature_store import load_manifest
from patchmimic.student import (
    PARAM_NAMES,
    Gradients,
    StudentNet,
    TrainConfig,
    adam_step,
    backward,
    batch_losses,
    forward,
    gelu,
    gelu_grad,
    load_model,
    per_patch_loss,
    save_model,
    train,
)


# --- activation -------------------------------------------------------------


def test_gelu_zero():
    assert gelu(np.array(0.0)) == 0.0


def test_gelu_at_one():
    # x * Phi(x) at x=1, frozen from the scalar erf oracle
    assert abs(float(gelu(np.array(1.0))) - 0.8413447460685429) < 1e-5


def test_gelu_asymptotic():
    x = np.linspace(6.0, 12.0, 20)
    assert np.allclose(gelu(x), x, atol=1e-6)


def test_gelu_grad_matches_finite_difference():
    xs = np.linspace(-4, 4, 41)
    h = 1e-6
    num = (gelu(xs + h) - gelu(xs - h)) / (2 * h)
    assert np.allclose(gelu_grad(xs), num, atol=1e-7)


# --- forward ----------------------------------------------------------------


def _scalar_net(dtype=np.float64):
    one = np.ones((1, 1), dtype=dtype)
    zero = np.zeros(1, dtype=dtype)
    net = StudentNet(w1=one.copy(), b1=zero.copy(), w2=one.copy(),
                     b2=zero.copy(), w3=one.copy(), b3=zero.copy())
    net.adam_m = {k: np.zeros_like(v) for k, v in net.params().items()}
    net.adam_v = {k: np.zeros_like(v) for k, v in net.params().items()}
    return net


def test_forward_zero_net():
    rng = np.random.default_rng(0)
    net = StudentNet.initialize(4, 4, 4, rng)
    for name in PARAM_NAMES:
        getattr(net, name)[:] = 0
    out = forward(net, rng.normal(size=(5, 4)).astype(np.float32))
    assert (out == 0).all()


def test_forward_scalar_chain():
    # identity 1x1x1 net: out(2) = gelu(gelu(2)); frozen from the scalar oracle
    net = _scalar_net()
    out = forward(net, np.array([[2.0]]))
    assert abs(float(out[0, 0]) - 1.9050097055649646) < 1e-12


def test_forward_batch_shape_and_order():
    rng = np.random.default_rng(1)
    net = StudentNet.initialize(8, 8, 8, rng)
    x = rng.normal(size=(5476, 8)).astype(np.float32)
    out = forward(net, x)
    assert out.shape == (5476, 8)
    # order-preserving and shared across patches: concatenation == per-part
    a, b = x[:100], x[100:]
    np.testing.assert_array_equal(np.vstack([forward(net, a), forward(net, b)]), out)


def test_forward_dim_mismatch():
    net = StudentNet.initialize(4, 4, 4, np.random.default_rng(0))
    with pytest.raises(DataError, match="dim"):
        forward(net, np.zeros((2, 5), dtype=np.float32))


# --- loss -------------------------------------------------------------------


def test_loss_identical_vectors():
    v = np.array([1.0, 2.0, -3.0])
    assert per_patch_loss(v, v, "cosine") == pytest.approx(0.0, abs=1e-12)


def test_loss_opposite_vectors():
    v = np.array([1.0, 2.0, -3.0])
    assert per_patch_loss(v, -v, "cosine") == pytest.approx(2.0, abs=1e-12)


def test_loss_orthogonal_and_l2():
    p = np.array([1.0, 0.0])
    t = np.array([0.0, 1.0])
    assert per_patch_loss(p, t, "cosine") == pytest.approx(1.0)
    assert per_patch_loss(p, t, "l2") == pytest.approx(math.sqrt(2.0))


def test_loss_zero_norm_operand_is_one():
    t = np.array([1.0, 2.0])
    z = np.zeros(2)
    assert per_patch_loss(z, t, "cosine") == 1.0
    assert per_patch_loss(t, z, "cosine") == 1.0


def test_loss_bounds_random():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(200, 6))
    t = rng.normal(size=(200, 6))
    losses = batch_losses(p, t, "cosine")
    assert (losses >= 0).all() and (losses <= 2).all()
    assert (batch_losses(p, t, "l2") >= 0).all()


# --- gradients --------------------------------------------------------------


def finite_difference_grads(net, x, targets, distance, h=1e-4):
    """Central finite differences of the mean per-patch loss, parameter-wise."""
    def loss_at():
        pred = forward(net, x)
        return float(batch_losses(pred, targets, distance).mean())

    out = {}
    for name in PARAM_NAMES:
        p = getattr(net, name)
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loss_at()
            p[idx] = orig - h
            down = loss_at()
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        out[name] = g
    return out


def _relative_error(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.abs(a - b) / denom


@pytest.mark.parametrize("distance", ["cosine", "l2"])
def test_gradients_match_finite_differences(distance):
    rng = np.random.default_rng(11)
    for _ in range(3):
        d, u = rng.integers(2, 9, size=2)
        n = int(rng.integers(1, 6))
        net = StudentNet.initialize(int(d), int(u), int(d), rng, dtype=np.float64)
        x = rng.normal(size=(n, int(d)))
        t = rng.normal(size=(n, int(d)))
        _, grads = backward(net, x, t, distance)
        numeric = finite_difference_grads(net, x, t, distance)
        for name in PARAM_NAMES:
            err = _relative_error(getattr(grads, name), numeric[name])
            assert err.max() < 1e-4, (distance, name, err.max())


def test_gradient_zero_at_cosine_minimum():
    rng = np.random.default_rng(2)
    net = StudentNet.initialize(4, 4, 4, rng, dtype=np.float64)
    x = rng.normal(size=(6, 4))
    pred = forward(net, x)
    _, grads = backward(net, x, pred, "cosine")  # targets equal predictions
    total = sum(np.linalg.norm(g) for _, g in grads.items())
    assert total < 1e-8


def test_gradient_target_scale_invariance_cosine():
    rng = np.random.default_rng(3)
    net = StudentNet.initialize(5, 5, 5, rng, dtype=np.float64)
    x = rng.normal(size=(4, 5))
    t = rng.normal(size=(4, 5))
    _, g1 = backward(net, x, t, "cosine")
    _, g2 = backward(net, x, 2.0 * t, "cosine")
    for name in PARAM_NAMES:
        np.testing.assert_allclose(getattr(g1, name), getattr(g2, name),
                                   rtol=1e-10, atol=1e-12)


def test_patch_permutation_invariance():
    rng = np.random.default_rng(4)
    net = StudentNet.initialize(6, 6, 6, rng, dtype=np.float64)
    x = rng.normal(size=(16, 6))
    t = rng.normal(size=(16, 6))
    perm = rng.permutation(16)
    loss_a, ga = backward(net, x, t, "cosine")
    loss_b, gb = backward(net, x[perm], t[perm], "cosine")
    assert abs(loss_a - loss_b) < 1e-10
    for name in PARAM_NAMES:
        np.testing.assert_allclose(getattr(ga, name), getattr(gb, name), atol=1e-10)


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    rng = np.random.default_rng(6)
    net = StudentNet.initialize(3, 3, 3, rng)
    before = {k: v.copy() for k, v in net.params().items()}
    zero = Gradients(*(np.zeros_like(getattr(net, n)) for n in PARAM_NAMES))
    adam_step(net, zero, lr=0.01)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(net, name), before[name])
    assert net.adam_t == 1


def test_adam_first_step_matches_hand_computation():
    # single scalar parameter, g=1: bias-corrected update is -lr / (1 + eps)
    net = _scalar_net()
    grads = Gradients(*(np.ones_like(getattr(net, n)) for n in PARAM_NAMES))
    adam_step(net, grads, lr=0.001)
    assert float(net.w1[0, 0]) == pytest.approx(1.0 - 0.0009999999900000003, abs=1e-15)


def test_adam_deterministic_across_identical_nets():
    rng1 = np.random.default_rng(9)
    rng2 = np.random.default_rng(9)
    n1 = StudentNet.initialize(4, 4, 4, rng1)
    n2 = StudentNet.initialize(4, 4, 4, rng2)
    g = Gradients(*(np.full_like(getattr(n1, n), 0.5) for n in PARAM_NAMES))
    adam_step(n1, g, lr=0.01)
    adam_step(n2, g, lr=0.01)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(n1, name), getattr(n2, name))


def test_adam_nonfinite_gradient_names_block():
    net = _scalar_net()
    bad = Gradients(*(np.full_like(getattr(net, n), np.nan) for n in PARAM_NAMES))
    with pytest.raises(NumericError, match="w1"):
        adam_step(net, bad, lr=0.1)


# --- training loop ----------------------------------------------------------


def test_train_single_image_one_epoch_counts_steps(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    cfg = TrainConfig(epochs=1, seed=0)
    s_f, s_b, log = train(manifest, cfg)
    assert s_f.adam_t == 1 and s_b.adam_t == 1
    assert len(log.epoch_loss_forward) == 1


def test_train_defaults():
    cfg = TrainConfig()
    assert cfg.epochs == 50
    assert cfg.learning_rate == 0.001
    assert cfg.layer_pair == (8, 12)
    assert cfg.loss_distance == "cosine"
    assert cfg.adam_betas == (0.9, 0.999)
    assert cfg.adam_eps == 1e-8


def test_train_config_validation():
    with pytest.raises(DataError):
        TrainConfig(layer_pair=(12, 8)).validate()
    with pytest.raises(DataError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(DataError):
        TrainConfig(learning_rate=0.0).validate()


def test_train_deterministic(tiny_dataset):
    manifest = load_manifest(tiny_dataset)
    cfg = TrainConfig(epochs=3, seed=123)
    a_f, a_b, _ = train(manifest, cfg)
    b_f, b_b, _ = train(manifest, cfg)
    for name in PARAM_NAMES:
        assert getattr(a_f, name).tobytes() == getattr(b_f, name).tobytes()
        assert getattr(a_b, name).tobytes() == getattr(b_b, name).tobytes()


# --- persistence ------------------------------------------------------------


def test_model_roundtrip_bit_exact(tiny_dataset, tmp_path):
    manifest = load_manifest(tiny_dataset)
    cfg = TrainConfig(epochs=2, seed=5)
    s_f, s_b, _ = train(manifest, cfg)
    path = tmp_path / "model.pmdl"
    save_model(path, s_f, s_b, cfg)
    r_f, r_b, r_cfg = load_model(path)
    assert r_cfg == cfg
    probe = np.random.default_rng(0).normal(size=(10, s_f.d_in)).astype(np.float32)
    np.testing.assert_array_equal(forward(s_f, probe), forward(r_f, probe))
    np.testing.assert_array_equal(forward(s_b, probe), forward(r_b, probe))
    assert r_f.adam_t == s_f.adam_t


def test_model_bad_magic(tmp_path):
    path = tmp_path / "bad.pmdl"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(DataError, match="bad magic"):
        load_model(path)
