import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from siammm.encoder import (Layer, MlpStack, SiameseNet, augment, backward, forward,
                            load_checkpoint, momentum_update, save_checkpoint, sgd_step)
from siammm.errors import DataFormatError, NumericalError, StaleTapeError

from .gradcheck import run_suite


def _net(seed=0, init="he", **kw):
    return SiameseNet.build(6, 8, 4, rng=np.random.default_rng(seed), init=init, **kw)


def _scalar_net(theta, theta_m, m):
    def stack(w):
        return MlpStack([Layer(np.array([[w]]), np.zeros(1), False)])
    empty = MlpStack([])
    return SiameseNet(stack(theta), empty, empty, stack(theta_m), empty, m=m)


def _oracle_embed(stacks, X):
    h = X
    for s in stacks:
        for layer in s.layers:
            z = np.dot(h, layer.W.T) + layer.b
            h = np.where(z > 0, z, 0.0) if layer.relu else z
    return h / np.sqrt(np.sum(h * h, axis=1, keepdims=True))


# -- augmentation ---------------------------------------------------------------

def test_augment_examples(rng):
    X = rng.standard_normal((5, 6))
    a, b = augment(X, rng, sigma=0.0, p_drop=0.0)
    np.testing.assert_array_equal(a, X)
    np.testing.assert_array_equal(b, X)
    a, b = augment(X, rng, sigma=0.3, p_drop=1.0)
    assert not a.any() and not b.any()
    one = augment(X, np.random.default_rng(4))
    two = augment(X, np.random.default_rng(4))
    for u, v in zip(one, two):
        np.testing.assert_array_equal(u, v)


# -- forward --------------------------------------------------------------------

def test_identity_layer_returns_normalized_input():
    eye = MlpStack([Layer(np.eye(3), np.zeros(3), False)])
    empty = MlpStack([])
    net = SiameseNet(eye, empty, empty, eye.copy(), empty)
    x = np.array([[3.0, 0.0, 4.0]])
    v1, v2, v1m, v2m, _ = forward(net, x, x)
    for v in (v1, v2, v1m, v2m):
        np.testing.assert_allclose(v, [[0.6, 0.0, 0.8]], atol=1e-15)


@pytest.mark.parametrize("init", ["he", "looks_linear"])
def test_forward_matches_matmul_oracle(init, rng):
    net = _net(3, init)
    for p in net.parameters():
        p += 0.2 * rng.standard_normal(p.shape)
    X1, X2 = rng.standard_normal((2, 10, 6))
    v1, v2, v1m, v2m, _ = forward(net, X1, X2)
    np.testing.assert_allclose(v1, _oracle_embed(net.online_stacks, X1), atol=1e-12)
    np.testing.assert_allclose(v2, _oracle_embed(net.online_stacks, X2), atol=1e-12)
    np.testing.assert_allclose(v1m, _oracle_embed(net.momentum_stacks, X1), atol=1e-12)
    for v in (v1, v2, v1m, v2m):
        assert np.all(np.isfinite(v))
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9)


def test_forward_rejects_wrong_width(rng):
    net = _net()
    with pytest.raises(ValueError):
        forward(net, rng.standard_normal((2, 5)), rng.standard_normal((2, 5)))
    with pytest.raises(ValueError):
        forward(net, rng.standard_normal((2, 6)), rng.standard_normal((3, 6)))


def test_stack_shapes_must_chain(rng):
    with pytest.raises(ValueError):
        MlpStack([Layer(np.ones((4, 3)), np.zeros(4), True),
                  Layer(np.ones((2, 5)), np.zeros(2), False)])


@given(seed=st.integers(0, 2**31 - 1), hidden=st.sampled_from([12, 16, 64]),
       embed=st.sampled_from([6, 8, 16]))
def test_looks_linear_net_is_isometric_at_init(seed, hidden, embed):
    # Holds whenever every half-width and the embedding are at least in_dim wide.
    rng = np.random.default_rng(seed)
    in_dim = 6
    net = SiameseNet.build(in_dim, hidden, embed, pred_hidden=2 * embed, rng=rng)
    X = rng.standard_normal((20, in_dim))
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    for branch in ("online", "momentum"):
        V = net.embed(X, branch)
        np.testing.assert_allclose(V @ V.T, Xn @ Xn.T, atol=1e-12)


def test_looks_linear_needs_even_widths():
    with pytest.raises(ValueError):
        SiameseNet.build(6, 7, 4, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        SiameseNet.build(6, 8, 4, rng=np.random.default_rng(0), init="xavier")


# -- backward -------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients(rng):
    net = _net()
    X = rng.standard_normal((4, 6))
    *_, tape = forward(net, X, X)
    for g in backward(net, tape, np.zeros((4, 4)), np.zeros((4, 4))):
        assert not g.any()


def test_backward_leaves_momentum_untouched(rng):
    net = _net()
    before = [p.copy() for p in net.momentum_parameters()]
    X = rng.standard_normal((4, 6))
    *_, tape = forward(net, X, X)
    backward(net, tape, rng.standard_normal((4, 4)), rng.standard_normal((4, 4)))
    for a, b in zip(before, net.momentum_parameters()):
        np.testing.assert_array_equal(a, b)


def test_stale_tape_rejected(rng):
    net = _net()
    X = rng.standard_normal((4, 6))
    *_, tape = forward(net, X, X)
    grads = backward(net, tape, np.ones((4, 4)), np.ones((4, 4)))
    sgd_step(net, grads, 0.01)
    with pytest.raises(StaleTapeError):
        backward(net, tape, np.ones((4, 4)), np.ones((4, 4)))


def test_pipeline_gradient_suite():
    errors = run_suite("encoder pipeline", n_cases=200, seed=5)
    assert errors.max() < 1e-5, f"worst relative error {errors.max():.2e}"


# -- momentum and SGD -----------------------------------------------------------

def test_momentum_update_examples():
    net = momentum_update(_scalar_net(0.0, 1.0, 0.9))
    assert net.m_backbone.layers[0].W[0, 0] == pytest.approx(0.9, abs=1e-15)
    net = momentum_update(_scalar_net(0.5, 1.0, 1.0))
    assert net.m_backbone.layers[0].W[0, 0] == 1.0
    net = momentum_update(_scalar_net(0.5, 1.0, 0.0))
    assert net.m_backbone.layers[0].W[0, 0] == 0.5


def test_ema_contraction(rng):
    net = _net(1, m=0.8)
    for p in net.momentum_parameters():
        p += rng.standard_normal(p.shape)
    gap = max(np.max(np.abs(a - b)) for a, b in zip(net.momentum_parameters(),
                                                    net.parameters()))
    for _ in range(20):
        momentum_update(net)
        new = max(np.max(np.abs(a - b)) for a, b in zip(net.momentum_parameters(),
                                                        net.parameters()))
        assert abs(new - 0.8 * gap) < 1e-12
        gap = new


def test_sgd_examples():
    net = _scalar_net(1.0, 1.0, 0.9)
    grads = [np.ones((1, 1)), np.zeros(1)]
    sgd_step(net, grads, 0.0)
    assert net.backbone.layers[0].W[0, 0] == 1.0
    net = _scalar_net(1.0, 1.0, 0.9)
    sgd_step(net, grads, 0.1, momentum_coeff=0.0)
    assert net.backbone.layers[0].W[0, 0] == pytest.approx(0.9, abs=1e-15)
    net = _scalar_net(0.0, 0.0, 0.9)
    sgd_step(net, grads, 0.1, momentum_coeff=0.9)
    sgd_step(net, grads, 0.1, momentum_coeff=0.9)
    assert net.backbone.layers[0].W[0, 0] == pytest.approx(-0.29, abs=1e-15)
    assert net.step == 2


def test_sgd_rejects_non_finite():
    net = _scalar_net(1.0, 1.0, 0.9)
    with pytest.raises(NumericalError):
        sgd_step(net, [np.array([[np.inf]]), np.zeros(1)], 0.1)
    with pytest.raises(ValueError):
        sgd_step(net, [np.ones((1, 1))], 0.1)


def test_training_steps_are_deterministic(rng):
    X = rng.standard_normal((8, 6))

    def run():
        net, r = _net(2), np.random.default_rng(9)
        for _ in range(5):
            X1, X2 = augment(X, r)
            v1, v2, v1m, v2m, tape = forward(net, X1, X2)
            sgd_step(net, backward(net, tape, -v2m, -v1m), 0.05)
            momentum_update(net)
        return net.parameters() + net.momentum_parameters()

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    net = _net(4, "looks_linear", m=0.95)
    net.step = 17
    p = tmp_path / "net.ckpt"
    save_checkpoint(net, p)
    back = load_checkpoint(p)
    assert back.m == 0.95 and back.step == 17
    for a, b in zip(net.parameters() + net.momentum_parameters(),
                    back.parameters() + back.momentum_parameters()):
        np.testing.assert_array_equal(a, b)
    X = rng.standard_normal((3, 6))
    np.testing.assert_array_equal(net.embed(X), back.embed(X))


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "net.ckpt"
    save_checkpoint(_net(), p)
    blob = p.read_bytes()
    p.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(DataFormatError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(blob[:100])
    with pytest.raises(DataFormatError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(blob + b"\0")
    with pytest.raises(DataFormatError, match="trailing"):
        load_checkpoint(p)
