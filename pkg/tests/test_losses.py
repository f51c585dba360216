import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siammm import losses
from siammm.mixture import MixtureState
from siammm.vmf import VmfParams

from .conftest import unit_rows
from .gradcheck import CHECKS, random_state, run_suite

GRAD_TOL = 1e-5


def _toy_state(mu, kappa, alpha=None, ids=None):
    mu = np.asarray(mu, dtype=np.float64)
    k = mu.shape[0]
    alpha = np.full(k, 1.0 / k) if alpha is None else np.asarray(alpha, dtype=np.float64)
    return MixtureState(ids=np.arange(k) if ids is None else np.asarray(ids), mu=mu,
                        kappa=np.asarray(kappa, dtype=np.float64), r=0.5 * mu, alpha=alpha,
                        counts=alpha * 10)


# -- soft assignment ------------------------------------------------------------

def test_soft_weights_toy_instance():
    # Centroids with cosines 0.9, 0.5, 0.1 to v = e1, plus a far one that is excluded.
    cos = np.array([0.9, 0.5, 0.1, -0.8])
    mu = np.stack([cos, np.sqrt(1 - cos**2), np.zeros(4)], axis=1)
    mu[2, 1], mu[2, 2] = 0.0, np.sqrt(1 - 0.01)
    state = _toy_state(mu, [1.0] * 4)
    sa = losses.soft_assign_weights(np.array([1.0, 0.0, 0.0]), state, 3, 0.02)
    e = np.exp(np.array([0.9, 0.5, 0.1]) / 0.02)
    assert sa.ids.tolist() == [0, 1, 2]
    np.testing.assert_allclose(sa.weights, e / e.sum(), rtol=0, atol=1e-12)


def test_soft_weights_h1_and_high_temperature(rng):
    state = random_state(rng, 6, 5)
    v = unit_rows(rng, 1, 5)[0]
    assert losses.soft_assign_weights(v, state, 1, 0.02).weights.tolist() == [1.0]
    w = losses.soft_assign_weights(v, state, 4, 1e6).weights
    np.testing.assert_allclose(w, 0.25, atol=1e-3)


def test_soft_weights_size_prior(rng):
    mu = unit_rows(rng, 3, 4)
    state = _toy_state(mu, [1.0] * 3, alpha=[0.7, 0.2, 0.1])
    v = unit_rows(rng, 1, 4)[0]
    sa = losses.soft_assign_weights(v, state, 3, 0.5, size_weights=True)
    pos = state.positions(sa.ids)
    e = state.alpha[pos] * np.exp(mu[pos] @ v / 0.5)
    np.testing.assert_allclose(sa.weights, e / e.sum(), atol=1e-12)


@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 12), tau=st.floats(1e-3, 1e3))
def test_soft_weights_normalized(seed, k, tau):
    rng = np.random.default_rng(seed)
    state = random_state(rng, k, 6)
    h = int(rng.integers(1, k + 1))
    w = losses.soft_assign_weights(unit_rows(rng, 1, 6)[0], state, h, tau).weights
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all((w >= 0) & (w <= 1))


def test_soft_weights_validation(rng):
    state = random_state(rng, 3, 4)
    v = unit_rows(rng, 1, 4)[0]
    with pytest.raises(ValueError):
        losses.soft_assign_weights(v, state, 2, 0.0)
    with pytest.raises(ValueError):
        losses.soft_assign_weights(v, state, 4, 0.1)
    with pytest.raises(ValueError):
        losses.soft_assign_weights(v, state, 0, 0.1)


# -- cluster loss ---------------------------------------------------------------

def test_h1_reduction_thousand_cases():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        k, d = int(rng.integers(1, 10)), int(rng.integers(2, 20))
        state = random_state(rng, k, d, kappa_hi=1e3)
        v = unit_rows(rng, 1, d)[0]
        a = int(np.argmax(state.mu @ v))
        expected = -state.kappa[a] * (state.mu[a] @ v)
        got = losses.cluster_loss(v, state, 1, float(rng.uniform(1e-3, 10))).value
        worst = max(worst, abs(got - expected))
    assert worst <= 1e-12


def test_identical_centroids_ignore_weights():
    mu = np.tile(np.array([0.6, 0.8, 0.0]), (4, 1))
    state = _toy_state(mu, [7.0] * 4, alpha=[0.1, 0.2, 0.3, 0.4])
    v = np.array([0.0, 0.6, 0.8])
    for sw in (False, True):
        val = losses.cluster_loss(v, state, 3, 0.1, size_weights=sw).value
        assert val == pytest.approx(-7.0 * 0.48, abs=1e-12)


def test_cluster_loss_direct_arithmetic(rng):
    state = random_state(rng, 5, 4)
    v = unit_rows(rng, 1, 4)[0]
    h, tau = 3, 0.3
    top = np.argsort(-(state.mu @ v))[:h]
    logits = state.mu[top] @ v / tau
    pi = np.exp(logits) / np.exp(logits).sum()
    expected = -np.log(np.sum(pi * np.exp(state.kappa[top] * (state.mu[top] @ v))))
    assert losses.cluster_loss(v, state, h, tau).value == pytest.approx(expected, abs=1e-12)


@given(seed=st.integers(0, 2**31 - 1), tau=st.floats(1e-3, 10.0))
def test_cluster_loss_lower_bound(seed, tau):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 8))
    state = random_state(rng, k, 5, kappa_hi=500.0)
    h = int(rng.integers(1, k + 1))
    val = losses.cluster_loss(unit_rows(rng, 1, 5)[0], state, h, tau).value
    assert val >= -np.max(state.kappa) - 1e-9


def test_tangent_projection_removes_radial_part(rng):
    state = random_state(rng, 4, 6)
    v = unit_rows(rng, 1, 6)[0]
    g = losses.cluster_loss(v, state, 2, 0.1, tangent=True).grad
    assert abs(g @ v) < 1e-12
    full = losses.cluster_loss(v, state, 2, 0.1).grad
    np.testing.assert_allclose(g, full - (full @ v) * v, atol=1e-12)


def test_cluster_loss_rejects_unknown_mode(rng):
    state = random_state(rng, 3, 4)
    with pytest.raises(ValueError):
        losses.cluster_loss(unit_rows(rng, 1, 4)[0], state, 2, 0.1, weight_grad="frozen")


# -- instance loss --------------------------------------------------------------

def test_instance_loss_identical_and_orthogonal():
    v = np.array([0.0, 1.0, 0.0])
    res = losses.instance_loss(v, v, v, v)
    assert res.value == -2.0
    for g in res.grad[:2]:
        np.testing.assert_allclose(g - (g @ v) * v, 0.0, atol=1e-15)
    e1, e2 = np.eye(3)[:2]
    assert losses.instance_loss(e1, e1, e2, e2).value == 0.0


def test_instance_loss_rejects_non_unit():
    with pytest.raises(ValueError):
        losses.instance_loss(np.array([1.0, 1.0]), np.array([1.0, 0.0]),
                             np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        losses.instance_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]),
                             np.array([1.0, 0.0]), np.array([1.0, 0.0]))


@given(seed=st.integers(0, 2**31 - 1))
def test_instance_momentum_slots_exactly_zero(seed):
    rng = np.random.default_rng(seed)
    res = losses.instance_loss(*unit_rows(rng, 4, 5))
    assert np.all(res.grad[2:] == 0.0)


# -- total loss -----------------------------------------------------------------

def test_total_loss_is_additive():
    a = losses.LossValueGrad(1.5, np.array([1.0, 2.0]))
    z = losses.LossValueGrad(0.0, np.zeros(2))
    b = losses.LossValueGrad(-0.5, np.array([0.25, -1.0]))
    assert losses.total_loss(a, z).value == 1.5
    np.testing.assert_array_equal(losses.total_loss(z, b).grad, b.grad)
    s = losses.total_loss(a, b)
    assert s.value == 1.0
    np.testing.assert_array_equal(s.grad, [1.25, 1.0])
    with pytest.raises(ValueError):
        losses.total_loss(a, losses.LossValueGrad(0.0, np.zeros(3)))


def test_loss_value_grad_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        losses.LossValueGrad(0.0, np.array([np.nan]))


# -- negative sampling losses ---------------------------------------------------

def test_nce_centroid_examples(rng):
    state = random_state(rng, 4, 5)
    v = unit_rows(rng, 1, 5)[0]
    res = losses.nce_centroid_loss(v, 1, [], state)
    assert res.value == 0.0
    same = _toy_state(np.tile(np.eye(5)[0], (4, 1)), [3.0] * 4)
    assert losses.nce_centroid_loss(v, 0, [1, 2, 3], same).value == pytest.approx(np.log(4),
                                                                                  abs=1e-12)
    with pytest.raises(ValueError):
        losses.nce_centroid_loss(v, 1, [1, 3], state)
    with pytest.raises(KeyError):
        losses.nce_centroid_loss(v, 99, [1], state)


def test_nce_centroid_direct_arithmetic(rng):
    state = random_state(rng, 4, 6)
    v = unit_rows(rng, 1, 6)[0]
    ids = state.ids
    logits = state.kappa * (state.mu @ v)
    expected = -logits[0] + np.log(np.sum(np.exp(logits[[0, 2, 3]])))
    res = losses.nce_centroid_loss(v, ids[0], ids[[2, 3]], state)
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_nce_instance_examples():
    mu = np.array([0.0, 0.0, 1.0])
    comp = VmfParams(mu, 1.0)
    assert losses.nce_instance_loss(mu, np.empty((0, 3)), comp).value == 0.0
    res = losses.nce_instance_loss(mu, np.tile(-mu, (3, 1)), comp)
    assert res.value == pytest.approx(np.log1p(3 * np.exp(-2.0)), abs=1e-12)


# -- gradient suites ------------------------------------------------------------

@pytest.mark.parametrize("name", [n for n in CHECKS if n != "encoder pipeline"])
def test_gradients_match_finite_differences(name):
    errors = run_suite(name, n_cases=200, seed=11)
    assert errors.max() < GRAD_TOL, f"{name}: worst relative error {errors.max():.2e}"


@settings(max_examples=25)
@given(seed=st.integers(0, 2**31 - 1))
def test_cluster_gradient_property(seed):
    rng = np.random.default_rng(seed)
    assert CHECKS["cluster_loss (through pi)"](rng) < GRAD_TOL
