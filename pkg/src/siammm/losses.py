"""Training objectives and their exact gradients with respect to embeddings.

Centroid parameters (mean directions, concentrations, cluster sizes) enter
every loss as plain arrays, so no gradient can reach them.  Momentum-branch
embeddings are likewise constants: their gradient slots are always zero.

Batch functions take ``(B, d)`` embeddings and return per-sample values plus
``(B, d)`` gradients; the single-sample functions wrap them.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import check_unit_vector
from .mixture import nearest_centroid_positions

THROUGH_PI = "through_pi"
DETACHED = "detached"


@dataclass(frozen=True)
class SoftAssignment:
    ids: np.ndarray
    weights: np.ndarray
    tau: float
    h: int


@dataclass(frozen=True)
class LossValueGrad:
    value: float
    grad: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient")


def total_loss(cluster, instance):
    """Unweighted sum of two loss terms (values and gradients)."""
    if np.shape(cluster.grad) != np.shape(instance.grad):
        raise ValueError(f"gradient shapes differ: {np.shape(cluster.grad)} "
                         f"vs {np.shape(instance.grad)}")
    return LossValueGrad(cluster.value + instance.value, cluster.grad + instance.grad)


def _tangent(V, G):
    return G - np.sum(G * V, axis=1, keepdims=True) * V


def _check_h_tau(h, tau, k):
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not 1 <= h <= k:
        raise ValueError(f"h must lie in [1, K={k}], got {h}")


def _log_size(state, size_weights):
    if size_weights:
        return np.log(state.alpha)
    return np.zeros(state.n_components)


def soft_assign_batch(V, state, h, tau, size_weights=False):
    """Nearest-``h`` positions, their similarities and log soft weights."""
    _check_h_tau(h, tau, state.n_components)
    pos = nearest_centroid_positions(V, state.mu, h)
    sims = np.einsum("bd,bhd->bh", V, state.mu[pos])
    logits = _log_size(state, size_weights)[pos] + sims / tau
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    return pos, sims, log_pi


def soft_assign_weights(v, state, h, tau, size_weights=False):
    v = check_unit_vector(v)
    pos, _, log_pi = soft_assign_batch(v[None, :], state, h, tau, size_weights)
    return SoftAssignment(ids=state.ids[pos[0]], weights=np.exp(log_pi[0]), tau=float(tau),
                          h=int(h))


def cluster_loss_batch(V, state, h, tau, *, weight_grad=THROUGH_PI, size_weights=False,
                       tangent=False):
    """Soft-assignment negative log-likelihood over the ``h`` nearest centroids.

    ``weight_grad="through_pi"`` differentiates the soft weights as functions
    of ``v``; ``"detached"`` holds them fixed.
    """
    if weight_grad not in (THROUGH_PI, DETACHED):
        raise ValueError(f"unknown weight_grad {weight_grad!r}")
    V = np.asarray(V, dtype=np.float64)
    pos, sims, log_pi = soft_assign_batch(V, state, h, tau, size_weights)
    kap = state.kappa[pos]
    mus = state.mu[pos]
    inner = log_pi + kap * sims
    values = -logsumexp(inner, axis=1)
    q = np.exp(inner + values[:, None])
    coef = -q * kap
    if weight_grad == THROUGH_PI:
        coef += (np.exp(log_pi) - q) / tau
    grads = np.einsum("bh,bhd->bd", coef, mus)
    if tangent:
        grads = _tangent(V, grads)
    return values, grads


def cluster_loss(v, state, h, tau, **kwargs):
    v = check_unit_vector(v)
    values, grads = cluster_loss_batch(v[None, :], state, h, tau, **kwargs)
    return LossValueGrad(float(values[0]), grads[0])


def _check_unit_rows(*arrays):
    for a in arrays:
        if np.max(np.abs(np.linalg.norm(a, axis=-1) - 1.0)) > 1e-9:
            raise ValueError("instance loss inputs must be unit vectors")


def instance_loss_batch(V1, V2, V1m, V2m, validate=True):
    """Symmetrized negative cosine; gradients for ``(v1, v2, v1m, v2m)``.

    Shape of the returned gradient is ``(4, B, d)``; the momentum slots are
    zero.  ``validate=False`` skips the unit-norm check (finite differences).
    """
    V1, V2, V1m, V2m = (np.asarray(a, dtype=np.float64) for a in (V1, V2, V1m, V2m))
    if not V1.shape == V2.shape == V1m.shape == V2m.shape:
        raise ValueError("instance loss inputs must share a shape")
    if validate:
        _check_unit_rows(V1, V2, V1m, V2m)
    values = -np.sum(V1 * V2m, axis=1) - np.sum(V2 * V1m, axis=1)
    grads = np.stack([-V2m, -V1m, np.zeros_like(V1m), np.zeros_like(V2m)])
    return values, grads


def instance_loss(v1, v2, v1m, v2m):
    values, grads = instance_loss_batch(*(np.asarray(a, dtype=np.float64)[None, :]
                                          for a in (v1, v2, v1m, v2m)))
    return LossValueGrad(float(values[0]), grads[:, 0, :])


def nce_centroid_loss_batch(V, pos, state, neg_mask=None):
    """Cross-entropy of the assigned centroid against negative centroids.

    ``pos`` holds row positions; ``neg_mask`` is a ``(B, K)`` boolean mask of
    negatives (default: every other component).
    """
    V = np.asarray(V, dtype=np.float64)
    pos = np.asarray(pos)
    b, k = V.shape[0], state.n_components
    logits = (V @ state.mu.T) * state.kappa
    if neg_mask is None:
        neg_mask = np.ones((b, k), dtype=bool)
    include = neg_mask.copy()
    include[np.arange(b), pos] = True
    masked = np.where(include, logits, -np.inf)
    lse = logsumexp(masked, axis=1)
    values = lse - logits[np.arange(b), pos]
    p = np.where(include, np.exp(masked - lse[:, None]), 0.0)
    p[np.arange(b), pos] -= 1.0
    grads = (p * state.kappa) @ state.mu
    return values, grads


def nce_centroid_loss(v, pos_id, neg_ids, state):
    v = check_unit_vector(v)
    neg_ids = np.asarray(list(neg_ids), dtype=np.int64)
    if pos_id in set(neg_ids.tolist()):
        raise ValueError("positive id appears among the negatives")
    pos = state.positions([pos_id])
    mask = np.zeros((1, state.n_components), dtype=bool)
    if neg_ids.size:
        mask[0, state.positions(neg_ids)] = True
    values, grads = nce_centroid_loss_batch(v[None, :], pos, state, mask)
    return LossValueGrad(float(values[0]), grads[0])


def nce_instance_loss_batch(V, Vneg, mu, kappa, neg_mask):
    """Positive embedding versus out-of-cluster embeddings under one centroid.

    ``mu``/``kappa`` are the assigned centroid per row (``(B, d)``, ``(B,)``);
    ``Vneg`` is the ``(M, d)`` pool of negatives (constants) and ``neg_mask``
    the ``(B, M)`` mask selecting each row's negatives.
    """
    V = np.asarray(V, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    a = kappa * np.sum(V * mu, axis=1)
    bneg = kappa[:, None] * (mu @ np.asarray(Vneg, dtype=np.float64).T)
    allv = np.concatenate([a[:, None], np.where(neg_mask, bneg, -np.inf)], axis=1)
    lse = logsumexp(allv, axis=1)
    values = lse - a
    p_pos = np.exp(a - lse)
    grads = -((1.0 - p_pos) * kappa)[:, None] * mu
    return values, grads


def nce_instance_loss(v_pos, v_negs, comp):
    """``comp`` is any object with ``mu`` and ``kappa`` (a component or VmfParams)."""
    v_pos = check_unit_vector(v_pos)
    mu, kappa = np.asarray(comp.mu, dtype=np.float64), float(comp.kappa)
    v_negs = np.asarray(v_negs, dtype=np.float64).reshape(-1, v_pos.shape[0])
    mask = np.ones((1, v_negs.shape[0]), dtype=bool)
    values, grads = nce_instance_loss_batch(v_pos[None, :], v_negs, np.asarray(mu)[None, :],
                                            np.array([kappa]), mask)
    return LossValueGrad(float(values[0]), grads[0])
