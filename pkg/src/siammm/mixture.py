"""Mixture of von Mises-Fisher components over unit embeddings.

Component parameters live in arrays sorted by a stable integer id so that a
component keeps its identity across epochs.  Merges keep the lowest id of the
merged group; drops remove ids.  ``assignments`` always holds ids, never row
positions.
"""

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy.cluster.hierarchy import DisjointSet
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClusterMixin, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_embeddings, check_random_state, check_unit_vector, normalize_rows
from .errors import DataFormatError
from .vmf import EPS_CLAMP, EPS_R, KAPPA_MAX, estimate_kappa, log_norm_const

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"SMM1"
SNAPSHOT_VERSION = 1


class VmfComponent(NamedTuple):
    id: int
    mu: np.ndarray
    kappa: float
    r: np.ndarray
    alpha: float
    member_count: float


@dataclass
class MixtureState:
    ids: np.ndarray
    mu: np.ndarray
    kappa: np.ndarray
    r: np.ndarray
    alpha: np.ndarray
    counts: np.ndarray
    assignments: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    epoch: int = 0

    @property
    def n_components(self):
        return self.ids.shape[0]

    @property
    def dim(self):
        return self.mu.shape[1]

    @property
    def components(self):
        return [VmfComponent(int(i), m, float(k), r, float(a), float(c))
                for i, m, k, r, a, c in zip(self.ids, self.mu, self.kappa, self.r,
                                            self.alpha, self.counts)]

    def positions(self, ids):
        """Row positions of component ``ids`` (raises on unknown ids)."""
        ids = np.asarray(ids)
        pos = np.searchsorted(self.ids, ids)
        pos_c = np.clip(pos, 0, max(self.n_components - 1, 0))
        if self.n_components == 0 or np.any(self.ids[pos_c] != ids):
            raise KeyError("unknown component id")
        return pos

    def copy(self):
        return replace(self, ids=self.ids.copy(), mu=self.mu.copy(), kappa=self.kappa.copy(),
                       r=self.r.copy(), alpha=self.alpha.copy(), counts=self.counts.copy(),
                       assignments=self.assignments.copy())

    def sorted(self):
        order = np.argsort(self.ids, kind="stable")
        return replace(self, ids=self.ids[order], mu=self.mu[order], kappa=self.kappa[order],
                       r=self.r[order], alpha=self.alpha[order], counts=self.counts[order])


@dataclass(frozen=True)
class MergeConfig:
    """Threshold for merging: absolute z-score or a percentile of z-scores."""

    mode: str = "zscore"
    zeta: float = -1.2
    percentile: float = 0.10

    def __post_init__(self):
        if self.mode not in ("zscore", "percentile"):
            raise ValueError(f"unknown merge mode {self.mode!r}")
        if not 0.0 < self.percentile < 1.0:
            raise ValueError("percentile must lie in (0, 1)")


@dataclass(frozen=True)
class MergeStats:
    distances: np.ndarray
    pairs: np.ndarray
    mean: float
    std: float

    @property
    def zscores(self):
        return (self.distances - self.mean) / self.std


@dataclass(frozen=True)
class PcaProjection:
    basis: np.ndarray
    eigenvalues: np.ndarray
    retention: float

    @property
    def d_pca(self):
        return self.basis.shape[1]


def _state_from_centroids(X, centroids, kappa0):
    sims = X @ centroids.T
    nearest = np.argmax(sims, axis=1)
    k = centroids.shape[0]
    counts = np.bincount(nearest, minlength=k).astype(np.float64)
    r = np.zeros_like(centroids)
    np.add.at(r, nearest, X)
    mu = centroids.copy()
    for j in range(k):
        if counts[j] == 0:
            r[j] = centroids[j]
            continue
        r[j] /= counts[j]
        norm = np.linalg.norm(r[j])
        if norm >= EPS_R:
            mu[j] = r[j] / norm
    return MixtureState(
        ids=np.arange(k, dtype=np.int64), mu=mu, kappa=np.full(k, float(kappa0)), r=r,
        alpha=np.full(k, 1.0 / k), counts=counts, assignments=nearest.astype(np.int64))


def kmeans_plus_plus(X, k, rng, n_local_trials=None):
    """Greedy k-means++ on cosine distance; returns row indices of the seeds."""
    n = X.shape[0]
    if n_local_trials is None:
        n_local_trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    closest = np.maximum(1.0 - X @ X[chosen[0]], 0.0)
    for _ in range(1, k):
        pot = closest.sum()
        if pot <= 0.0:
            free = np.setdiff1d(np.arange(n), chosen)
            chosen.append(int(rng.choice(free)))
            closest = np.minimum(closest, np.maximum(1.0 - X @ X[chosen[-1]], 0.0))
            continue
        cands = np.searchsorted(np.cumsum(closest), rng.uniform(size=n_local_trials) * pot)
        cands = np.minimum(cands, n - 1)
        dist = np.maximum(1.0 - X[cands] @ X.T, 0.0)
        new_closest = np.minimum(closest[None, :], dist)
        best = int(np.argmin(new_closest.sum(axis=1)))
        chosen.append(int(cands[best]))
        closest = new_closest[best]
    return np.asarray(chosen)


def init_centroids(X, k0, rng=None, kappa0=10.0):
    """Seed ``k0`` components with spherical k-means++ and one refinement.

    Each seed is replaced by the normalized resultant of its Voronoi cell, so
    ``k0 == 1`` yields the data mean direction and ``k0 == N`` the points.
    """
    X = check_embeddings(X)
    n = X.shape[0]
    if k0 < 1 or k0 > n:
        raise ValueError(f"k0 must lie in [1, N={n}], got {k0}")
    rng = check_random_state(rng)
    if k0 == n:
        seeds = np.arange(n)
    else:
        seeds = kmeans_plus_plus(X, k0, rng)
    return _state_from_centroids(X, X[seeds], kappa0)


def e_step_hard(X, state):
    """Nearest centroid by cosine similarity; ties go to the lowest id."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != state.dim:
        raise ValueError("embedding dimension does not match the mixture")
    return state.ids[np.argmax(X @ state.mu.T, axis=1)]


def _log_joint(X, state):
    log_c = np.array([log_norm_const(state.dim, k) for k in state.kappa])
    with np.errstate(divide="ignore"):
        log_alpha = np.log(state.alpha)
    return log_alpha + log_c + (X @ state.mu.T) * state.kappa


def responsibilities(X, state):
    """Posterior ``p(k | v)`` as an ``(N, K)`` matrix, columns in id order."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != state.dim:
        raise ValueError("embedding dimension does not match the mixture")
    lj = _log_joint(X, state)
    return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))


def log_likelihood(X, state):
    X = np.asarray(X, dtype=np.float64)
    return float(np.sum(logsumexp(_log_joint(X, state), axis=1)))


def nearest_centroid_positions(V, mu, h):
    """Row positions of the ``h`` most similar centroids for each row of ``V``."""
    sims = V @ mu.T
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :h]


def nearest_centroids(v, state, h):
    """Ids of the ``h`` centroids with largest cosine to ``v``, descending."""
    v = check_unit_vector(v)
    if not 1 <= h <= state.n_components:
        raise ValueError(f"h must lie in [1, K={state.n_components}], got {h}")
    return state.ids[nearest_centroid_positions(v[None, :], state.mu, h)[0]]


def _to_weights(X, resp_or_assign, state):
    arr = np.asarray(resp_or_assign)
    n = X.shape[0]
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ValueError("assignment table length does not match embeddings")
        pos = state.positions(arr)
        W = np.zeros((n, state.n_components))
        W[np.arange(n), pos] = 1.0
        return W, True
    if arr.shape != (n, state.n_components):
        raise ValueError("responsibility matrix has the wrong shape")
    if np.any(arr < 0) or np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("responsibilities must be row-stochastic")
    return arr.astype(np.float64), False


def m_step(X, resp_or_assign, state, *, kappa_mode="plain", retention=0.8, min_count=2.0,
           eps_clamp=EPS_CLAMP, kappa_max=KAPPA_MAX):
    """Refit mean directions, concentrations and weights.

    ``resp_or_assign`` is an ``(N, K)`` responsibility matrix or a length-N
    array of component ids.  Components whose soft count falls below
    ``min_count`` (or whose resultant degenerates) are dropped; their points
    are re-assigned to the nearest surviving centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    W, hard = _to_weights(X, resp_or_assign, state)
    counts = W.sum(axis=0)
    d = state.dim
    keep = counts >= min_count
    R = np.zeros_like(state.r)
    R[keep] = (W[:, keep].T @ X) / counts[keep, None]
    norms = np.linalg.norm(R, axis=1)
    keep &= norms >= EPS_R
    if not np.any(keep):
        raise ValueError("every component was dropped; lower min_count")
    ids, R, norms, counts = state.ids[keep], R[keep], norms[keep], counts[keep]
    mu = R / norms[:, None]
    if kappa_mode == "pca" and ids.shape[0] >= 2:
        kappa, _ = kappa_pca(R, retention, eps_clamp=eps_clamp, kappa_max=kappa_max)
    elif kappa_mode in ("plain", "pca"):
        kappa = np.array([estimate_kappa(n, d, eps_clamp, kappa_max) for n in norms])
    else:
        raise ValueError(f"unknown kappa_mode {kappa_mode!r}")
    new = MixtureState(ids=ids, mu=mu, kappa=kappa, r=R, alpha=counts / counts.sum(),
                       counts=counts, epoch=state.epoch)
    if hard:
        assign = np.asarray(resp_or_assign, dtype=np.int64).copy()
    else:
        assign = state.ids[np.argmax(W, axis=1)]
    lost = ~np.isin(assign, ids)
    if np.any(lost):
        assign[lost] = e_step_hard(X[lost], new)
    new.assignments = assign
    return new


def merge_statistics(mu):
    k = mu.shape[0]
    iu, ju = np.triu_indices(k, 1)
    dist = np.linalg.norm(mu[iu] - mu[ju], axis=1)
    return MergeStats(distances=dist, pairs=np.stack([iu, ju], axis=1),
                      mean=float(dist.mean()), std=float(dist.std()))


def merge_pass(state, config=MergeConfig(), *, eps_clamp=EPS_CLAMP, kappa_max=KAPPA_MAX):
    """One merging pass; returns ``(new_state, n_absorbed)``.

    Pairs whose normalized centroid distance falls below the threshold are
    linked, linked groups are collapsed with union-find, and each group keeps
    its lowest id.  Statistics are computed once per pass.
    """
    state = state.sorted()
    k = state.n_components
    if k < 2:
        return state.copy(), 0
    stats = merge_statistics(state.mu)
    if stats.std <= 0.0:
        logger.warning("pairwise centroid distances have zero spread; merge skipped")
        return state.copy(), 0
    z = stats.zscores
    if config.mode == "zscore":
        marked = z < config.zeta
    else:
        marked = z < np.quantile(z, config.percentile)
    if not np.any(marked):
        return state.copy(), 0

    groups = DisjointSet(range(k))
    for i, j in stats.pairs[marked]:
        groups.merge(int(i), int(j))
    subsets = sorted((sorted(s) for s in groups.subsets()), key=lambda s: s[0])

    d = state.dim
    ids, mu, kappa, r, alpha, counts = [], [], [], [], [], []
    redirect = {}
    for members in subsets:
        lead = members[0]
        w = state.counts[members]
        total = w.sum()
        rr = (w @ state.r[members]) / total if total > 0 else state.r[members].mean(axis=0)
        norm = np.linalg.norm(rr)
        if len(members) == 1:
            m_ = state.mu[lead]
            kk = state.kappa[lead]
        elif norm < EPS_R:
            m_ = state.mu[lead]
            kk = 0.0
        else:
            m_ = rr / norm
            kk = estimate_kappa(norm, d, eps_clamp, kappa_max)
        for p in members[1:]:
            redirect[int(state.ids[p])] = int(state.ids[lead])
        ids.append(state.ids[lead])
        mu.append(m_)
        kappa.append(kk)
        r.append(rr)
        alpha.append(state.alpha[members].sum())
        counts.append(total)

    assign = state.assignments.copy()
    if redirect and assign.size:
        src = np.fromiter(redirect.keys(), dtype=np.int64)
        dst = np.fromiter(redirect.values(), dtype=np.int64)
        order = np.argsort(src)
        src, dst = src[order], dst[order]
        pos = np.searchsorted(src, assign)
        hit = (pos < src.size) & (src[np.minimum(pos, src.size - 1)] == assign)
        assign[hit] = dst[pos[hit]]
    alpha = np.asarray(alpha)
    new = MixtureState(ids=np.asarray(ids, dtype=np.int64), mu=np.asarray(mu),
                       kappa=np.asarray(kappa, dtype=np.float64), r=np.asarray(r),
                       alpha=alpha / alpha.sum(), counts=np.asarray(counts),
                       assignments=assign, epoch=state.epoch)
    return new, k - new.n_components


def power_iteration_eigh(A, max_components=None, *, tol=1e-14, max_iter=100_000,
                         rank_tol=1e-12):
    """Leading eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Stops early once the deflated operator's next eigenvalue falls below
    ``rank_tol`` times the largest one.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    if max_components is None:
        max_components = d
    rng = np.random.default_rng(0)
    scale = max(np.trace(A), np.finfo(float).tiny)
    vecs, vals = [], []
    for _ in range(max_components):
        B = np.array(vecs).T if vecs else np.zeros((d, 0))
        v = rng.standard_normal(d)
        v -= B @ (B.T @ v)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = A @ v
            w -= B @ (B.T @ w)
            w -= B @ (B.T @ w)
            lam = float(v @ w)
            resid = np.linalg.norm(w - lam * v)
            nrm = np.linalg.norm(w)
            if nrm <= rank_tol * scale:
                break
            v = w / nrm
            if resid <= tol * scale:
                break
        if lam <= rank_tol * (vals[0] if vals else scale):
            break
        vecs.append(v)
        vals.append(lam)
    basis = np.array(vecs).T if vecs else np.zeros((d, 0))
    return np.asarray(vals), basis


def fit_pca(R, retention_target=0.8):
    """Smallest principal subspace of the ``r`` vectors keeping the target norm share."""
    R = np.asarray(R, dtype=np.float64)
    if not 0.0 < retention_target <= 1.0:
        raise ValueError("retention_target must lie in (0, 1]")
    second_moment = R.T @ R / R.shape[0]
    vals, basis = power_iteration_eigh(second_moment)
    total = np.linalg.norm(R, axis=1).sum()
    if basis.shape[1] == 0 or total == 0.0:
        raise ValueError("r vectors are all zero")
    proj = R @ basis
    for m in range(1, basis.shape[1] + 1):
        kept = np.linalg.norm(proj[:, :m], axis=1).sum() / total
        if kept >= retention_target - 1e-12:
            break
    return PcaProjection(basis=basis[:, :m], eigenvalues=vals[:m], retention=float(kept))


def kappa_pca(R, retention_target=0.8, *, eps_clamp=EPS_CLAMP, kappa_max=KAPPA_MAX):
    """Concentrations re-estimated in a reduced principal subspace.

    Returns the kappa array and the fitted :class:`PcaProjection`.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValueError("kappa_pca needs at least two components")
    pca = fit_pca(R, retention_target)
    norms = np.linalg.norm(R @ pca.basis, axis=1)
    kappa = np.array([estimate_kappa(n, pca.d_pca, eps_clamp, kappa_max) for n in norms])
    return kappa, pca


# -- snapshots ----------------------------------------------------------------

def save_snapshot(state, path):
    """Binary snapshot: magic, u32 version/K/d, then per component kappa, alpha, mu, r."""
    k, d = state.n_components, state.dim
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<III", SNAPSHOT_VERSION, k, d))
        for j in range(k):
            fh.write(struct.pack("<dd", state.kappa[j], state.alpha[j]))
            fh.write(np.ascontiguousarray(state.mu[j], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(state.r[j], dtype="<f8").tobytes())


def load_snapshot(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SNAPSHOT_MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte 0 (expected {SNAPSHOT_MAGIC!r})")
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header at byte {len(blob)}")
    version, k, d = struct.unpack_from("<III", blob, 4)
    if version != SNAPSHOT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 4")
    rec = 16 + 16 * d
    if len(blob) != 16 + k * rec:
        raise DataFormatError(f"{path}: expected {16 + k * rec} bytes, found {len(blob)}")
    body = np.frombuffer(blob, dtype="<f8", offset=16).reshape(k, 2 + 2 * d)
    kappa, alpha = body[:, 0].copy(), body[:, 1].copy()
    mu, r = body[:, 2:2 + d].copy(), body[:, 2 + d:].copy()
    return MixtureState(ids=np.arange(k, dtype=np.int64), mu=mu, kappa=kappa, r=r,
                        alpha=alpha, counts=alpha.copy())


def snapshot_to_dict(state):
    return {
        "format": "siammm-mixture",
        "version": SNAPSHOT_VERSION,
        "K": int(state.n_components),
        "d": int(state.dim),
        "epoch": int(state.epoch),
        "components": [
            {"id": c.id, "kappa": c.kappa, "alpha": c.alpha, "member_count": c.member_count,
             "mu": c.mu.tolist(), "r": c.r.tolist()}
            for c in state.components
        ],
    }


def save_snapshot_json(state, path):
    with open(path, "w") as fh:
        json.dump(snapshot_to_dict(state), fh, indent=1)


# -- estimator ----------------------------------------------------------------

class VonMisesFisherMixture(ClusterMixin, DensityMixin, BaseEstimator):
    """EM for a vMF mixture with optional merging of nearby components.

    Parameters
    ----------
    n_components : int
        Initial number of components.
    assign_mode : {"soft", "hard"}
        Full posterior EM or hard nearest-centroid (spherical k-means) EM.
    max_iter : int
        Number of E/M iterations.
    merge : bool
        Run a merge pass after every M-step.
    kappa_mode : {"plain", "pca"}
        Concentration estimator.
    normalize : bool
        L2-normalize the rows of ``X`` before fitting.
    """

    def __init__(self, n_components=8, *, assign_mode="soft", max_iter=100, merge=False,
                 merge_mode="zscore", zeta=-1.2, percentile=0.10, kappa_mode="plain",
                 pca_retention=0.8, kappa0=10.0, min_count=2.0, normalize=True,
                 random_state=None):
        self.n_components = n_components
        self.assign_mode = assign_mode
        self.max_iter = max_iter
        self.merge = merge
        self.merge_mode = merge_mode
        self.zeta = zeta
        self.percentile = percentile
        self.kappa_mode = kappa_mode
        self.pca_retention = pca_retention
        self.kappa0 = kappa0
        self.min_count = min_count
        self.normalize = normalize
        self.random_state = random_state

    def _prepare(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.normalize:
            X = normalize_rows(X)
        return check_embeddings(X)

    def fit(self, X, y=None):
        if self.assign_mode not in ("soft", "hard"):
            raise ValueError(f"unknown assign_mode {self.assign_mode!r}")
        X = self._prepare(X)
        rng = check_random_state(self.random_state)
        state = init_centroids(X, self.n_components, rng, kappa0=self.kappa0)
        merge_cfg = MergeConfig(self.merge_mode, self.zeta, self.percentile)
        history, ks = [], []
        for it in range(self.max_iter):
            if self.assign_mode == "soft":
                target = responsibilities(X, state)
            else:
                target = e_step_hard(X, state)
            state = m_step(X, target, state, kappa_mode=self.kappa_mode,
                           retention=self.pca_retention, min_count=self.min_count)
            if self.merge:
                state, _ = merge_pass(state, merge_cfg)
            state.epoch = it + 1
            history.append(log_likelihood(X, state))
            ks.append(state.n_components)
        self.state_ = state
        self.log_likelihood_ = history
        self.n_components_history_ = ks
        self.n_iter_ = self.max_iter
        self.labels_ = state.assignments.copy()
        return self

    @property
    def cluster_centers_(self):
        check_is_fitted(self, "state_")
        return self.state_.mu

    @property
    def concentrations_(self):
        check_is_fitted(self, "state_")
        return self.state_.kappa

    @property
    def weights_(self):
        check_is_fitted(self, "state_")
        return self.state_.alpha

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = self._prepare(X)
        if self.assign_mode == "soft":
            return self.state_.ids[np.argmax(responsibilities(X, self.state_), axis=1)]
        return e_step_hard(X, self.state_)

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        return responsibilities(self._prepare(X), self.state_)

    def score_samples(self, X):
        check_is_fitted(self, "state_")
        X = self._prepare(X)
        return logsumexp(_log_joint(X, self.state_), axis=1)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
