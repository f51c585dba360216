"""Training loop: cluster the momentum embeddings, refit the mixture, train the
encoder on the combined objective, then merge nearby components.
"""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import losses
from .encoder import SiameseNet, augment, backward, forward, momentum_update, save_checkpoint, sgd_step
from .errors import NumericalError
from .mixture import (MergeConfig, e_step_hard, init_centroids, log_likelihood, m_step,
                      merge_pass, responsibilities, save_snapshot, save_snapshot_json)
from .vmf import EPS_CLAMP, KAPPA_MAX

logger = logging.getLogger(__name__)

LOSS_MODES = ("siammm", "siammm_no_inst", "nce1", "nce2", "inst_only")
ASSIGN_MODES = ("hard_cosine", "posterior")
KAPPA_MODES = ("plain", "pca")
CENTROID_MODES = ("consistent", "reinit")


@dataclass
class TrainConfig:
    k0: int = 100
    h: int = 5
    tau: float = 0.02
    merge: bool = True
    merge_mode: str = "zscore"
    zeta: float = -1.2
    percentile: float = 0.10
    m: float = 0.99
    lr_base: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0
    sigma_aug: float = 0.1
    p_drop: float = 0.1
    kappa_mode: str = "plain"
    pca_retention: float = 0.8
    loss_mode: str = "siammm"
    assign_mode: str = "hard_cosine"
    weight_grad: str = "through_pi"
    size_weights: bool = False
    centroid_mode: str = "consistent"
    em_iters: int = 1
    kappa0: float = 10.0
    min_count: float = 2.0
    hidden: int = 64
    embed_dim: int = 16
    kappa_max: float = KAPPA_MAX
    eps_clamp: float = EPS_CLAMP
    grad_clip: float = 0.0
    init: str = "looks_linear"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name, allowed in (("loss_mode", LOSS_MODES), ("assign_mode", ASSIGN_MODES),
                              ("kappa_mode", KAPPA_MODES), ("centroid_mode", CENTROID_MODES),
                              ("weight_grad", (losses.THROUGH_PI, losses.DETACHED)),
                              ("merge_mode", ("zscore", "percentile")),
                              ("init", ("looks_linear", "he"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("k0", "h", "batch_size", "em_iters", "hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.tau <= 0 or self.lr_base < 0:
            raise ValueError("tau must be positive and lr_base non-negative")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("m must lie in [0, 1]")
        if not 0.0 <= self.p_drop <= 1.0 or self.sigma_aug < 0:
            raise ValueError("augmentation parameters out of range")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative (0 disables clipping)")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class EpochReport:
    epoch: int
    K: int
    log_likelihood: float
    mean_loss: float
    merges: int
    wall_time: float

    def deterministic(self):
        d = asdict(self)
        d.pop("wall_time")
        return d


def _lr_at(config, step, total_steps):
    base = config.lr_base * config.batch_size / 256.0
    if total_steps <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def steps_per_epoch(n, batch_size):
    return max(1, math.ceil(n / batch_size)) if n else 0


def _batch_objective(config, state, V1, V2, V1m, V2m, assign_pos):
    """Mean loss over the batch and gradients for the two online embeddings."""
    b = V1.shape[0]
    mode = config.loss_mode
    value = np.zeros(b)
    G1 = np.zeros_like(V1)
    G2 = np.zeros_like(V2)
    if mode in ("siammm", "siammm_no_inst"):
        h = min(config.h, state.n_components)
        for V, G in ((V1, G1), (V2, G2)):
            val, g = losses.cluster_loss_batch(V, state, h, config.tau,
                                               weight_grad=config.weight_grad,
                                               size_weights=config.size_weights)
            value += val
            G += g
    elif mode == "nce1":
        for V, G in ((V1, G1), (V2, G2)):
            val, g = losses.nce_centroid_loss_batch(V, assign_pos, state)
            value += val
            G += g
    elif mode == "nce2":
        mu = state.mu[assign_pos]
        kap = state.kappa[assign_pos]
        neg_mask = assign_pos[:, None] != assign_pos[None, :]
        # Negatives are the other view's momentum embeddings of out-of-cluster samples.
        for V, G, pool in ((V1, G1, V2m), (V2, G2, V1m)):
            val, g = losses.nce_instance_loss_batch(V, pool, mu, kap, neg_mask)
            value += val
            G += g
    if mode != "siammm_no_inst":
        val, g = losses.instance_loss_batch(V1, V2, V1m, V2m)
        value += val
        G1 += g[0]
        G2 += g[1]
    return float(value.mean()), G1 / b, G2 / b


def clip_gradients(grads, max_norm):
    """Rescale the whole gradient list to a global L2 norm of at most ``max_norm``."""
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def _refit(Vm, state, config):
    kw = dict(kappa_mode=config.kappa_mode, retention=config.pca_retention,
              min_count=config.min_count, eps_clamp=config.eps_clamp,
              kappa_max=config.kappa_max)
    for _ in range(config.em_iters):
        if config.assign_mode == "posterior":
            state = m_step(Vm, responsibilities(Vm, state), state, **kw)
        else:
            state = m_step(Vm, e_step_hard(Vm, state), state, **kw)
    return state


def run_epoch(X, net, state, config, rng, epoch=0):
    """One training epoch; returns ``(net, state, report)``.

    ``epoch`` is the zero-based index used by the learning-rate schedule.
    """
    t0 = time.perf_counter()
    n = X.shape[0]
    Vm = net.embed(X, "momentum")
    if config.centroid_mode == "reinit":
        state = init_centroids(Vm, state.n_components, rng, kappa0=config.kappa0)
    state = _refit(Vm, state, config)
    assign_pos = state.positions(state.assignments)

    spe = steps_per_epoch(n, config.batch_size)
    total_steps = spe * config.epochs
    order = rng.permutation(n)
    loss_sum = 0.0
    for s in range(spe):
        idx = order[s * config.batch_size:(s + 1) * config.batch_size]
        X1, X2 = augment(X[idx], rng, config.sigma_aug, config.p_drop)
        V1, V2, V1m, V2m, tape = forward(net, X1, X2)
        value, G1, G2 = _batch_objective(config, state, V1, V2, V1m, V2m, assign_pos[idx])
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at epoch {epoch}, step {s}")
        grads = clip_gradients(backward(net, tape, G1, G2), config.grad_clip)
        sgd_step(net, grads, _lr_at(config, epoch * spe + s, total_steps),
                 config.sgd_momentum, config.weight_decay)
        momentum_update(net)
        loss_sum += value * idx.size

    merges = 0
    if config.merge:
        state, merges = merge_pass(state, MergeConfig(config.merge_mode, config.zeta,
                                                      config.percentile),
                                   eps_clamp=config.eps_clamp, kappa_max=config.kappa_max)
    state.epoch = epoch + 1
    report = EpochReport(epoch=epoch + 1, K=state.n_components,
                         log_likelihood=log_likelihood(Vm, state),
                         mean_loss=loss_sum / n if n else 0.0, merges=merges,
                         wall_time=time.perf_counter() - t0)
    logger.info("epoch %d: K=%d loss=%.4f merges=%d", report.epoch, report.K,
                report.mean_loss, merges)
    return net, state, report


def _streams(seed):
    net_ss, init_ss, train_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(net_ss), np.random.default_rng(init_ss),
            np.random.default_rng(train_ss))


def fit(X, config, callback=None):
    """Full training run; returns ``(net, state, history)``.

    The mixture is seeded exactly once from the initial momentum embeddings;
    afterwards components are only refit, merged or dropped.
    """
    X = check_array(X, dtype=np.float64)
    if config.k0 > X.shape[0]:
        raise ValueError(f"k0={config.k0} exceeds the number of samples {X.shape[0]}")
    net_rng, init_rng, train_rng = _streams(config.seed)
    net = SiameseNet.build(X.shape[1], hidden=config.hidden, embed_dim=config.embed_dim,
                           m=config.m, rng=net_rng, init=config.init)
    state = init_centroids(net.embed(X, "momentum"), config.k0, init_rng, kappa0=config.kappa0)
    history = []
    for epoch in range(config.epochs):
        net, state, report = run_epoch(X, net, state, config, train_rng, epoch)
        history.append(report)
        if callback is not None:
            callback(report)
    return net, state, history


def write_run_outputs(out_dir, net, state, history, k0):
    """Trajectory, cluster-count curve, mixture snapshot and checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectory.jsonl", "w") as fh:
        for rep in history:
            fh.write(json.dumps(asdict(rep)) + "\n")
    with open(out / "clusters.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "K"])
        w.writerow([0, int(k0)])
        for rep in history:
            w.writerow([rep.epoch, rep.K])
    save_snapshot(state, out / "mixture.smm1")
    save_snapshot_json(state, out / "mixture.json")
    save_checkpoint(net, out / "checkpoint.smmc")


class SiamMM(ClusterMixin, TransformerMixin, BaseEstimator):
    """Siamese encoder trained jointly with a merging vMF mixture.

    ``fit`` trains on raw feature rows; ``transform`` returns unit embeddings
    from the momentum branch and ``predict`` the nearest surviving component
    id.  All hyperparameters mirror :class:`TrainConfig`.
    """

    def __init__(self, k0=100, h=5, tau=0.02, merge=True, merge_mode="zscore", zeta=-1.2,
                 percentile=0.10, m=0.99, lr_base=0.05, sgd_momentum=0.9, weight_decay=1e-6,
                 batch_size=256, epochs=30, seed=0, sigma_aug=0.1, p_drop=0.1,
                 kappa_mode="plain", pca_retention=0.8, loss_mode="siammm",
                 assign_mode="hard_cosine", weight_grad="through_pi", size_weights=False,
                 centroid_mode="consistent", em_iters=1, kappa0=10.0, min_count=2.0,
                 hidden=64, embed_dim=16, kappa_max=KAPPA_MAX, eps_clamp=EPS_CLAMP,
                 grad_clip=0.0, init="looks_linear"):
        self.k0 = k0
        self.h = h
        self.tau = tau
        self.merge = merge
        self.merge_mode = merge_mode
        self.zeta = zeta
        self.percentile = percentile
        self.m = m
        self.lr_base = lr_base
        self.sgd_momentum = sgd_momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.sigma_aug = sigma_aug
        self.p_drop = p_drop
        self.kappa_mode = kappa_mode
        self.pca_retention = pca_retention
        self.loss_mode = loss_mode
        self.assign_mode = assign_mode
        self.weight_grad = weight_grad
        self.size_weights = size_weights
        self.centroid_mode = centroid_mode
        self.em_iters = em_iters
        self.kappa0 = kappa0
        self.min_count = min_count
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.kappa_max = kappa_max
        self.eps_clamp = eps_clamp
        self.grad_clip = grad_clip
        self.init = init

    def config(self):
        return TrainConfig(**self.get_params())

    @classmethod
    def from_config(cls, config):
        return cls(**asdict(config))

    def fit(self, X, y=None):
        self.net_, self.state_, self.history_ = fit(X, self.config())
        self.n_features_in_ = np.asarray(X).shape[1]
        self.labels_ = self.state_.assignments.copy()
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return self.net_.embed(check_array(X, dtype=np.float64), "momentum")

    def predict(self, X):
        return e_step_hard(self.transform(X), self.state_)

    @property
    def n_clusters_(self):
        check_is_fitted(self, "state_")
        return self.state_.n_components
