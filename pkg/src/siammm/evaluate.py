"""Clustering and representation quality metrics."""

import numpy as np
from scipy.special import gammaln, logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import train_test_split_indices


def _check_pair(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"labelings differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("labelings are empty")
    return a, b


def contingency_table(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def _mutual_information(table):
    n = table.sum()
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    i, j = np.nonzero(table)
    nij = table[i, j].astype(np.float64)
    return float(np.sum(nij / n * (np.log(nij) + np.log(n) - np.log(rows[i]) - np.log(cols[j]))))


def expected_mutual_information(rows, cols):
    """Expected MI of two labelings with the given marginals under random permutation."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    n = int(rows.sum())
    lg_n = gammaln(n + 1)
    total = 0.0
    for a in rows:
        for b in cols:
            lo, hi = max(1, a + b - n), min(a, b)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            log_p = (gammaln(a + 1) + gammaln(b + 1) + gammaln(n - a + 1) + gammaln(n - b + 1)
                     - lg_n - gammaln(nij + 1) - gammaln(a - nij + 1) - gammaln(b - nij + 1)
                     - gammaln(n - a - b + nij + 1))
            term = nij / n * (np.log(n) + np.log(nij) - np.log(a) - np.log(b))
            total += float(np.sum(term * np.exp(log_p)))
    return total


def ami(a, b):
    """Adjusted mutual information with the arithmetic-mean normalizer."""
    a, b = _check_pair(a, b)
    table = contingency_table(a, b)
    # A one-to-one contingency table means identical partitions.
    if np.all((table > 0).sum(axis=0) == 1) and np.all((table > 0).sum(axis=1) == 1):
        return 1.0
    n = a.size
    rows, cols = table.sum(axis=1), table.sum(axis=0)
    mi = _mutual_information(table)
    emi = expected_mutual_information(rows, cols)
    norm = 0.5 * (_entropy(rows, n) + _entropy(cols, n))
    denom = norm - emi
    if abs(denom) < np.finfo(float).eps:
        denom = np.finfo(float).eps if denom >= 0 else -np.finfo(float).eps
    return float((mi - emi) / denom)


def majority_label_accuracy(clusters, truth):
    """Accuracy after mapping every cluster to its most frequent true label."""
    clusters, truth = _check_pair(clusters, truth)
    table = contingency_table(clusters, truth)
    # Ties between labels leave the matched count unchanged.
    return float(table.max(axis=1).sum() / clusters.size)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fit by full-batch gradient descent."""

    def __init__(self, lr=0.5, max_iter=2000, l2=1e-4, tol=1e-8):
        self.lr = lr
        self.max_iter = max_iter
        self.l2 = l2
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("linear probe needs at least two classes")
        n, d = X.shape
        c = self.classes_.size
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Z = (X - self.mean_) / self.scale_
        Y = np.zeros((n, c))
        Y[np.arange(n), yi] = 1.0
        W = np.zeros((d, c))
        b = np.zeros(c)
        prev = np.inf
        for it in range(self.max_iter):
            logits = Z @ W + b
            lse = logsumexp(logits, axis=1, keepdims=True)
            P = np.exp(logits - lse)
            loss = float(np.mean(lse[:, 0] - logits[np.arange(n), yi])
                         + 0.5 * self.l2 * np.sum(W * W))
            G = (P - Y) / n
            W -= self.lr * (Z.T @ G + self.l2 * W)
            b -= self.lr * G.sum(axis=0)
            if prev - loss < self.tol:
                break
            prev = loss
        self.coef_, self.intercept_, self.n_iter_ = W, b, it + 1
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def linear_probe(embeddings, truth, test_fraction=0.2, seed=0, **probe_params):
    """Test accuracy of a linear probe on a seeded train/test split."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(truth)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"{X.shape[0]} embeddings but {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    train, test = train_test_split_indices(X.shape[0], test_fraction, seed)
    probe = LinearProbe(**probe_params).fit(X[train], y[train])
    return float(probe.score(X[test], y[test]))
