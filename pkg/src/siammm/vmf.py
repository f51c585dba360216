"""von Mises-Fisher distribution on the unit hypersphere.

Everything is evaluated in log space.  The normalizer needs ``log I_nu(kappa)``
for ``nu = d/2 - 1``; a power series covers small and moderate arguments and
the Debye uniform asymptotic expansion (or the Hankel expansion when
``nu == 0``) covers the rest.
"""

from dataclasses import dataclass
from math import lgamma, log, pi

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import gammaln, logsumexp

from ._validation import UNIT_ATOL, check_random_state
from .errors import DegenerateResultantError

KAPPA_MAX = 1e5
EPS_CLAMP = 1e-6
EPS_R = 1e-12

_DEBYE_TERMS = 14
_HANKEL_TERMS = 40


def _debye_polynomials(n):
    # u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + 1/8 int_0^t (1 - 5 s^2) u_k(s) ds
    polys = [Polynomial([1.0])]
    half_t2 = Polynomial([0, 0, 0.5, 0, -0.5])
    weight = Polynomial([1.0, 0, -5.0])
    for _ in range(n - 1):
        u = polys[-1]
        nxt = half_t2 * u.deriv() + (weight * u).integ() / 8.0
        polys.append(nxt)
    return polys


_U = _debye_polynomials(_DEBYE_TERMS)


def _series_log_sum(nu, x):
    """log of sum_m (x^2/4)^m / (m! Gamma(m + nu + 1))."""
    if x == 0.0:
        return -lgamma(nu + 1.0)
    n_terms = int(2.0 * x + 60)
    m = np.arange(n_terms, dtype=np.float64)
    terms = 2.0 * m * log(x / 2.0) - gammaln(m + 1.0) - gammaln(m + nu + 1.0)
    return float(logsumexp(terms))


def _debye_log_iv(nu, x):
    z = x / nu
    root = np.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root + log(z / (1.0 + root))
    corr = 0.0
    for k, u in enumerate(_U):
        corr += u(t) / nu**k
    return nu * eta - 0.5 * log(2.0 * pi * nu) - 0.5 * log(root) + log(corr)


def _hankel_log_iv(nu, x):
    mu = 4.0 * nu * nu
    term, total = 1.0, 1.0
    for k in range(1, _HANKEL_TERMS):
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        if abs(nxt) > abs(term):
            break
        term = nxt
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return x - 0.5 * log(2.0 * pi * x) + log(total)


def _use_series(nu, x):
    return x <= 20.0 * max(1.0, nu)


def log_bessel_iv(nu, x):
    """``log I_nu(x)`` for ``nu >= 0`` and ``x > 0``."""
    nu = float(nu)
    x = float(x)
    if nu < 0 or not np.isfinite(x) or x <= 0:
        raise ValueError(f"log_bessel_iv needs nu >= 0 and finite x > 0, got ({nu}, {x})")
    if _use_series(nu, x):
        return nu * log(x / 2.0) + _series_log_sum(nu, x)
    if nu == 0.0:
        return _hankel_log_iv(nu, x)
    return _debye_log_iv(nu, x)


def _check_dim_kappa(d, kappa):
    if int(d) != d or d < 2:
        raise ValueError(f"dimension must be an integer >= 2, got {d}")
    if not np.isfinite(kappa) or kappa < 0:
        raise ValueError(f"kappa must be finite and non-negative, got {kappa}")


def log_norm_const(d, kappa):
    """Log of the vMF normalizer ``c_d(kappa)``.

    At ``kappa == 0`` this is minus the log surface area of the unit sphere.
    """
    _check_dim_kappa(d, kappa)
    kappa = float(kappa)
    nu = d / 2.0 - 1.0
    if _use_series(nu, kappa):
        # kappa^nu cancels against the leading factor of the series.
        return nu * log(2.0) - (d / 2.0) * log(2.0 * pi) - _series_log_sum(nu, kappa)
    return nu * log(kappa) - (d / 2.0) * log(2.0 * pi) - log_bessel_iv(nu, kappa)


@dataclass(frozen=True)
class VmfParams:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise ValueError("mu must be a vector of dimension >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > UNIT_ATOL:
            raise ValueError("mu must have unit norm")
        if not np.isfinite(self.kappa) or self.kappa < 0 or self.kappa > KAPPA_MAX:
            raise ValueError(f"kappa must lie in [0, {KAPPA_MAX}], got {self.kappa}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self):
        return self.mu.shape[0]


def log_density(v, params):
    """Log-density of unit vector(s) ``v`` under ``params``.

    ``v`` may be a single vector or an ``(n, d)`` array.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != params.dim:
        raise ValueError(f"dimension mismatch: v has {v.shape[-1]}, mu has {params.dim}")
    return log_norm_const(params.dim, params.kappa) + params.kappa * (v @ params.mu)


def estimate_mean(points, weights=None, eps_r=EPS_R):
    """Weighted resultant ``r`` and mean direction ``r / ||r||``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    if weights is None:
        weights = np.ones(points.shape[0])
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (points.shape[0],):
        raise ValueError("weights and points have different lengths")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    total = weights.sum()
    if not total > 0:
        raise ValueError("at least one weight must be positive")
    r = weights @ points / total
    norm = np.linalg.norm(r)
    if norm < eps_r:
        raise DegenerateResultantError(f"resultant length {norm:.3g} below {eps_r:g}")
    return r, r / norm


def estimate_kappa(r_norm, d, eps_clamp=EPS_CLAMP, kappa_max=KAPPA_MAX):
    """Closed-form concentration estimate from the mean resultant length."""
    if r_norm < 0:
        raise ValueError("r_norm must be non-negative")
    # d may be 1 when a one-dimensional principal subspace is used.
    if d < 1:
        raise ValueError("dimension must be >= 1")
    rbar = min(float(r_norm), 1.0 - eps_clamp)
    kappa = (rbar * d - rbar**3) / (1.0 - rbar * rbar)
    return float(min(max(kappa, 0.0), kappa_max))


def _sample_cosines(kappa, d, n, rng):
    # Wood (1994) rejection sampler for w = mu^T x.
    if n == 0:
        return np.empty(0)
    dm1 = d - 1.0
    b = dm1 / (2.0 * kappa + np.sqrt(4.0 * kappa * kappa + dm1 * dm1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dm1 * np.log(1.0 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        z = rng.beta(dm1 / 2.0, dm1 / 2.0, size=need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=need)
        ok = kappa * w + dm1 * np.log(1.0 - x0 * w) - c >= np.log(u)
        take = w[ok]
        out[filled:filled + take.size] = take
        filled += take.size
    return out


def sample_vmf(params, n, rng=None):
    """Draw ``n`` samples from vMF(mu, kappa) as an ``(n, d)`` array."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = check_random_state(rng)
    d = params.dim
    if n == 0:
        return np.empty((0, d))
    w = _sample_cosines(params.kappa, d, n, rng)
    tang = rng.standard_normal((n, d - 1))
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    x = np.empty((n, d))
    x[:, 0] = w
    x[:, 1:] = np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * tang
    # Householder reflection taking e1 to mu.
    e1 = np.zeros(d)
    e1[0] = 1.0
    u = e1 - params.mu
    un = np.linalg.norm(u)
    if un > 1e-14:
        u /= un
        x = x - 2.0 * np.outer(x @ u, u)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return x
