"""Two-parameter logistic (2PL) measurement model for dichotomous indicators.

The probability of a correct response to item k given a latent value t is

    P_k(t) = exp(a_k * t + c_k) / (1 + exp(a_k * t + c_k)),

with slope a_k > 0 and intercept c_k. In the multilevel setting the latent
value of individual i in cluster j decomposes as t = theta_j + delta_ij; the
item parameters are shared across levels. Items are conditionally independent
given t, so pattern log-likelihoods are sums of per-item terms.

All functions here are pure and accept scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MeasurementParams",
    "ResponseMatrix",
    "prob_2pl",
    "item_loglik",
    "item_grad_hess",
    "pattern_loglik",
    "item_grad_hess_sum",
]


@dataclass(frozen=True)
class MeasurementParams:
    """Item slopes and intercepts of a 2PL test."""

    slopes: np.ndarray
    intercepts: np.ndarray

    def __post_init__(self):
        slopes = np.atleast_1d(np.asarray(self.slopes, dtype=float))
        intercepts = np.atleast_1d(np.asarray(self.intercepts, dtype=float))
        if slopes.ndim != 1 or intercepts.ndim != 1:
            raise ValueError("slopes and intercepts must be one-dimensional")
        if slopes.shape != intercepts.shape:
            raise ValueError(
                f"slopes and intercepts must have equal length, "
                f"got {slopes.shape[0]} and {intercepts.shape[0]}"
            )
        if slopes.size < 1:
            raise ValueError("at least one item is required")
        if not np.all(np.isfinite(slopes)) or not np.all(np.isfinite(intercepts)):
            raise ValueError("item parameters must be finite")
        if np.any(slopes <= 0):
            raise ValueError("all slopes must be strictly positive")
        object.__setattr__(self, "slopes", slopes)
        object.__setattr__(self, "intercepts", intercepts)

    @property
    def n_items(self) -> int:
        return self.slopes.shape[0]

    @property
    def difficulties(self) -> np.ndarray:
        """b_k = -c_k / a_k."""
        return -self.intercepts / self.slopes


@dataclass(frozen=True)
class ResponseMatrix:
    """Binary item responses, flattened over individuals with cluster sizes.

    `values[n, k]` is the response of the n-th individual (clusters stored
    contiguously) to item k; `cluster_sizes[j]` gives the number of
    individuals in cluster j.
    """

    values: np.ndarray
    cluster_sizes: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array (individuals x items)")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("responses must be 0 or 1")
        values = values.astype(np.int8)
        if self.cluster_sizes is None:
            sizes = np.array([values.shape[0]], dtype=int)
        else:
            sizes = np.asarray(self.cluster_sizes, dtype=int)
        if np.any(sizes <= 0):
            raise ValueError("cluster sizes must be positive")
        if sizes.sum() != values.shape[0]:
            raise ValueError(
                f"cluster sizes sum to {sizes.sum()} but there are "
                f"{values.shape[0]} response rows"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "cluster_sizes", sizes)

    @property
    def n_items(self) -> int:
        return self.values.shape[1]

    @property
    def n_clusters(self) -> int:
        return self.cluster_sizes.shape[0]


def _logistic(z):
    """Numerically stable logistic function, elementwise."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_p_and_q(z):
    """(log P, log(1-P)) for P = logistic(z), stable for |z| up to ~700."""
    z = np.asarray(z, dtype=float)
    log_p = np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))), z - np.log1p(np.exp(-np.abs(z))))
    log_q = log_p - z
    return log_p, log_q


def prob_2pl(a, c, theta):
    """Probability of a correct response under the 2PL model.

    Stable for exponents a*theta + c of magnitude up to ~700.
    """
    a_arr = np.asarray(a, dtype=float)
    c_arr = np.asarray(c, dtype=float)
    t_arr = np.asarray(theta, dtype=float)
    for name, arr in (("a", a_arr), ("c", c_arr), ("theta", t_arr)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} must be finite")
    if np.any(a_arr <= 0):
        raise ValueError("slope a must be strictly positive")
    p = _logistic(a_arr * t_arr + c_arr)
    if p.ndim == 0:
        return float(p)
    return p


def item_loglik(responses, params: MeasurementParams, theta_total: float) -> float:
    """Log-likelihood of one response pattern at a given latent value.

    Sum over items of x*log(P) + (1-x)*log(1-P), computed through log1p
    forms so extreme latent values do not overflow.
    """
    x = np.asarray(responses)
    if x.shape != (params.n_items,):
        raise ValueError(
            f"expected {params.n_items} responses, got shape {x.shape}"
        )
    if not np.isin(x, (0, 1)).all():
        raise ValueError("responses must be 0 or 1")
    if not np.isfinite(theta_total):
        raise ValueError("theta_total must be finite")
    z = params.slopes * float(theta_total) + params.intercepts
    log_p, log_q = _log_p_and_q(z)
    return float(np.sum(np.where(x == 1, log_p, log_q)))


def pattern_loglik(responses: np.ndarray, slopes, intercepts, theta_total) -> np.ndarray:
    """Vectorized pattern log-likelihoods.

    responses: (N, K) in {0,1}; theta_total: (N,). Returns (N,).
    """
    z = np.multiply.outer(np.asarray(theta_total, dtype=float), np.asarray(slopes, dtype=float))
    z += np.asarray(intercepts, dtype=float)
    log_p, log_q = _log_p_and_q(z)
    x = np.asarray(responses)
    return np.sum(np.where(x == 1, log_p, log_q), axis=-1)


def _grad_hess_terms(x, p, t):
    """Per-observation pieces of the item derivative assembly.

    With P = logistic(a*t + c) and residual r = x - P:
        dl/da = r * t,  dl/dc = r
    and the second-derivative assembly
        d2l/d(a,c)2 = [ -x(1-P)^2 - (1-x)P^2 + r(1-2P) ] * {t^2, t, 1},
    grouping the 1/P^2 and 1/(1-P)^2 factors against (P(1-P))^2 so the
    expression stays finite when P approaches 0 or 1.
    """
    r = x - p
    curv = -x * (1.0 - p) ** 2 - (1.0 - x) * p**2 + r * (1.0 - 2.0 * p)
    return r, curv


def item_grad_hess(responses, params: MeasurementParams, theta_total: float):
    """Gradient and Hessian of `item_loglik` in the item parameters.

    Parameter order is [a_1..a_K, c_1..c_K]; cross-item blocks are zero.
    """
    x = np.asarray(responses, dtype=float)
    if x.shape != (params.n_items,):
        raise ValueError(
            f"expected {params.n_items} responses, got shape {x.shape}"
        )
    t = float(theta_total)
    k = params.n_items
    p = _logistic(params.slopes * t + params.intercepts)
    r, curv = _grad_hess_terms(x, p, t)

    grad = np.concatenate([r * t, r])
    hess = np.zeros((2 * k, 2 * k))
    idx = np.arange(k)
    hess[idx, idx] = curv * t * t
    hess[k + idx, k + idx] = curv
    hess[idx, k + idx] = curv * t
    hess[k + idx, idx] = curv * t
    return grad, hess


def item_grad_hess_sum(responses: np.ndarray, slopes, intercepts, theta_total):
    """Item-parameter gradient and Hessian summed over many individuals.

    responses: (N, K); theta_total: (N,). Returns (grad (2K,), hess (2K, 2K))
    in the order [a_1..a_K, c_1..c_K]. The Hessian is block-diagonal by item.
    """
    x = np.asarray(responses, dtype=float)
    t = np.asarray(theta_total, dtype=float)[:, None]
    z = t * np.asarray(slopes, dtype=float) + np.asarray(intercepts, dtype=float)
    p = _logistic(z)
    r, curv = _grad_hess_terms(x, p, t)

    k = x.shape[1]
    grad = np.concatenate([np.sum(r * t, axis=0), np.sum(r, axis=0)])
    haa = np.sum(curv * t * t, axis=0)
    hac = np.sum(curv * t, axis=0)
    hcc = np.sum(curv, axis=0)
    hess = np.zeros((2 * k, 2 * k))
    idx = np.arange(k)
    hess[idx, idx] = haa
    hess[k + idx, k + idx] = hcc
    hess[idx, k + idx] = hac
    hess[k + idx, idx] = hac
    return grad, hess
