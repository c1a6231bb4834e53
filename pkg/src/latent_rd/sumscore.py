"""Summed-score distributions and latent posteriors.

The observed running variable is an unweighted sum of item responses. Given a
latent value t, the pmf of the sum over K items follows from the
Lord-Wingersky recursion: starting from the pmf {1} for zero items, the pmf
after item k is the convolution of the pmf after item k-1 with
{1 - P_k(t), P_k(t)}.

For a cluster-level latent theta_j, the pmf of an individual's score
marginalizes the individual deviation delta ~ N(0, 1) by Gauss-Hermite
quadrature, and the cluster-average score distribution is the cluster-size-fold
convolution of that marginal pmf on the integer-total lattice. Convolutions
are exact lattice convolutions carried in a scaled representation with a log
offset, so deep tail masses remain representable in log space.

Posterior grids of theta_j given a cluster-average score value and of
delta_ij given an individual score value supply the conditional moments and
quantiles that treatment-effect extrapolation needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .measurement import MeasurementParams, _logistic

__all__ = [
    "DEFAULT_QUAD_SIZE",
    "DegeneratePosteriorError",
    "SumScorePmf",
    "PosteriorGrid",
    "lw_pmf",
    "marginal_pmf_given_theta_j",
    "cluster_avg_pmf",
    "posterior_theta_given_avg",
    "posterior_delta_given_sum",
    "HrdScoreTable",
    "MrdScoreTable",
    "prob_treated_given_cluster_latent",
    "prob_treated_given_individual_latent",
    "log_prob_cluster_avg_at_or_below",
]

DEFAULT_QUAD_SIZE = 49


class DegeneratePosteriorError(ValueError):
    """Raised when a conditioning score value carries no posterior mass."""


@lru_cache(maxsize=32)
def _gh_rule(n: int):
    """Gauss-Hermite nodes/weights normalized for a standard normal law."""
    x, w = np.polynomial.hermite.hermgauss(n)
    nodes = np.sqrt(2.0) * x
    weights = w / np.sqrt(np.pi)
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _logsumexp(a, axis=None):
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


@dataclass(frozen=True)
class SumScorePmf:
    """Distribution of a summed score on the lattice support/scale.

    `support` holds integer totals; the score value of entry s is
    support[s] / scale (scale = 1 for individual scores, cluster size for
    cluster averages). `log_probs` stays finite wherever the mass is
    representable in log space even when `probs` underflows to zero.
    """

    support: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    scale: int = 1

    def __post_init__(self):
        total = float(np.sum(self.probs))
        if not np.isclose(total, 1.0, atol=1e-10):
            raise ValueError(f"probabilities sum to {total}, expected 1")
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be nonnegative")

    @property
    def values(self) -> np.ndarray:
        """Score values (totals divided by the lattice scale)."""
        return self.support / self.scale

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def cdf_at_or_below(self, cutoff: float) -> float:
        mask = self.values <= cutoff + 1e-9
        return float(np.sum(self.probs[mask]))


@dataclass(frozen=True)
class PosteriorGrid:
    """Discrete posterior over latent nodes with moment and quantile access."""

    nodes: np.ndarray
    weights: np.ndarray
    mean: float = field(init=False)
    variance: float = field(init=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("nodes and weights must be matching 1-d arrays")
        total = float(weights.sum())
        if not np.isclose(total, 1.0, atol=1e-10):
            raise ValueError(f"posterior weights sum to {total}, expected 1")
        mean = float(np.dot(nodes, weights))
        var = float(np.dot((nodes - mean) ** 2, weights))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", max(var, 0.0))

    def quantile(self, alpha: float) -> float:
        return grid_quantile(self.nodes, self.weights, alpha)


def grid_quantile(nodes, weights, alpha: float) -> float:
    """Left-continuous inverse CDF with linear interpolation between nodes."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(nodes, kind="stable")
    nodes = nodes[order]
    weights = weights[order]
    cdf = np.cumsum(weights)
    cdf = cdf / cdf[-1]
    return float(np.interp(alpha, cdf, nodes))


def _lw_probs_multi(slopes, intercepts, theta_totals) -> np.ndarray:
    """Summed-score pmfs for many latent values at once: (M, K+1)."""
    t = np.atleast_1d(np.asarray(theta_totals, dtype=float))
    slopes = np.asarray(slopes, dtype=float)
    intercepts = np.asarray(intercepts, dtype=float)
    k = slopes.shape[0]
    pmf = np.zeros((t.shape[0], k + 1))
    pmf[:, 0] = 1.0
    for item in range(k):
        p = _logistic(slopes[item] * t + intercepts[item])[:, None]
        head = pmf[:, : item + 1]
        new = np.zeros((t.shape[0], item + 2))
        new[:, : item + 1] = head * (1.0 - p)
        new[:, 1 : item + 2] += head * p
        pmf[:, : item + 2] = new
    return pmf


def lw_pmf(params: MeasurementParams, theta_total: float) -> SumScorePmf:
    """Exact summed-score pmf over 0..K at one latent value."""
    if not np.isfinite(theta_total):
        raise ValueError("theta_total must be finite")
    probs = _lw_probs_multi(params.slopes, params.intercepts, [float(theta_total)])[0]
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    return SumScorePmf(np.arange(params.n_items + 1), probs, log_probs)


def marginal_pmf_given_theta_j(
    params: MeasurementParams, theta_j: float, quad_size: int = DEFAULT_QUAD_SIZE
) -> SumScorePmf:
    """Score pmf given the cluster latent, with delta ~ N(0,1) integrated out."""
    if quad_size < 1:
        raise ValueError("quad_size must be positive")
    nodes, weights = _gh_rule(quad_size)
    pmfs = _lw_probs_multi(params.slopes, params.intercepts, theta_j + nodes)
    probs = weights @ pmfs
    probs = probs / probs.sum()
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    return SumScorePmf(np.arange(params.n_items + 1), probs, log_probs)


def _log_convolve_power(log_pmf: np.ndarray, n: int) -> np.ndarray:
    """Log of the n-fold lattice self-convolution of exp(log_pmf).

    Linear convolutions on a max-scaled copy with a running log offset keep
    the computation exact to float precision while representing very small
    tail masses.
    """
    m = float(np.max(log_pmf))
    base = np.exp(log_pmf - m)
    acc = base.copy()
    offset = m
    for _ in range(n - 1):
        acc = np.convolve(acc, base)
        top = float(acc.max())
        acc /= top
        offset += m + np.log(top)
    with np.errstate(divide="ignore"):
        out = np.log(acc) + offset
    return out


def cluster_avg_pmf(
    params: MeasurementParams,
    theta_j: float,
    cluster_size: int,
    quad_size: int = DEFAULT_QUAD_SIZE,
) -> SumScorePmf:
    """Distribution of the cluster total score (average = total / cluster_size).

    The total over cluster_size exchangeable individuals is the
    cluster_size-fold convolution of the delta-marginal individual pmf.
    """
    if cluster_size < 1:
        raise ValueError("cluster_size must be a positive integer")
    ind = marginal_pmf_given_theta_j(params, theta_j, quad_size)
    if cluster_size == 1:
        return ind
    log_probs = _log_convolve_power(ind.log_probs, cluster_size)
    log_probs = log_probs - _logsumexp(log_probs)
    probs = np.exp(log_probs)
    support = np.arange(params.n_items * cluster_size + 1)
    return SumScorePmf(support, probs, log_probs, scale=cluster_size)


def _posterior_from_log_weights(nodes: np.ndarray, log_w: np.ndarray) -> PosteriorGrid:
    m = float(np.max(log_w))
    if not np.isfinite(m):
        raise DegeneratePosteriorError("conditioning score value has zero posterior mass")
    w = np.exp(log_w - m)
    return PosteriorGrid(nodes, w / w.sum())


class HrdScoreTable:
    """Cluster-average score pmfs tabulated over a theta quadrature grid.

    Shares the expensive per-node convolutions across repeated posterior and
    marginal queries at different score values.
    """

    def __init__(
        self,
        params: MeasurementParams,
        psi: float,
        cluster_size: int,
        quad_size: int = DEFAULT_QUAD_SIZE,
    ):
        if psi <= 0:
            raise ValueError("psi must be positive")
        self.params = params
        self.psi = float(psi)
        self.cluster_size = int(cluster_size)
        self.quad_size = int(quad_size)
        base_nodes, base_weights = _gh_rule(quad_size)
        self.theta_nodes = self.psi * base_nodes
        self.log_prior = np.log(base_weights)
        rows = [
            cluster_avg_pmf(params, t, cluster_size, quad_size).log_probs
            for t in self.theta_nodes
        ]
        self.log_pmf = np.vstack(rows)
        self.n_totals = self.log_pmf.shape[1]

    def total_of(self, s: float) -> int:
        if not 0.0 <= s <= self.params.n_items:
            raise ValueError(f"score value {s} outside [0, {self.params.n_items}]")
        return int(np.rint(s * self.cluster_size))

    def posterior(self, s: float) -> PosteriorGrid:
        log_w = self.log_prior + self.log_pmf[:, self.total_of(s)]
        return _posterior_from_log_weights(self.theta_nodes, log_w)

    def posterior_mean_var(self, totals) -> tuple[np.ndarray, np.ndarray]:
        totals = np.atleast_1d(totals).astype(int)
        log_w = self.log_prior[:, None] + self.log_pmf[:, totals]
        m = np.max(log_w, axis=0)
        w = np.exp(log_w - m)
        w /= w.sum(axis=0)
        means = self.theta_nodes @ w
        second = (self.theta_nodes**2) @ w
        return means, np.maximum(second - means**2, 0.0)

    def log_orv_marginal(self) -> np.ndarray:
        """Log pmf of the cluster-average total with theta integrated out."""
        return _logsumexp(self.log_prior[:, None] + self.log_pmf, axis=0)


class MrdScoreTable:
    """Individual score pmfs over a joint (theta, delta) quadrature grid."""

    def __init__(
        self,
        params: MeasurementParams,
        psi: float,
        quad_size: int = DEFAULT_QUAD_SIZE,
    ):
        if psi <= 0:
            raise ValueError("psi must be positive")
        self.params = params
        self.psi = float(psi)
        self.quad_size = int(quad_size)
        base_nodes, base_weights = _gh_rule(quad_size)
        self.theta_nodes = self.psi * base_nodes
        self.delta_nodes = base_nodes.copy()
        self.log_w_theta = np.log(base_weights)
        self.log_w_delta = np.log(base_weights)
        totals = np.add.outer(self.theta_nodes, self.delta_nodes).ravel()
        pmfs = _lw_probs_multi(params.slopes, params.intercepts, totals)
        with np.errstate(divide="ignore"):
            self.log_pmf = np.log(pmfs).reshape(quad_size, quad_size, -1)

    def _check_s(self, s) -> int:
        s_int = int(np.rint(s))
        if not np.isclose(s, s_int) or not 0 <= s_int <= self.params.n_items:
            raise ValueError(f"score value {s} must be an integer in [0, {self.params.n_items}]")
        return s_int

    def posterior_delta(self, s) -> PosteriorGrid:
        """Marginal posterior of delta given an individual score value."""
        s_int = self._check_s(s)
        log_joint = (
            self.log_w_theta[:, None]
            + self.log_w_delta[None, :]
            + self.log_pmf[:, :, s_int]
        )
        log_w = _logsumexp(log_joint, axis=0)
        return _posterior_from_log_weights(self.delta_nodes, log_w)

    def posterior_mean_var(self, s_values) -> tuple[np.ndarray, np.ndarray]:
        out_m, out_v = [], []
        for s in np.atleast_1d(s_values):
            grid = self.posterior_delta(s)
            out_m.append(grid.mean)
            out_v.append(grid.variance)
        return np.array(out_m), np.array(out_v)

    def log_orv_marginal(self) -> np.ndarray:
        log_joint = self.log_w_theta[:, None, None] + self.log_w_delta[None, :, None] + self.log_pmf
        return _logsumexp(log_joint.reshape(-1, self.log_pmf.shape[2]), axis=0)


def posterior_theta_given_avg(
    s: float,
    params: MeasurementParams,
    psi: float,
    cluster_size: int,
    quad_size: int = DEFAULT_QUAD_SIZE,
) -> PosteriorGrid:
    """Posterior of the cluster latent given a cluster-average score value.

    Non-lattice values of s are mapped to the nearest lattice total
    round(s * cluster_size).
    """
    table = HrdScoreTable(params, psi, cluster_size, quad_size)
    return table.posterior(s)


def posterior_delta_given_sum(
    s,
    params: MeasurementParams,
    psi: float,
    quad_size: int = DEFAULT_QUAD_SIZE,
    condition_theta: Optional[float] = None,
) -> PosteriorGrid:
    """Posterior of the individual deviation given an individual score.

    With `condition_theta` the posterior conditions on a known cluster
    latent; otherwise theta is integrated over its N(0, psi^2) prior.
    """
    if condition_theta is not None:
        s_int = int(np.rint(s))
        if not np.isclose(s, s_int) or not 0 <= s_int <= params.n_items:
            raise ValueError(f"score value {s} must be an integer in [0, {params.n_items}]")
        nodes, weights = _gh_rule(quad_size)
        pmfs = _lw_probs_multi(params.slopes, params.intercepts, condition_theta + nodes)
        with np.errstate(divide="ignore"):
            log_w = np.log(weights) + np.log(pmfs[:, s_int])
        return _posterior_from_log_weights(nodes, log_w)
    table = MrdScoreTable(params, psi, quad_size)
    return table.posterior_delta(s)


def prob_treated_given_cluster_latent(
    params: MeasurementParams,
    theta_j: float,
    cutoff: float,
    quad_size: int = DEFAULT_QUAD_SIZE,
) -> float:
    """P(individual score <= cutoff | theta_j), delta integrated out."""
    pmf = marginal_pmf_given_theta_j(params, theta_j, quad_size)
    return pmf.cdf_at_or_below(cutoff)


def prob_treated_given_individual_latent(
    params: MeasurementParams,
    delta: float,
    psi: float,
    cutoff: float,
    quad_size: int = DEFAULT_QUAD_SIZE,
) -> float:
    """P(score <= cutoff | delta), cluster latent integrated over N(0, psi^2)."""
    nodes, weights = _gh_rule(quad_size)
    pmfs = _lw_probs_multi(params.slopes, params.intercepts, psi * nodes + delta)
    probs = weights @ pmfs
    k = params.n_items
    mask = np.arange(k + 1) <= cutoff + 1e-9
    return float(probs[mask].sum() / probs.sum())


def log_prob_cluster_avg_at_or_below(
    params: MeasurementParams,
    theta_j: float,
    cutoff: float,
    cluster_size: int,
    quad_size: int = DEFAULT_QUAD_SIZE,
) -> float:
    """log P(cluster-average score <= cutoff | theta_j), exact in log space."""
    pmf = cluster_avg_pmf(params, theta_j, cluster_size, quad_size)
    mask = pmf.values <= cutoff + 1e-9
    if not mask.any():
        return -np.inf
    return float(_logsumexp(pmf.log_probs[mask]))
