"""Structural outcome models for the two multilevel RD designs.

Hierarchical design (treatment assigned to whole clusters):

    Y_ij = g00 + g_theta * theta_j + g_T * T_j + g_int * theta_j * T_j
           + g_delta * delta_ij + u_0j + eps_ij,
    eps_ij ~ N(0, sigma^2),  u_0j ~ N(0, tau0^2),  theta_j ~ N(0, psi^2),
    delta_ij ~ N(0, 1).

Multisite design (treatment assigned to individuals within clusters):

    Y_ij = g00 + g_theta * theta_j + g_delta * delta_ij
           + (g_T + u_2j) * T_ij + g_int * delta_ij * T_ij + u_0j + eps_ij,
    (u_0j, u_2j) ~ N(0, [[tau0^2, tau02], [tau02, tau2^2]]).

The module provides conditional outcome densities, potential-outcome means,
and analytic first/second derivatives of the complete-data log-likelihood in
the structural parameters (regression coefficients, residual SD, random-effect
(co)variances, and the cluster-level latent SD psi). Derivatives of the 2x2
covariance block use the duplication matrix relating vech and vec of a
symmetric matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

__all__ = [
    "HrdParams",
    "MrdParams",
    "LatentState",
    "hrd_mean",
    "mrd_mean",
    "hrd_outcome_density",
    "mrd_outcome_density",
    "structural_loglik",
    "structural_grad_hess",
    "structural_param_names",
    "duplication_matrix_2x2",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

# Duplication matrix for 2x2 symmetric matrices: vec(S) = D @ vech(S) with
# vech ordered (s11, s21, s22) and vec ordered column-major.
_D2 = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
)


def duplication_matrix_2x2() -> np.ndarray:
    return _D2.copy()


@dataclass(frozen=True)
class HrdParams:
    """Structural parameters of the hierarchical (cluster-assigned) design."""

    intercept: float = 0.0
    lrv_slope: float = 0.0
    treatment_effect: float = 0.0
    interaction: float = 0.0
    delta_slope: float = 0.0
    tau0: float = 1.0
    sigma: float = 1.0
    psi: float = 1.0

    def __post_init__(self):
        for name in ("tau0", "sigma", "psi"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be a positive real, got {v!r}")

    @property
    def coefficients(self) -> np.ndarray:
        return np.array(
            [
                self.intercept,
                self.lrv_slope,
                self.treatment_effect,
                self.interaction,
                self.delta_slope,
            ]
        )


@dataclass(frozen=True)
class MrdParams:
    """Structural parameters of the multisite (individual-assigned) design."""

    intercept: float = 0.0
    theta_slope: float = 0.0
    delta_slope: float = 0.0
    treatment_effect: float = 0.0
    interaction: float = 0.0
    tau0: float = 1.0
    tau2: float = 1.0
    tau02: float = 0.0
    sigma: float = 1.0
    psi: float = 1.0

    def __post_init__(self):
        for name in ("tau0", "tau2", "sigma", "psi"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be a positive real, got {v!r}")
        if self.tau0**2 * self.tau2**2 - self.tau02**2 <= 0:
            raise ValueError("random-effect covariance matrix must be positive definite")

    @property
    def coefficients(self) -> np.ndarray:
        return np.array(
            [
                self.intercept,
                self.theta_slope,
                self.delta_slope,
                self.treatment_effect,
                self.interaction,
            ]
        )

    @property
    def covariance(self) -> np.ndarray:
        return np.array(
            [
                [self.tau0**2, self.tau02],
                [self.tau02, self.tau2**2],
            ]
        )


StructuralParams = Union[HrdParams, MrdParams]


@dataclass
class LatentState:
    """Imputed latent values for all units of a dataset.

    theta, u0 (and u2 for the multisite design) are indexed by cluster;
    delta is indexed by individual.
    """

    theta: np.ndarray
    delta: np.ndarray
    u0: np.ndarray
    u2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.u2 is not None:
            self.u2 = np.asarray(self.u2, dtype=float)
        j = self.theta.shape[0]
        if self.u0.shape != (j,):
            raise ValueError("theta and u0 must have one entry per cluster")
        if self.u2 is not None and self.u2.shape != (j,):
            raise ValueError("u2 must have one entry per cluster")

    @property
    def n_clusters(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "LatentState":
        return LatentState(
            self.theta.copy(),
            self.delta.copy(),
            self.u0.copy(),
            None if self.u2 is None else self.u2.copy(),
        )


def hrd_mean(params: HrdParams, theta_j, delta_ij, u0j, g):
    """Conditional outcome mean under the hierarchical design."""
    theta_j = np.asarray(theta_j, dtype=float)
    g = np.asarray(g, dtype=float)
    return (
        params.intercept
        + params.lrv_slope * theta_j
        + params.treatment_effect * g
        + params.interaction * theta_j * g
        + params.delta_slope * np.asarray(delta_ij, dtype=float)
        + np.asarray(u0j, dtype=float)
    )


def mrd_mean(params: MrdParams, theta_j, delta_ij, u0j, u2j, g):
    """Conditional outcome mean under the multisite design."""
    delta_ij = np.asarray(delta_ij, dtype=float)
    g = np.asarray(g, dtype=float)
    return (
        params.intercept
        + params.theta_slope * np.asarray(theta_j, dtype=float)
        + params.delta_slope * delta_ij
        + (params.treatment_effect + np.asarray(u2j, dtype=float)) * g
        + params.interaction * delta_ij * g
        + np.asarray(u0j, dtype=float)
    )


def _norm_pdf(x, sd):
    return np.exp(-0.5 * (x / sd) ** 2) / (np.sqrt(2.0 * np.pi) * sd)


def norm_logpdf(x, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * _LOG_2PI - np.log(sd) - 0.5 * (x / sd) ** 2


def hrd_outcome_density(y, g, theta_j, delta_ij, u0j, params: HrdParams):
    """Normal density of the outcome given latents, hierarchical design."""
    mu = hrd_mean(params, theta_j, delta_ij, u0j, g)
    out = _norm_pdf(np.asarray(y, dtype=float) - mu, params.sigma)
    return float(out) if out.ndim == 0 else out


def mrd_outcome_density(y, g, theta_j, delta_ij, u0j, u2j, params: MrdParams):
    """Normal density of the outcome given latents, multisite design."""
    mu = mrd_mean(params, theta_j, delta_ij, u0j, u2j, g)
    out = _norm_pdf(np.asarray(y, dtype=float) - mu, params.sigma)
    return float(out) if out.ndim == 0 else out


def structural_param_names(design: str) -> list[str]:
    """Natural-parameter ordering used by gradient/Hessian assembly."""
    if design == "hrd":
        return [
            "intercept",
            "lrv_slope",
            "treatment_effect",
            "interaction",
            "delta_slope",
            "sigma",
            "tau0",
            "psi",
        ]
    if design == "mrd":
        return [
            "intercept",
            "theta_slope",
            "delta_slope",
            "treatment_effect",
            "interaction",
            "sigma",
            "tau0_sq",
            "tau02",
            "tau2_sq",
            "psi",
        ]
    raise ValueError(f"unknown design {design!r}")


def _design_of(params: StructuralParams) -> str:
    if isinstance(params, HrdParams):
        return "hrd"
    if isinstance(params, MrdParams):
        return "mrd"
    raise TypeError(f"expected HrdParams or MrdParams, got {type(params).__name__}")


def _features(design: str, theta_i, delta, g) -> np.ndarray:
    """Regression feature matrix (N, 5) matching the coefficient order."""
    one = np.ones_like(delta)
    if design == "hrd":
        return np.column_stack([one, theta_i, g, theta_i * g, delta])
    return np.column_stack([one, theta_i, delta, g, delta * g])


def _check_block(y, g, cluster_ids, n_clusters, state: LatentState):
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    cluster_ids = np.asarray(cluster_ids)
    n = y.shape[0]
    if g.shape != (n,) or cluster_ids.shape != (n,) or state.delta.shape != (n,):
        raise ValueError("y, g, cluster_ids and state.delta must share one entry per individual")
    if state.n_clusters != n_clusters:
        raise ValueError(
            f"state has {state.n_clusters} clusters, expected {n_clusters}"
        )
    if n > 0 and (cluster_ids.min() < 0 or cluster_ids.max() >= n_clusters):
        raise ValueError("cluster_ids out of range")
    return y, g, cluster_ids


def structural_loglik(y, g, cluster_ids, n_clusters, state: LatentState, params: StructuralParams) -> float:
    """Complete-data log-likelihood of the structural model and latent priors.

    Includes the outcome density, the delta ~ N(0,1) and theta ~ N(0, psi^2)
    priors, and the random-effect prior (normal or bivariate normal).
    """
    design = _design_of(params)
    y, g, cluster_ids = _check_block(y, g, cluster_ids, n_clusters, state)
    theta_i = state.theta[cluster_ids]
    u0_i = state.u0[cluster_ids]
    if design == "hrd":
        mu = hrd_mean(params, theta_i, state.delta, u0_i, g)
    else:
        mu = mrd_mean(params, theta_i, state.delta, u0_i, state.u2[cluster_ids], g)
    ll = float(np.sum(norm_logpdf(y - mu, params.sigma)))
    ll += float(np.sum(norm_logpdf(state.delta, 1.0)))
    ll += float(np.sum(norm_logpdf(state.theta, params.psi)))
    if design == "hrd":
        ll += float(np.sum(norm_logpdf(state.u0, params.tau0)))
    else:
        cov = params.covariance
        u = np.column_stack([state.u0, state.u2])
        cov_inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        quad = np.einsum("ni,ij,nj->n", u, cov_inv, u)
        ll += float(np.sum(-_LOG_2PI - 0.5 * logdet - 0.5 * quad))
    return ll


def _scalar_sd_prior_derivs(values: np.ndarray, sd: float):
    """(d/d sd, d2/d sd2) of sum_j log N(values_j; 0, sd^2)."""
    n = values.shape[0]
    ssq = float(np.sum(values**2))
    grad = -n / sd + ssq / sd**3
    hess = n / sd**2 - 3.0 * ssq / sd**4
    return grad, hess


def _cov_block_derivs(u: np.ndarray, cov: np.ndarray):
    """Gradient and Hessian of the bivariate normal log-likelihood in vech(cov).

    u: (J, 2) random effects. Returns (grad (3,), hess (3, 3)) for the
    parameter order (tau0^2, tau02, tau2^2).
    """
    j = u.shape[0]
    cov_inv = np.linalg.inv(cov)
    w = (u.T @ u) / j
    m = cov_inv @ (w - cov) @ cov_inv
    grad = 0.5 * j * (_D2.T @ m.reshape(4, order="F"))
    inner = np.kron(cov_inv, cov_inv @ (2.0 * w - cov) @ cov_inv)
    hess = -0.5 * j * (_D2.T @ inner @ _D2)
    return grad, hess


def structural_grad_hess(y, g, cluster_ids, n_clusters, state: LatentState, params: StructuralParams):
    """Analytic gradient and Hessian of `structural_loglik` in the natural
    structural parameters (see `structural_param_names` for the ordering).

    Coefficient blocks follow d l/d gamma_f = sigma^-2 * X^T (y - mu) with
    X the feature matrix; the sigma row carries the cross terms
    -2 sigma^-3 X^T (y - mu). Random-effect (co)variance and psi blocks are
    standard normal-density derivatives; the bivariate block is expressed
    through the duplication matrix.
    """
    design = _design_of(params)
    y, g, cluster_ids = _check_block(y, g, cluster_ids, n_clusters, state)
    theta_i = state.theta[cluster_ids]
    u0_i = state.u0[cluster_ids]
    sigma = params.sigma
    n = y.shape[0]

    x = _features(design, theta_i, state.delta, g)
    if design == "hrd":
        mu = hrd_mean(params, theta_i, state.delta, u0_i, g)
    else:
        mu = mrd_mean(params, theta_i, state.delta, u0_i, state.u2[cluster_ids], g)
    r = y - mu
    xtr = x.T @ r
    xtx = x.T @ x
    ssq = float(r @ r)

    names = structural_param_names(design)
    p = len(names)
    grad = np.zeros(p)
    hess = np.zeros((p, p))

    grad[:5] = xtr / sigma**2
    hess[:5, :5] = -xtx / sigma**2

    i_sigma = 5
    grad[i_sigma] = -n / sigma + ssq / sigma**3
    hess[i_sigma, i_sigma] = n / sigma**2 - 3.0 * ssq / sigma**4
    hess[:5, i_sigma] = -2.0 * xtr / sigma**3
    hess[i_sigma, :5] = hess[:5, i_sigma]

    if design == "hrd":
        i_tau0, i_psi = 6, 7
        grad[i_tau0], hess[i_tau0, i_tau0] = _scalar_sd_prior_derivs(state.u0, params.tau0)
    else:
        u = np.column_stack([state.u0, state.u2])
        g_cov, h_cov = _cov_block_derivs(u, params.covariance)
        grad[6:9] = g_cov
        hess[6:9, 6:9] = h_cov
        i_psi = 9
    grad[i_psi], hess[i_psi, i_psi] = _scalar_sd_prior_derivs(state.theta, params.psi)
    return grad, hess
