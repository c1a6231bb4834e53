"""Maximum-likelihood fitting by Metropolis-Hastings Robbins-Monro.

Each iteration draws the latent variables (cluster latents, individual
deviations, random intercepts and, in the multisite design, random treatment
slopes) from a Metropolis-Hastings sweep targeting their posterior given the
data and current parameters, evaluates the complete-data gradient and Hessian
at the imputed values, and applies a Robbins-Monro stochastic-approximation
Newton update with the information-matrix recursion

    Gamma_{t+1} = Gamma_t + g_t (H_bar - Gamma_t),
    xi_{t+1}    = xi_t + g_t Gamma_{t+1}^{-1} s_tilde.

Three stages: a burn-in with unit gain during which proposal scales adapt
toward a target acceptance rate, a second unit-gain stage whose iterate
average seeds the third stage, and a decaying-gain stage g_t = 1/t^epsilon
that terminates once both the maximum parameter change and a noise-filtered
gradient monitor stay below tolerance for a window of consecutive iterations.

Standard errors come from the missing-information decomposition: the observed
information equals the posterior expectation of the complete-data information
minus the posterior covariance of the complete-data score, with expectations
replaced by averages over posterior imputations after convergence.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .measurement import MeasurementParams, _logistic, item_grad_hess_sum
from .params import ParamLayout
from .simgen import Dataset
from .structural import (
    HrdParams,
    LatentState,
    MrdParams,
    structural_grad_hess,
)

__all__ = [
    "FitConfig",
    "FitResult",
    "ModelParams",
    "metropolis_accept",
    "mh_impute",
    "rm_update",
    "louis_information",
    "louis_se",
    "fit",
]

_MAX_STEP = 0.5  # per-component cap on one RM increment; guards early noisy Newton steps


@dataclass(frozen=True)
class ModelParams:
    """Measurement and structural parameters bundled."""

    measurement: MeasurementParams
    structural: Union[HrdParams, MrdParams]

    @property
    def design(self) -> str:
        return "hrd" if isinstance(self.structural, HrdParams) else "mrd"


@dataclass(frozen=True)
class FitConfig:
    """Tuning constants of the three-stage fitting algorithm."""

    stage1_iters: int = 100
    stage2_iters: int = 500
    stage3_max_iters: int = 1000
    gain_epsilon: float = 0.51
    converge_tol: float = 1e-3
    converge_window: int = 3
    imputations_per_iter: int = 1
    se_imputations: int = 2000
    proposal_sds: dict = field(
        default_factory=lambda: {"theta": 0.5, "delta": 1.0, "u0": 0.5, "u2": 0.5}
    )
    adapt_acceptance_target: float = 0.35
    seed: int = 0
    fix_psi: Optional[float] = None
    trace_path: Optional[str] = None

    def __post_init__(self):
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ValueError("stage1_iters and stage2_iters must be positive")
        if self.stage3_max_iters < 0:
            raise ValueError("stage3_max_iters must be nonnegative")
        if self.converge_tol <= 0:
            raise ValueError("converge_tol must be positive")
        if self.converge_window < 1:
            raise ValueError("converge_window must be positive")
        if not 0.5 < self.gain_epsilon <= 1.0:
            raise ValueError("gain_epsilon must lie in (0.5, 1]")
        if self.imputations_per_iter < 1 or self.se_imputations < 1:
            raise ValueError("imputation counts must be positive")


@dataclass
class FitResult:
    """Estimates, covariance and diagnostics of one fitted model."""

    design: str
    param_names: list
    estimates: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    acceptance: dict
    stage_traces: dict
    cutoff: float
    cluster_size: int
    fix_psi: Optional[float] = None

    @property
    def layout(self) -> ParamLayout:
        k = sum(1 for n in self.param_names if n.startswith("a_"))
        return ParamLayout(self.design, k, self.fix_psi)

    @property
    def params(self) -> ModelParams:
        meas, struct = self.layout.unpack(self.estimates)
        return ModelParams(meas, struct)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def metropolis_accept(log_ratio: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized Metropolis acceptance decisions for log density ratios."""
    log_ratio = np.asarray(log_ratio, dtype=float)
    return np.log(rng.random(log_ratio.shape)) < log_ratio


# -- internal data bundle -----------------------------------------------------


class _Arrays:
    """Flat observed-data arrays shared by sweep and derivative code."""

    def __init__(self, data: Dataset):
        self.design = data.design
        self.x = data.responses.astype(float)
        self.y = data.y.astype(float)
        self.g = data.treatment_by_individual.astype(float)
        self.cid = data.cluster_ids.astype(np.int64)
        self.n_clusters = data.n_clusters
        self.n = self.x.shape[0]
        self.k = self.x.shape[1]


class _Par:
    """Natural-space parameter views used inside one iteration."""

    def __init__(self, layout: ParamLayout, v_nat: np.ndarray):
        self.layout = layout
        self.v = v_nat
        self.a = v_nat[layout.slice_a]
        self.c = v_nat[layout.slice_c]
        self.coef = v_nat[layout.slice_coef]
        self.sigma = float(v_nat[layout.idx_sigma])
        self.psi = layout.psi_of(v_nat)
        if layout.design == "hrd":
            self.tau0 = float(v_nat[layout.idx_tau0])
            self.cov_inv = None
        else:
            t0sq, t02, t2sq = v_nat[layout.cov_slice]
            cov = np.array([[t0sq, t02], [t02, t2sq]])
            self.cov = cov
            self.cov_inv = np.linalg.inv(cov)

    def struct_obj(self):
        _, struct = self.layout.unpack(self.v)
        return struct


def _pattern_ll(x: np.ndarray, a, c, t: np.ndarray) -> np.ndarray:
    """sum_k [x z - softplus(z)] with z = a t + c; equals the 2PL pattern
    log-likelihood and stays finite for extreme latent values."""
    z = np.multiply.outer(t, a) + c
    return np.einsum("nk,nk->n", x, z) - np.logaddexp(0.0, z).sum(axis=1)


def _mu_of(arrs: _Arrays, par: _Par, theta_i, delta, u0_i, u2_i):
    coef = par.coef
    if arrs.design == "hrd":
        return (
            coef[0]
            + coef[1] * theta_i
            + coef[2] * arrs.g
            + coef[3] * theta_i * arrs.g
            + coef[4] * delta
            + u0_i
        )
    return (
        coef[0]
        + coef[1] * theta_i
        + coef[2] * delta
        + (coef[3] + u2_i) * arrs.g
        + coef[4] * delta * arrs.g
        + u0_i
    )


def _sweep(
    arrs: _Arrays,
    par: _Par,
    state: LatentState,
    proposal_sds: dict,
    rng: np.random.Generator,
) -> dict:
    """One Metropolis-Hastings sweep over all latent blocks, in place."""
    cid = arrs.cid
    inv_2sig2 = 0.5 / par.sigma**2
    theta_i = state.theta[cid]
    u0_i = state.u0[cid]
    u2_i = state.u2[cid] if arrs.design == "mrd" else None

    t_tot = theta_i + state.delta
    item_ll = _pattern_ll(arrs.x, par.a, par.c, t_tot)
    mu = _mu_of(arrs, par, theta_i, state.delta, u0_i, u2_i)
    y_ll = -inv_2sig2 * (arrs.y - mu) ** 2
    acc_rates = {}

    def check(dlog, block):
        if not np.all(np.isfinite(dlog)):
            raise RuntimeError(f"non-finite likelihood contribution in latent block '{block}'")

    # cluster latent theta
    step = proposal_sds["theta"] * rng.standard_normal(arrs.n_clusters)
    th_new = state.theta + step
    t_new = th_new[cid] + state.delta
    item_new = _pattern_ll(arrs.x, par.a, par.c, t_new)
    if arrs.design == "hrd":
        dmu = (par.coef[1] + par.coef[3] * arrs.g) * step[cid]
    else:
        dmu = par.coef[1] * step[cid]
    mu_new = mu + dmu
    y_new = -inv_2sig2 * (arrs.y - mu_new) ** 2
    dlog = np.bincount(cid, weights=item_new - item_ll + y_new - y_ll, minlength=arrs.n_clusters)
    dlog += -0.5 * (th_new**2 - state.theta**2) / par.psi**2
    check(dlog, "theta")
    acc = metropolis_accept(dlog, rng)
    acc_rates["theta"] = float(acc.mean())
    state.theta[acc] = th_new[acc]
    mask = acc[cid]
    t_tot[mask] = t_new[mask]
    item_ll[mask] = item_new[mask]
    mu[mask] = mu_new[mask]
    y_ll[mask] = y_new[mask]

    # individual deviation delta
    step = proposal_sds["delta"] * rng.standard_normal(arrs.n)
    d_new = state.delta + step
    t_new = t_tot + step
    item_new = _pattern_ll(arrs.x, par.a, par.c, t_new)
    if arrs.design == "hrd":
        dmu = par.coef[4] * step
    else:
        dmu = (par.coef[2] + par.coef[4] * arrs.g) * step
    mu_new = mu + dmu
    y_new = -inv_2sig2 * (arrs.y - mu_new) ** 2
    dlog = item_new - item_ll + y_new - y_ll - 0.5 * (d_new**2 - state.delta**2)
    check(dlog, "delta")
    acc = metropolis_accept(dlog, rng)
    acc_rates["delta"] = float(acc.mean())
    state.delta[acc] = d_new[acc]
    t_tot[acc] = t_new[acc]
    item_ll[acc] = item_new[acc]
    mu[acc] = mu_new[acc]
    y_ll[acc] = y_new[acc]

    # random intercept u0
    step = proposal_sds["u0"] * rng.standard_normal(arrs.n_clusters)
    u0_new = state.u0 + step
    mu_new = mu + step[cid]
    y_new = -inv_2sig2 * (arrs.y - mu_new) ** 2
    dlog = np.bincount(cid, weights=y_new - y_ll, minlength=arrs.n_clusters)
    if arrs.design == "hrd":
        dlog += -0.5 * (u0_new**2 - state.u0**2) / par.tau0**2
    else:
        a11, a12 = par.cov_inv[0, 0], par.cov_inv[0, 1]
        dlog += -0.5 * a11 * (u0_new**2 - state.u0**2) - a12 * step * state.u2
    check(dlog, "u0")
    acc = metropolis_accept(dlog, rng)
    acc_rates["u0"] = float(acc.mean())
    state.u0[acc] = u0_new[acc]
    mask = acc[cid]
    mu[mask] = mu_new[mask]
    y_ll[mask] = y_new[mask]

    # random treatment slope u2 (multisite only)
    if arrs.design == "mrd":
        step = proposal_sds["u2"] * rng.standard_normal(arrs.n_clusters)
        u2_new = state.u2 + step
        mu_new = mu + step[cid] * arrs.g
        y_new = -inv_2sig2 * (arrs.y - mu_new) ** 2
        dlog = np.bincount(cid, weights=y_new - y_ll, minlength=arrs.n_clusters)
        a22, a12 = par.cov_inv[1, 1], par.cov_inv[0, 1]
        dlog += -0.5 * a22 * (u2_new**2 - state.u2**2) - a12 * step * state.u0
        check(dlog, "u2")
        acc = metropolis_accept(dlog, rng)
        acc_rates["u2"] = float(acc.mean())
        state.u2[acc] = u2_new[acc]
        mask = acc[cid]
        mu[mask] = mu_new[mask]
        y_ll[mask] = y_new[mask]

    return acc_rates


def mh_impute(
    data: Dataset,
    params: ModelParams,
    state: LatentState,
    proposal_sds: dict,
    rng: np.random.Generator,
):
    """One posterior sweep over all latent blocks.

    Returns a new state plus per-block acceptance rates; the input state is
    not modified.
    """
    arrs = _Arrays(data)
    layout = ParamLayout(data.design, params.measurement.n_items)
    v = layout.pack(params.measurement, params.structural)
    new_state = state.copy()
    rates = _sweep(arrs, _Par(layout, v), new_state, proposal_sds, rng)
    return new_state, rates


# -- complete-data derivatives ------------------------------------------------


def _grad_hess_natural(arrs: _Arrays, layout: ParamLayout, par: _Par, state: LatentState):
    t_tot = state.theta[arrs.cid] + state.delta
    g_item, h_item = item_grad_hess_sum(arrs.x, par.a, par.c, t_tot)
    g_str, h_str = structural_grad_hess(
        arrs.y, arrs.g, arrs.cid, arrs.n_clusters, state, par.struct_obj()
    )
    if layout.fix_psi is not None:
        g_str = g_str[:-1]
        h_str = h_str[:-1, :-1]
    p = layout.size
    grad = np.concatenate([g_item, g_str])
    hess = np.zeros((p, p))
    m = 2 * layout.n_items
    hess[:m, :m] = h_item
    hess[m:, m:] = h_str
    return grad, hess


def _solve_spd(mat: np.ndarray, vec: np.ndarray):
    """Solve mat @ x = vec, ridging the diagonal if the factorization fails."""
    try:
        chol = np.linalg.cholesky(mat)
        x = np.linalg.solve(chol.T, np.linalg.solve(chol, vec))
        return x, False
    except np.linalg.LinAlgError:
        ridge = 1e-8 * max(float(np.abs(np.diag(mat)).max()), 1.0)
        fixed = mat + ridge * np.eye(mat.shape[0])
        return np.linalg.solve(fixed, vec), True


def rm_update(params: np.ndarray, gamma: np.ndarray, s_tilde: np.ndarray, h_bar: np.ndarray, gain: float):
    """One Robbins-Monro update of the parameter vector and the information
    recursion matrix."""
    gamma_new = gamma + gain * (h_bar - gamma)
    direction, _ = _solve_spd(gamma_new, s_tilde)
    return params + gain * direction, gamma_new


# -- Louis-formula information ------------------------------------------------


def louis_information(h_mean: np.ndarray, score_mean: np.ndarray, score_outer_mean: np.ndarray) -> np.ndarray:
    """Observed information from posterior moments of complete-data quantities:
    E[H] - E[s s'] + E[s] E[s]'."""
    info = h_mean - score_outer_mean + np.outer(score_mean, score_mean)
    return 0.5 * (info + info.T)


def _covariance_from_information(info: np.ndarray) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh(info)
    floor = 1e-10 * max(float(eigval.max()), 1.0)
    if eigval.min() <= 0:
        warnings.warn(
            "observed information is not positive definite; "
            "eigenvalues floored for inversion",
            RuntimeWarning,
        )
        eigval = np.clip(eigval, floor, None)
    return (eigvec / eigval) @ eigvec.T


def _louis_core(
    arrs: _Arrays,
    layout: ParamLayout,
    v_nat: np.ndarray,
    state: LatentState,
    proposal_sds: dict,
    n_imputations: int,
    rng: np.random.Generator,
    burn: int = 0,
) -> np.ndarray:
    par = _Par(layout, v_nat)
    for _ in range(burn):
        _sweep(arrs, par, state, proposal_sds, rng)
    p = layout.size
    h_mean = np.zeros((p, p))
    s_mean = np.zeros(p)
    ss_mean = np.zeros((p, p))
    for _ in range(n_imputations):
        _sweep(arrs, par, state, proposal_sds, rng)
        grad, hess = _grad_hess_natural(arrs, layout, par, state)
        h_mean -= hess
        s_mean += grad
        ss_mean += np.outer(grad, grad)
    h_mean /= n_imputations
    s_mean /= n_imputations
    ss_mean /= n_imputations
    info = louis_information(h_mean, s_mean, ss_mean)
    return _covariance_from_information(info)


def louis_se(
    data: Dataset,
    params: ModelParams,
    n_imputations: int = 2000,
    rng: Optional[np.random.Generator] = None,
    burn: int = 200,
    proposal_sds: Optional[dict] = None,
    fix_psi: Optional[float] = None,
) -> np.ndarray:
    """Covariance matrix of the estimates at (approximately) the MLE.

    Initializes the latent chain at zero, burns it in (adapting proposal
    scales over the first half of the burn), then averages the missing-
    information terms over `n_imputations` posterior sweeps. Values of
    `n_imputations` above 1000 are recommended.
    """
    if n_imputations < 1:
        raise ValueError("n_imputations must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    arrs = _Arrays(data)
    layout = ParamLayout(data.design, params.measurement.n_items, fix_psi)
    struct = params.structural
    if fix_psi is not None and not np.isclose(struct.psi, fix_psi):
        struct = replace(struct, psi=fix_psi)
    v_nat = layout.pack(params.measurement, struct)
    state = _initial_state(arrs)
    prop = dict(proposal_sds or FitConfig().proposal_sds)
    par = _Par(layout, v_nat)
    half = burn // 2
    for i in range(half):
        rates = _sweep(arrs, par, state, prop, rng)
        _adapt(prop, rates, 0.35)
    return _louis_core(arrs, layout, v_nat, state, prop, n_imputations, rng, burn=burn - half)


# -- the fitting loop ----------------------------------------------------------


def _initial_state(arrs: _Arrays) -> LatentState:
    return LatentState(
        np.zeros(arrs.n_clusters),
        np.zeros(arrs.n),
        np.zeros(arrs.n_clusters),
        np.zeros(arrs.n_clusters) if arrs.design == "mrd" else None,
    )


def _starting_values(arrs: _Arrays, layout: ParamLayout) -> np.ndarray:
    """Neutral starting vector: unit slopes, zero intercepts and coefficients,
    intercept and residual scale from the outcome moments."""
    v = np.zeros(layout.size)
    v[layout.slice_a] = 1.0
    sigma0 = max(float(np.std(arrs.y)), 1e-3)
    coef = np.zeros(5)
    coef[0] = float(np.mean(arrs.y))
    v[layout.slice_coef] = coef
    v[layout.idx_sigma] = sigma0
    if layout.design == "hrd":
        v[layout.idx_tau0] = 0.5 * sigma0
    else:
        v[layout.cov_slice] = [(0.5 * sigma0) ** 2, 0.0, (0.5 * sigma0) ** 2]
    if layout.idx_psi is not None:
        v[layout.idx_psi] = 0.5
    return v


def _adapt(proposal_sds: dict, rates: dict, target: float) -> None:
    for block, rate in rates.items():
        proposal_sds[block] *= float(np.exp(0.05 * (rate - target)))


def fit(data: Dataset, config: Optional[FitConfig] = None) -> FitResult:
    """Fit the model for the dataset's design by the three-stage algorithm."""
    if config is None:
        config = FitConfig()
    arrs = _Arrays(data)
    layout = ParamLayout(data.design, arrs.k, config.fix_psi)
    rng = np.random.default_rng(config.seed)
    state = _initial_state(arrs)
    prop = dict(config.proposal_sds)
    if arrs.design == "hrd":
        prop.pop("u2", None)

    v_nat = _starting_values(arrs, layout)
    u = layout.to_unconstrained(v_nat)
    gamma = np.eye(layout.size)
    s_filtered = np.zeros(layout.size)
    ridge_events = 0
    clip_events = 0
    acc_sums: dict = {}
    acc_count = 0
    traces = {"stage1": [], "stage2": [], "stage3": []}
    monitor_rows = []

    def iterate(gain: float, stage: str, adapt: bool):
        nonlocal u, v_nat, gamma, ridge_events, clip_events, acc_count
        par = _Par(layout, v_nat)
        grad_n = np.zeros(layout.size)
        hess_n = np.zeros((layout.size, layout.size))
        m_t = config.imputations_per_iter
        last_rates = None
        for _ in range(m_t):
            last_rates = _sweep(arrs, par, state, prop, rng)
            g1, h1 = _grad_hess_natural(arrs, layout, par, state)
            grad_n += g1
            hess_n += h1
        grad_n /= m_t
        hess_n /= m_t
        if adapt:
            _adapt(prop, last_rates, config.adapt_acceptance_target)
        else:
            for k, r in last_rates.items():
                acc_sums[k] = acc_sums.get(k, 0.0) + r
            acc_count += 1
        g_u, h_u = layout.chain_to_unconstrained(v_nat, grad_n, hess_n)
        gamma[...] = gamma + gain * (-h_u - gamma)
        direction, ridged = _solve_spd(gamma, g_u)
        ridge_events += ridged
        step = gain * direction
        clipped = np.clip(step, -_MAX_STEP, _MAX_STEP)
        clip_events += int(np.any(clipped != step))
        u = u + clipped
        if not np.all(np.isfinite(u)):
            raise RuntimeError("non-finite parameter update in stage " + stage)
        v_nat = layout.to_natural(u)
        traces[stage].append(v_nat.copy())
        return g_u

    for _ in range(config.stage1_iters):
        iterate(1.0, "stage1", adapt=True)
    for _ in range(config.stage2_iters):
        iterate(1.0, "stage2", adapt=False)

    stage2_avg = np.mean(np.asarray(traces["stage2"]), axis=0)
    v_nat = stage2_avg.copy()
    u = layout.to_unconstrained(v_nat)

    converged = False
    streak = 0
    iterations = 0
    s_filtered[:] = 0.0
    for t in range(1, config.stage3_max_iters + 1):
        gain = 1.0 / t**config.gain_epsilon
        v_prev = v_nat.copy()
        g_u = iterate(gain, "stage3", adapt=False)
        iterations = t
        s_filtered += gain * (g_u - s_filtered)
        newton_dir, _ = _solve_spd(gamma, s_filtered)
        grad_monitor = float(np.max(np.abs(newton_dir)))
        param_change = float(np.max(np.abs(v_nat - v_prev)))
        monitor_rows.append((t, param_change, grad_monitor))
        if param_change < config.converge_tol and grad_monitor < config.converge_tol:
            streak += 1
            if streak >= config.converge_window:
                converged = True
                break
        else:
            streak = 0

    acceptance = {k: v / max(acc_count, 1) for k, v in acc_sums.items()}
    cov = _louis_core(
        arrs, layout, v_nat, state, prop, config.se_imputations, rng, burn=50
    )
    sizes = np.bincount(arrs.cid, minlength=arrs.n_clusters)
    cluster_size = int(np.bincount(sizes).argmax())
    result = FitResult(
        design=arrs.design,
        param_names=list(layout.names),
        estimates=v_nat.copy(),
        covariance=cov,
        converged=converged,
        iterations=iterations,
        acceptance=acceptance,
        stage_traces={k: np.asarray(v) for k, v in traces.items()},
        cutoff=data.cutoff,
        cluster_size=cluster_size,
        fix_psi=config.fix_psi,
    )
    result.stage_traces["ridge_events"] = np.array([ridge_events])
    result.stage_traces["clip_events"] = np.array([clip_events])
    if config.trace_path:
        _write_trace(config.trace_path, layout, traces, monitor_rows)
    return result


def _write_trace(path, layout: ParamLayout, traces: dict, monitor_rows) -> None:
    path = Path(path)
    monitors = {t: (dp, dg) for t, dp, dg in monitor_rows}
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage"] + list(layout.names) + ["max_param_change", "max_gradient"])
        iteration = 0
        for stage in ("stage1", "stage2", "stage3"):
            for local_t, row in enumerate(traces[stage], start=1):
                iteration += 1
                extra = ["", ""]
                if stage == "stage3" and local_t in monitors:
                    extra = [repr(monitors[local_t][0]), repr(monitors[local_t][1])]
                writer.writerow([iteration, stage] + [repr(float(x)) for x in row] + extra)
