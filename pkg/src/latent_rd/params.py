"""Free-parameter vector layout and reparameterization.

The fitting loop works on a flat vector of free parameters. In the natural
space that vector is

    [a_1..a_K, c_1..c_K, <structural coefficients>, sigma, <variance block>, psi]

with psi omitted when it is held fixed. Robbins-Monro updates run in an
unconstrained space: sigma, tau0 and psi on the log scale, and the 2x2
random-effect covariance of the multisite design through its log-Cholesky
factor (log l11, l21, log l22). This module provides the mapping in both
directions and the chain rule carrying natural-space gradients and Hessians
into the unconstrained space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measurement import MeasurementParams
from .structural import HrdParams, MrdParams, structural_param_names

__all__ = ["ParamLayout"]


@dataclass(frozen=True)
class ParamLayout:
    design: str
    n_items: int
    fix_psi: Optional[float] = None

    names: list = field(init=False)
    struct_names: list = field(init=False)

    def __post_init__(self):
        if self.design not in ("hrd", "mrd"):
            raise ValueError(f"unknown design {self.design!r}")
        k = self.n_items
        struct = structural_param_names(self.design)
        if self.fix_psi is not None:
            if self.fix_psi <= 0:
                raise ValueError("fixed psi must be positive")
            struct = [n for n in struct if n != "psi"]
        names = (
            [f"a_{i+1}" for i in range(k)]
            + [f"c_{i+1}" for i in range(k)]
            + struct
        )
        object.__setattr__(self, "struct_names", struct)
        object.__setattr__(self, "names", names)

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def slice_a(self) -> slice:
        return slice(0, self.n_items)

    @property
    def slice_c(self) -> slice:
        return slice(self.n_items, 2 * self.n_items)

    @property
    def slice_struct(self) -> slice:
        return slice(2 * self.n_items, self.size)

    @property
    def slice_coef(self) -> slice:
        o = 2 * self.n_items
        return slice(o, o + 5)

    @property
    def idx_sigma(self) -> int:
        return 2 * self.n_items + 5

    @property
    def cov_slice(self) -> Optional[slice]:
        """Indices of the (tau0^2, tau02, tau2^2) block (multisite only)."""
        if self.design != "mrd":
            return None
        o = 2 * self.n_items + 6
        return slice(o, o + 3)

    @property
    def idx_tau0(self) -> Optional[int]:
        return 2 * self.n_items + 6 if self.design == "hrd" else None

    @property
    def idx_psi(self) -> Optional[int]:
        if self.fix_psi is not None:
            return None
        return self.size - 1

    @property
    def _log_indices(self) -> list:
        idx = [self.idx_sigma]
        if self.design == "hrd":
            idx.append(self.idx_tau0)
        if self.idx_psi is not None:
            idx.append(self.idx_psi)
        return idx

    # -- packing ----------------------------------------------------------

    def psi_of(self, v: np.ndarray) -> float:
        return float(self.fix_psi if self.fix_psi is not None else v[self.idx_psi])

    def pack(self, meas: MeasurementParams, struct) -> np.ndarray:
        if meas.n_items != self.n_items:
            raise ValueError("item count mismatch")
        v = np.empty(self.size)
        v[self.slice_a] = meas.slopes
        v[self.slice_c] = meas.intercepts
        if self.design == "hrd":
            if not isinstance(struct, HrdParams):
                raise TypeError("expected HrdParams")
            vals = {
                "intercept": struct.intercept,
                "lrv_slope": struct.lrv_slope,
                "treatment_effect": struct.treatment_effect,
                "interaction": struct.interaction,
                "delta_slope": struct.delta_slope,
                "sigma": struct.sigma,
                "tau0": struct.tau0,
                "psi": struct.psi,
            }
        else:
            if not isinstance(struct, MrdParams):
                raise TypeError("expected MrdParams")
            vals = {
                "intercept": struct.intercept,
                "theta_slope": struct.theta_slope,
                "delta_slope": struct.delta_slope,
                "treatment_effect": struct.treatment_effect,
                "interaction": struct.interaction,
                "sigma": struct.sigma,
                "tau0_sq": struct.tau0**2,
                "tau02": struct.tau02,
                "tau2_sq": struct.tau2**2,
                "psi": struct.psi,
            }
        for i, name in enumerate(self.struct_names):
            v[2 * self.n_items + i] = vals[name]
        return v

    def unpack(self, v: np.ndarray):
        """Natural vector -> (MeasurementParams, HrdParams | MrdParams)."""
        v = np.asarray(v, dtype=float)
        meas = MeasurementParams(v[self.slice_a].copy(), v[self.slice_c].copy())
        s = {name: float(v[2 * self.n_items + i]) for i, name in enumerate(self.struct_names)}
        psi = self.fix_psi if self.fix_psi is not None else s.pop("psi")
        if self.design == "hrd":
            struct = HrdParams(
                intercept=s["intercept"],
                lrv_slope=s["lrv_slope"],
                treatment_effect=s["treatment_effect"],
                interaction=s["interaction"],
                delta_slope=s["delta_slope"],
                sigma=s["sigma"],
                tau0=s["tau0"],
                psi=psi,
            )
        else:
            struct = MrdParams(
                intercept=s["intercept"],
                theta_slope=s["theta_slope"],
                delta_slope=s["delta_slope"],
                treatment_effect=s["treatment_effect"],
                interaction=s["interaction"],
                sigma=s["sigma"],
                tau0=float(np.sqrt(s["tau0_sq"])),
                tau2=float(np.sqrt(s["tau2_sq"])),
                tau02=s["tau02"],
                psi=psi,
            )
        return meas, struct

    # -- reparameterization ------------------------------------------------

    def _chol_of(self, cov_vals):
        t0sq, t02, t2sq = cov_vals
        l11 = np.sqrt(t0sq)
        l21 = t02 / l11
        l22sq = t2sq - l21**2
        if l22sq <= 0:
            raise ValueError("covariance block is not positive definite")
        return l11, l21, np.sqrt(l22sq)

    def to_unconstrained(self, v: np.ndarray) -> np.ndarray:
        u = np.array(v, dtype=float)
        for i in self._log_indices:
            u[i] = np.log(v[i])
        cs = self.cov_slice
        if cs is not None:
            l11, l21, l22 = self._chol_of(v[cs])
            u[cs] = [np.log(l11), l21, np.log(l22)]
        return u

    def to_natural(self, u: np.ndarray) -> np.ndarray:
        v = np.array(u, dtype=float)
        for i in self._log_indices:
            v[i] = np.exp(u[i])
        cs = self.cov_slice
        if cs is not None:
            l11 = np.exp(u[cs][0])
            l21 = u[cs][1]
            l22 = np.exp(u[cs][2])
            v[cs] = [l11**2, l11 * l21, l21**2 + l22**2]
        return v

    def chain_to_unconstrained(self, v_nat: np.ndarray, grad_nat: np.ndarray, hess_nat: np.ndarray):
        """Carry natural-space derivatives into the unconstrained space.

        grad_u = J^T g,  hess_u = J^T H J + sum_m g_m d2(natural_m)/du du'.
        """
        jac = np.eye(self.size)
        for i in self._log_indices:
            jac[i, i] = v_nat[i]
        cs = self.cov_slice
        if cs is not None:
            l11, l21, l22 = self._chol_of(v_nat[cs])
            jac[cs, cs] = np.array(
                [
                    [2.0 * l11**2, 0.0, 0.0],
                    [l11 * l21, l11, 0.0],
                    [0.0, 2.0 * l21, 2.0 * l22**2],
                ]
            )
        grad_u = jac.T @ grad_nat
        hess_u = jac.T @ hess_nat @ jac
        for i in self._log_indices:
            hess_u[i, i] += grad_nat[i] * v_nat[i]
        if cs is not None:
            o = cs.start
            g1, g2, g3 = grad_nat[cs]
            corr = np.zeros((3, 3))
            corr[0, 0] = g1 * 4.0 * l11**2 + g2 * l11 * l21
            corr[0, 1] = corr[1, 0] = g2 * l11
            corr[1, 1] = g3 * 2.0
            corr[2, 2] = g3 * 4.0 * l22**2
            hess_u[o : o + 3, o : o + 3] += corr
        return grad_u, hess_u
