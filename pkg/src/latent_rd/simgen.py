"""Synthetic data generation for both multilevel RD designs.

Generation follows three steps: draw item parameters and latent variables,
assign treatment by comparing the observed running variable (cluster-average
summed score for the hierarchical design, individual summed score for the
multisite design) to the cutoff with ties treated, and generate outcomes from
the structural model at the assigned condition.

Item slopes come from a lognormal law (log-scale location 0.3, scale 0.20)
rejection-truncated to [1.0, 2.5]; difficulties come from a standard normal
truncated to [-2, 2] and map to intercepts via c_k = -a_k * b_k. The default
item mode loads a fixed 10-item table (see `items`) so scores are comparable
across replications; `regenerate` redraws the table from the rng.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .items import fixed_item_params
from .measurement import MeasurementParams, ResponseMatrix, _logistic
from .structural import HrdParams, LatentState, MrdParams, hrd_mean, mrd_mean

__all__ = [
    "SimConfig",
    "Dataset",
    "gen_item_params",
    "gen_latents",
    "assign_treatment",
    "gen_outcome",
    "simulate",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_truth_json",
]

_HRD_EFFECT_MAP = {0.0: 0.012, 0.3: 0.312, 0.5: 0.512}
_MRD_EFFECT_MAP = {0.0: 0.025, 0.3: 0.325, 0.5: 0.525}


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one synthetic dataset."""

    design: str = "mrd"
    n_clusters: int = 300
    cluster_size: int = 30
    n_items: int = 10
    psi: float = 0.5
    cutoff: float = 4.0
    effect: float = 0.3
    item_mode: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if self.design not in ("hrd", "mrd"):
            raise ValueError(f"design must be 'hrd' or 'mrd', got {self.design!r}")
        if self.n_clusters < 1 or self.cluster_size < 1 or self.n_items < 1:
            raise ValueError("dimensions must be positive")
        if self.psi <= 0:
            raise ValueError("psi must be positive")
        if self.item_mode not in ("fixed", "regenerate"):
            raise ValueError("item_mode must be 'fixed' or 'regenerate'")
        self.treatment_coefficient()  # validates the effect level

    def treatment_coefficient(self) -> float:
        table = _HRD_EFFECT_MAP if self.design == "hrd" else _MRD_EFFECT_MAP
        for level, coef in table.items():
            if np.isclose(self.effect, level):
                return coef
        raise ValueError(f"effect level must be one of {sorted(table)}, got {self.effect}")

    def true_structural(self):
        coef = self.treatment_coefficient()
        if self.design == "hrd":
            return HrdParams(
                intercept=0.0,
                lrv_slope=0.30,
                treatment_effect=coef,
                interaction=0.10,
                delta_slope=0.30,
                tau0=0.5,
                sigma=1.0,
                psi=self.psi,
            )
        return MrdParams(
            intercept=0.0,
            theta_slope=0.10,
            delta_slope=0.30,
            treatment_effect=coef,
            interaction=0.10,
            tau0=0.5,
            tau2=0.5,
            tau02=0.0,
            sigma=1.0,
            psi=self.psi,
        )


@dataclass
class Dataset:
    """Observed data (plus an optional truth record) for one sample."""

    design: str
    responses: np.ndarray
    y: np.ndarray
    treatment: np.ndarray
    cluster_ids: np.ndarray
    n_clusters: int
    cutoff: float
    truth: Optional[dict] = None

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=np.int8)
        self.y = np.asarray(self.y, dtype=float)
        self.treatment = np.asarray(self.treatment, dtype=np.int8)
        self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64)
        n = self.responses.shape[0]
        if self.y.shape != (n,) or self.cluster_ids.shape != (n,):
            raise ValueError("responses, y and cluster_ids must agree on the number of rows")
        expected = self.n_clusters if self.design == "hrd" else n
        if self.treatment.shape != (expected,):
            raise ValueError(
                f"treatment must have {expected} entries for design {self.design!r}"
            )

    @property
    def n_individuals(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_ids, minlength=self.n_clusters)

    @property
    def response_matrix(self) -> ResponseMatrix:
        return ResponseMatrix(self.responses, self.cluster_sizes)

    @property
    def treatment_by_individual(self) -> np.ndarray:
        if self.design == "hrd":
            return self.treatment[self.cluster_ids]
        return self.treatment

    @property
    def sum_scores(self) -> np.ndarray:
        return self.responses.sum(axis=1)

    @property
    def cluster_avg_scores(self) -> np.ndarray:
        totals = np.bincount(self.cluster_ids, weights=self.sum_scores, minlength=self.n_clusters)
        return totals / self.cluster_sizes


def _truncated(draw, low, high, size, rng) -> np.ndarray:
    """Exact rejection sampling of `draw(n)` into [low, high]."""
    out = np.empty(size)
    filled = 0
    while filled < size:
        batch = draw(max(size - filled, 16), rng)
        keep = batch[(batch >= low) & (batch <= high)]
        take = min(keep.size, size - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
    return out


def gen_item_params(rng: np.random.Generator, n_items: int = 10) -> MeasurementParams:
    """Draw a 2PL item table: truncated-lognormal slopes, truncated-normal
    difficulties, intercepts c_k = -a_k * b_k."""
    slopes = _truncated(
        lambda n, r: r.lognormal(mean=0.3, sigma=0.20, size=n), 1.0, 2.5, n_items, rng
    )
    difficulties = _truncated(
        lambda n, r: r.normal(size=n), -2.0, 2.0, n_items, rng
    )
    return MeasurementParams(slopes, -slopes * difficulties)


def gen_latents(n_clusters: int, cluster_size: int, psi: float, rng: np.random.Generator):
    """Cluster latents theta ~ N(0, psi^2) and deviations delta ~ N(0, 1)."""
    theta = psi * rng.standard_normal(n_clusters)
    delta = rng.standard_normal((n_clusters, cluster_size))
    return theta, delta


def gen_responses(meas: MeasurementParams, theta_total: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = _logistic(np.multiply.outer(theta_total, meas.slopes) + meas.intercepts)
    return (rng.random(p.shape) < p).astype(np.int8)


def assign_treatment(responses, cluster_ids, n_clusters, cutoff, design) -> np.ndarray:
    """Treatment indicators from the observed running variable.

    Hierarchical design: per-cluster average summed score at or below the
    cutoff; multisite design: individual summed score at or below the cutoff.
    Ties (score == cutoff) are treated.
    """
    sums = np.asarray(responses).sum(axis=1)
    if design == "mrd":
        return (sums <= cutoff + 1e-9).astype(np.int8)
    if design != "hrd":
        raise ValueError(f"unknown design {design!r}")
    cluster_ids = np.asarray(cluster_ids)
    sizes = np.bincount(cluster_ids, minlength=n_clusters)
    if np.any(sizes == 0):
        raise ValueError("every cluster must contain at least one individual")
    avg = np.bincount(cluster_ids, weights=sums, minlength=n_clusters) / sizes
    return (avg <= cutoff + 1e-9).astype(np.int8)


def gen_outcome(design, struct, latents: LatentState, treatment, cluster_ids, rng: np.random.Generator):
    """Draw random effects and residuals, evaluate the combined model.

    Returns (y, u0, u2); u2 is None for the hierarchical design. The
    random-effect draws are written back into `latents`.
    """
    cluster_ids = np.asarray(cluster_ids)
    n = cluster_ids.shape[0]
    j = latents.n_clusters
    if design == "hrd":
        u0 = struct.tau0 * rng.standard_normal(j)
        u2 = None
        g = np.asarray(treatment)[cluster_ids]
        mu = hrd_mean(struct, latents.theta[cluster_ids], latents.delta, u0[cluster_ids], g)
    else:
        chol = np.linalg.cholesky(struct.covariance)
        u = rng.standard_normal((j, 2)) @ chol.T
        u0, u2 = u[:, 0], u[:, 1]
        g = np.asarray(treatment)
        mu = mrd_mean(
            struct, latents.theta[cluster_ids], latents.delta, u0[cluster_ids], u2[cluster_ids], g
        )
    y = mu + struct.sigma * rng.standard_normal(n)
    latents.u0 = u0
    latents.u2 = u2
    return y, u0, u2


def simulate(config: SimConfig, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Generate one dataset; the truth record keeps parameters and latents."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.item_mode == "fixed":
        meas = fixed_item_params()
        if meas.n_items != config.n_items:
            raise ValueError(
                f"fixed item table has {meas.n_items} items, config asks for {config.n_items}"
            )
    else:
        meas = gen_item_params(rng, config.n_items)
    struct = config.true_structural()

    theta, delta = gen_latents(config.n_clusters, config.cluster_size, config.psi, rng)
    cluster_ids = np.repeat(np.arange(config.n_clusters), config.cluster_size)
    theta_total = theta[cluster_ids] + delta.ravel()
    responses = gen_responses(meas, theta_total, rng)
    treatment = assign_treatment(
        responses, cluster_ids, config.n_clusters, config.cutoff, config.design
    )
    latents = LatentState(theta, delta.ravel(), np.zeros(config.n_clusters))
    y, _, _ = gen_outcome(config.design, struct, latents, treatment, cluster_ids, rng)
    truth = {
        "measurement": meas,
        "structural": struct,
        "latents": latents,
        "config": config,
    }
    return Dataset(
        design=config.design,
        responses=responses,
        y=y,
        treatment=treatment,
        cluster_ids=cluster_ids,
        n_clusters=config.n_clusters,
        cutoff=config.cutoff,
        truth=truth,
    )


# -- file formats -----------------------------------------------------------


def write_dataset_csv(dataset: Dataset, path) -> None:
    """Long-format CSV: cluster_id, person_id, x1..xK, y, t (one row per
    individual; the cluster treatment is repeated on each row under hrd)."""
    path = Path(path)
    k = dataset.n_items
    t_ind = dataset.treatment_by_individual
    person = np.concatenate([np.arange(s) for s in dataset.cluster_sizes])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cluster_id", "person_id"] + [f"x{i+1}" for i in range(k)] + ["y", "t"]
        )
        for n in range(dataset.n_individuals):
            writer.writerow(
                [int(dataset.cluster_ids[n]), int(person[n])]
                + [int(v) for v in dataset.responses[n]]
                + [repr(float(dataset.y[n])), int(t_ind[n])]
            )


def read_dataset_csv(path, design: str, cutoff: float = 4.0) -> Dataset:
    """Read a dataset written by `write_dataset_csv`.

    Malformed rows raise ValueError naming the offending line number.
    """
    path = Path(path)
    cluster_ids, ys, ts, rows = [], [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["cluster_id", "person_id"]:
            raise ValueError(f"{path}: line 1: expected header starting with cluster_id,person_id")
        k = len(header) - 4
        if k < 1 or header[2 : 2 + k] != [f"x{i+1}" for i in range(k)] or header[-2:] != ["y", "t"]:
            raise ValueError(f"{path}: line 1: malformed header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                cluster_ids.append(int(row[0]))
                items = [int(v) for v in row[2 : 2 + k]]
                if any(v not in (0, 1) for v in items):
                    raise ValueError("item responses must be 0 or 1")
                rows.append(items)
                ys.append(float(row[2 + k]))
                ts.append(int(row[3 + k]))
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    cluster_arr = np.asarray(cluster_ids)
    uniq, remapped = np.unique(cluster_arr, return_inverse=True)
    n_clusters = uniq.size
    t_arr = np.asarray(ts, dtype=np.int8)
    if design == "hrd":
        treatment = np.zeros(n_clusters, dtype=np.int8)
        for j in range(n_clusters):
            vals = np.unique(t_arr[remapped == j])
            if vals.size != 1:
                raise ValueError(
                    f"{path}: cluster {uniq[j]} mixes treatment values under the hrd design"
                )
            treatment[j] = vals[0]
    else:
        treatment = t_arr
    return Dataset(
        design=design,
        responses=np.asarray(rows, dtype=np.int8),
        y=np.asarray(ys, dtype=float),
        treatment=treatment,
        cluster_ids=remapped.astype(np.int64),
        n_clusters=n_clusters,
        cutoff=cutoff,
    )


def _struct_to_dict(struct) -> dict:
    if isinstance(struct, HrdParams):
        keys = (
            "intercept",
            "lrv_slope",
            "treatment_effect",
            "interaction",
            "delta_slope",
            "tau0",
            "sigma",
            "psi",
        )
    else:
        keys = (
            "intercept",
            "theta_slope",
            "delta_slope",
            "treatment_effect",
            "interaction",
            "tau0",
            "tau2",
            "tau02",
            "sigma",
            "psi",
        )
    return {k: getattr(struct, k) for k in keys}


def write_truth_json(dataset: Dataset, path) -> None:
    if dataset.truth is None:
        raise ValueError("dataset carries no truth record")
    meas = dataset.truth["measurement"]
    struct = dataset.truth["structural"]
    config: SimConfig = dataset.truth["config"]
    doc = {
        "design": dataset.design,
        "cutoff": dataset.cutoff,
        "seed": config.seed,
        "effect": config.effect,
        "measurement": {
            "slopes": [float(v) for v in meas.slopes],
            "intercepts": [float(v) for v in meas.intercepts],
        },
        "structural": _struct_to_dict(struct),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
