"""Preconditioned Crank-Nicolson sampler and effective-sample-size estimate.

The chain state is the vector of Karhunen-Loeve coefficients, so proposals
v = sqrt(1-beta^2) u + beta xi stay exact draws from the prior when the
potential vanishes. Moments are accumulated in streaming form; retained
fields are never stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigurationError, UndefinedMetricError
from .forward_models import (
    DarcyProblem,
    EllipticProblem,
    Observation,
    obs_matrix,
    phi,
)
from .mesh_prior import MeshDescriptor, MeshField, PriorMeasure, build_mesh


@dataclass(frozen=True)
class PcnConfig:
    beta: float = 0.01
    n_samples: int = 1_000_000
    burn_in: int = 100_000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise InvalidConfigurationError("beta must be in (0, 1]")
        if self.burn_in >= self.n_samples:
            raise InvalidConfigurationError("burn_in must be < n_samples")
        if self.thin < 1:
            raise InvalidConfigurationError("thin must be >= 1")


@dataclass
class ChainSummary:
    """Streaming moments and the scalar functional trace of one chain."""

    mean: MeshField
    var: MeshField
    cov: np.ndarray
    acceptance_rate: float
    trace: np.ndarray
    n_retained: int

    def save(self, path_prefix: str) -> None:
        from .mesh_prior import save_field

        save_field(self.mean, path_prefix + "_mean")
        save_field(self.var, path_prefix + "_var")
        with open(path_prefix + "_summary.json", "w") as fh:
            json.dump(
                {
                    "acceptance_rate": self.acceptance_rate,
                    "n_retained": self.n_retained,
                    "ess": ess(self.trace),
                },
                fh,
                indent=1,
            )
            fh.write("\n")


def _phi_evaluator(prior: PriorMeasure, problem, obs: Observation):
    """Potential as a function of KL coefficients, with a linear fast path."""
    basis = prior.basis[:, : prior.n_kl]
    if isinstance(problem, EllipticProblem):
        # observation is linear in u: precompute the coefficient-to-data map
        S = obs_matrix(problem.mesh, obs.points)
        n_obs = obs.points.shape[0]
        B = np.empty((n_obs, prior.n_kl))
        for i in range(prior.n_kl):
            w = problem.solve(MeshField(problem.mesh, basis[:, i]))
            B[:, i] = S @ w.values

        def phi_of(coeffs):
            r = B @ coeffs - obs.data
            return 0.5 * obs.tau * float(r @ r)

        return phi_of

    def phi_of(coeffs):
        return phi(problem, obs, MeshField(problem.mesh, basis @ coeffs))

    return phi_of


def pcn_chain(
    prior: PriorMeasure,
    problem,
    obs: Observation | None,
    config: PcnConfig,
    trace_point=None,
) -> ChainSummary:
    """Run one pCN chain targeting the posterior (prior itself if obs is None).

    trace_point defaults to the domain midpoint; the trace records the field
    value there at every retained step.
    """
    mesh = prior.mesh
    if trace_point is None:
        trace_point = [0.5] if mesh.dim == 1 else [0.5, 0.5]
    trace_S = obs_matrix(mesh, [trace_point])
    trace_vec = (trace_S @ prior.basis[:, : prior.n_kl]).ravel()

    if obs is None:
        phi_of = lambda coeffs: 0.0
    else:
        phi_of = _phi_evaluator(prior, problem, obs)

    rng = np.random.default_rng(config.seed)
    sqrt_lam = np.sqrt(prior.lams[: prior.n_kl])
    n_nodes = mesh.n_nodes
    basis = prior.basis[:, : prior.n_kl]

    coeffs = sqrt_lam * rng.standard_normal(prior.n_kl)
    cur_phi = phi_of(coeffs)
    root = np.sqrt(1.0 - config.beta**2)

    sum_f = np.zeros(n_nodes)
    sum_outer = np.zeros((n_nodes, n_nodes))
    trace_vals = []
    n_retained = 0
    n_accept = 0

    for k in range(config.n_samples):
        xi = sqrt_lam * rng.standard_normal(prior.n_kl)
        prop = root * coeffs + config.beta * xi
        prop_phi = phi_of(prop)
        if np.log(rng.random()) < cur_phi - prop_phi:
            coeffs = prop
            cur_phi = prop_phi
            n_accept += 1
        if k >= config.burn_in and (k - config.burn_in) % config.thin == 0:
            u_vals = basis @ coeffs
            sum_f += u_vals
            sum_outer += np.outer(u_vals, u_vals)
            trace_vals.append(float(trace_vec @ coeffs))
            n_retained += 1

    mean_vals = sum_f / n_retained
    # covariance with divisor m-1, variance with divisor m (matching the
    # moment estimators used by the diagnostics module)
    centered = sum_outer - n_retained * np.outer(mean_vals, mean_vals)
    cov = centered / max(n_retained - 1, 1)
    var = np.maximum(np.diag(centered) / n_retained, 0.0)
    return ChainSummary(
        mean=MeshField(mesh, mean_vals),
        var=MeshField(mesh, var),
        cov=cov,
        acceptance_rate=n_accept / config.n_samples,
        trace=np.array(trace_vals),
        n_retained=n_retained,
    )


def ess(trace: np.ndarray) -> float:
    """Effective sample size n / (1 + 2 sum gamma_k).

    Autocovariances use the biased estimator; the sum truncates at the first
    negative autocorrelation.
    """
    trace = np.asarray(trace, dtype=float)
    n = trace.size
    if n < 10:
        raise InvalidConfigurationError("trace must have at least 10 entries")
    x = trace - trace.mean()
    c0 = float(x @ x) / n
    if c0 <= 0:
        raise UndefinedMetricError("trace has zero variance")
    total = 0.0
    for k in range(1, n):
        gamma = float(x[:-k] @ x[k:]) / n / c0
        if gamma < 0:
            break
        total += gamma
    return n / (1.0 + 2.0 * total)


# canned benchmark setups at full experiment scale and at desk scale
PCN_PRESETS = {
    "elliptic-full": {
        "dim": 1,
        "n_cells": 100,
        "beta": 0.01,
        "n_samples": 3_000_000,
        "burn_in": 100_000,
        "thin": 10,
    },
    "elliptic-desk": {
        "dim": 1,
        "n_cells": 100,
        "beta": 0.01,
        "n_samples": 200_000,
        "burn_in": 20_000,
        "thin": 1,
    },
    "darcy-full": {
        "dim": 2,
        "n_cells": 20,
        "beta": 0.01,
        "n_samples": 1_000_000,
        "burn_in": 100_000,
        "thin": 10,
    },
    "darcy-desk": {
        "dim": 2,
        "n_cells": 20,
        "beta": 0.01,
        "n_samples": 100_000,
        "burn_in": 10_000,
        "thin": 1,
    },
}


def run_reference(
    preset: str,
    prior: PriorMeasure,
    problem,
    obs: Observation,
    seed: int = 0,
    out_prefix: str | None = None,
) -> ChainSummary:
    """Run a canned reference chain for one of the two benchmarks."""
    if preset not in PCN_PRESETS:
        raise InvalidConfigurationError(
            f"unknown preset '{preset}', choose from {sorted(PCN_PRESETS)}"
        )
    p = PCN_PRESETS[preset]
    config = PcnConfig(
        beta=p["beta"],
        n_samples=p["n_samples"],
        burn_in=p["burn_in"],
        thin=p["thin"],
        seed=seed,
    )
    summary = pcn_chain(prior, problem, obs, config)
    if out_prefix is not None:
        summary.save(out_prefix)
    return summary
