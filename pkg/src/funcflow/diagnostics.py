"""Comparison metrics between sample sets: moments, relative errors,
re-simulation error, and the mesh-invariance study harness.

The variance estimator divides by m and the covariance estimator by m - 1;
relative errors are ratios of squared sums, not of norms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    IncompatibleMeshError,
    InvalidArgumentError,
    InvalidConfigurationError,
    UndefinedMetricError,
)
from .flows import FlowStack, make_layer
from .forward_models import observe
from .mesh_prior import MeshField, PriorMeasure, build_mesh
from .vi_trainer import sample_posterior


@dataclass
class MomentSummary:
    """Sample mean, variance, and (optionally) the full node covariance."""

    mean: MeshField
    var: MeshField
    cov: np.ndarray | None = None


def moments(samples: list, with_cov: bool = True) -> MomentSummary:
    """Mean, variance (divisor m), covariance (divisor m - 1) of fields."""
    if len(samples) < 2:
        raise InvalidArgumentError("need at least 2 samples")
    mesh = samples[0].mesh
    if any(s.mesh != mesh for s in samples):
        raise IncompatibleMeshError("samples live on different meshes")
    X = np.stack([s.values for s in samples])
    m = X.shape[0]
    mean = X.mean(axis=0)
    centered = X - mean
    var = (centered**2).sum(axis=0) / m
    cov = centered.T @ centered / (m - 1) if with_cov else None
    return MomentSummary(MeshField(mesh, mean), MeshField(mesh, var), cov)


def relative_mean_error(mean_a: MeshField, mean_b: MeshField) -> float:
    """Squared-norm ratio ||a - b||^2 / ||b||^2 in the discrete L2 norm."""
    if mean_a.mesh != mean_b.mesh:
        raise IncompatibleMeshError("means live on different meshes")
    denom = mean_b.l2_norm() ** 2
    if denom <= 0:
        raise UndefinedMetricError("reference mean has zero norm")
    diff = MeshField(mean_a.mesh, mean_a.values - mean_b.values)
    return diff.l2_norm() ** 2 / denom


def _offset_pairs(cov: np.ndarray, k: int) -> np.ndarray:
    n = cov.shape[0]
    if k >= n:
        raise InvalidArgumentError(f"offset {k} too large for {n} nodes")
    idx = np.arange(n - k)
    return cov[idx, idx + k]


def covariance_relative_errors(
    summary_a: MomentSummary, summary_b: MomentSummary, offsets=(0, 10, 20)
) -> dict:
    """Squared-sum ratios between two covariance estimates.

    Returns the total error over all node pairs plus one entry per diagonal
    offset k (k = 0 is the variance row). Offsets index nodes in their
    storage order, row-major for 2D meshes.
    """
    ca, cb = summary_a.cov, summary_b.cov
    if ca is None or cb is None:
        raise InvalidArgumentError("both summaries need full covariance matrices")
    if ca.shape != cb.shape:
        raise InvalidArgumentError("covariance shapes differ")
    out = {}
    denom = float((cb**2).sum())
    if denom <= 0:
        raise UndefinedMetricError("reference covariance is identically zero")
    out["total"] = float(((ca - cb) ** 2).sum()) / denom
    for k in offsets:
        a = _offset_pairs(ca, k)
        b = _offset_pairs(cb, k)
        d = float((b**2).sum())
        if d <= 0:
            raise UndefinedMetricError(f"reference covariance zero at offset {k}")
        out[f"offset_{k}"] = float(((a - b) ** 2).sum()) / d
    return out


def re_simulation_error(samples_per_case, truth_clean_per_case, problem, obs_points) -> float:
    """Mean observation-space distance between samples and their ground truth.

    For each case, each posterior sample u contributes ||S G(u) - S G(u_t)||
    (plain Euclidean norm); truth_clean_per_case holds the noise-free
    observation vectors S G(u_t).
    """
    if len(samples_per_case) != len(truth_clean_per_case):
        raise InvalidArgumentError("case counts differ")
    total = 0.0
    count = 0
    for samples, clean in zip(samples_per_case, truth_clean_per_case):
        clean = np.asarray(clean, dtype=float)
        for u in samples:
            sim = observe(problem.solve(u), obs_points)
            total += float(np.linalg.norm(sim - clean))
            count += 1
    if count == 0:
        raise InvalidArgumentError("no samples supplied")
    return total / count


@dataclass
class StudyRow:
    n_cells: int
    mean_l2_error: float
    cov_values: dict


@dataclass
class StudyReport:
    rows: list

    def save_csv(self, path: str) -> None:
        if not self.rows:
            raise InvalidArgumentError("empty study report")
        keys = sorted(self.rows[0].cov_values)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n_cells", "mean_l2_error"] + keys)
            for row in self.rows:
                writer.writerow(
                    [row.n_cells, format(row.mean_l2_error, ".17g")]
                    + [format(row.cov_values[k], ".17g") for k in keys]
                )


def _designated_points(dim: int):
    if dim == 1:
        return [[0.3], [0.5], [0.7]]
    return [[0.3, 0.3], [0.5, 0.5], [0.7, 0.7]]


def invariance_study(
    kinds: list,
    M: int,
    params: np.ndarray,
    alpha: float,
    dim: int,
    mesh_sizes: list,
    truth,
    n_post: int = 2000,
    seed: int = 0,
) -> StudyReport:
    """Apply one set of spectral flow parameters across several meshes.

    The flow is defined by spectral coefficients, so the same parameter
    vector is valid on every mesh; discretization invariance shows up as
    nearly mesh-independent error metrics. The truth is a callable evaluated
    at each mesh's nodes; mean error is measured against it in L2.
    """
    if len(mesh_sizes) < 2:
        raise InvalidConfigurationError("need at least two mesh sizes")
    rows = []
    pts = _designated_points(dim)
    for n_cells in mesh_sizes:
        mesh = build_mesh(dim, n_cells)
        cap = n_cells if dim == 1 else min(n_cells**2, 400)
        prior = PriorMeasure.build(alpha, mesh, n_kl=cap)
        rng = np.random.default_rng(0)
        stack = FlowStack([make_layer(k, M, rng) for k in kinds], prior)
        stack.set_params(params)
        samples = sample_posterior(stack, prior, n_post, seed)
        summ = moments(samples, with_cov=False)
        nodes = mesh.nodes
        tvals = truth(nodes) if dim == 1 else truth(nodes[:, 0], nodes[:, 1])
        diff = MeshField(mesh, summ.mean.values - tvals)
        err = diff.l2_norm()
        # covariance at the designated point pairs via point evaluation
        from .forward_models import obs_matrix

        S = obs_matrix(mesh, pts)
        vals = np.stack([S @ s.values for s in samples])
        vmean = vals.mean(axis=0)
        centered = vals - vmean
        C = centered.T @ centered / (vals.shape[0] - 1)
        cov_values = {}
        for i in range(len(pts)):
            for j in range(i, len(pts)):
                cov_values[f"c_{i}{j}"] = float(C[i, j])
        rows.append(StudyRow(n_cells, float(err), cov_values))
    return StudyReport(rows)


def save_errors_json(errors: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(errors, fh, indent=1)
        fh.write("\n")
