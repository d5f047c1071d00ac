"""Regular meshes on (0,1) and (0,1)^2 and the Gaussian prior N(0, (I - a*Lap)^-2).

The prior uses the analytic Neumann-Laplacian cosine eigenbasis, so the same
spectral object transfers between meshes. The discrete L2 inner product is the
(tensor-)trapezoid rule with mass lumping.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    IncompatibleMeshError,
    InvalidArgumentError,
    InvalidConfigurationError,
)


@dataclass(frozen=True)
class MeshDescriptor:
    """Regular mesh on (0,1) (dim=1) or (0,1)^2 (dim=2).

    2D nodes are ordered row-major in y: node (i, j) with coordinates
    (i*h, j*h) sits at flat index j*(n_cells+1) + i.
    """

    dim: int
    n_cells: int
    nodes: np.ndarray
    quad_weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MeshDescriptor)
            and self.dim == other.dim
            and self.n_cells == other.n_cells
        )

    def __hash__(self) -> int:
        return hash((self.dim, self.n_cells))


def build_mesh(dim: int, n_cells: int) -> MeshDescriptor:
    """Build a regular mesh with trapezoid quadrature weights.

    Parameters
    ----------
    dim : int
        1 or 2.
    n_cells : int
        Cells per axis, at least 2.
    """
    if n_cells < 2:
        raise InvalidConfigurationError(f"n_cells must be >= 2, got {n_cells}")
    if dim not in (1, 2):
        raise InvalidConfigurationError(f"dim must be 1 or 2, got {dim}")

    x = np.linspace(0.0, 1.0, n_cells + 1)
    w1 = np.full(n_cells + 1, 1.0 / n_cells)
    w1[0] *= 0.5
    w1[-1] *= 0.5

    if dim == 1:
        nodes = x.copy()
        weights = w1
    else:
        xx, yy = np.meshgrid(x, x, indexing="xy")
        nodes = np.column_stack([xx.ravel(), yy.ravel()])
        weights = np.outer(w1, w1).ravel()

    nodes.setflags(write=False)
    weights.setflags(write=False)
    return MeshDescriptor(dim=dim, n_cells=n_cells, nodes=nodes, quad_weights=weights)


@dataclass(frozen=True)
class MeshField:
    """Real-valued function sampled at mesh nodes."""

    mesh: MeshDescriptor
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.mesh.n_nodes,):
            raise InvalidArgumentError(
                f"expected {self.mesh.n_nodes} node values, got shape {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError("field values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def l2_norm(self) -> float:
        """Discrete (lumped trapezoid) L2 norm."""
        return math.sqrt(float(np.dot(self.mesh.quad_weights, self.values**2)))


def l2_inner(a: MeshField, b: MeshField) -> float:
    """Discrete L2 inner product of two fields on the same mesh."""
    if a.mesh != b.mesh:
        raise IncompatibleMeshError("fields live on different meshes")
    return float(np.dot(a.mesh.quad_weights, a.values * b.values))


def save_field(field_: MeshField, path: str) -> None:
    """Write `<path>.json` (mesh header) and `<path>.csv` (node values)."""
    with open(path + ".json", "w") as fh:
        json.dump({"dim": field_.mesh.dim, "n_cells": field_.mesh.n_cells}, fh)
        fh.write("\n")
    with open(path + ".csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for v in field_.values:
            writer.writerow([format(v, ".17g")])


def load_field(path: str) -> MeshField:
    """Read a field written by :func:`save_field`."""
    with open(path + ".json") as fh:
        header = json.load(fh)
    with open(path + ".csv", newline="") as fh:
        values = np.array([float(row[0]) for row in csv.reader(fh) if row])
    mesh = build_mesh(header["dim"], header["n_cells"])
    return MeshField(mesh, values)


@dataclass(frozen=True)
class EigenPair:
    """One eigenpair of the prior covariance, evaluated on a mesh."""

    index: tuple
    eigenfunction: MeshField
    lam: float


def _eigen_index_table(alpha: float, dim: int, count: int, max_freq: int):
    """Multi-indices and eigenvalues, sorted by decreasing eigenvalue.

    Ties broken lexicographically on the multi-index.
    """
    if dim == 1:
        indices = [(k,) for k in range(max_freq + 1)]
    else:
        indices = [(j, k) for j in range(max_freq + 1) for k in range(max_freq + 1)]
    lams = [(1.0 + alpha * math.pi**2 * sum(i**2 for i in idx)) ** -2 for idx in indices]
    order = sorted(range(len(indices)), key=lambda i: (-lams[i], indices[i]))
    return [(indices[i], lams[i]) for i in order[:count]]


def _eval_eigenfunction(index: tuple, mesh: MeshDescriptor) -> np.ndarray:
    def mode(k, x):
        if k == 0:
            return np.ones_like(x)
        return math.sqrt(2.0) * np.cos(k * math.pi * x)

    if mesh.dim == 1:
        return mode(index[0], mesh.nodes)
    return mode(index[0], mesh.nodes[:, 0]) * mode(index[1], mesh.nodes[:, 1])


def eigenpairs(alpha: float, mesh: MeshDescriptor, count: int) -> list[EigenPair]:
    """First `count` eigenpairs of (I - alpha*Lap)^-2 with Neumann condition.

    1D eigenfunctions are 1 and sqrt(2)*cos(k*pi*x); 2D are tensor products.
    Sorted by decreasing eigenvalue with lexicographic tie-break.
    """
    if count < 1:
        raise InvalidConfigurationError("count must be >= 1")
    # frequencies at or above n_cells alias on the trapezoid grid and lose
    # discrete orthonormality, so only frequencies up to n_cells-1 are usable
    max_freq = mesh.n_cells - 1
    available = max_freq + 1 if mesh.dim == 1 else (max_freq + 1) ** 2
    if count > available:
        raise InvalidConfigurationError(
            f"count={count} exceeds the {available} alias-free modes on this mesh"
        )
    table = _eigen_index_table(alpha, mesh.dim, count, max_freq)
    return [
        EigenPair(idx, MeshField(mesh, _eval_eigenfunction(idx, mesh)), lam)
        for idx, lam in table
    ]


def _default_n_kl(lams: np.ndarray) -> int:
    """Smallest truncation capturing >= 99.9% of the available spectrum mass."""
    total = lams.sum()
    cum = np.cumsum(lams)
    return int(np.searchsorted(cum, 0.999 * total) + 1)


@dataclass(frozen=True)
class PriorMeasure:
    """Gaussian measure N(0, (I - alpha*Lap)^-2) truncated to `n_eigen` modes."""

    alpha: float
    mesh: MeshDescriptor
    eigen: list[EigenPair]
    n_kl: int
    # cached dense eigenfunction matrix, (n_nodes, n_eigen)
    basis: np.ndarray = field(repr=False, default=None)
    lams: np.ndarray = field(repr=False, default=None)

    @classmethod
    def build(
        cls,
        alpha: float,
        mesh: MeshDescriptor,
        n_eigen: int | None = None,
        n_kl: int | None = None,
    ) -> "PriorMeasure":
        if n_eigen is None:
            cap = mesh.n_cells if mesh.dim == 1 else min(mesh.n_cells**2, 400)
            n_eigen = cap
        pairs = eigenpairs(alpha, mesh, n_eigen)
        lams = np.array([p.lam for p in pairs])
        if n_kl is None:
            n_kl = _default_n_kl(lams)
        if n_kl > len(pairs):
            raise InvalidConfigurationError("n_kl exceeds available eigenpairs")
        basis = np.column_stack([p.eigenfunction.values for p in pairs])
        basis.setflags(write=False)
        lams.setflags(write=False)
        return cls(alpha=alpha, mesh=mesh, eigen=pairs, n_kl=n_kl, basis=basis, lams=lams)

    @property
    def n_eigen(self) -> int:
        return len(self.eigen)

    def field_from_coeffs(self, coeffs: np.ndarray) -> MeshField:
        coeffs = np.asarray(coeffs, dtype=float)
        return MeshField(self.mesh, self.basis[:, : coeffs.size] @ coeffs)

    def sample_coeffs(self, rng: np.random.Generator) -> np.ndarray:
        """KL coefficients sqrt(lam_i)*xi_i of one prior draw, length n_kl."""
        xi = rng.standard_normal(self.n_kl)
        return np.sqrt(self.lams[: self.n_kl]) * xi

    def sample(self, rng: np.random.Generator) -> MeshField:
        return self.field_from_coeffs(self.sample_coeffs(rng))


def sample_prior(prior: PriorMeasure, rng: np.random.Generator) -> MeshField:
    """One Karhunen-Loeve draw u = sum sqrt(lam_i) xi_i phi_i, i < n_kl."""
    return prior.sample(rng)


def project(field_: MeshField, prior: PriorMeasure, M: int) -> np.ndarray:
    """Leading-M spectral coefficients <field, phi_i> (quadrature-weighted)."""
    if field_.mesh != prior.mesh:
        raise IncompatibleMeshError("field and prior live on different meshes")
    if M > prior.n_eigen:
        raise InvalidArgumentError(f"M={M} exceeds prior eigenpair count {prior.n_eigen}")
    weighted = prior.mesh.quad_weights * field_.values
    return prior.basis[:, :M].T @ weighted


def lift(coeffs: np.ndarray, prior: PriorMeasure) -> MeshField:
    """Field sum_i coeffs_i phi_i in the leading eigenbasis."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size > prior.n_eigen:
        raise InvalidArgumentError("more coefficients than available eigenpairs")
    return prior.field_from_coeffs(coeffs)


def basis_at_points(prior: PriorMeasure, points, M: int) -> np.ndarray:
    """Analytic evaluation of the first M eigenfunctions at arbitrary points.

    Returns an (n_points, M) matrix; points may lie anywhere in the closed
    unit domain, independent of the prior's mesh.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise InvalidArgumentError("evaluation point outside the unit domain")
    if M > prior.n_eigen:
        raise InvalidArgumentError(f"M={M} exceeds prior eigenpair count")

    def mode(k, x):
        if k == 0:
            return np.ones_like(x)
        return math.sqrt(2.0) * np.cos(k * math.pi * x)

    out = np.empty((pts.shape[0], M))
    for i in range(M):
        idx = prior.eigen[i].index
        if prior.mesh.dim == 1:
            out[:, i] = mode(idx[0], pts[:, 0])
        else:
            out[:, i] = mode(idx[0], pts[:, 0]) * mode(idx[1], pts[:, 1])
    return out


def cm_inner(a: np.ndarray, b: np.ndarray, prior: PriorMeasure) -> float:
    """Cameron-Martin inner product sum lam_i^-1 a_i b_i."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgumentError("coefficient vectors must have equal length")
    lam = prior.lams[: a.size]
    return float(np.sum(a * b / lam))
