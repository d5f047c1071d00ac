"""Benchmark PDE forward maps, point observation, likelihood potential and gradient.

Two problems: a 1D linear reaction-diffusion equation with Neumann boundary,
and 2D steady Darcy flow with log-permeability and zero Dirichlet boundary.
Both use piecewise-linear finite elements with lumped mass, which makes the
adjoint gradient exact in the discrete L2 inner product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidArgumentError, InvalidConfigurationError
from .mesh_prior import MeshDescriptor, MeshField, build_mesh


@dataclass(frozen=True)
class Observation:
    """Point observations d = S(w) + noise with precision tau."""

    points: np.ndarray
    data: np.ndarray
    tau: float

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        data = np.asarray(self.data, dtype=float)
        if data.shape != (pts.shape[0],):
            raise InvalidArgumentError("data length must equal point count")
        if not self.tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        pts.setflags(write=False)
        data.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "data", data)


def save_observation(obs: Observation, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "points": obs.points.tolist(),
                "data": obs.data.tolist(),
                "tau": obs.tau,
            },
            fh,
            indent=1,
        )
        fh.write("\n")


def load_observation(path: str) -> Observation:
    with open(path) as fh:
        raw = json.load(fh)
    return Observation(np.array(raw["points"]), np.array(raw["data"]), raw["tau"])


def obs_matrix(mesh: MeshDescriptor, points) -> sp.csr_matrix:
    """Sparse interpolation matrix S with S @ values = field at `points`.

    1D: linear on cells. 2D: linear on the two triangles of each cell
    (diagonal from the lower-left to the upper-right corner).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != mesh.dim:
        raise InvalidArgumentError(
            f"points have dimension {pts.shape[1]}, mesh has {mesh.dim}"
        )
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise InvalidArgumentError("observation point outside the unit domain")
    n = mesh.n_cells
    rows, cols, vals = [], [], []

    def cell_coord(x):
        i = min(int(x * n), n - 1)
        return i, x * n - i

    for r, p in enumerate(pts):
        if mesh.dim == 1:
            i, s = cell_coord(p[0])
            entries = [(i, 1.0 - s), (i + 1, s)]
        else:
            i, s = cell_coord(p[0])
            j, t = cell_coord(p[1])
            stride = n + 1
            n00 = j * stride + i
            n10 = n00 + 1
            n01 = n00 + stride
            n11 = n01 + 1
            if s >= t:
                entries = [(n00, 1.0 - s), (n10, s - t), (n11, t)]
            else:
                entries = [(n00, 1.0 - t), (n01, t - s), (n11, s)]
        for c, v in entries:
            if v != 0.0:
                rows.append(r)
                cols.append(c)
                vals.append(v)
    return sp.csr_matrix((vals, (rows, cols)), shape=(pts.shape[0], mesh.n_nodes))


_OBS_CACHE: dict = {}


def _obs_matrix_cached(mesh: MeshDescriptor, points) -> sp.csr_matrix:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    key = (mesh.dim, mesh.n_cells, pts.tobytes())
    S = _OBS_CACHE.get(key)
    if S is None:
        S = obs_matrix(mesh, pts)
        if len(_OBS_CACHE) > 64:
            _OBS_CACHE.clear()
        _OBS_CACHE[key] = S
    return S


def observe(w: MeshField, points) -> np.ndarray:
    """Piecewise-(bi)linear interpolation of w at each point; exact at nodes."""
    return obs_matrix(w.mesh, points) @ w.values


class EllipticProblem:
    """1D problem -a_pde * w'' + w = u on (0,1) with zero Neumann flux.

    The linear system is prefactorized once; solves reuse the factorization.
    """

    def __init__(self, mesh: MeshDescriptor, alpha_pde: float = 1.0):
        if mesh.dim != 1:
            raise InvalidConfigurationError("EllipticProblem requires a 1D mesh")
        if not alpha_pde > 0:
            raise InvalidConfigurationError(f"alpha_pde must be > 0, got {alpha_pde}")
        self.mesh = mesh
        self.alpha_pde = alpha_pde
        n = mesh.n_cells
        h = mesh.h
        main = np.full(n + 1, 2.0 / h)
        main[0] = main[-1] = 1.0 / h
        stiff = sp.diags(
            [np.full(n, -1.0 / h), main, np.full(n, -1.0 / h)], [-1, 0, 1]
        )
        # lumped mass = trapezoid quadrature weights
        self.lumped = mesh.quad_weights
        system = (alpha_pde * stiff + sp.diags(self.lumped)).tocsc()
        self._lu = splu(system)

    def solve(self, u: MeshField) -> MeshField:
        if u.mesh != self.mesh:
            raise InvalidArgumentError("input field is on a different mesh")
        return MeshField(self.mesh, self._lu.solve(self.lumped * u.values))

    def solve_adjoint(self, point_loads: np.ndarray) -> np.ndarray:
        """Solve the (self-adjoint) system against a raw right-hand side."""
        return self._lu.solve(point_loads)


def _triangle_stiffness(verts: np.ndarray) -> np.ndarray:
    """3x3 P1 stiffness of one triangle with unit conductivity."""
    p0, p1, p2 = verts
    area2 = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
    # grad of barycentric coordinates, rows are vertices
    g = np.array(
        [
            [p1[1] - p2[1], p2[0] - p1[0]],
            [p2[1] - p0[1], p0[0] - p2[0]],
            [p0[1] - p1[1], p1[0] - p0[0]],
        ]
    ) / area2
    return 0.5 * abs(area2) * (g @ g.T)


class DarcyProblem:
    """2D Darcy flow -div(exp(u) grad w) = f, w = 0 on the boundary.

    Each square cell splits into two triangles along the lower-left to
    upper-right diagonal; exp(u) is constant per element (vertex average).
    """

    def __init__(self, mesh: MeshDescriptor, source_f: MeshField | None = None):
        if mesh.dim != 2:
            raise InvalidConfigurationError("DarcyProblem requires a 2D mesh")
        self.mesh = mesh
        if source_f is None:
            source_f = MeshField(mesh, np.ones(mesh.n_nodes))
        elif source_f.mesh != mesh:
            raise InvalidArgumentError("source field is on a different mesh")
        self.source_f = source_f

        n = mesh.n_cells
        stride = n + 1
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        n00 = (jj * stride + ii).ravel()
        n10 = n00 + 1
        n01 = n00 + stride
        n11 = n01 + 1
        # lower triangles then upper triangles, (n_elem, 3) vertex indices
        self.tri = np.vstack(
            [
                np.column_stack([n00, n10, n11]),
                np.column_stack([n00, n11, n01]),
            ]
        )
        h = mesh.h
        k_lower = _triangle_stiffness(np.array([[0, 0], [h, 0], [h, h]]))
        k_upper = _triangle_stiffness(np.array([[0, 0], [h, h], [0, h]]))
        n_sq = n * n
        self.k_local = np.concatenate(
            [np.broadcast_to(k_lower, (n_sq, 3, 3)), np.broadcast_to(k_upper, (n_sq, 3, 3))]
        )
        self._coo_rows = np.repeat(self.tri, 3, axis=1).ravel()
        self._coo_cols = np.tile(self.tri, (1, 3)).ravel()

        x = mesh.nodes[:, 0]
        y = mesh.nodes[:, 1]
        self.interior = np.flatnonzero((x > 0) & (x < 1) & (y > 0) & (y < 1))
        # interior renumbering for the Dirichlet-reduced system
        self._renum = -np.ones(mesh.n_nodes, dtype=int)
        self._renum[self.interior] = np.arange(self.interior.size)
        self.lumped = mesh.quad_weights
        self._load_int = (self.lumped * self.source_f.values)[self.interior]

    def _assemble(self, u_values: np.ndarray):
        kappa = np.exp(u_values[self.tri].mean(axis=1))
        data = (kappa[:, None, None] * self.k_local).ravel()
        full = sp.coo_matrix(
            (data, (self._coo_rows, self._coo_cols)),
            shape=(self.mesh.n_nodes, self.mesh.n_nodes),
        ).tocsr()
        return full[self.interior][:, self.interior].tocsc(), kappa

    def solve(self, u: MeshField) -> MeshField:
        if u.mesh != self.mesh:
            raise InvalidArgumentError("input field is on a different mesh")
        system, _ = self._assemble(u.values)
        w = np.zeros(self.mesh.n_nodes)
        w[self.interior] = splu(system).solve(self._load_int)
        return MeshField(self.mesh, w)

    def solve_with_adjoint(self, u_values, point_loads):
        """Forward solution and adjoint solution for a raw nodal load vector."""
        system, kappa = self._assemble(u_values)
        lu = splu(system)
        w = np.zeros(self.mesh.n_nodes)
        p = np.zeros(self.mesh.n_nodes)
        w[self.interior] = lu.solve(self._load_int)
        p[self.interior] = lu.solve(point_loads[self.interior])
        return w, p, kappa


def solve_elliptic(problem: EllipticProblem, u: MeshField) -> MeshField:
    """Finite-element solution of -a_pde * w'' + w = u; linear in u."""
    return problem.solve(u)


def solve_darcy(problem: DarcyProblem, u: MeshField) -> MeshField:
    """Finite-element Darcy solution for log-permeability u."""
    return problem.solve(u)


def phi(problem, obs: Observation, u: MeshField) -> float:
    """Likelihood potential 0.5 * tau * ||d - S(solve(u))||^2."""
    w = problem.solve(u)
    r = _obs_matrix_cached(problem.mesh, obs.points) @ w.values - obs.data
    return 0.5 * obs.tau * float(r @ r)


def grad_phi(problem, obs: Observation, u: MeshField) -> MeshField:
    """Discrete-L2 gradient of phi at u via the adjoint equation.

    Point loads are realized as the transpose of the observation stencil,
    which makes the gradient exactly adjoint-consistent on the mesh.
    """
    if not isinstance(problem, (EllipticProblem, DarcyProblem)):
        raise InvalidArgumentError(f"unsupported problem type {type(problem).__name__}")
    S = _obs_matrix_cached(problem.mesh, obs.points)
    if isinstance(problem, EllipticProblem):
        w = problem.solve(u)
        r = S @ w.values - obs.data
        p = problem.solve_adjoint(obs.tau * (S.T @ r))
        return MeshField(problem.mesh, p)
    if isinstance(problem, DarcyProblem):
        # first solve to form the residual, second factorization reused for both
        w0 = problem.solve(u)
        r = S @ w0.values - obs.data
        w, p, kappa = problem.solve_with_adjoint(u.values, obs.tau * (S.T @ r))
        w_e = w[problem.tri]
        p_e = p[problem.tri]
        # dPhi/du_j = -sum over elements touching j of (kappa_e/3) p_e^T K_e w_e
        elem = np.einsum("ei,eij,ej->e", p_e, problem.k_local, w_e) * (kappa / 3.0)
        g_vec = np.zeros(problem.mesh.n_nodes)
        np.add.at(g_vec, problem.tri.ravel(), -np.repeat(elem, 3))
        return MeshField(problem.mesh, g_vec / problem.lumped)
    raise InvalidArgumentError(f"unsupported problem type {type(problem).__name__}")


def phi_and_grad(problem, obs: Observation, u: MeshField):
    """Potential value and its L2 gradient sharing one system factorization."""
    if not isinstance(problem, (EllipticProblem, DarcyProblem)):
        raise InvalidArgumentError(f"unsupported problem type {type(problem).__name__}")
    S = _obs_matrix_cached(problem.mesh, obs.points)
    if isinstance(problem, EllipticProblem):
        w = problem.solve(u)
        r = S @ w.values - obs.data
        p = problem.solve_adjoint(obs.tau * (S.T @ r))
        return 0.5 * obs.tau * float(r @ r), MeshField(problem.mesh, p)
    if isinstance(problem, DarcyProblem):
        system, kappa = problem._assemble(u.values)
        lu = splu(system)
        w = np.zeros(problem.mesh.n_nodes)
        w[problem.interior] = lu.solve(problem._load_int)
        r = S @ w - obs.data
        loads = obs.tau * (S.T @ r)
        p = np.zeros(problem.mesh.n_nodes)
        p[problem.interior] = lu.solve(loads[problem.interior])
        elem = np.einsum("ei,eij,ej->e", p[problem.tri], problem.k_local, w[problem.tri])
        elem *= kappa / 3.0
        g_vec = np.zeros(problem.mesh.n_nodes)
        np.add.at(g_vec, problem.tri.ravel(), -np.repeat(elem, 3))
        grad = MeshField(problem.mesh, g_vec / problem.lumped)
        return 0.5 * obs.tau * float(r @ r), grad
    raise InvalidArgumentError(f"unsupported problem type {type(problem).__name__}")


def generate_data(
    problem,
    truth,
    obs_points,
    noise_pct: float,
    rng: np.random.Generator,
) -> Observation:
    """Synthetic observations from a ground truth on the problem's (fine) mesh.

    Noise scale follows tau^-1 = (noise_pct * max|S G u|)^2 with iid Gaussian
    noise added to each observation entry.

    Parameters
    ----------
    truth : MeshField or callable
        Ground truth on the problem mesh, or a function of node coordinates.
    """
    if not noise_pct > 0:
        raise InvalidConfigurationError(f"noise_pct must be > 0, got {noise_pct}")
    if callable(truth):
        nodes = problem.mesh.nodes
        vals = truth(nodes) if problem.mesh.dim == 1 else truth(nodes[:, 0], nodes[:, 1])
        truth = MeshField(problem.mesh, vals)
    clean = observe(problem.solve(truth), obs_points)
    noise_std = noise_pct * float(np.max(np.abs(clean)))
    tau = noise_std**-2
    data = clean + noise_std * rng.standard_normal(clean.size)
    return Observation(np.atleast_2d(np.asarray(obs_points, dtype=float)), data, tau)
