"""Meshes, prior eigenbasis, Karhunen-Loeve sampling, Cameron-Martin algebra."""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from funcflow.errors import (
    IncompatibleMeshError,
    InvalidArgumentError,
    InvalidConfigurationError,
)
from funcflow.mesh_prior import (
    MeshField,
    PriorMeasure,
    basis_at_points,
    build_mesh,
    cm_inner,
    eigenpairs,
    l2_inner,
    lift,
    load_field,
    project,
    sample_prior,
    save_field,
)

ALPHA = 0.1


class ZeroRng:
    """Stands in for a Generator whose normal draws are all zero."""

    def standard_normal(self, n):
        return np.zeros(n)


def neumann_operator(n_cells):
    """Lumped-mass FEM discretization of (I - ALPHA * Lap), 1D Neumann."""
    h = 1.0 / n_cells
    main = np.full(n_cells + 1, 2.0 / h)
    main[0] = main[-1] = 1.0 / h
    K = sp.diags([np.full(n_cells, -1 / h), main, np.full(n_cells, -1 / h)], [-1, 0, 1])
    w = np.full(n_cells + 1, h)
    w[0] = w[-1] = h / 2
    return (ALPHA * K + sp.diags(w)).tocsc(), sp.diags(w).tocsc()


def test_build_mesh_1d_weights():
    mesh = build_mesh(1, 100)
    assert mesh.n_nodes == 101
    assert np.allclose(mesh.nodes, np.arange(101) / 100)
    assert mesh.quad_weights[0] == pytest.approx(1 / 200)
    assert mesh.quad_weights[50] == pytest.approx(1 / 100)
    assert mesh.quad_weights.sum() == pytest.approx(1.0, rel=1e-12)


def test_build_mesh_2d_counts():
    mesh = build_mesh(2, 20)
    assert mesh.n_nodes == 441
    assert mesh.quad_weights.sum() == pytest.approx(1.0, rel=1e-12)
    # row-major: node (i, j) at j*(n+1)+i
    assert np.allclose(mesh.nodes[1], [0.05, 0.0])
    assert np.allclose(mesh.nodes[21], [0.0, 0.05])


def test_build_mesh_two_cells():
    mesh = build_mesh(1, 2)
    assert np.allclose(mesh.quad_weights, [0.25, 0.5, 0.25])


def test_build_mesh_rejects_bad_config():
    with pytest.raises(InvalidConfigurationError):
        build_mesh(1, 1)
    with pytest.raises(InvalidConfigurationError):
        build_mesh(3, 10)


def test_eigenpairs_zero_mode():
    mesh = build_mesh(1, 50)
    pairs = eigenpairs(ALPHA, mesh, 1)
    assert pairs[0].lam == pytest.approx(1.0)
    assert np.allclose(pairs[0].eigenfunction.values, 1.0)


def test_eigenvalues_against_numerical_oracle_1d():
    # generalized eigenproblem A v = theta W v has theta ~ 1 + ALPHA k^2 pi^2
    A, W = neumann_operator(1000)
    theta, _ = eigsh(A, k=4, M=W, sigma=0.9, which="LM")
    numeric = np.sort(theta.astype(float) ** -2)[::-1]
    mesh = build_mesh(1, 1000)
    analytic = np.array([p.lam for p in eigenpairs(ALPHA, mesh, 4)])
    assert np.max(np.abs(numeric - analytic) / analytic) < 1e-4


def test_eigenvalues_against_numerical_oracle_2d():
    # tensor structure: 2D eigenvalues of (I - ALPHA*Lap) are sums of 1D ones
    A, W = neumann_operator(512)
    theta, _ = eigsh(A, k=3, M=W, sigma=0.9, which="LM")
    t = np.sort(theta.astype(float))
    mode_11 = (t[1] + t[1] - 1.0) ** -2
    assert abs(mode_11 - (1 + 0.2 * np.pi**2) ** -2) / mode_11 < 1e-4


def test_eigenpairs_sorted_and_tiebreak():
    mesh = build_mesh(2, 20)
    pairs = eigenpairs(ALPHA, mesh, 10)
    lams = [p.lam for p in pairs]
    assert all(a >= b for a, b in zip(lams, lams[1:]))
    # degenerate pair (0,1)/(1,0): lexicographic order
    assert pairs[1].index == (0, 1)
    assert pairs[2].index == (1, 0)


def test_eigenpairs_count_limit():
    mesh = build_mesh(1, 10)
    with pytest.raises(InvalidConfigurationError):
        eigenpairs(ALPHA, mesh, mesh.n_nodes + 1)
    with pytest.raises(InvalidConfigurationError):
        eigenpairs(ALPHA, mesh, 0)


def test_orthonormality_on_inversion_meshes():
    for dim, n in [(1, 50), (1, 100), (1, 300), (2, 20)]:
        mesh = build_mesh(dim, n)
        prior = PriorMeasure.build(ALPHA, mesh)
        G = (prior.basis.T * mesh.quad_weights) @ prior.basis
        assert np.abs(G - np.eye(prior.n_eigen)).max() < 1e-8


def test_parseval_on_span():
    mesh = build_mesh(1, 100)
    prior = PriorMeasure.build(ALPHA, mesh)
    coeffs = np.random.default_rng(3).standard_normal(20)
    f = lift(coeffs, prior)
    assert f.l2_norm() ** 2 == pytest.approx(np.sum(coeffs**2), abs=1e-8)


def test_project_lift_round_trip():
    mesh = build_mesh(1, 100)
    prior = PriorMeasure.build(ALPHA, mesh)
    e2 = prior.eigen[2].eigenfunction
    c = project(e2, prior, 5)
    assert np.abs(c - np.array([0, 0, 1, 0, 0])).max() < 1e-8
    combo = MeshField(
        mesh, 3 * prior.basis[:, 0] + 2 * prior.basis[:, 1]
    )
    assert np.allclose(project(combo, prior, 2), [3, 2], atol=1e-8)
    zero = MeshField(mesh, np.zeros(mesh.n_nodes))
    assert np.allclose(project(zero, prior, 4), 0.0)
    # random span element round trip
    coeffs = np.random.default_rng(4).standard_normal(10)
    back = project(lift(coeffs, prior), prior, 10)
    assert np.abs(back - coeffs).max() < 1e-8


def test_project_mesh_mismatch():
    prior = PriorMeasure.build(ALPHA, build_mesh(1, 100))
    other = MeshField(build_mesh(1, 50), np.zeros(51))
    with pytest.raises(IncompatibleMeshError):
        project(other, prior, 3)


def test_sample_prior_forced_streams():
    mesh = build_mesh(1, 100)
    prior = PriorMeasure.build(ALPHA, mesh)
    zero = sample_prior(prior, ZeroRng())
    assert np.allclose(zero.values, 0.0)

    class UnitRng:
        def standard_normal(self, n):
            e = np.zeros(n)
            e[0] = 1.0
            return e

    one = sample_prior(prior, UnitRng())
    # first mode is the constant function with lam = 1
    assert np.allclose(one.values, 1.0, atol=1e-12)


def test_kl_sampling_law():
    mesh = build_mesh(1, 60)
    prior = PriorMeasure.build(ALPHA, mesh, n_kl=30)
    rng = np.random.default_rng(11)
    n = 20000
    coeffs = np.stack([prior.sample_coeffs(rng) for _ in range(n)])
    emp = coeffs.var(axis=0)
    rel = np.abs(emp - prior.lams[:30]) / prior.lams[:30]
    assert rel.max() < 0.05
    # nodal variance against the closed-form truncated sum
    var_nodes = (prior.basis[:, :30] ** 2 * prior.lams[:30]).sum(axis=1)
    samples = prior.basis[:, :30] @ coeffs.T
    assert np.abs(samples.var(axis=1) - var_nodes).max() / var_nodes.max() < 0.05


def test_cm_inner_values():
    prior = PriorMeasure.build(ALPHA, build_mesh(1, 100))
    e0 = np.array([1.0, 0.0])
    e1 = np.array([0.0, 1.0])
    assert cm_inner(e0, e0, prior) == pytest.approx(1.0)
    assert cm_inner(e0, e1, prior) == 0.0
    assert cm_inner(e1, e1, prior) == pytest.approx((1 + 0.1 * np.pi**2) ** 2, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        cm_inner(np.ones(3), np.ones(4), prior)


def test_cm_inner_positive_definite():
    prior = PriorMeasure.build(ALPHA, build_mesh(1, 100))
    rng = np.random.default_rng(8)
    for _ in range(20):
        a = rng.standard_normal(15)
        assert cm_inner(a, a, prior) > 0


def test_field_serialization_round_trip(tmp_path):
    mesh = build_mesh(1, 40)
    f = MeshField(mesh, np.random.default_rng(2).standard_normal(41))
    path = str(tmp_path / "field")
    save_field(f, path)
    g = load_field(path)
    assert g.mesh == mesh
    assert np.array_equal(g.values, f.values)
    # byte stability across writes
    save_field(g, str(tmp_path / "field2"))
    assert (tmp_path / "field.csv").read_bytes() == (tmp_path / "field2.csv").read_bytes()


def test_mesh_field_validation():
    mesh = build_mesh(1, 10)
    with pytest.raises(InvalidArgumentError):
        MeshField(mesh, np.zeros(5))
    with pytest.raises(InvalidArgumentError):
        MeshField(mesh, np.full(11, np.nan))


def test_l2_inner_mesh_guard():
    a = MeshField(build_mesh(1, 10), np.ones(11))
    b = MeshField(build_mesh(1, 20), np.ones(21))
    with pytest.raises(IncompatibleMeshError):
        l2_inner(a, b)


def test_basis_at_points_matches_nodes():
    mesh = build_mesh(2, 20)
    prior = PriorMeasure.build(ALPHA, mesh)
    B = basis_at_points(prior, mesh.nodes, 12)
    assert np.abs(B - prior.basis[:, :12]).max() < 1e-12
    with pytest.raises(InvalidArgumentError):
        basis_at_points(prior, [[1.5, 0.2]], 3)
