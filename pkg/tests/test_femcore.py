import math

import numpy as np
import pytest
import scipy.sparse as sp

from eitcorner.femcore import (
    CompatibilityError,
    NeumannData,
    NeumannSolver,
    assemble_stiffness,
    boundary_mean,
    boundary_trace_on_sigma,
    boundary_weights,
    conformity_violations,
    export_coo,
    solve_adjoint_source,
    solve_neumann,
    triangulate,
)
from eitcorner.geometry import build_parallelogram_decomposition, build_trapezoid_decomposition, build_trapezoid_domain


def square(r=1.0, full=True):
    d = build_parallelogram_decomposition(r, math.pi / 2)
    return d.full_boundary() if full else d


@pytest.fixture(scope="module")
def mesh():
    return triangulate(square(0.5), 0.1)


def test_single_cell_coarse_mesh():
    m = triangulate(square(), 0.5)
    assert m.n_triangles >= 8
    assert np.all(m.cell_index(square().cells) == 0)
    assert m.areas.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("d", [square(0.5), square(0.4), build_parallelogram_decomposition(0.3, 1.1)])
def test_conformity(d):
    m = triangulate(d, 0.1)
    assert conformity_violations(m, d.cells) == 0
    assert np.all(m.cell_index(d) >= 0)


def test_trapezoid_conformity():
    dom = build_trapezoid_domain(1, math.pi / 3, 0.3)
    d = build_trapezoid_decomposition(dom, 0.45)
    m = triangulate(d, 0.1)
    assert conformity_violations(m, d.cells) == 0
    assert m.areas.sum() == pytest.approx(dom.area, rel=1e-10)


def test_refinement_halves_h():
    a = triangulate(square(0.5), 0.2)
    b = triangulate(square(0.5), 0.1)
    assert 1 / 1.5 <= (a.h / b.h) / 2 <= 1.5


def test_min_angle(mesh):
    assert mesh.min_angle() >= 20.0 - 1e-9


def test_mesh_deterministic():
    assert triangulate(square(0.4), 0.1).signature == triangulate(square(0.4), 0.1).signature


def _linear_flux(gamma, c):
    return lambda x, nu: nu @ (np.asarray(gamma) @ c)


@pytest.mark.parametrize("gamma", [np.eye(2), np.diag([3.0, 0.5]), np.array([[2.0, 0.4], [0.4, 1.0]])])
def test_linear_solution_exact(mesh, gamma):
    c = np.array([1.0, 0.0])
    sol = solve_neumann(mesh, gamma, NeumannData.from_function(mesh, _linear_flux(gamma, c)))
    exact = mesh.nodes @ c
    exact = exact - boundary_mean(mesh, exact)
    assert np.abs(sol.u - exact).max() <= 1e-10


def test_compatibility_error(mesh):
    f = NeumannData.from_function(mesh, lambda x, nu: np.full(len(x), 0.1 / 4.0))
    with pytest.raises(CompatibilityError):
        solve_neumann(mesh, np.eye(2), f)


def test_non_positive_conductivity(mesh):
    f = NeumannData.from_function(mesh, _linear_flux(np.eye(2), np.array([1.0, 0.0])))
    with pytest.raises(ValueError):
        solve_neumann(mesh, np.diag([1.0, -1.0]), f)


def _random_compatible(mesh, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=mesh.n_nodes)
    c = boundary_weights(mesh)
    return NeumannData.from_nodal(mesh, v - (c @ v) / c.sum())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_galerkin_residual_and_mean_zero(mesh, seed):
    f = _random_compatible(mesh, seed)
    gamma = np.array([[1.5, 0.2], [0.2, 0.7]])
    sol = solve_neumann(mesh, gamma, f)
    K = assemble_stiffness(mesh, np.repeat(gamma[None], mesh.n_triangles, axis=0))
    c = boundary_weights(mesh)
    # the multiplier absorbs only the (zero) total flux
    assert np.abs(K @ sol.u - f.load()).max() <= 1e-10 * np.abs(f.load()).max()
    assert abs(c @ sol.u) <= 1e-10
    assert abs(sol.multiplier) <= 1e-10
    energy = sol.u @ (K @ sol.u)
    assert energy == pytest.approx(f.load() @ sol.u, rel=1e-8)


def test_concurrent_right_hand_sides(mesh):
    solver = NeumannSolver(mesh, np.repeat(np.eye(2)[None], mesh.n_triangles, axis=0))
    loads = np.column_stack([_random_compatible(mesh, s).load() for s in range(4)])
    U, _, _ = solver.solve(loads)
    for j in range(4):
        u, _, _ = solver.solve(loads[:, j])
        assert np.allclose(U[:, j], u, atol=1e-12)


def test_stiffness_symmetric_and_kills_constants(mesh):
    K = assemble_stiffness(mesh, np.repeat(np.array([[2.0, 0.3], [0.3, 1.0]])[None], mesh.n_triangles, axis=0))
    assert abs(K - K.T).max() <= 1e-14
    assert np.abs(K @ np.ones(mesh.n_nodes)).max() <= 1e-12


def test_adjoint_source_examples(mesh):
    gamma = np.array([[1.5, 0.2], [0.2, 0.7]])
    f = _random_compatible(mesh, 5)
    sol = solve_neumann(mesh, gamma, f)
    zero = solve_adjoint_source(mesh, gamma, np.zeros((2, 2)), sol)
    assert np.abs(zero.u).max() == 0.0
    neg = solve_adjoint_source(mesh, gamma, gamma, sol)
    assert np.abs(neg.u + sol.u).max() <= 1e-10 * np.abs(sol.u).max()


def test_adjoint_source_one_cell(mesh):
    d = square(0.5)
    gamma = np.eye(2)
    sol = solve_neumann(mesh, gamma, _random_compatible(mesh, 3))
    H = np.zeros((mesh.n_triangles, 2, 2))
    H[mesh.cell_index(d) == 0] = np.eye(2)
    up = solve_adjoint_source(mesh, gamma, H, sol)
    K = assemble_stiffness(mesh, np.repeat(np.eye(2)[None], mesh.n_triangles, axis=0))
    assert np.abs(up.u).max() > 0
    # discrete stability: ||u'||_E <= ||H||_inf ||u||_E for gamma = I
    assert up.u @ K @ up.u <= sol.u @ K @ sol.u + 1e-12


def test_trace_on_sigma():
    d = square(0.5, full=False)
    m = triangulate(d, 0.1)
    u = m.nodes[:, 0] - 0.3
    nodes, vals = boundary_trace_on_sigma(u, m)
    assert np.array_equal(nodes, m.sigma_nodes)
    assert np.allclose(vals, m.nodes[nodes, 0] - 0.3)
    # Σ is the bottom and left edges
    p = m.nodes[nodes]
    assert np.all((np.abs(p[:, 0]) < 1e-12) | (np.abs(p[:, 1]) < 1e-12))
    nodes, vals = boundary_trace_on_sigma(np.full(m.n_nodes, 2.0), m)
    assert np.all(vals == 2.0)


def test_sigma_arclength_monotone():
    m = triangulate(square(0.5, full=False), 0.1)
    s = m.sigma_arclength
    assert s[0] == pytest.approx(0.0)
    assert np.all(np.diff(s) > 0)
    assert s[-1] == pytest.approx(2.0)


def test_exports(tmp_path, mesh):
    K = assemble_stiffness(mesh, np.repeat(np.eye(2)[None], mesh.n_triangles, axis=0))
    export_coo(K, str(tmp_path / "K.txt"))
    rows = np.loadtxt(tmp_path / "K.txt", ndmin=2, skiprows=1)
    back = sp.coo_matrix((rows[:, 2], (rows[:, 0].astype(int), rows[:, 1].astype(int))), shape=K.shape)
    assert abs(back - K).max() <= 1e-15 * abs(K).max()
    mesh.write_triangle_files(str(tmp_path / "m"))
    assert (tmp_path / "m.node").exists() and (tmp_path / "m.ele").exists()


def test_grading_refines_corners():
    plain = triangulate(square(0.5), 0.1)
    graded = triangulate(square(0.5), 0.1, grading=3)
    assert graded.n_nodes > plain.n_nodes
    assert graded.areas.min() < plain.areas.min()
