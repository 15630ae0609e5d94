import math

import numpy as np
import pytest

from eitcorner.conductivity import ConductivityField, Perturbation
from eitcorner.forward import (
    ForwardModel,
    LocNDMap,
    SigmaBasis,
    frechet_apply,
    lemma21_probe,
    make_mesh,
    nd_map,
    operator_norm,
    taylor_remainders,
)
from eitcorner.geometry import build_parallelogram_decomposition


@pytest.fixture(scope="module")
def setup():
    d = build_parallelogram_decomposition(1 / math.sqrt(2), math.pi / 2)
    basis = SigmaBasis.from_decomposition(d, per_segment=5)
    mesh = make_mesh([d], basis, 0.1)
    return d, basis, mesh, ForwardModel(mesh, basis)


@pytest.fixture(scope="module")
def closed():
    d = build_parallelogram_decomposition(1.0, math.pi / 2).full_boundary()
    basis = SigmaBasis.from_decomposition(d, per_segment=4)
    mesh = make_mesh([d], basis, 0.15)
    return d, basis, mesh


def _spd_field(d, rng):
    out = []
    for _ in d.cells:
        a = rng.uniform(0, math.pi)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        out.append(R @ np.diag(rng.uniform(0.5, 2.0, 2)) @ R.T)
    return ConductivityField(d, np.array(out))


def test_closed_boundary_self_adjoint(closed):
    _, basis, mesh = closed
    m = nd_map(np.eye(2), mesh, basis)
    assert m.self_adjointness_defect() <= 1e-8


@pytest.mark.parametrize("seed", [0, 1])
def test_self_adjoint_random(setup, seed):
    d, basis, mesh, model = setup
    assert model.nd_map(_spd_field(d, np.random.default_rng(seed))).self_adjointness_defect() <= 1e-8


def test_homogeneity(setup):
    d, basis, mesh, model = setup
    g = _spd_field(d, np.random.default_rng(2))
    a = model.nd_map(g).matrix
    b = model.nd_map(ConductivityField(d, 2 * g.tensors)).matrix
    assert np.abs(2 * b - a).max() <= 1e-10 * np.abs(a).max()


def test_refinement_converges():
    d = build_parallelogram_decomposition(1 / math.sqrt(2), math.pi / 2)
    basis = SigmaBasis.from_decomposition(d, per_segment=3)
    g = np.array([[1.5, 0.3], [0.3, 1.0]])
    maps = [nd_map(g, make_mesh([d], basis, h), basis).matrix for h in (0.2, 0.1, 0.05)]
    assert np.abs(maps[1] - maps[2]).max() < np.abs(maps[0] - maps[2]).max()


def test_frechet_zero_and_identity(setup):
    d, basis, mesh, model = setup
    assert np.abs(frechet_apply(np.eye(2), np.zeros((2, 2)), mesh, basis).matrix).max() == 0.0
    F = nd_map(np.eye(2), mesh, basis).matrix
    dF = frechet_apply(np.eye(2), np.eye(2), mesh, basis).matrix
    assert np.abs(dF + F).max() <= 1e-8 * np.abs(F).max()


def test_frechet_linear_in_direction(setup):
    d, basis, mesh, model = setup
    rng = np.random.default_rng(3)
    g = _spd_field(d, rng)
    sym = lambda: (lambda a: a + a.transpose(0, 2, 1))(rng.normal(size=(len(d.cells), 2, 2)))
    H1, H2 = Perturbation(d, sym()), Perturbation(d, sym())
    lhs = model.frechet(g, Perturbation(d, 2.0 * H1.tensors - 0.5 * H2.tensors)).matrix
    rhs = 2.0 * model.frechet(g, H1).matrix - 0.5 * model.frechet(g, H2).matrix
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_taylor_slope(setup):
    d, basis, mesh, model = setup
    rng = np.random.default_rng(4)
    g = _spd_field(d, rng)
    H = Perturbation(d, np.array([[[0.3, 0.1], [0.1, -0.2]]] * len(d.cells)))
    rem, slope = taylor_remainders(model, g, H, ts=(1e-1, 1e-2, 1e-3, 1e-4))
    assert slope == pytest.approx(2.0, abs=0.2)
    assert np.all(np.diff(rem) < 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_monotonicity(setup, seed):
    d, basis, mesh, model = setup
    rng = np.random.default_rng(seed)
    g1 = _spd_field(d, rng)
    bump = _spd_field(d, rng).tensors * 0.3
    g2 = ConductivityField(d, g1.tensors + bump)
    P1, P2 = model.nd_map(g1).pairing(), model.nd_map(g2).pairing()
    for _ in range(10):
        f = rng.normal(size=P1.shape[0])
        assert f @ P1 @ f >= f @ P2 @ f - 1e-12


@pytest.mark.parametrize(
    "A, expected",
    [(np.zeros((2, 2)), 0.0), (np.eye(2), 1.0), (np.diag([3.0, 1.0]), 3.0)],
)
def test_operator_norm_examples(A, expected):
    assert operator_norm(A, np.eye(2), np.eye(2)) == pytest.approx(expected)


def test_operator_norm_respects_grams():
    A = np.eye(2)
    assert operator_norm(A, 4 * np.eye(2), np.eye(2)) == pytest.approx(0.5)


def test_lemma21_probe(setup):
    d, basis, mesh, model = setup
    g = ConductivityField.constant(d, np.eye(2))
    same = lemma21_probe(model, [(g, g)], [np.eye(2)])
    assert same.n_excluded == 1
    assert same.C1 > 0 and same.C2 == same.C3 == same.C4 == 0.0
    t = g.tensors.copy()
    t[0] += 0.1 * np.eye(2)
    tau = ConductivityField(d, t)
    table = lemma21_probe(model, [(tau, g)], [np.eye(2), np.diag([1.0, -1.0])])
    assert table.n_excluded == 0
    assert all(math.isfinite(v) and v > 0 for v in (table.C1, table.C2, table.C3, table.C4))


def test_lemma21_c2_bounds_pairs(setup):
    d, basis, mesh, model = setup
    rng = np.random.default_rng(7)
    pairs = [(_spd_field(d, rng), _spd_field(d, rng)) for _ in range(20)]
    table = lemma21_probe(model, pairs, [])
    for tau, sig in pairs:
        diff = (model.nd_map(tau) - model.nd_map(sig)).op_norm()
        dist = np.linalg.norm(tau.tensors - sig.tensors, ord=2, axis=(1, 2)).max()
        assert diff <= table.C2 * dist * (1 + 1e-12)


def test_basis_requires_nodes(setup):
    d, basis, mesh, _ = setup
    finer = SigmaBasis.from_decomposition(d, per_segment=7)
    with pytest.raises(ValueError):
        ForwardModel(mesh, finer)


def test_basis_rejects_both_partitions(setup):
    d = setup[0]
    with pytest.raises(ValueError):
        SigmaBasis.from_decomposition(d, per_segment=3, spacing=0.1)


def test_neumann_functions_zero_mean(setup):
    _, basis, _, _ = setup
    assert np.abs(basis.hat_integrals @ basis.neumann_coefficients).max() <= 1e-12


def test_json_and_csv_round_trip(setup):
    d, basis, mesh, model = setup
    m = model.nd_map(np.eye(2))
    back = LocNDMap.from_json(m.to_json())
    assert np.array_equal(back.matrix, m.matrix)
    rows = [r for r in m.to_csv().splitlines() if not r.startswith("#")]
    assert np.array_equal(np.array([[float(v) for v in r.split(",")] for r in rows]), m.matrix)


def test_fractional_gram_mode(setup):
    d, basis, mesh, _ = setup
    frac = basis.with_gram_mode("fractional")
    model = ForwardModel(mesh, frac)
    m = model.nd_map(np.eye(2))
    assert np.all(np.linalg.eigvalsh(frac.gram_dirichlet) > 0)
    assert m.op_norm() > 0


def test_threads_deterministic(setup):
    d, basis, mesh, _ = setup
    dirs = [Perturbation(d, np.array([np.diag([1.0, float(k)])] * len(d.cells))) for k in range(4)]
    a = ForwardModel(mesh, basis, threads=1).derivative(np.eye(2), dirs).jacobian
    b = ForwardModel(mesh, basis, threads=4).derivative(np.eye(2), dirs).jacobian
    assert np.array_equal(a, b)
