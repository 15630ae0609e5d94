"""Acceptance criteria, one test per criterion.

Each test records a one-line outcome that the terminal summary prints as
``PASS``/``FAIL  criterion <n> ...``. Tolerances are pinned; do not relax them.
"""

import filecmp
import math
import time

import numpy as np
import pytest

from eitcorner import cli
from eitcorner.conductivity import ConductivityField, Perturbation, PerturbationSpace
from eitcorner.corner import (
    CornerDomain,
    corner_reduction,
    determinant_condition,
    determinant_roots,
    lemma42_extract,
    sample_path,
    trapezoid_angle_condition,
)
from eitcorner.experiments import SampleConfig, run_monte_carlo
from eitcorner.femcore import NeumannData, assemble_stiffness, solve_neumann, triangulate
from eitcorner.forward import ForwardModel, SigmaBasis, frechet_apply, make_mesh, nd_map, taylor_remainders
from eitcorner.geometry import (
    build_lateral_decomposition,
    build_parallelogram_decomposition,
    build_trapezoid_decomposition,
    build_trapezoid_domain,
    parallelogram_cell,
)
from eitcorner.inverse import (
    InverseProblem,
    IterationConfig,
    injectivity_certificate,
    landweber,
    levenberg_marquardt,
    lipschitz_probe,
)

pytestmark = pytest.mark.slow


def test_1_corner_asymptotics(acceptance):
    acceptance["name"] = "1 corner asymptotics"
    t0 = time.perf_counter()
    dom = CornerDomain.from_angle(math.pi / 4, 0.3)
    assert dom.k == pytest.approx(1.0)
    growth = sample_path(np.eye(2), dom, "bottom", decades=(-2, -5))
    rel = abs(growth.slope - math.pi) / math.pi
    flat = sample_path(np.array([[1.0, -1.0], [-1.0, -1.0]]), dom, "bottom", decades=(-2, -5))
    elapsed = time.perf_counter() - t0
    acceptance["detail"] = (f"slope/pi-1={rel:.4f} (<0.03), variation={flat.variation:.5f} "
                            f"(<{0.05 * math.pi:.5f}), {elapsed:.1f}s")
    assert rel < 0.03
    assert flat.variation < 0.05 * math.pi
    assert elapsed < 60


def test_2_double_corner(acceptance):
    acceptance["name"] = "2 double-corner logic"
    t0 = time.perf_counter()
    dom = CornerDomain.from_angle(math.pi / 3, 0.3, mode="double")
    rng = np.random.default_rng(2024)
    verdicts = []
    for _ in range(100):
        h = rng.normal(size=3)
        H = np.array([[h[0], h[1]], [h[1], h[2]]])
        verdicts.append(lemma42_extract(H, dom))
    zero = lemma42_extract(np.zeros((2, 2)), dom)
    elapsed = time.perf_counter() - t0
    n_unbounded = sum(v.verdict == "unbounded" for v in verdicts)
    acceptance["detail"] = f"{n_unbounded}/100 unbounded, H=0 {zero.verdict}, {elapsed:.1f}s"
    assert n_unbounded == 100
    assert all(v.consistent for v in verdicts)
    assert zero.verdict == "bounded"
    assert elapsed < 60


def test_3_determinant_condition(acceptance):
    acceptance["name"] = "3 determinant condition"
    red = corner_reduction(np.eye(2), math.pi / 2)
    roots = np.sort(determinant_roots(red))
    expected = np.array([math.pi / 2, math.pi, 3 * math.pi / 2, 2 * math.pi])
    root_err = float(np.abs(roots - expected).max())
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        g0 = np.diag(rng.uniform(0.2, 5.0, 2))
        theta = rng.uniform(0.05, math.pi - 0.05)
        if abs(theta - math.pi / 2) < 1e-3:
            theta += 0.1
        r = corner_reduction(g0, theta)
        assert r.a == 0.0
        # orthotropic frame: psi = phi = 2pi
        worst = max(worst, abs(determinant_condition(r, 2 * math.pi) - (-r.b * r.k_tilde)))
    acceptance["detail"] = f"root error {root_err:.2e} (<=1e-10), orthotropic error {worst:.2e} (<=1e-12)"
    assert root_err <= 1e-10
    assert worst <= 1e-12


def _random_spd(rng, lo=0.5, hi=2.0):
    w = rng.uniform(lo, hi, 2)
    c, s = math.cos(a := rng.uniform(0, math.pi)), math.sin(a)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag(w) @ R.T


def _random_sym(rng):
    h = rng.uniform(-1, 1, 3)
    return np.array([[h[0], h[1]], [h[1], h[2]]])


def test_4_frechet(acceptance):
    acceptance["name"] = "4 Frechet derivative"
    t0 = time.perf_counter()
    bg = build_parallelogram_decomposition(1 / math.sqrt(2), math.pi / 2)
    basis = SigmaBasis.from_decomposition(bg, per_segment=6)
    mesh = make_mesh([bg], basis, 0.05)
    assert mesh.n_nodes <= 5000
    model = ForwardModel(mesh, basis)
    rng = np.random.default_rng(4)
    slopes = []
    for _ in range(5):
        gamma = ConductivityField(bg, np.array([_random_spd(rng) for _ in bg.cells]))
        H = Perturbation(bg, np.array([_random_sym(rng) for _ in bg.cells]))
        slopes.append(taylor_remainders(model, gamma, H, ts=(1e-1, 3e-2, 1e-2, 3e-3))[1])
    F = nd_map(np.eye(2), mesh, basis).matrix
    dF = frechet_apply(np.eye(2), np.eye(2), mesh, basis).matrix
    hom = float(np.linalg.norm(dF + F) / np.linalg.norm(F))
    elapsed = time.perf_counter() - t0
    acceptance["detail"] = (f"slopes {min(slopes):.3f}..{max(slopes):.3f}, homogeneity {hom:.1e}, "
                            f"{mesh.n_nodes} nodes, {elapsed:.1f}s")
    assert all(abs(s - 2.0) <= 0.2 for s in slopes)
    assert hom <= 1e-6
    assert elapsed < 300


def _square_mesh(h):
    d = build_parallelogram_decomposition(1.0, math.pi / 2).full_boundary()
    return triangulate(d, h)


def _harmonic_flux(mesh):
    """Normal flux of exp(x) sin(y), shifted by a constant so the sampled data have zero total."""
    g = lambda x, nu: np.exp(x[:, 0]) * (np.sin(x[:, 1]) * nu[:, 0] + np.cos(x[:, 1]) * nu[:, 1])
    f = NeumannData.from_function(mesh, g)
    e = mesh.boundary_edges
    length = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1).sum()
    return NeumannData(mesh, f.values - f.total() / length)


def _h1_error(mesh, u, grad):
    """Seminorm error between a P1 field and an exact gradient, by 3-point edge-midpoint quadrature."""
    P = mesh.nodes[mesh.triangles]
    e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    U = u[mesh.triangles]
    du1, du2 = U[:, 1] - U[:, 0], U[:, 2] - U[:, 0]
    gx = (du1 * e2[:, 1] - du2 * e1[:, 1]) / det
    gy = (-du1 * e2[:, 0] + du2 * e1[:, 0]) / det
    err = np.zeros(len(P))
    for a, b in ((0, 1), (1, 2), (2, 0)):
        m = 0.5 * (P[:, a] + P[:, b])
        ex = grad(m)
        err += ((gx - ex[:, 0]) ** 2 + (gy - ex[:, 1]) ** 2) / 3
    return math.sqrt(float(np.sum(err * 0.5 * np.abs(det))))


def test_5_fem(acceptance):
    acceptance["name"] = "5 FEM correctness"
    gamma = np.array([[2.0, 0.3], [0.3, 1.0]])
    # linear field: the flux gamma grad u . nu is constant per edge and the P1 space contains u
    c = np.array([0.7, -1.3])
    mesh = _square_mesh(0.1)
    sol = solve_neumann(mesh, gamma, NeumannData.from_function(mesh, lambda x, nu: nu @ (gamma @ c)))
    lin = mesh.nodes @ c
    exact = lin - np.mean(lin)
    shift = np.mean(sol.u - exact)
    lin_err = float(np.abs(sol.u - exact - shift).max())

    # energy identity for a nonlinear harmonic field under an isotropic tensor
    f = _harmonic_flux(mesh)
    sol = solve_neumann(mesh, np.eye(2), f)
    K = assemble_stiffness(mesh, np.repeat(np.eye(2)[None], mesh.n_triangles, axis=0))
    energy = float(sol.u @ (K @ sol.u))
    work = float(f.load() @ sol.u)
    energy_err = abs(energy - work) / abs(work)

    grad = lambda x: np.column_stack([np.exp(x[:, 0]) * np.sin(x[:, 1]), np.exp(x[:, 0]) * np.cos(x[:, 1])])
    hs, errs = [], []
    for h in (0.2, 0.1, 0.05, 0.025):
        m = _square_mesh(h)
        s = solve_neumann(m, np.eye(2), _harmonic_flux(m))
        hs.append(m.h)
        errs.append(_h1_error(m, s.u, grad))
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    acceptance["detail"] = f"linear {lin_err:.1e} (<=1e-10), energy {energy_err:.1e} (<=1e-8), H1 slope {slope:.2f} (>=0.9)"
    assert lin_err <= 1e-10
    assert energy_err <= 1e-8
    assert slope >= 0.9


def test_6_parallelogram_monte_carlo(acceptance):
    acceptance["name"] = "6 parallelogram certificate"
    outcomes, summary = run_monte_carlo(SampleConfig(mode="parallelogram", n_samples=50, rng_seed=0))
    bad_flags = [o.index for o in outcomes if not o.flags_ok]
    errors = [o.index for o in outcomes if o.error]
    acceptance["detail"] = (f"{summary.n_pass}/50 sigma_min>0, flag failures {bad_flags}, errors {errors}, "
                            f"min sigma_min {min(o.sigma_min or 0.0 for o in outcomes):.2e}")
    assert not errors
    assert not bad_flags
    assert summary.n_pass == 50


def test_7_trapezoid(acceptance):
    acceptance["name"] = "7 trapezoid condition"
    I = np.eye(2)
    exact = True
    for theta in np.linspace(0.05, math.pi - 0.05, 41):
        res = trapezoid_angle_condition(I, theta)
        exact &= res.value == math.cos(theta) / math.sin(theta)
        exact &= res.passed == (abs(theta - math.pi / 2) > 1e-9)
    at_right = trapezoid_angle_condition(I, math.pi / 2)
    outcomes, summary = run_monte_carlo(SampleConfig(mode="trapezoid", n_samples=50, rng_seed=0))
    bad = [o.index for o in outcomes if not o.flags_ok or o.error or not o.passed]
    acceptance["detail"] = f"cot exact {bool(exact)}, fails at pi/2 {not at_right.passed}, MC {summary.n_pass}/50, bad {bad}"
    assert exact
    assert not at_right.passed
    assert not bad


def test_8_reconstruction(acceptance):
    acceptance["name"] = "8 reconstruction"
    t0 = time.perf_counter()
    dom = build_trapezoid_domain(1, math.pi / 3, 0.3)
    lat = build_lateral_decomposition(dom, 0.37 * dom.lateral_height)
    pert = build_trapezoid_decomposition(dom, 0.45)
    basis = SigmaBasis.from_decomposition(lat, spacing=0.15)
    gamma0 = ConductivityField(lat, np.array([[[1.5, 0.2], [0.2, 1.0]], [[1.0, 0.0], [0.0, 1.0]],
                                              [[0.8, -0.1], [-0.1, 1.2]]]))
    space = PerturbationSpace([pert.cells[i] for i in (0, 1, 3)], "trapezoid")
    coarse = make_mesh([lat, pert], basis, 0.08, grading=3)
    fine = make_mesh([lat, pert], basis, 0.04, grading=3)
    inv = InverseProblem(ForwardModel(coarse, basis), gamma0, space)
    gen = InverseProblem(ForwardModel(fine, basis), gamma0, space)
    truth = np.random.default_rng(0).uniform(-0.3, 0.3, space.dim)
    data = gen.forward(truth)
    level = 0.05 * space.sup_norm(truth)

    _, lm = levenberg_marquardt(inv, data, IterationConfig("levenberg-marquardt", max_iters=30), truth=truth)
    _, lw = landweber(inv, data, IterationConfig("landweber", max_iters=500), truth=truth)
    lm_hit, lw_hit = lm.first_below(level), lw.first_below(level)

    own = inv.forward(np.zeros(space.dim))
    _, still_lw = landweber(inv, own, IterationConfig("landweber", max_iters=1))
    _, still_lm = levenberg_marquardt(inv, own, IterationConfig("levenberg-marquardt", max_iters=1))
    first_step = max(still_lw.step[0], still_lm.step[0])
    elapsed = time.perf_counter() - t0
    acceptance["detail"] = (f"LM below 5% at {lm_hit}, Landweber at {lw_hit}, first update {first_step:.1e}, "
                            f"{elapsed:.0f}s")
    assert lm_hit is not None and lm_hit <= 30
    assert lw_hit is not None and lw_hit <= 500
    assert first_step <= 1e-10
    assert elapsed < 600


def test_9_lipschitz(acceptance):
    acceptance["name"] = "9 Lipschitz probe"
    theta = math.pi / 2
    bg = build_parallelogram_decomposition(1 / math.sqrt(2), theta)
    basis = SigmaBasis.from_decomposition(bg, per_segment=8)
    r = 0.51
    cells = [parallelogram_cell(r, theta, 0, 1, 0), parallelogram_cell(r, theta, 0, 0, 1)]
    mesh = make_mesh(bg, basis, 0.08, extra_cells=cells)
    problem = InverseProblem(ForwardModel(mesh, basis), np.eye(2), PerturbationSpace(cells, "parallelogram", (1.1, 4.0)))
    cert = injectivity_certificate(problem, box=True)
    rep = lipschitz_probe(problem, np.zeros(problem.dim), 1e-6, 20, 0, cert)
    rel = abs(rep.max_ratio * cert.sigma_min - 1.0)
    acceptance["detail"] = (f"max ratio {rep.max_ratio:.4g}, 1/sigma_min {1 / cert.sigma_min:.4g} "
                            f"(off {rel:.1%}, <=20%), bound {rep.bound:.4g}")
    assert cert.passes()
    assert rel <= 0.2
    assert np.all(rep.ratios <= rep.bound)


CLI_RUNS = [
    ["tile", "--kind", "parallelogram", "--r", "0.4", "--theta", "1.2", "--out", "{d}/tile.json"],
    ["tile", "--kind", "trapezoid", "--r", "0.5", "--theta", "1.0", "--out", "{d}/trap.json"],
    ["forward", "--r", "0.5", "--cells", "0:0,1:1", "--phis", "0.3,2.0", "--coeffs", "0.1,0.2,-0.1,0.05",
     "--out", "{d}/forward"],
    ["frechet", "--r", "0.5", "--cells", "0:1", "--seed", "7", "--out", "{d}/frechet"],
    ["certify", "--kind", "trapezoid", "--theta", "1.0", "--r", "0.5", "--cells", "0", "--lipschitz-pairs", "3",
     "--seed", "5", "--out", "{d}/certify"],
    ["reconstruct", "--r", "0.5", "--cells", "0:0", "--scheme", "both", "--max-iters", "5", "--seed", "3",
     "--out", "{d}/reconstruct"],
    ["corner", "--mode", "lemma41", "--h", "1,-k,-1", "--k", "1", "--numeric", "--paths", "--out", "{d}/c41"],
    ["corner", "--mode", "lemma42", "--h", "1,0,-1", "--theta", "1.0", "--out", "{d}/c42"],
    ["corner", "--mode", "reduction", "--gamma0", "2,0.3,1", "--theta", "1.0", "--out", "{d}/cred"],
    ["sweep", "--kind", "angle", "--gamma0", "1,0.2,2", "--theta", "1.0", "--n-grid", "64", "--out", "{d}/sa"],
    ["sweep", "--kind", "ratio", "--r-values", "0.5,0.7071067811865476", "--certify", "--out", "{d}/sr"],
    ["monte-carlo", "--mode", "parallelogram", "--n-samples", "3", "--seed", "11", "--out", "{d}/mcp"],
    ["monte-carlo", "--mode", "trapezoid", "--n-samples", "3", "--seed", "11", "--no-certify", "--out", "{d}/mct"],
]


def test_10_reproducibility(acceptance, tmp_path):
    acceptance["name"] = "10 reproducibility"
    codes, mismatched = [], []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        for argv in CLI_RUNS:
            codes.append(cli.main([a.format(d=d) for a in argv]))
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False):
            mismatched.append(str(f))
    acceptance["detail"] = f"{len(files)} files from {len(CLI_RUNS)} commands, exit codes {sorted(set(codes))}, mismatched {mismatched}"
    assert set(codes) == {0}
    assert len(files) >= len(CLI_RUNS)
    assert not mismatched
