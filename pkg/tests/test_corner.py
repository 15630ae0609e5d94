import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eitcorner.corner import (
    CornerDomain,
    CornerProbe,
    QuadratureError,
    condition_system,
    corner_integral_closed_form,
    corner_integral_quadrature,
    corner_reduction,
    determinant_condition,
    determinant_roots,
    kernel_tensor,
    lemma41_extract,
    lemma42_extract,
    limit_coefficients,
    path_table_csv,
    polygon_integral,
    reflect_tensor,
    sample_path,
    trapezoid_angle_condition,
)
from eitcorner.conductivity import AnisoTensor


def _spd(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, math.pi)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return R @ np.diag(rng.uniform(0.3, 3.0, 2)) @ R.T


@pytest.mark.parametrize(
    "gamma0, theta, expected",
    [
        (np.eye(2), math.pi / 2, dict(d1=1, d2=1, d=1, a=0, b=1, k=0, k_tilde=0, p=1, q_det=0, alpha=0)),
        (np.diag([4.0, 1.0]), math.pi / 2, dict(d=0.5, a=0, b=2, k_tilde=0, p=2.5, q_det=0)),
        (np.eye(2), math.pi / 3, dict(k=1 / math.sqrt(3), k_tilde=1 / math.sqrt(3), q_det=-1 / math.sqrt(3), p=1)),
    ],
)
def test_reduction_examples(gamma0, theta, expected):
    red = corner_reduction(gamma0, theta)
    for key, value in expected.items():
        assert getattr(red, key) == pytest.approx(value, abs=1e-14), key


@pytest.mark.parametrize("bad", [np.diag([1.0, -1.0]), np.array([[1.0, 0.5], [0.2, 1.0]])])
def test_reduction_rejects(bad):
    with pytest.raises(ValueError):
        corner_reduction(bad, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_reduction_transform_freezes_background(seed):
    g0 = _spd(seed)
    red = corner_reduction(g0, 1.1)
    L = red.transform
    assert np.allclose(L @ g0 @ L.T, np.eye(2), atol=1e-12)
    assert np.allclose(red.background(), g0, atol=1e-12)


def test_identity_determinant_is_sin2phi():
    red = corner_reduction(np.eye(2), math.pi / 2)
    for phi in np.linspace(0.1, 6.2, 17):
        assert determinant_condition(red, phi) == pytest.approx(math.sin(2 * phi), abs=1e-15)


@pytest.mark.parametrize("gamma0", [np.eye(2), np.diag([4.0, 1.0])])
def test_identity_like_roots(gamma0):
    roots = np.sort(determinant_roots(corner_reduction(gamma0, math.pi / 2)))
    assert np.allclose(roots, [math.pi / 2, math.pi, 3 * math.pi / 2, 2 * math.pi], atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, math.pi - 0.1))
def test_roots_are_zeros(seed, theta):
    red = corner_reduction(_spd(seed), theta)
    roots = determinant_roots(red)
    assert len(roots) == 4
    assert np.all((roots > 0) & (roots <= 2 * math.pi))
    for r in roots:
        assert abs(determinant_condition(red, r)) <= 1e-10 * red.amplitude
        expected = {((n * math.pi - red.alpha) / 2) % (2 * math.pi) or 2 * math.pi for n in range(-2, 6)}
        assert min(abs(r - e) for e in expected) <= 1e-10


@pytest.mark.parametrize("seed, theta", [(0, 0.7), (1, 1.3), (2, 2.4), (3, math.pi / 2)])
def test_condition_system_determinant(seed, theta):
    red = corner_reduction(_spd(seed), theta)
    for phi in np.linspace(1e-3, 2 * math.pi, 1000):
        assert np.linalg.det(condition_system(red, phi)) == pytest.approx(determinant_condition(red, phi), abs=1e-12)


def test_condition_system_examples():
    red = corner_reduction(np.eye(2), math.pi / 2)
    assert np.allclose(condition_system(red, 2 * math.pi), [[1, 1], [0, 0]], atol=1e-15)
    M = condition_system(red, math.pi / 4)
    assert np.linalg.det(M) == pytest.approx(1.0)
    assert np.linalg.matrix_rank(M) == 2
    assert kernel_tensor(red, math.pi / 4) is None


@pytest.mark.parametrize("seed, theta", [(4, 0.9), (5, 2.0), (6, 1.2)])
def test_kernel_tensor_trace_condition(seed, theta):
    g0 = _spd(seed)
    red = corner_reduction(g0, theta)
    for phi in determinant_roots(red):
        H = kernel_tensor(red, phi)
        assert H is not None
        assert abs(np.trace(H @ np.linalg.inv(g0))) <= 1e-10 * np.abs(H).max()


def test_degenerate_amplitude_flagged():
    # any background where p = q = 0 would be degenerate; the identity at pi/2 is not
    red = corner_reduction(np.eye(2), math.pi / 2)
    assert not red.degenerate


@pytest.mark.parametrize("theta", [0.3, 1.0, 2.0, 2.8])
def test_angle_condition_identity(theta):
    res = trapezoid_angle_condition(np.eye(2), theta)
    assert res.value == math.cos(theta) / math.sin(theta)
    assert res.passed


def test_angle_condition_examples():
    assert not trapezoid_angle_condition(np.eye(2), math.pi / 2).passed
    res = trapezoid_angle_condition(np.array([[1.0, 0.5], [0.5, 1.0]]), math.pi / 2)
    assert res.value == pytest.approx(-2 / 3)
    assert res.passed
    assert trapezoid_angle_condition(np.eye(2), 1e-8).value > 1e7
    assert trapezoid_angle_condition(AnisoTensor(1.0, 0.0, 1.0), 1.0).passed


def test_quadrature_zero_and_reflection():
    dom = CornerDomain(0.3, 1.0)
    eta = (0.1, -0.05)
    assert corner_integral_quadrature(np.zeros((2, 2)), dom, eta) == 0.0
    H = np.array([[1.0, 0.4], [0.4, -0.3]])
    direct = corner_integral_quadrature(H, dom, eta)
    A = np.diag([-1.0, 1.0])
    mirrored = polygon_integral(reflect_tensor(H), dom.polygon @ A, A @ np.array(eta))[0]
    assert mirrored == pytest.approx(direct, rel=1e-8)


def test_quadrature_far_point_against_grid():
    dom = CornerDomain(0.3, 0.5)
    H = np.array([[1.0, 0.3], [0.3, 0.5]])
    eta = np.array([0.15, -3.0])
    val = corner_integral_quadrature(H, dom, eta)
    # midpoint rule on a fine grid of the bounding box, masked to the domain
    n = 600
    xs = (np.arange(n) + 0.5) / n * 0.3
    X, Y = np.meshgrid(xs, xs)
    inside = (X >= dom.k * Y) & (Y <= dom.polygon[:, 1].max())
    D = np.stack([X - eta[0], Y - eta[1]], axis=-1)
    r2 = (D**2).sum(-1)
    g = D / r2[..., None]
    integrand = np.einsum("...i,ij,...j->...", g, H, g)
    oracle = float((integrand * inside).sum() * (0.3 / n) ** 2)
    assert val == pytest.approx(oracle, rel=1e-3)
    grad_max = 1 / 2.7**2
    assert abs(val) <= dom.area * np.linalg.norm(H, 2) * grad_max


def test_quadrature_rejects_inside():
    dom = CornerDomain(0.3, 1.0)
    with pytest.raises(ValueError):
        corner_integral_quadrature(np.eye(2), dom, (0.2, 0.1))


def test_quadrature_budget():
    dom = CornerDomain(0.3, 1.0)
    with pytest.raises(QuadratureError):
        corner_integral_quadrature(np.eye(2), dom, (0.15, -1e-9), rtol=1e-14, max_evals=2000)


def test_probe_must_be_below():
    with pytest.raises(ValueError):
        CornerProbe((0.1, 0.0), "bottom")


def test_growth_of_identity():
    dom = CornerDomain(0.3, 1.0)
    s = sample_path(np.eye(2), dom, "bottom")
    assert s.slope == pytest.approx(math.pi, rel=0.03)


@pytest.mark.parametrize("k", [0.5, 1.0, 2.0])
def test_limit_coefficients(k):
    first, _ = limit_coefficients(np.eye(2), k)
    assert first == pytest.approx(math.pi)
    H = np.array([[1.0, -k], [-k, -1.0]])
    assert limit_coefficients(H, k) == pytest.approx((0.0, 0.0), abs=1e-14)


def test_corner_limit_example():
    _, second = limit_coefficients(np.diag([1.0, -1.0]), 1.0)
    assert second == pytest.approx(0.5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_closed_form_tracks_quadrature(seed):
    rng = np.random.default_rng(seed)
    h = rng.uniform(-1, 1, 3)
    H = np.array([[h[0], h[1]], [h[1], h[2]]])
    dom = CornerDomain(0.3, rng.uniform(0.2, 1.5))
    e1 = rng.uniform(0.05, 0.25)
    # three decades, starting where |eta2| is small against the distance to the bottom-edge ends
    t = np.logspace(-3, -6, 10)
    vals, pred = [], []
    for tt in t:
        eta = (e1, -tt)
        vals.append(corner_integral_quadrature(H, dom, eta))
        pred.append(corner_integral_closed_form(H, dom, eta).prediction(eta))
    rest = np.array(vals) - np.array(pred)
    # relative to the growth of the log terms, or an absolute bound when they nearly cancel
    assert np.ptp(rest) <= max(0.1 * np.ptp(pred), 0.2 * np.linalg.norm(H, 2))


def test_closed_form_requires_single_mode():
    with pytest.raises(ValueError):
        corner_integral_closed_form(np.eye(2), CornerDomain(0.3, 1.0, "double"), (0.1, -0.01))


def test_lemma41_verdicts():
    dom = CornerDomain(0.3, 1.0)
    k = dom.k
    good = lemma41_extract(np.array([[1.0, -k], [-k, -1.0]]), dom, numeric=True)
    assert good.bounded and good.numeric_bounded
    assert abs(good.slope_bottom) < 0.05 * math.pi * np.linalg.norm([[1, -k], [-k, -1]], 2)
    ident = lemma41_extract(np.eye(2), dom, numeric=True)
    assert not ident.bounded and not ident.trace_ok
    assert ident.slope_bottom == pytest.approx(math.pi, rel=0.05)
    diag = lemma41_extract(np.diag([1.0, -1.0]), dom)
    assert diag.trace_ok and not diag.slant_ok and diag.verdict == "unbounded"


def test_lemma42_examples():
    dom = CornerDomain.from_angle(math.pi / 3, 0.3, "double")
    k = dom.k
    assert lemma42_extract(np.zeros((2, 2)), dom).verdict == "bounded"
    v = lemma42_extract(np.array([[1.0, -k], [-k, -1.0]]), dom)
    assert v.origin.bounded and not v.second.bounded
    assert v.verdict == "unbounded" and v.consistent
    with pytest.raises(ValueError):
        CornerDomain.from_angle(math.pi / 2, 0.3, "double")


def test_lemma42_numeric_agrees():
    dom = CornerDomain.from_angle(math.pi / 3, 0.3, "double")
    k = dom.k
    v = lemma42_extract(np.array([[1.0, -k], [-k, -1.0]]), dom, numeric=True, per_decade=4)
    assert v.origin.numeric_bounded
    assert not v.second.numeric_bounded


def test_reflect_tensor():
    assert np.allclose(reflect_tensor(np.array([[1.0, 2.0], [2.0, 3.0]])), [[1.0, -2.0], [-2.0, 3.0]])


def test_path_table_csv():
    text = path_table_csv(np.eye(2), CornerDomain(0.3, 1.0), "bottom", per_decade=2)
    lines = text.strip().splitlines()
    assert lines[0] == "eta1,eta2,integral,log_terms"
    assert len(lines) == 1 + 2 * 3 + 1
