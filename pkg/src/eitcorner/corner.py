"""Corner analysis: reduction of a background tensor at a corner, the
determinant condition on the perturbation angle, the trapezoid angle
condition, and the logarithmic blow-up of the corner integral

    I(eta) = int_T H grad log|y - eta| . grad log|y - eta| dy

near the exposed corner of a small trapezoid ``T``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .conductivity import AnisoTensor, as_matrix, normalize_angle, rotation

# ---------------------------------------------------------------------------
# Reduction at a corner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CornerReduction:
    """Constants of the change of variables that freezes ``gamma0`` to the identity at a corner.

    ``gamma0 = R_psi^T diag(d1, d2) R_psi``. With ``L = diag(d1, d2)^(-1/2) R_psi``
    the frame rotation ``R_varphi`` satisfies ``R_varphi^T L = d [[1, a], [0, b]]``.
    ``k = cot(theta)`` for the original corner angle and ``k_tilde`` is the
    cotangent of the transformed angle.
    """

    psi: float
    d1: float
    d2: float
    d: float
    a: float
    b: float
    k: float
    k_tilde: float
    p: float
    q_det: float
    alpha: float
    varphi: float

    @property
    def amplitude(self) -> float:
        return math.hypot(self.p, self.q_det)

    @property
    def degenerate(self) -> bool:
        return self.amplitude == 0.0

    @property
    def transform(self) -> np.ndarray:
        """``L = diag(d1, d2)^(-1/2) R_psi``."""
        return np.diag([self.d1**-0.5, self.d2**-0.5]) @ rotation(self.psi)

    def background(self) -> np.ndarray:
        R = rotation(self.psi)
        return R.T @ np.diag([self.d1, self.d2]) @ R

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("psi", "d1", "d2", "d", "a", "b", "k", "k_tilde", "p", "q_det", "alpha", "varphi")}


def _eig_rotation(m: np.ndarray) -> tuple[float, float, float]:
    """``(psi, d1, d2)`` with ``m = R_psi^T diag(d1, d2) R_psi``, psi in (0, 2pi]."""
    if m[0, 1] == 0.0:
        return 2 * math.pi, float(m[0, 0]), float(m[1, 1])
    w, V = np.linalg.eigh(m)
    if np.linalg.det(V) < 0:
        V[:, 1] = -V[:, 1]
    # R_psi = V^T, whose first row is (cos psi, -sin psi)
    psi = math.atan2(-V[1, 0], V[0, 0])
    return normalize_angle(psi), float(w[0]), float(w[1])


def corner_reduction(gamma0, theta: float) -> CornerReduction:
    """Reduction constants for background ``gamma0`` and corner angle ``theta``.

    Raises
    ------
    ValueError
        If ``gamma0`` is not symmetric positive definite or ``theta`` is not in (0, pi).
    """
    m = as_matrix(gamma0)
    if not np.allclose(m, m.T, rtol=0, atol=1e-14 * max(1.0, np.abs(m).max())):
        raise ValueError("background tensor is not symmetric")
    if np.linalg.eigvalsh(m)[0] <= 0:
        raise ValueError("background tensor is not positive definite")
    if not 0 < theta < math.pi:
        raise ValueError("corner angle must lie in (0, pi)")
    psi, d1, d2 = _eig_rotation(m)
    # a diagonal background has psi = 2pi; use the exact identity rotation so a = 0 exactly
    R = np.eye(2) if m[0, 1] == 0.0 else rotation(psi)
    c, s = R[0, 0], -R[0, 1]
    d = math.sqrt(c * c / d1 + s * s / d2)
    a = (d1 - d2) * 2 * s * c / (2 * d * d * d1 * d2)
    b = 1.0 / (d * d * math.sqrt(d1 * d2))
    k = math.cos(theta) / math.sin(theta)
    L = np.diag([d1**-0.5, d2**-0.5]) @ R
    v1 = L @ np.array([1.0, 0.0])
    v2 = L @ np.array([k, 1.0])
    k_tilde = float(v1 @ v2 / (v1[0] * v2[1] - v1[1] * v2[0]))
    p = -0.5 * a * a + 0.5 * b * b + k_tilde * a * b + 0.5
    q = a - k_tilde * b
    alpha = math.atan2(q, p)
    if alpha == -math.pi:
        alpha = math.pi
    varphi = math.atan2(v1[1], v1[0])
    return CornerReduction(psi, d1, d2, d, a, b, k, k_tilde, p, q, alpha, varphi)


def determinant_condition(red: CornerReduction, phi: float) -> float:
    """``sqrt(p^2 + q^2) sin(2 phi + alpha)``; zero exactly where the angle condition fails."""
    return red.amplitude * math.sin(2 * phi + red.alpha)


def condition_system(red: CornerReduction, phi: float) -> np.ndarray:
    """Coefficient matrix of the two linear conditions on ``(h1, h2)``.

    Row 0 is the trace condition of the transformed tensor, row 1 the slant
    condition divided by ``b`` after eliminating with row 0.
    """
    a, b = red.a, red.b
    c2, s2, S = math.cos(phi) ** 2, math.sin(phi) ** 2, math.sin(2 * phi)
    q = a - red.k_tilde * b
    return np.array([
        [c2 - a * S + (a * a + b * b) * s2, s2 + a * S + (a * a + b * b) * c2],
        [-0.5 * S + q * s2, 0.5 * S + q * c2],
    ])


def determinant_roots(red: CornerReduction) -> np.ndarray:
    """The four zeros of the determinant in (0, 2pi], from ``2 phi + alpha = n pi``."""
    if red.degenerate:
        raise ValueError("determinant vanishes identically")
    phi = (np.arange(4) * math.pi - red.alpha) / 2 % (2 * math.pi)
    # zeros within rounding of 0 are represented by 2 pi
    phi[phi < 1e-12] = 2 * math.pi
    return np.sort(phi)


def bracket_roots(f, lo: float, hi: float, n_grid: int, xtol: float = 1e-12) -> np.ndarray:
    """Roots of ``f`` on (lo, hi] from sign changes on a uniform grid, refined by Brent's method."""
    x = np.linspace(lo, hi, n_grid + 1)
    y = np.array([f(t) for t in x])
    scale = np.abs(y).max()
    roots = []
    for i in range(1, n_grid + 1):
        if abs(y[i]) <= 1e-14 * scale:
            roots.append(x[i])
        elif y[i - 1] * y[i] < 0 and abs(y[i - 1]) > 1e-14 * scale:
            roots.append(brentq(f, x[i - 1], x[i], xtol=xtol, rtol=4 * np.finfo(float).eps))
    return np.array(roots)


def kernel_tensor(red: CornerReduction, phi: float, tol: float = 1e-10) -> np.ndarray | None:
    """A unit-norm tensor ``R_phi^T diag(h1, h2) R_phi`` satisfying both conditions, or None."""
    A = condition_system(red, phi)
    _, sv, Vt = np.linalg.svd(A)
    if sv[-1] > tol * max(sv[0], 1.0):
        return None
    h = Vt[-1]
    R = rotation(phi)
    H = R.T @ np.diag(h) @ R
    return H / np.linalg.norm(H, 2)


# ---------------------------------------------------------------------------
# Trapezoid angle condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AngleConditionResult:
    value: float
    mirrored: float
    passed: bool

    def to_json(self) -> dict:
        return {"value": self.value, "mirrored": self.mirrored, "passed": self.passed}


def trapezoid_angle_condition(gamma0_cell, theta: float, tol: float = 1e-12) -> AngleConditionResult:
    """``<gamma0^{-1} e1, (cot theta, 1)>`` and the same for ``pi - theta``; pass iff both are nonzero."""
    m = as_matrix(gamma0_cell)
    if np.linalg.eigvalsh(m)[0] <= 0:
        raise ValueError("background tensor is not positive definite")
    w = np.linalg.solve(m, np.array([1.0, 0.0]))
    cot = math.cos(theta) / math.sin(theta)
    value = float(w[0] * cot + w[1])
    mirrored = float(-w[0] * cot + w[1])
    scale = tol * np.linalg.norm(w) * math.hypot(cot, 1.0)
    return AngleConditionResult(value, mirrored, abs(value) > scale and abs(mirrored) > scale)


# ---------------------------------------------------------------------------
# Corner integral
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CornerDomain:
    """Small trapezoid at a corner with bottom edge on ``y2 = 0``.

    ``single``: ``T = {k y2 <= y1 <= eps, 0 <= y2 <= eps}`` (cut at ``y2 = eps/k``
    when ``k > 1``). ``double``: the isosceles trapezoid
    ``{k y2 <= y1 <= w - k y2, 0 <= y2 <= eps}`` with lower corners at the origin
    and ``z1 = (w, 0)``; both lower angles equal ``arccot k``.
    """

    epsilon: float
    k: float
    mode: str = "single"
    width: float | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mode not in ("single", "double"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "double":
            if abs(self.k) < 1e-12:
                raise ValueError("the two-corner argument needs a non-right angle")
            w = self.width if self.width is not None else self.epsilon * (1 + 2 * max(self.k, 0.0))
            if w - 2 * self.k * self.epsilon <= 0:
                raise ValueError("trapezoid top edge is empty")
            object.__setattr__(self, "width", float(w))

    @classmethod
    def from_angle(cls, theta: float, epsilon: float, mode: str = "single", width: float | None = None) -> "CornerDomain":
        return cls(epsilon, math.cos(theta) / math.sin(theta), mode, width)

    @property
    def theta(self) -> float:
        return math.atan2(1.0, self.k)

    @property
    def z1(self) -> np.ndarray:
        if self.mode != "double":
            raise ValueError("single-corner domain has no second corner")
        return np.array([self.width, 0.0])

    @property
    def polygon(self) -> np.ndarray:
        e, k = self.epsilon, self.k
        if self.mode == "double":
            w = self.width
            return np.array([[0.0, 0.0], [w, 0.0], [w - k * e, e], [k * e, e]])
        top = e if k <= 1 else e / k
        pts = [[0.0, 0.0], [e, 0.0], [e, top], [k * top, top]]
        if abs(k * top - e) < 1e-15 * e:
            pts = pts[:3]
        return np.array(pts)

    @property
    def area(self) -> float:
        x, y = self.polygon.T
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, eta, tol: float = 0.0) -> bool:
        P = self.polygon
        eta = np.asarray(eta, dtype=float)
        for i in range(len(P)):
            p, q = P[i], P[(i + 1) % len(P)]
            if (q[0] - p[0]) * (eta[1] - p[1]) - (q[1] - p[1]) * (eta[0] - p[0]) < -tol:
                return False
        return True

    def to_json(self) -> dict:
        return {"epsilon": self.epsilon, "k": self.k, "mode": self.mode, "width": self.width}


REFLECTION = np.diag([-1.0, 1.0])


def reflect_tensor(H) -> np.ndarray:
    """``A^T H A`` for the reflection ``A = diag(-1, 1)``."""
    m = as_matrix(H)
    return REFLECTION.T @ m @ REFLECTION


@dataclass(frozen=True)
class CornerProbe:
    """Probe point ``eta`` below the bottom edge and the approach path it belongs to."""

    eta: tuple
    path: str

    def __post_init__(self):
        if self.eta[1] >= 0:
            raise ValueError("probe must lie strictly below the bottom edge")


def approach_path(dom: CornerDomain, path: str, per_decade: int = 12, decades: tuple = (-2, -5), eta1: float | None = None) -> np.ndarray:
    """Probe points along one of the two approach paths to the origin corner.

    ``bottom``: ``eta = (eta1, -t)`` with ``eta1`` fixed (default ``eps/2``).
    ``corner``: ``eta = (t, -1e-3 t)``, approaching the corner itself.
    ``t`` runs over ``per_decade`` log-spaced points per decade.
    """
    n = per_decade * abs(decades[1] - decades[0]) + 1
    t = np.logspace(decades[0], decades[1], n)
    if path == "bottom":
        e1 = dom.epsilon / 2 if eta1 is None else eta1
        return np.column_stack([np.full(n, e1), -t])
    if path == "corner":
        return np.column_stack([t, -1e-3 * t])
    raise ValueError(f"unknown path {path!r}")


class QuadratureError(RuntimeError):
    pass


_GL_CACHE: dict = {}


def _triangle_rule(n: int):
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        x = 0.5 * (x + 1)
        w = 0.5 * w
        U, V = np.meshgrid(x, x, indexing="ij")
        W = np.outer(w, w) * U
        _GL_CACHE[n] = (U.ravel(), V.ravel(), W.ravel())
    return _GL_CACHE[n]


def _integrand(H: np.ndarray, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    rr = r1 * r1 + r2 * r2
    return (H[0, 0] * r1 * r1 + H[1, 1] * r2 * r2 + 2 * H[0, 1] * r1 * r2) / (rr * rr)


def _tri_quad(H, eta, T, order):
    """Collapsed tensor Gauss-Legendre rule on each triangle of ``T`` (m, 3, 2).

    Returns the integral of the integrand and of its absolute bound ``|H|/|r|^2``.
    """
    U, V, W = _triangle_rule(order)
    P0, P1, P2 = T[:, 0], T[:, 1], T[:, 2]
    e1 = P1 - P0
    e2 = P2 - P1
    x = P0[:, None, :] + U[None, :, None] * e1[:, None, :] + (U * V)[None, :, None] * e2[:, None, :]
    jac = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    r1 = x[..., 0] - eta[0]
    r2 = x[..., 1] - eta[1]
    f = _integrand(H, r1, r2)
    g = 1.0 / (r1 * r1 + r2 * r2)
    return (f @ W) * jac, (g @ W) * jac


def _split(T):
    m01 = 0.5 * (T[:, 0] + T[:, 1])
    m12 = 0.5 * (T[:, 1] + T[:, 2])
    m20 = 0.5 * (T[:, 2] + T[:, 0])
    return np.stack([
        np.stack([T[:, 0], m01, m20], 1),
        np.stack([m01, T[:, 1], m12], 1),
        np.stack([m20, m12, T[:, 2]], 1),
        np.stack([m01, m12, m20], 1),
    ], 1).reshape(-1, 3, 2)


def polygon_integral(H, polygon: np.ndarray, eta, rtol: float = 1e-8, max_evals: int = 10**7, order: int = 8) -> tuple[float, int]:
    """Adaptive quadrature of the corner integrand over a convex polygon.

    The error of a triangle is the difference between its rule and the sum
    over its four midpoint children. Triangles with the largest errors are
    split until the total error is below ``rtol`` times the integral of the
    bound ``||H|| / |y - eta|^2``.

    Returns
    -------
    value : float
    evals : int
        Number of integrand evaluations.
    """
    Hm = as_matrix(H)
    eta = np.asarray(eta, dtype=float)
    hnorm = float(np.linalg.norm(Hm, 2))
    if hnorm == 0.0:
        return 0.0, 0
    P = np.asarray(polygon, dtype=float)
    leaves = np.stack([np.stack([P[0], P[i], P[i + 1]]) for i in range(1, len(P) - 1)])
    npts = order * order
    evals = 0

    def assess(T):
        nonlocal evals
        v, _ = _tri_quad(Hm, eta, T, order)
        C = _split(T)
        cv, cb = _tri_quad(Hm, eta, C, order)
        evals += 5 * len(T) * npts
        cv = cv.reshape(-1, 4)
        return cv.sum(1), np.abs(cv.sum(1) - v), cb.reshape(-1, 4).sum(1) * hnorm, C.reshape(-1, 4, 3, 2)

    val, err, bnd, kids = assess(leaves)
    while True:
        tol = rtol * bnd.sum()
        if err.sum() <= tol:
            return float(val.sum()), evals
        if evals > max_evals:
            raise QuadratureError(f"corner quadrature did not reach rtol={rtol} within {max_evals} evaluations")
        # split every leaf carrying more than its share of the error budget
        share = max(tol / len(err), err.max() * 1e-3)
        pick = err > share
        new = kids[pick].reshape(-1, 3, 2)
        nv, ne, nb, nk = assess(new)
        keep = ~pick
        val = np.concatenate([val[keep], nv])
        err = np.concatenate([err[keep], ne])
        bnd = np.concatenate([bnd[keep], nb])
        kids = np.concatenate([kids[keep], nk])


def corner_integral_quadrature(H, dom: CornerDomain, eta, rtol: float = 1e-8, max_evals: int = 10**7) -> float:
    """``I(eta)`` over the trapezoid of ``dom`` by adaptive quadrature.

    Raises
    ------
    ValueError
        If ``eta`` lies in the closed trapezoid.
    QuadratureError
        If the tolerance is not met within ``max_evals`` evaluations.
    """
    eta = np.asarray(eta, dtype=float)
    if dom.contains(eta):
        raise ValueError("probe point lies in the trapezoid")
    return polygon_integral(H, dom.polygon, eta, rtol, max_evals)[0]


def _antiderivative(Hm: np.ndarray, x: np.ndarray | float) -> np.ndarray:
    """Antiderivative of ``(h11 u^2 + 2 h12 u + h22) / (1 + u^2)^2``, continuous at +-inf."""
    h11, h12, h22 = Hm[0, 0], Hm[0, 1], Hm[1, 1]
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        inv = 1.0 / (1.0 + x * x)
        frac = np.where(np.isinf(x), 0.0, x * inv)
    return 0.5 * (h11 + h22) * np.arctan(x) - 0.5 * (h11 - h22) * frac - h12 * inv


@dataclass(frozen=True)
class ClosedFormCoefficients:
    """Multipliers of ``log(1/|eta2|)`` and ``log|eta1 - k eta2|`` in the expansion of ``I(eta)``.

    ``remainder_bound`` is an eta-independent size estimate for the O(1)
    terms (a multiple of ``||H|| (1 + |log eps|)``), not a proven bound.
    """

    coef_log_eta2: float
    coef_log_eta1k: float
    remainder_bound: float
    k: float

    def prediction(self, eta) -> float:
        """Sum of the two logarithmic terms at ``eta``."""
        e1, e2 = map(float, eta)
        return self.coef_log_eta2 * math.log(1 / abs(e2)) + self.coef_log_eta1k * math.log(abs(e1 - self.k * e2))


def corner_integral_closed_form(H, dom: CornerDomain, eta) -> ClosedFormCoefficients:
    """Coefficients of the two logarithmic terms of ``I(eta)`` at ``eta`` (single mode)."""
    if dom.mode != "single":
        raise ValueError("closed form is for the single-corner domain")
    Hm = as_matrix(H)
    e, k = dom.epsilon, dom.k
    e1, e2 = map(float, eta)
    if e2 >= 0:
        raise ValueError("closed form needs eta2 < 0")
    G = lambda x: float(_antiderivative(Hm, x))
    B = G(e1 / e2)
    c1 = G((e - e1) / -e2) - B
    c2 = G((k * e - e1) / (e - e2)) - B
    h = float(np.linalg.norm(Hm, 2))
    rb = 2 * h * (math.pi + 2) * (1 + abs(math.log(e)))
    return ClosedFormCoefficients(c1, c2, rb, k)


def limit_coefficients(H, k: float) -> tuple[float, float]:
    """Limits of the log-coefficients on the two approach paths.

    Returns the multiplier of ``log(1/|eta2|)`` as ``eta2 -> -0`` with
    ``eta1`` fixed, and the multiplier of ``log(1/eta1)`` as ``eta -> 0``
    along the corner path (with the first one set to zero).
    """
    Hm = as_matrix(H)
    G = lambda x: float(_antiderivative(Hm, x))
    first = G(math.inf) - G(-math.inf)
    h11, h12, h22 = Hm[0, 0], Hm[0, 1], Hm[1, 1]
    second = (0.5 * (h11 - h22) * k + h12) / (1 + k * k)
    return first, second


def log_fit_slope(t: np.ndarray, values: np.ndarray) -> float:
    """Least-squares slope of ``values`` against ``log(1/t)``."""
    A = np.column_stack([np.log(1 / np.asarray(t)), np.ones(len(t))])
    return float(np.linalg.lstsq(A, values, rcond=None)[0][0])


@dataclass(frozen=True)
class PathSample:
    path: str
    eta: np.ndarray
    values: np.ndarray
    slope: float

    @property
    def variation(self) -> float:
        return float(self.values.max() - self.values.min())


def sample_path(H, dom: CornerDomain, path: str, per_decade: int = 12, decades=(-2, -5), corner: str = "origin", rtol: float = 1e-8) -> PathSample:
    """Quadrature values of ``I`` along an approach path and their log-fit slope.

    With ``corner="z1"`` (double mode) the path is reflected to approach the
    second corner: ``eta = A eta' + z1``.
    """
    pts = approach_path(dom, path, per_decade, decades)
    t = -pts[:, 1] if path == "bottom" else pts[:, 0]
    if corner == "z1":
        pts = pts @ REFLECTION.T + dom.z1
    elif corner != "origin":
        raise ValueError(f"unknown corner {corner!r}")
    vals = np.array([corner_integral_quadrature(H, dom, p, rtol) for p in pts])
    return PathSample(path, pts, vals, log_fit_slope(t, vals))


@dataclass(frozen=True)
class CornerVerdict:
    """Boundedness decision for ``sup |I(eta)|`` at one corner."""

    H: tuple
    k: float
    trace_value: float
    slant_value: float
    trace_ok: bool
    slant_ok: bool
    limit_bottom: float
    limit_corner: float
    slope_bottom: float | None = None
    slope_corner: float | None = None
    numeric_bounded: bool | None = None

    @property
    def bounded(self) -> bool:
        return self.trace_ok and self.slant_ok

    @property
    def verdict(self) -> str:
        return "bounded" if self.bounded else "unbounded"

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "k", "trace_value", "slant_value", "trace_ok", "slant_ok", "limit_bottom", "limit_corner",
            "slope_bottom", "slope_corner", "numeric_bounded",
        )}
        out["H"] = [list(r) for r in self.H]
        out["verdict"] = self.verdict
        return out


def _verdict(Hm, k, tol):
    h = max(float(np.linalg.norm(Hm, 2)), 1.0)
    tr = float(Hm[0, 0] + Hm[1, 1])
    sl = float(k * Hm[0, 0] + Hm[0, 1])
    l1, l2 = limit_coefficients(Hm, k)
    return tr, sl, abs(tr) <= tol * h, abs(sl) <= tol * h * max(1.0, abs(k)), l1, l2


def lemma41_extract(H, dom: CornerDomain, numeric: bool = False, tol: float = 1e-10, per_decade: int = 12) -> CornerVerdict:
    """Decide whether ``I`` stays bounded near the origin corner.

    The closed-form decision tests ``h11 + h22 = 0`` and ``k h11 + h12 = 0``.
    With ``numeric=True`` the quadrature log-fit slopes along both approach
    paths are also reported; bounded means every slope is below
    ``0.05 pi ||H||`` in magnitude.
    """
    Hm = as_matrix(H)
    tr, sl, tr_ok, sl_ok, l1, l2 = _verdict(Hm, dom.k, tol)
    s1 = s2 = nb = None
    if numeric:
        s1 = sample_path(Hm, dom, "bottom", per_decade).slope
        s2 = sample_path(Hm, dom, "corner", per_decade).slope
        lim = 0.05 * math.pi * float(np.linalg.norm(Hm, 2))
        nb = bool(abs(s1) < lim and abs(s2) < lim) if lim > 0 else True
    return CornerVerdict(tuple(map(tuple, Hm.tolist())), dom.k, tr, sl, tr_ok, sl_ok, l1, l2, s1, s2, nb)


@dataclass(frozen=True)
class DoubleCornerVerdict:
    origin: CornerVerdict
    second: CornerVerdict
    reflected_H: np.ndarray
    h_is_zero: bool

    @property
    def bounded(self) -> bool:
        return self.origin.bounded and self.second.bounded

    @property
    def verdict(self) -> str:
        return "bounded" if self.bounded else "unbounded"

    @property
    def consistent(self) -> bool:
        """Bounded at both corners exactly when ``H = 0``."""
        return self.bounded == self.h_is_zero

    def to_json(self) -> dict:
        return {
            "origin": self.origin.to_json(),
            "second": self.second.to_json(),
            "reflected_H": self.reflected_H.tolist(),
            "verdict": self.verdict,
            "h_is_zero": self.h_is_zero,
            "consistent": self.consistent,
        }


def lemma42_extract(H, dom: CornerDomain, numeric: bool = False, tol: float = 1e-10, per_decade: int = 12) -> DoubleCornerVerdict:
    """Apply the single-corner test at both lower corners of an isosceles trapezoid.

    At ``z1`` the substitution ``y = A u + z1``, ``A = diag(-1, 1)``, turns the
    corner into an origin corner with the same slant and replaces ``H`` by
    ``A^T H A``. Numeric slopes at ``z1`` are computed on the original
    domain along the reflected paths.
    """
    if dom.mode != "double":
        raise ValueError("two-corner test needs a double-mode domain")
    Hm = as_matrix(H)
    Hr = reflect_tensor(Hm)
    v0 = lemma41_extract(Hm, CornerDomain(dom.epsilon, dom.k), False, tol)
    v1 = lemma41_extract(Hr, CornerDomain(dom.epsilon, dom.k), False, tol)
    if numeric:
        lim = 0.05 * math.pi * float(np.linalg.norm(Hm, 2))
        res = []
        for corner, v in (("origin", v0), ("z1", v1)):
            s1 = sample_path(Hm, dom, "bottom", per_decade, corner=corner).slope
            s2 = sample_path(Hm, dom, "corner", per_decade, corner=corner).slope
            nb = bool(abs(s1) < lim and abs(s2) < lim) if lim > 0 else True
            res.append(CornerVerdict(v.H, v.k, v.trace_value, v.slant_value, v.trace_ok, v.slant_ok,
                                     v.limit_bottom, v.limit_corner, s1, s2, nb))
        v0, v1 = res
    zero = bool(np.abs(Hm).max() <= tol)
    return DoubleCornerVerdict(v0, v1, Hr, zero)


def path_table_csv(H, dom: CornerDomain, path: str, per_decade: int = 12, decades=(-2, -5)) -> str:
    """CSV rows ``eta1, eta2, I, prediction`` along an approach path (single mode)."""
    sample = sample_path(H, dom, path, per_decade, decades)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["eta1", "eta2", "integral", "log_terms"])
    for eta, v in zip(sample.eta, sample.values):
        pred = corner_integral_closed_form(H, dom, eta).prediction(eta)
        w.writerow([f"{eta[0]:.17g}", f"{eta[1]:.17g}", f"{v:.17g}", f"{pred:.17g}"])
    return buf.getvalue()
