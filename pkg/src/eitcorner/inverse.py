"""Injectivity certificates and iterative reconstruction on a finite perturbation space.

The unknown is a coefficient vector ``x`` of a :class:`PerturbationSpace`;
the conductivity is ``gamma(x) = reference + sum_j x_j E_j``. Coefficients
carry the area-weighted inner product ``<x, y>_W = sum_j w_j x_j y_j`` and
data carry the whitened Hilbert-Schmidt inner product of the measurement
basis, so the Jacobian columns are ``vec(whiten(F'(gamma)[E_j]))``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import lsq_linear

from .conductivity import PerturbationSpace, rotation, triangle_tensors
from .forward import ForwardModel, LocNDMap, lemma21_probe, whiten


class InverseCrimeError(ValueError):
    """Data were generated on the mesh used for inversion."""


class DivergenceError(RuntimeError):
    """The residual grew by the divergence factor over its running minimum."""

    def __init__(self, message: str, trace: "IterationTrace"):
        super().__init__(message)
        self.trace = trace


class NonAdmissibleError(ValueError):
    """An iterate left the admissible set with projection disabled."""


@dataclass
class InverseProblem:
    """Forward model restricted to a perturbation space around a reference field.

    Parameters
    ----------
    model : ForwardModel
        Inversion mesh and measurement basis.
    reference : field, tensor or (T, 2, 2) array
        Known conductivity at ``x = 0``.
    space : PerturbationSpace
    delta0 : float
        Admissibility floor on eigenvalues.
    """

    model: ForwardModel
    reference: object
    space: PerturbationSpace
    delta0: float = 1e-3

    def __post_init__(self):
        mesh = self.model.mesh
        self._ref = triangle_tensors(self.reference, mesh)
        idx = mesh.cell_index(self.space.cells)
        units = self.space.unit_tensors()
        E = np.zeros((self.space.dim, mesh.n_triangles, 2, 2))
        for j in range(self.space.dim):
            E[j, idx == j // self.space.per_cell] = units[j]
        if np.any(idx < 0) and not np.any(E):
            raise ValueError("perturbation cells are not resolved by the mesh")
        self._units = E
        self._cell_index = idx

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def weights(self) -> np.ndarray:
        return self.space.weights

    def tensors(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._ref + np.einsum("j,jtab->tab", x, self._units)

    def min_eigenvalue(self, x) -> float:
        return float(np.linalg.eigvalsh(self.tensors(x))[:, 0].min())

    def forward(self, x) -> LocNDMap:
        return self.model.nd_map(self.tensors(x))

    def jacobian(self, x) -> np.ndarray:
        """Whitened Jacobian in unweighted coefficients, shape (n_data, dim)."""
        return self.model.derivative(self.tensors(x), list(self._units)).jacobian

    def data_vector(self, m: LocNDMap) -> np.ndarray:
        return whiten(m.matrix, self.model.basis).ravel()

    def sup_distance(self, x, y) -> float:
        return self.space.sup_norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))

    def project(self, x) -> np.ndarray:
        """Clip eigenvalues of every perturbed cell to ``delta0`` and map back to coefficients."""
        x = np.asarray(x, dtype=float).copy()
        cells = self.space.cell_tensors(x)
        for c in range(len(self.space.cells)):
            tri = self._cell_index == c
            refs = np.unique(self._ref[tri].reshape(-1, 4), axis=0).reshape(-1, 2, 2)
            H = cells[c]
            for _ in range(10):
                moved = False
                for B in refs:
                    w, V = np.linalg.eigh(B + H)
                    if w[0] < self.delta0:
                        H = (V * np.maximum(w, self.delta0)) @ V.T - B
                        moved = True
                if not moved:
                    break
            cells[c] = H
        p = self.space.per_cell
        for c, H in enumerate(cells):
            if self.space.mode == "trapezoid":
                x[p * c:p * c + 3] = [H[0, 0], H[0, 1], H[1, 1]]
            else:
                R = rotation(self.space.phis[c])
                D = R @ H @ R.T
                x[p * c:p * c + 2] = [D[0, 0], D[1, 1]]
        return x


def check_inverse_crime(data: LocNDMap, model: ForwardModel, allow: bool = False) -> None:
    """Refuse data computed on the inversion mesh unless explicitly allowed."""
    if not data.basis.same_partition(model.basis):
        raise ValueError("data and model use different measurement partitions")
    if not allow and data.mesh_signature and data.mesh_signature == model.mesh.signature:
        raise InverseCrimeError("data were generated on the inversion mesh")


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InjectivityCertificate:
    """Smallest singular value of ``x -> F'(gamma0)[H(x)]`` between weighted spaces.

    ``sigma_min`` is set to zero when it falls below the numerical rank
    tolerance ``max(n_data, dim) * eps * sigma_max``. ``sup_lower_bound`` is a
    lower bound for the minimum of the data norm over ``||H||_inf = 1``;
    ``box_min`` is that minimum computed exactly (parallelogram mode only).
    """

    sigma_min: float
    sigma_max: float
    singular_values: np.ndarray
    dim: int
    n_data: int
    rank_tol: float
    sup_lower_bound: float
    box_min: float | None
    basis_description: str
    norm_note: str
    mesh_signature: str

    def passes(self, rel_threshold: float = 1e-8) -> bool:
        return self.sigma_min > rel_threshold * self.sigma_max

    def to_json(self) -> dict:
        return {
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "singular_values": self.singular_values.tolist(),
            "dim": self.dim,
            "n_data": self.n_data,
            "rank_tol": self.rank_tol,
            "sup_lower_bound": self.sup_lower_bound,
            "box_min": self.box_min,
            "basis_description": self.basis_description,
            "norm_note": self.norm_note,
            "mesh_signature": self.mesh_signature,
        }


def box_minimum(J: np.ndarray) -> tuple[float, np.ndarray]:
    """``min ||J x||`` over ``||x||_inf = 1``, solved face by face as bounded least squares."""
    n = J.shape[1]
    best, arg = math.inf, None
    for i in range(n):
        others = np.delete(np.arange(n), i)
        for s in (1.0, -1.0):
            if len(others):
                res = lsq_linear(J[:, others], -s * J[:, i], bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
                x = np.empty(n)
                x[others] = res.x
            else:
                x = np.empty(1)
            x[i] = s
            v = float(np.linalg.norm(J @ x))
            if v < best:
                best, arg = v, x
    return best, arg


def injectivity_certificate(problem: InverseProblem, x=None, box: bool = False) -> InjectivityCertificate:
    """Certificate for the derivative at ``gamma(x)`` (default ``x = 0``, the reference).

    Raises
    ------
    ValueError
        If the perturbation space is empty or the measurement grams are not
        positive definite.
    """
    if problem.dim == 0:
        raise ValueError("empty perturbation basis")
    x = np.zeros(problem.dim) if x is None else np.asarray(x, dtype=float)
    for g in (problem.model.basis.gram_neumann, problem.model.basis.gram_dirichlet):
        if np.linalg.eigvalsh(g)[0] <= 0:
            raise ValueError("measurement gram matrix is not positive definite")
    J = problem.jacobian(x)
    Jw = J / np.sqrt(problem.weights)
    sv = np.linalg.svd(Jw, compute_uv=False)
    smax = float(sv[0])
    tol = max(J.shape) * np.finfo(float).eps * smax
    full = np.concatenate([sv, np.zeros(max(problem.dim - len(sv), 0))])
    smin = float(full[-1]) if full[-1] > tol else 0.0
    if problem.space.mode == "parallelogram":
        # ||H||_inf = ||x||_inf <= ||x||_2 <= ||x||_W
        factor = 1.0
        note = ("||H||_inf equals the coefficient box norm; on the box boundary ||x||_W >= 1, "
                "so min{||F'[H]|| : ||H||_inf = 1} lies in [sigma_min, sigma_min * sqrt(n * max w)]")
    else:
        # ||H||_2 <= ||H||_F <= sqrt(2) ||x||_2
        factor = 1.0 / math.sqrt(2.0)
        note = ("||H||_inf <= sqrt(2) ||x||_W for tensor-entry coefficients, "
                "so min{||F'[H]|| : ||H||_inf = 1} >= sigma_min / sqrt(2)")
    bmin = box_minimum(J)[0] if box and problem.space.mode == "parallelogram" else None
    desc = f"{problem.space.mode}: {len(problem.space.cells)} cells, {problem.space.per_cell} coefficients per cell, area weights"
    return InjectivityCertificate(smin, smax, full, problem.dim, J.shape[0], tol, smin * factor, bmin, desc, note,
                                  problem.model.mesh.signature)


# ---------------------------------------------------------------------------
# Iterations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationConfig:
    """Settings shared by both schemes.

    ``mu`` defaults to ``1 / ||J_W||^2`` at the initial iterate. ``tol`` is
    relative to the data norm.
    """

    scheme: str = "landweber"
    mu: float | None = None
    lam: float = 1e-2
    lam_decrease: float = 0.5
    lam_increase: float = 4.0
    max_iters: int = 500
    tol: float = 1e-10
    project: bool = True
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.scheme not in ("landweber", "levenberg-marquardt"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("step size must be positive")
        if self.lam < 0:
            raise ValueError("damping must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class IterationTrace:
    """Per-iteration residual, sup distance to the truth (nan if unknown) and step norm."""

    residual: list = field(default_factory=list)
    error: list = field(default_factory=list)
    step: list = field(default_factory=list)

    def append(self, res: float, err: float, step: float) -> None:
        if not math.isfinite(res):
            raise FloatingPointError("non-finite residual")
        self.residual.append(float(res))
        self.error.append(float(err))
        self.step.append(float(step))

    def __len__(self) -> int:
        return len(self.residual)

    def first_below(self, level: float) -> int | None:
        """Index of the first iterate whose error is at most ``level``."""
        for i, e in enumerate(self.error):
            if e <= level:
                return i
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "residual", "error", "step"])
        for i, (r, e, s) in enumerate(zip(self.residual, self.error, self.step)):
            w.writerow([i, f"{r:.17g}", f"{e:.17g}", f"{s:.17g}"])
        return buf.getvalue()


def _check_admissible(problem: InverseProblem, x, config: IterationConfig) -> np.ndarray:
    if config.project:
        return problem.project(x)
    if problem.min_eigenvalue(x) < problem.delta0:
        raise NonAdmissibleError("iterate is not admissible and projection is disabled")
    return x


def _weighted_norm(x, w) -> float:
    return float(np.sqrt(np.sum(w * x * x)))


def landweber(problem: InverseProblem, data: LocNDMap, config: IterationConfig, init=None, truth=None,
              callback: Callable | None = None) -> tuple[np.ndarray, IterationTrace]:
    """Projected Landweber iteration ``x <- x - mu W^{-1} J^T (F(x) - data)``.

    ``W^{-1} J^T`` is the adjoint of ``J`` for the weighted coefficient inner
    product. Every trace entry records the residual at the current iterate
    and the norm of the update computed from it; iteration stops once the
    relative residual is at most ``tol``.

    Raises
    ------
    DivergenceError
        If the residual exceeds ``divergence_factor`` times its running minimum.
    """
    w = problem.weights
    x = np.zeros(problem.dim) if init is None else np.asarray(init, dtype=float).copy()
    x = _check_admissible(problem, x, config)
    d = problem.data_vector(data)
    scale = max(np.linalg.norm(d), 1e-300)
    trace = IterationTrace()
    mu = config.mu
    best = math.inf
    for _ in range(config.max_iters):
        J = problem.jacobian(x)
        if mu is None:
            mu = 1.0 / np.linalg.norm(J / np.sqrt(w), 2) ** 2
        r = problem.data_vector(problem.forward(x)) - d
        res = float(np.linalg.norm(r))
        step = -mu * (J.T @ r) / w
        err = problem.sup_distance(x, truth) if truth is not None else math.nan
        trace.append(res, err, _weighted_norm(step, w))
        if callback is not None:
            callback(x, trace)
        if res <= config.tol * scale:
            break
        best = min(best, res)
        if res > config.divergence_factor * best:
            raise DivergenceError(f"residual grew from {best:.3g} to {res:.3g}", trace)
        x = _check_admissible(problem, x + step, config)
    return x, trace


def levenberg_marquardt(problem: InverseProblem, data: LocNDMap, config: IterationConfig, init=None, truth=None,
                        callback: Callable | None = None) -> tuple[np.ndarray, IterationTrace]:
    """Damped Gauss-Newton steps ``(J_W^T J_W + lam I) z = -J_W^T r``, ``x += W^{-1/2} z``.

    Accepted steps multiply ``lam`` by ``lam_decrease``, rejected ones by
    ``lam_increase``; each attempt counts as one iteration.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``lam = 0`` and the Jacobian is rank deficient.
    DivergenceError
        As for :func:`landweber`.
    """
    w = problem.weights
    sw = np.sqrt(w)
    x = np.zeros(problem.dim) if init is None else np.asarray(init, dtype=float).copy()
    x = _check_admissible(problem, x, config)
    d = problem.data_vector(data)
    scale = max(np.linalg.norm(d), 1e-300)
    lam = config.lam
    trace = IterationTrace()
    r = problem.data_vector(problem.forward(x)) - d
    res = float(np.linalg.norm(r))
    J = None
    best = res
    for _ in range(config.max_iters):
        if J is None:
            J = problem.jacobian(x) / sw
        A = J.T @ J
        if lam == 0:
            if np.linalg.matrix_rank(J) < problem.dim:
                raise np.linalg.LinAlgError("normal equations are singular at zero damping")
        z = np.linalg.solve(A + lam * np.eye(problem.dim), -(J.T @ r))
        step = z / sw
        err = problem.sup_distance(x, truth) if truth is not None else math.nan
        trace.append(res, err, _weighted_norm(step, w))
        if callback is not None:
            callback(x, trace)
        if res <= config.tol * scale:
            break
        x_new = _check_admissible(problem, x + step, config)
        r_new = problem.data_vector(problem.forward(x_new)) - d
        res_new = float(np.linalg.norm(r_new))
        if res_new < res:
            x, r, res, J = x_new, r_new, res_new, None
            lam *= config.lam_decrease
            best = min(best, res)
        else:
            lam = max(lam, 1e-12) * config.lam_increase
            if res_new > config.divergence_factor * best and not math.isfinite(lam):
                raise DivergenceError("damping overflowed", trace)
    return x, trace


def reconstruct(problem: InverseProblem, data: LocNDMap, config: IterationConfig, init=None, truth=None,
                allow_inverse_crime: bool = False):
    """Run the configured scheme after the inverse-crime check."""
    check_inverse_crime(data, problem.model, allow_inverse_crime)
    run = landweber if config.scheme == "landweber" else levenberg_marquardt
    return run(problem, data, config, init, truth)


# ---------------------------------------------------------------------------
# Lipschitz probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzReport:
    """Empirical ``||tau - sigma||_inf / ||F(tau) - F(sigma)||`` over sampled pairs.

    ``bound`` is ``1 / (D E)`` with ``D = c - C4 (delta + eps)`` and
    ``E = 1 - 2 C3 delta / D``, where ``c`` is the certificate's lower bound
    for the sup-norm injectivity constant; it is ``inf`` when ``D`` or ``E``
    is not positive (smallness conditions violated).
    """

    ratios: np.ndarray
    max_ratio: float
    inv_sigma_min: float
    inv_box_min: float | None
    C3: float
    C4: float
    D: float
    E: float
    bound: float
    delta: float
    eps: float

    @property
    def within_bound(self) -> bool:
        return bool(self.max_ratio <= self.bound)

    def to_json(self) -> dict:
        return {
            "ratios": self.ratios.tolist(),
            "max_ratio": self.max_ratio,
            "inv_sigma_min": self.inv_sigma_min,
            "inv_box_min": self.inv_box_min,
            "C3": self.C3,
            "C4": self.C4,
            "D": self.D,
            "E": self.E,
            "bound": self.bound,
            "delta": self.delta,
            "eps": self.eps,
            "within_bound": self.within_bound,
        }


def lipschitz_probe(problem: InverseProblem, center, delta: float, n_pairs: int, rng_seed: int,
                    certificate: InjectivityCertificate | None = None, n_directions: int = 3) -> LipschitzReport | None:
    """Sample pairs in the sup-norm ball ``B_delta(center)`` and compare with the assembled bound.

    Pairs are ``center + delta u``, ``center + delta v`` with ``u, v`` uniform
    in the coefficient box, except the first pair, which is placed along the
    worst direction of the certificate (the box minimizer in parallelogram
    mode, the smallest right singular vector otherwise). ``C3`` and ``C4``
    are probed on the same pairs with ``n_directions`` random unit
    directions. Returns None for ``n_pairs = 0``.
    """
    if n_pairs <= 0:
        return None
    center = np.asarray(center, dtype=float)
    if certificate is None:
        certificate = injectivity_certificate(problem, None, box=problem.space.mode == "parallelogram")
    rng = np.random.default_rng(rng_seed)
    n = problem.dim
    J0 = problem.jacobian(np.zeros(n))
    if certificate.box_min is not None:
        worst = box_minimum(J0)[1]
    else:
        worst = np.linalg.svd(J0 / np.sqrt(problem.weights))[2][-1] / np.sqrt(problem.weights)
    worst = worst / problem.space.sup_norm(worst)
    pairs = [(center - 0.5 * delta * worst, center + 0.5 * delta * worst)]
    for _ in range(n_pairs - 1):
        u, v = rng.uniform(-1, 1, (2, n))
        pairs.append((center + delta * u / max(problem.space.sup_norm(u), 1.0),
                      center + delta * v / max(problem.space.sup_norm(v), 1.0)))
    ratios = []
    for s, t in pairs:
        diff = problem.forward(t) - problem.forward(s)
        ratios.append(problem.sup_distance(t, s) / diff.hs_norm())
    ratios = np.array(ratios)
    dirs = [problem.tensors(h) - problem.tensors(np.zeros(n)) for h in rng.uniform(-1, 1, (n_directions, n))]
    table = lemma21_probe(problem.model, [(problem.tensors(t), problem.tensors(s)) for s, t in pairs], dirs, norm="hs")
    eps = problem.space.sup_norm(center)
    c = certificate.sup_lower_bound
    D = c - table.C4 * (delta + eps)
    E = 1 - 2 * table.C3 * delta / D if D > 0 else -math.inf
    bound = 1.0 / (D * E) if D > 0 and E > 0 else math.inf
    inv_box = 1.0 / certificate.box_min if certificate.box_min else None
    inv_s = 1.0 / certificate.sigma_min if certificate.sigma_min > 0 else math.inf
    return LipschitzReport(ratios, float(ratios.max()), inv_s, inv_box, table.C3, table.C4, D, E, bound, delta, eps)
