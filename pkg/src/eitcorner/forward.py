"""Discrete localized Neumann-to-Dirichlet map and its Fréchet derivative.

Boundary data live on a fixed measurement partition of Σ that does not
depend on the mesh: the partition points are the corners of the Σ chain
plus a uniform subdivision of every chain segment. Meshes are built with
these points as nodes, so the hat functions of the partition are piecewise
linear on every mesh and maps computed on different meshes are directly
comparable.

* Dirichlet side: all hats of the partition; a mesh trace is represented by
  its L2(Σ) projection onto their span.
* Neumann side: hats vanishing at the ends of Σ (all hats when Σ is the
  whole boundary), shifted to zero mean; the last one is dropped so the
  functions are linearly independent.

The map matrix ``A`` sends Neumann coefficients to Dirichlet coefficients.
Norms are weighted L2(Σ) norms (or an optional fractional H^{1/2} /
H^{-1/2} weighting); ``whitened`` maps both spaces to Euclidean coordinates.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .conductivity import triangle_tensors, spectral_norms
from .femcore import Mesh, NeumannSolver, assemble_stiffness, chain_arclength, chain_length, triangulate
from .geometry import Decomposition

# ---------------------------------------------------------------------------
# Measurement basis on Σ
# ---------------------------------------------------------------------------


def _hat_mass(pos: np.ndarray, closed: bool, length: float) -> np.ndarray:
    n = len(pos)
    if closed:
        gaps = np.diff(np.concatenate([pos, [pos[0] + length]]))
        M = np.zeros((n, n))
        for k, g in enumerate(gaps):
            i, j = k, (k + 1) % n
            M[i, i] += g / 3
            M[j, j] += g / 3
            M[i, j] += g / 6
            M[j, i] += g / 6
        return M
    gaps = np.diff(pos)
    M = np.zeros((n, n))
    for k, g in enumerate(gaps):
        M[k, k] += g / 3
        M[k + 1, k + 1] += g / 3
        M[k, k + 1] += g / 6
        M[k + 1, k] += g / 6
    return M


def _hat_stiffness(pos: np.ndarray, closed: bool, length: float) -> np.ndarray:
    n = len(pos)
    gaps = np.diff(np.concatenate([pos, [pos[0] + length]])) if closed else np.diff(pos)
    K = np.zeros((n, n))
    for k, g in enumerate(gaps):
        i, j = k, (k + 1) % n
        K[i, i] += 1 / g
        K[j, j] += 1 / g
        K[i, j] -= 1 / g
        K[j, i] -= 1 / g
    return K


@dataclass(frozen=True, eq=False)
class SigmaBasis:
    """Hat functions on a partition of the Σ chain.

    Parameters
    ----------
    sigma : tuple of segments
        The Σ chain.
    closed : bool
        Whether Σ is the whole (closed) boundary.
    positions : ndarray
        Arclength positions of the partition points. For an open chain they
        start at 0 and end at the chain length; for a closed chain the end
        point is identified with 0 and omitted.
    gram_mode : {"l2", "fractional"}
    """

    sigma: tuple
    closed: bool
    positions: np.ndarray
    gram_mode: str = "l2"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.gram_mode not in ("l2", "fractional"):
            raise ValueError(f"unknown gram mode {self.gram_mode!r}")
        pos = np.asarray(self.positions, dtype=float)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "sigma", tuple((tuple(map(float, p)), tuple(map(float, q))) for p, q in self.sigma))
        if np.any(np.diff(pos) <= 0):
            raise ValueError("partition positions must increase")
        if self.n_neumann < 1:
            raise ValueError("partition too coarse for a zero-mean Neumann basis")

    @classmethod
    def from_decomposition(cls, d: Decomposition, per_segment: int | None = None, spacing: float | None = None,
                           gram_mode: str = "l2") -> "SigmaBasis":
        """Partition each Σ segment uniformly into ``per_segment`` parts or parts of length at most ``spacing``."""
        if (per_segment is None) == (spacing is None):
            raise ValueError("give exactly one of per_segment and spacing")
        pos = [0.0]
        start = 0.0
        for p, q in d.sigma:
            L = float(np.linalg.norm(np.subtract(q, p)))
            n = per_segment if per_segment is not None else max(1, int(math.ceil(L / spacing - 1e-9)))
            pos.extend(start + L * np.arange(1, n + 1) / n)
            start += L
        pos = np.array(pos)
        if d.sigma_closed:
            pos = pos[:-1]
        return cls(d.sigma, d.sigma_closed, pos, gram_mode)

    # -- partition data ----------------------------------------------------

    @property
    def length(self) -> float:
        return chain_length(self.sigma)

    @property
    def points(self) -> np.ndarray:
        """Cartesian coordinates of the partition points."""
        out = []
        starts = np.concatenate([[0.0], np.cumsum([np.linalg.norm(np.subtract(q, p)) for p, q in self.sigma])])
        for s in self.positions:
            k = min(int(np.searchsorted(starts, s, side="right") - 1), len(self.sigma) - 1)
            p, q = np.asarray(self.sigma[k][0]), np.asarray(self.sigma[k][1])
            L = starts[k + 1] - starts[k]
            out.append(p + (s - starts[k]) / L * (q - p))
        return np.array(out)

    @property
    def n_hats(self) -> int:
        return len(self.positions)

    @property
    def neumann_hats(self) -> np.ndarray:
        """Indices of hats vanishing at the ends of Σ."""
        return np.arange(self.n_hats) if self.closed else np.arange(1, self.n_hats - 1)

    @property
    def n_neumann(self) -> int:
        return len(self.neumann_hats) - 1

    @property
    def mass(self) -> np.ndarray:
        if "mass" not in self._cache:
            self._cache["mass"] = _hat_mass(self.positions, self.closed, self.length)
        return self._cache["mass"]

    @property
    def hat_integrals(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def neumann_coefficients(self) -> np.ndarray:
        """Matrix ``B`` whose columns are the zero-mean Neumann functions in hat coordinates."""
        if "B" not in self._cache:
            idx = self.neumann_hats
            w = self.hat_integrals[idx]
            B = np.zeros((self.n_hats, len(idx)))
            B[idx, np.arange(len(idx))] = 1.0
            B[np.ix_(idx, np.arange(len(idx)))] -= np.outer(np.ones(len(idx)), w / w.sum())
            self._cache["B"] = B[:, :-1]
        return self._cache["B"]

    def _fractional(self):
        if "frac" not in self._cache:
            M = self.mass
            K = _hat_stiffness(self.positions, self.closed, self.length)
            lam, V = sla.eigh(K, M)
            lam = np.clip(lam, 0.0, None)
            MV = M @ V
            self._cache["frac"] = (MV, np.sqrt(lam))
        return self._cache["frac"]

    @property
    def gram_dirichlet(self) -> np.ndarray:
        if self.gram_mode == "l2":
            return self.mass
        MV, root = self._fractional()
        return (MV * (1.0 + root)) @ MV.T

    @property
    def gram_neumann(self) -> np.ndarray:
        B = self.neumann_coefficients
        if self.gram_mode == "l2":
            return B.T @ self.mass @ B
        MV, root = self._fractional()
        W = MV.T @ B
        return (W.T / (1.0 + root)) @ W

    @property
    def chol_dirichlet(self) -> np.ndarray:
        if ("chol_d", self.gram_mode) not in self._cache:
            self._cache[("chol_d", self.gram_mode)] = np.linalg.cholesky(self.gram_dirichlet)
        return self._cache[("chol_d", self.gram_mode)]

    @property
    def chol_neumann(self) -> np.ndarray:
        if ("chol_n", self.gram_mode) not in self._cache:
            self._cache[("chol_n", self.gram_mode)] = np.linalg.cholesky(self.gram_neumann)
        return self._cache[("chol_n", self.gram_mode)]

    def hat_values(self, s: np.ndarray) -> np.ndarray:
        """Values of all hats at arclength positions ``s``, shape (n_hats, len(s))."""
        s = np.asarray(s, dtype=float)
        eye = np.eye(self.n_hats)
        if self.closed:
            xp = np.concatenate([self.positions, [self.positions[0] + self.length]])
            return np.array([np.interp(s, xp, np.concatenate([e, e[:1]]), period=self.length) for e in eye])
        return np.array([np.interp(s, self.positions, e) for e in eye])

    def with_gram_mode(self, mode: str) -> "SigmaBasis":
        return SigmaBasis(self.sigma, self.closed, self.positions, mode)

    def to_json(self) -> dict:
        return {
            "sigma": [[list(p), list(q)] for p, q in self.sigma],
            "closed": self.closed,
            "positions": self.positions.tolist(),
            "gram_mode": self.gram_mode,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SigmaBasis":
        return cls([(tuple(p), tuple(q)) for p, q in d["sigma"]], bool(d["closed"]), np.array(d["positions"]), d.get("gram_mode", "l2"))

    def same_partition(self, other: "SigmaBasis") -> bool:
        return (
            self.closed == other.closed
            and len(self.positions) == len(other.positions)
            and np.allclose(self.positions, other.positions, rtol=0, atol=1e-12)
        )


def make_mesh(decompositions, basis: SigmaBasis, target_h: float, extra_cells=(), grading: int = 0) -> Mesh:
    """Triangulate with the measurement points of ``basis`` as nodes."""
    return triangulate(decompositions, target_h, extra_cells=extra_cells, points=basis.points, grading=grading)


# ---------------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class LocNDMap:
    """Matrix from Neumann coefficients to Dirichlet trace coefficients.

    ``gram_neumann`` and ``gram_dirichlet`` are the weight matrices of the
    two coefficient spaces. ``mesh_signature`` identifies the mesh used.
    """

    matrix: np.ndarray
    basis: SigmaBasis
    mesh_signature: str = ""

    @property
    def gram_neumann(self) -> np.ndarray:
        return self.basis.gram_neumann

    @property
    def gram_dirichlet(self) -> np.ndarray:
        return self.basis.gram_dirichlet

    def whitened(self) -> np.ndarray:
        """Matrix in orthonormal coordinates of both weighted spaces."""
        return whiten(self.matrix, self.basis)

    def pairing(self) -> np.ndarray:
        """``P[k, j] = <Lambda f_j, f_k>`` (boundary L2 pairing)."""
        return self.basis.neumann_coefficients.T @ self.basis.mass @ self.matrix

    def self_adjointness_defect(self) -> float:
        P = self.pairing()
        return float(np.abs(P - P.T).max() / max(np.abs(P).max(), 1e-300))

    def op_norm(self) -> float:
        return operator_norm(self.matrix, self.gram_neumann, self.gram_dirichlet)

    def hs_norm(self) -> float:
        return float(np.linalg.norm(self.whitened()))

    def norm(self, kind: str = "hs") -> float:
        return self.hs_norm() if kind == "hs" else self.op_norm()

    def __sub__(self, other: "LocNDMap") -> "LocNDMap":
        if not self.basis.same_partition(other.basis):
            raise ValueError("maps use different measurement partitions")
        return LocNDMap(self.matrix - other.matrix, self.basis, "")

    def to_json(self) -> dict:
        return {
            "basis": self.basis.to_json(),
            "matrix": self.matrix.tolist(),
            "mesh_signature": self.mesh_signature,
            "shape": list(self.matrix.shape),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LocNDMap":
        return cls(np.array(d["matrix"], dtype=float), SigmaBasis.from_json(d["basis"]), d.get("mesh_signature", ""))

    def to_csv(self) -> str:
        return matrix_csv(self.matrix, self.basis)


def matrix_csv(matrix: np.ndarray, basis: SigmaBasis) -> str:
    """Row-major CSV with a comment header describing the basis."""
    buf = io.StringIO()
    buf.write(f"# rows=dirichlet_hats:{matrix.shape[0]} cols=neumann_functions:{matrix.shape[1]} "
              f"closed={basis.closed} gram={basis.gram_mode}\n")
    buf.write("# positions=" + " ".join(f"{p:.17g}" for p in basis.positions) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for row in matrix:
        w.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue()


def whiten(matrix: np.ndarray, basis: SigmaBasis) -> np.ndarray:
    LD = basis.chol_dirichlet
    LN = basis.chol_neumann
    return LD.T @ sla.solve_triangular(LN, matrix.T, lower=True).T


def operator_norm(map_matrix, gram_neumann, gram_dirichlet) -> float:
    """Largest generalized singular value of ``map_matrix`` between the weighted spaces."""
    A = np.asarray(map_matrix, dtype=float)
    if not np.any(A):
        return 0.0
    LD = np.linalg.cholesky(np.asarray(gram_dirichlet, dtype=float))
    LN = np.linalg.cholesky(np.asarray(gram_neumann, dtype=float))
    W = LD.T @ sla.solve_triangular(LN, A.T, lower=True).T
    return float(np.linalg.norm(W, 2))


# ---------------------------------------------------------------------------
# Forward model on one mesh
# ---------------------------------------------------------------------------


class ForwardModel:
    """Mesh-level operators linking the FEM solver to the measurement basis.

    Parameters
    ----------
    mesh : Mesh
        Must contain every measurement point of ``basis`` as a node on Σ.
    basis : SigmaBasis
    threads : int
        Workers used for independent derivative directions.
    """

    def __init__(self, mesh: Mesh, basis: SigmaBasis, threads: int = 1):
        self.mesh = mesh
        self.basis = basis
        self.threads = max(1, int(threads))
        nodes = mesh.sigma_nodes
        s = mesh.sigma_arclength
        if not basis.closed:
            s = chain_arclength(basis.sigma, mesh.nodes[nodes])
        # every partition point must be a mesh node
        for p in basis.positions:
            dist = np.abs(s - p)
            if basis.closed:
                dist = np.minimum(dist, basis.length - dist)
            if dist.min() > 1e-9 * max(1.0, basis.length):
                raise ValueError("mesh does not contain the measurement points of the basis")
        self.sigma_nodes = nodes
        Phi = basis.hat_values(s)
        # P1 mass matrix on the Σ edges, in Σ-node order
        local = -np.ones(mesh.n_nodes, dtype=np.int64)
        local[nodes] = np.arange(len(nodes))
        e = local[mesh.boundary_edges[mesh.sigma_edges]]
        L = np.linalg.norm(mesh.nodes[nodes[e[:, 1]]] - mesh.nodes[nodes[e[:, 0]]], axis=1)
        n = len(nodes)
        Ms = sp.coo_matrix(
            (np.concatenate([L / 3, L / 3, L / 6, L / 6]),
             (np.concatenate([e[:, 0], e[:, 1], e[:, 0], e[:, 1]]), np.concatenate([e[:, 0], e[:, 1], e[:, 1], e[:, 0]]))),
            shape=(n, n),
        ).tocsr()
        PhiM = (Ms @ Phi.T).T  # Phi M_sigma, shape (n_hats, n_sigma)
        self.trace_operator = sla.cho_solve(sla.cho_factor(basis.mass), PhiM)
        loads = np.zeros((mesh.n_nodes, basis.n_neumann))
        loads[nodes] = PhiM.T @ basis.neumann_coefficients
        self.loads = loads
        self._solver_key = None
        self._solver = None

    # -- solves ------------------------------------------------------------

    def solver(self, gamma) -> NeumannSolver:
        tensors = triangle_tensors(gamma, self.mesh)
        key = tensors.tobytes()
        if key != self._solver_key:
            self._solver = NeumannSolver(self.mesh, tensors)
            self._solver_key = key
        return self._solver

    def states(self, gamma) -> np.ndarray:
        """Solutions for all Neumann basis functions, shape (n_nodes, n_neumann)."""
        U, _, _ = self.solver(gamma).solve(self.loads)
        return U

    def traces(self, U: np.ndarray) -> np.ndarray:
        return self.trace_operator @ U[self.sigma_nodes]

    def nd_map(self, gamma) -> LocNDMap:
        return LocNDMap(self.traces(self.states(gamma)), self.basis, self.mesh.signature)

    def derivative_states(self, gamma, H, U: np.ndarray | None = None) -> np.ndarray:
        solver = self.solver(gamma)
        if U is None:
            U = self.states(gamma)
        KH = assemble_stiffness(self.mesh, triangle_tensors(H, self.mesh))
        Up, _, _ = solver.solve(-(KH @ U))
        return Up

    def frechet(self, gamma, H, U: np.ndarray | None = None) -> LocNDMap:
        return LocNDMap(self.traces(self.derivative_states(gamma, H, U)), self.basis, self.mesh.signature)

    def derivative(self, gamma, directions: Sequence) -> "DerivativeMap":
        """F'(gamma) applied to every direction; columns computed independently."""
        if len(directions) == 0:
            raise ValueError("no derivative directions")
        solver = self.solver(gamma)
        U = self.states(gamma)
        tensors = [triangle_tensors(H, self.mesh) for H in directions]

        def one(T):
            KH = assemble_stiffness(self.mesh, T)
            Up, _, _ = solver.solve(-(KH @ U))
            return self.traces(Up)

        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                mats = list(pool.map(one, tensors))
        else:
            mats = [one(T) for T in tensors]
        return DerivativeMap(mats, self.basis)


@dataclass(eq=False)
class DerivativeMap:
    """Derivative matrices ``dLambda_j = F'(gamma)[H_j]`` and the stacked Jacobian."""

    matrices: list
    basis: SigmaBasis

    @property
    def jacobian(self) -> np.ndarray:
        """Columns ``vec(whiten(dLambda_j))`` (row-major), so Euclidean norms are data norms."""
        return np.column_stack([whiten(m, self.basis).ravel() for m in self.matrices])

    def apply(self, coeffs) -> np.ndarray:
        return sum(c * m for c, m in zip(coeffs, self.matrices))


def nd_map(gamma, mesh: Mesh, basis: SigmaBasis) -> LocNDMap:
    """Localized ND map of ``gamma`` on ``mesh`` in the coordinates of ``basis``."""
    return ForwardModel(mesh, basis).nd_map(gamma)


def frechet_apply(gamma, H, mesh: Mesh, basis: SigmaBasis) -> LocNDMap:
    """Matrix of ``F'(gamma)[H]``."""
    return ForwardModel(mesh, basis).frechet(gamma, H)


# ---------------------------------------------------------------------------
# Empirical constants of the derivative bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lemma21Table:
    """Empirical maxima of the four ratios bounding F and F'.

    ``C1 = max ||F(t)||``, ``C2 = max ||F(t)-F(s)|| / ||t-s||``,
    ``C3 = max ||F(t)-F(s)-F'(s)[t-s]|| / ||t-s||^2`` and
    ``C4 = max ||F'(t)[H]-F'(s)[H]|| / (||H|| ||t-s||)``, sup norms on the
    conductivity side. Pairs with ``t = s`` only enter ``C1``.
    """

    C1: float
    C2: float
    C3: float
    C4: float
    n_pairs: int
    n_excluded: int
    norm: str

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("C1", "C2", "C3", "C4", "n_pairs", "n_excluded", "norm")}


def lemma21_probe(model: ForwardModel, gamma_pairs: Sequence, H_samples: Sequence, norm: str = "operator") -> Lemma21Table:
    """Evaluate the four ratios over pairs ``(tau, sigma)`` and directions ``H``."""
    mesh = model.mesh
    C = [0.0, 0.0, 0.0, 0.0]
    excluded = 0
    H_tensors = [triangle_tensors(H, mesh) for H in H_samples]
    H_norms = [float(spectral_norms(T).max()) for T in H_tensors]
    for tau, sig in gamma_pairs:
        Ft = model.nd_map(tau)
        Fs = model.nd_map(sig)
        C[0] = max(C[0], Ft.norm(norm), Fs.norm(norm))
        D = triangle_tensors(tau, mesh) - triangle_tensors(sig, mesh)
        dist = float(spectral_norms(D).max())
        if dist == 0.0:
            excluded += 1
            continue
        diff = Ft - Fs
        C[1] = max(C[1], diff.norm(norm) / dist)
        lin = model.frechet(sig, D)
        C[2] = max(C[2], (diff - lin).norm(norm) / dist**2)
        for T, hn in zip(H_tensors, H_norms):
            if hn == 0.0:
                continue
            dt = model.frechet(tau, T)
            ds = model.frechet(sig, T)
            C[3] = max(C[3], (dt - ds).norm(norm) / (hn * dist))
    return Lemma21Table(*C, n_pairs=len(gamma_pairs), n_excluded=excluded, norm=norm)


def taylor_remainders(model: ForwardModel, gamma, H, ts=(1e-1, 1e-2, 1e-3, 1e-4), norm: str = "hs") -> tuple[np.ndarray, float]:
    """Remainders ``||F(g + tH) - F(g) - t F'(g)[H]||`` and their log-log slope."""
    G = triangle_tensors(gamma, model.mesh)
    T = triangle_tensors(H, model.mesh)
    F0 = model.nd_map(G)
    dF = model.frechet(G, T)
    rem = []
    for t in ts:
        Ft = model.nd_map(G + t * T)
        rem.append(LocNDMap(Ft.matrix - F0.matrix - t * dF.matrix, model.basis).norm(norm))
    rem = np.array(rem)
    slope = float(np.polyfit(np.log(ts), np.log(rem), 1)[0])
    return rem, slope
