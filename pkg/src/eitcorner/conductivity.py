"""Piecewise constant anisotropic conductivities and perturbations.

A conductivity is a symmetric 2x2 tensor per cell of a decomposition. In the
parallelogram setting perturbations are parametrized per cell by two
eigenvalues and a fixed rotation angle,
``H|_C = R(phi)^T diag(h1, h2) R(phi)`` with
``R(phi) = [[cos phi, -sin phi], [sin phi, cos phi]]``; in the trapezoid
setting every cell carries an arbitrary symmetric tensor.

The pointwise matrix norm is the spectral norm, so ``||H||_inf`` is the
largest spectral norm over cells.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import shapely

from .geometry import Cell, Decomposition

DEFAULT_DELTA0 = 1e-3


def rotation(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def normalize_angle(phi: float) -> float:
    """Representative of ``phi`` in ``(0, 2 pi]``."""
    two_pi = 2.0 * math.pi
    r = math.fmod(phi, two_pi)
    if r <= 0.0:
        r += two_pi
    return r


@dataclass(frozen=True)
class AnisoTensor:
    """Symmetric 2x2 tensor ``[[m11, m12], [m12, m22]]``."""

    m11: float
    m12: float
    m22: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m12, self.m22]], dtype=float)

    @classmethod
    def from_matrix(cls, m) -> "AnisoTensor":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    @classmethod
    def rotated(cls, h1: float, h2: float, phi: float) -> "AnisoTensor":
        R = rotation(phi)
        return cls.from_matrix(R.T @ np.diag([h1, h2]) @ R)

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def spectral_norm(self) -> float:
        return float(np.abs(self.eigvalsh()).max())

    def to_json(self) -> dict:
        return {"m11": self.m11, "m12": self.m12, "m22": self.m22}


def as_matrix(t) -> np.ndarray:
    if isinstance(t, AnisoTensor):
        return t.matrix
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return float(t) * np.eye(2)
    return t


def spectral_norms(tensors: np.ndarray) -> np.ndarray:
    """Spectral norm of every symmetric 2x2 tensor in a stack."""
    t = np.asarray(tensors, dtype=float)
    a, b, d = t[..., 0, 0], 0.5 * (t[..., 0, 1] + t[..., 1, 0]), t[..., 1, 1]
    mean = 0.5 * (a + d)
    rad = np.hypot(0.5 * (a - d), b)
    return np.abs(mean) + rad


@dataclass(frozen=True)
class PerturbationCell:
    """Eigenvalues ``h1, h2`` and rotation angle ``phi`` of one cell."""

    h1: float
    h2: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "phi", normalize_angle(self.phi))

    @property
    def matrix(self) -> np.ndarray:
        R = rotation(self.phi)
        return R.T @ np.diag([self.h1, self.h2]) @ R

    def to_json(self) -> dict:
        return {"h1": self.h1, "h2": self.h2, "phi": self.phi}


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------


def decomposition_id(d: Decomposition) -> str:
    blob = json.dumps(d.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PiecewiseField:
    """Constant symmetric tensor on each of a set of cells, zero elsewhere.

    ``cells`` defaults to all cells of ``decomposition``; a subset (or cells
    generated without building the whole tiling) may be given instead.
    """

    decomposition: Decomposition | None
    tensors: np.ndarray
    cells: tuple = ()

    def __post_init__(self):
        cells = tuple(self.cells) if self.cells else tuple(self.decomposition.cells)
        t = np.array(self.tensors, dtype=float)
        if t.shape != (len(cells), 2, 2):
            raise ValueError(f"expected tensors of shape ({len(cells)}, 2, 2), got {t.shape}")
        t = 0.5 * (t + t.transpose(0, 2, 1))
        t.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "tensors", t)

    @property
    def covers_decomposition(self) -> bool:
        return self.decomposition is not None and self.cells == tuple(self.decomposition.cells)

    def tensor(self, cell_id: int) -> np.ndarray:
        for c, t in zip(self.cells, self.tensors):
            if c.id == cell_id:
                return t
        raise KeyError(cell_id)

    def sup_norm(self) -> float:
        return float(spectral_norms(self.tensors).max()) if len(self.cells) else 0.0

    def on_triangles(self, mesh) -> np.ndarray:
        """Tensor on every triangle of ``mesh`` (zero outside the cells)."""
        key = self.decomposition if self.covers_decomposition else self.cells
        idx = mesh.cell_index(key)
        out = np.zeros((mesh.n_triangles, 2, 2))
        ok = idx >= 0
        out[ok] = self.tensors[idx[ok]]
        return out


@dataclass(frozen=True, eq=False)
class ConductivityField(PiecewiseField):
    """Conductivity with a positivity floor ``delta0``."""

    delta0: float = DEFAULT_DELTA0

    @classmethod
    def constant(cls, decomposition: Decomposition, tensor, delta0: float = DEFAULT_DELTA0) -> "ConductivityField":
        m = as_matrix(tensor)
        return cls(decomposition, np.repeat(m[None], len(decomposition.cells), axis=0), delta0=delta0)

    def on_triangles(self, mesh) -> np.ndarray:
        key = self.decomposition if self.covers_decomposition else self.cells
        idx = mesh.cell_index(key)
        if (idx < 0).any():
            raise ValueError("conductivity does not cover every triangle of the mesh")
        return self.tensors[idx]

    def plus(self, other: PiecewiseField) -> "ConductivityField":
        """Sum with a field on the same cells."""
        if other.cells != self.cells:
            raise ValueError("fields live on different cells")
        return ConductivityField(self.decomposition, self.tensors + other.tensors, self.cells, self.delta0)

    def to_json(self) -> dict:
        return {
            "decomposition_id": decomposition_id(self.decomposition) if self.decomposition else None,
            "delta0": self.delta0,
            "cells": {str(c.id): AnisoTensor.from_matrix(t).to_json() for c, t in zip(self.cells, self.tensors)},
        }


@dataclass(frozen=True, eq=False)
class Perturbation(PiecewiseField):
    """Perturbation ``H``; ``params`` holds the ``(h1, h2, phi)`` form when available."""

    params: tuple | None = None

    @classmethod
    def from_cells(cls, decomposition: Decomposition | None, cells: Sequence[Cell], params: Sequence[PerturbationCell]) -> "Perturbation":
        tensors = np.array([p.matrix for p in params]).reshape(-1, 2, 2)
        return cls(decomposition, tensors, tuple(cells), tuple(params))

    def to_json(self) -> dict:
        if self.params is not None:
            return {"cells": {str(c.id): p.to_json() for c, p in zip(self.cells, self.params)}}
        return {"cells": {str(c.id): AnisoTensor.from_matrix(t).to_json() for c, t in zip(self.cells, self.tensors)}}


def realize(p: Perturbation) -> np.ndarray:
    """Per-cell symmetric tensors of a perturbation."""
    if p.params is not None:
        return np.array([q.matrix for q in p.params]).reshape(-1, 2, 2)
    return np.array(p.tensors)


def triangle_tensors(gamma, mesh) -> np.ndarray:
    """Per-triangle tensors of a field, a sum of fields, a constant or a raw array."""
    if isinstance(gamma, PiecewiseField):
        return gamma.on_triangles(mesh)
    if isinstance(gamma, (list, tuple)):
        return sum(triangle_tensors(g, mesh) for g in gamma)
    if isinstance(gamma, AnisoTensor):
        return np.repeat(gamma.matrix[None], mesh.n_triangles, axis=0)
    arr = np.asarray(gamma, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.repeat(np.eye(2)[None], mesh.n_triangles, axis=0)
    if arr.shape == (2, 2):
        return np.repeat(arr[None], mesh.n_triangles, axis=0)
    if arr.shape == (mesh.n_triangles, 2, 2):
        return arr
    raise TypeError("cannot interpret conductivity")


# ---------------------------------------------------------------------------
# Checks and metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmissibilityReport:
    passed: bool
    worst_cell: int
    min_eigenvalue: float
    delta0: float


def admissibility_check(gamma: ConductivityField, delta0: float | None = None) -> AdmissibilityReport:
    """Fail iff some cell's smallest eigenvalue is below ``delta0``."""
    d0 = gamma.delta0 if delta0 is None else delta0
    lam = np.linalg.eigvalsh(gamma.tensors)[:, 0]
    k = int(np.argmin(lam))
    return AdmissibilityReport(bool(lam[k] >= d0), gamma.cells[k].id, float(lam[k]), d0)


def sup_distance(a: PiecewiseField, b: PiecewiseField) -> float:
    """Largest spectral norm of the cellwise difference of two fields on the same cells."""
    if len(a.cells) != len(b.cells) or any(
        x is not y and not np.array_equal(x.vertices, y.vertices) for x, y in zip(a.cells, b.cells)
    ):
        raise ValueError("fields live on different decompositions")
    if not len(a.cells):
        return 0.0
    return float(spectral_norms(a.tensors - b.tensors).max())


def sup_distance_on_mesh(a, b, mesh) -> float:
    """Sup distance of two (sums of) fields evaluated on the triangles of a mesh."""
    return float(spectral_norms(triangle_tensors(a, mesh) - triangle_tensors(b, mesh)).max())


def resample_onto(gamma: PiecewiseField, target: Decomposition, average: bool = False, tol: float = 1e-9):
    """Transfer a field to another decomposition of the same domain.

    Returns
    -------
    field : same type as ``gamma``
    averaged : bool
        True when some target cell straddles several source cells and the
        area-weighted mean was used.

    Raises
    ------
    ValueError
        If a target cell is not nested in a source cell and ``average`` is
        False.
    """
    src_polys = [c.polygon for c in gamma.cells]
    out = np.zeros((len(target.cells), 2, 2))
    averaged = False
    for k, cell in enumerate(target.cells):
        poly = cell.polygon
        area = poly.area
        weights = np.array([shapely.intersection(poly, sp_).area for sp_ in src_polys])
        j = int(np.argmax(weights))
        if weights[j] >= (1.0 - tol) * area:
            out[k] = gamma.tensors[j]
            continue
        if not average:
            raise ValueError(f"target cell {cell.id} is not contained in a single source cell")
        averaged = True
        out[k] = np.tensordot(weights / area, gamma.tensors, axes=1)
    if isinstance(gamma, ConductivityField):
        return ConductivityField(target, out, delta0=gamma.delta0), averaged
    return Perturbation(target, out), averaged


def extend_field(gamma: ConductivityField, extended: Decomposition, fill=None) -> ConductivityField:
    """Extend a conductivity to an enlarged decomposition.

    The original cells keep their tensors; extension cells get ``fill`` or,
    by default, the tensor of the original cell with the nearest centroid.
    """
    n = len(gamma.cells)
    tensors = np.zeros((len(extended.cells), 2, 2))
    tensors[:n] = gamma.tensors
    cent = np.array([c.centroid for c in gamma.cells])
    for k, cell in enumerate(extended.cells[n:], start=n):
        if fill is not None:
            tensors[k] = as_matrix(fill)
        else:
            tensors[k] = gamma.tensors[int(np.argmin(np.linalg.norm(cent - cell.centroid, axis=1)))]
    return ConductivityField(extended, tensors, delta0=gamma.delta0)


# ---------------------------------------------------------------------------
# Finite-dimensional perturbation spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbationSpace:
    """Linear span of unit perturbations on selected cells.

    In ``"parallelogram"`` mode every cell contributes two unknowns
    ``(h1, h2)`` for its fixed angle ``phi``; in ``"trapezoid"`` mode it
    contributes the three entries ``(m11, m12, m22)`` of a symmetric tensor.

    Coefficients are weighted by cell area relative to the smallest selected
    cell, so the weighted Euclidean norm dominates the box norm and refining
    the tiling keeps scales comparable.
    """

    cells: tuple
    mode: str
    phis: tuple = ()
    decomposition: Decomposition | None = None

    def __post_init__(self):
        if self.mode not in ("parallelogram", "trapezoid"):
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "cells", tuple(self.cells))
        if self.mode == "parallelogram":
            if len(self.phis) != len(self.cells):
                raise ValueError("one angle per cell is required")
            object.__setattr__(self, "phis", tuple(normalize_angle(p) for p in self.phis))
        if not self.cells:
            raise ValueError("perturbation space has no cells")

    @property
    def per_cell(self) -> int:
        return 2 if self.mode == "parallelogram" else 3

    @property
    def dim(self) -> int:
        return self.per_cell * len(self.cells)

    @property
    def cell_weights(self) -> np.ndarray:
        a = np.array([c.area for c in self.cells])
        return a / a.min()

    @property
    def weights(self) -> np.ndarray:
        return np.repeat(self.cell_weights, self.per_cell)

    def unit_tensors(self) -> np.ndarray:
        """Tensor of each basis direction, shape (dim, 2, 2)."""
        out = []
        if self.mode == "parallelogram":
            for phi in self.phis:
                R = rotation(phi)
                out.append(R.T @ np.diag([1.0, 0.0]) @ R)
                out.append(R.T @ np.diag([0.0, 1.0]) @ R)
        else:
            units = [np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 1.0]])]
            for _ in self.cells:
                out.extend(units)
        return np.array(out)

    def cell_tensors(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} coefficients")
        u = self.unit_tensors()
        return np.einsum("k,kab->kab", x, u).reshape(len(self.cells), self.per_cell, 2, 2).sum(axis=1)

    def field(self, x) -> Perturbation:
        x = np.asarray(x, dtype=float)
        if self.mode == "parallelogram":
            params = tuple(PerturbationCell(x[2 * k], x[2 * k + 1], phi) for k, phi in enumerate(self.phis))
            return Perturbation(self.decomposition, self.cell_tensors(x), self.cells, params)
        return Perturbation(self.decomposition, self.cell_tensors(x), self.cells)

    def basis(self) -> list[Perturbation]:
        """Unit perturbations, one per coefficient."""
        return [self.field(e) for e in np.eye(self.dim)]

    def coefficients(self, H: PiecewiseField) -> np.ndarray:
        """Coordinates of a perturbation living on the same cells."""
        if H.cells != self.cells:
            raise ValueError("perturbation lives on different cells")
        if self.mode == "parallelogram":
            x = []
            for t, phi in zip(H.tensors, self.phis):
                R = rotation(phi)
                d = R @ t @ R.T
                x.extend([d[0, 0], d[1, 1]])
            return np.array(x)
        return np.array([[t[0, 0], t[0, 1], t[1, 1]] for t in H.tensors]).ravel()

    def sup_norm(self, x) -> float:
        return float(spectral_norms(self.cell_tensors(x)).max())
