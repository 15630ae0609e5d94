"""Domains, cell decompositions, exposed corners and shared-corner tests.

Two families of domains are supported.

* The oblique unit square ``{a e1 + b e2 : 0 <= a, b <= 1}`` with
  ``e1 = (1, 0)`` and ``e2 = (cos theta, sin theta)``, tiled by the stair
  construction of side-``r`` rhombi (:func:`build_parallelogram_decomposition`).
* A union of isosceles trapezoids with unit legs and alternating
  orientation (:func:`build_trapezoid_domain`), tiled either by horizontal
  strips (:func:`build_lateral_decomposition`) or by slicing every
  trapezoid separately (:func:`build_trapezoid_decomposition`).

Lengths measured "laterally" are measured along the slanted legs, so a
lateral length ``l`` corresponds to a vertical extent ``l * sin(theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, Polygon, box
from shapely.ops import unary_union

CELL_KINDS = (
    "rhombus",
    "parallelogram-remainder",
    "top-parallelogram",
    "top-corner-U",
    "lateral",
    "trapezoid",
    "inverted-trapezoid",
    "trapezoid-remainder",
    "extension",
)

DECOMPOSITION_KINDS = ("parallelogram", "lateral", "trapezoid")

# Two breakpoints closer than this (relative to 1) are treated as equal.
DIVISION_TOL = 1e-12


# ---------------------------------------------------------------------------
# Basic types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObliqueFrame:
    """Unit vectors ``e1 = (1, 0)`` and ``e2 = (cos theta, sin theta)``."""

    theta: float

    def __post_init__(self):
        if not (0.0 < self.theta < math.pi):
            raise ValueError(f"theta must lie in (0, pi), got {self.theta!r}")

    @property
    def e1(self) -> np.ndarray:
        return np.array([1.0, 0.0])

    @property
    def e2(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    def to_cartesian(self, a, b) -> np.ndarray:
        """Map oblique coordinates ``(a, b)`` to Cartesian points."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.stack([a + b * math.cos(self.theta), b * math.sin(self.theta)], axis=-1)

    def to_oblique(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        b = pts[..., 1] / math.sin(self.theta)
        a = pts[..., 0] - b * math.cos(self.theta)
        return np.stack([a, b], axis=-1)


def _canonical_ccw(vertices) -> np.ndarray:
    """Counterclockwise order starting at the lexicographically smallest vertex."""
    v = np.asarray(vertices, dtype=float)
    if _signed_area(v) < 0:
        v = v[::-1]
    start = min(range(len(v)), key=lambda i: (v[i, 0], v[i, 1]))
    v = np.roll(v, -start, axis=0)
    v.setflags(write=False)
    return v


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _drop_collinear(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Remove repeated and collinear vertices of a closed polygon."""
    pts = [p for i, p in enumerate(v) if np.linalg.norm(p - v[i - 1]) > tol]
    changed = True
    while changed and len(pts) > 3:
        changed = False
        for i in range(len(pts)):
            a, b, c = pts[i - 1], pts[i], pts[(i + 1) % len(pts)]
            u, w = b - a, c - b
            cross = u[0] * w[1] - u[1] * w[0]
            if abs(cross) <= tol * max(np.linalg.norm(u) * np.linalg.norm(w), 1e-300):
                del pts[i]
                changed = True
                break
    return np.array(pts)


@dataclass(frozen=True, eq=False)
class Cell:
    """A polygonal cell of a decomposition.

    Parameters
    ----------
    id : int
        Index of the cell inside its decomposition.
    vertices : ndarray, shape (n, 2)
        Counterclockwise vertices starting at the lexicographically smallest.
    kind : str
        One of :data:`CELL_KINDS`.
    upright : bool or None
        For trapezoid slices, whether the parent trapezoid is upright.
    grid : tuple of int or None
        Grid index ``(i, j)`` for parallelogram cells, ``(piece, slice)``
        for trapezoid slices and ``(strip, component)`` for lateral cells.
    """

    id: int
    vertices: np.ndarray
    kind: str
    upright: bool | None = None
    grid: tuple | None = None

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        object.__setattr__(self, "vertices", _canonical_ccw(self.vertices))

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def polygon(self) -> Polygon:
        return Polygon(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        c = self.polygon.centroid
        return np.array([c.x, c.y])

    def edges(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = self.vertices
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    def interior_angle(self, k: int) -> float:
        """Interior angle at vertex ``k`` in radians."""
        v = self.vertices
        a, b, c = v[k - 1], v[k], v[(k + 1) % len(v)]
        u, w = a - b, c - b
        ang = math.atan2(u[0] * w[1] - u[1] * w[0], float(np.dot(u, w)))
        # counterclockwise polygon: the interior lies to the left of b -> c,
        # so the interior angle is measured from (c - b) to (a - b)
        ang = -ang
        if ang <= 0:
            ang += 2 * math.pi
        return ang

    def is_convex(self) -> bool:
        return all(self.interior_angle(k) < math.pi + 1e-12 for k in range(len(self.vertices)))

    def to_json(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "vertices": self.vertices.tolist()}
        if self.upright is not None:
            d["upright"] = self.upright
        if self.grid is not None:
            d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Cell":
        grid = tuple(d["grid"]) if d.get("grid") is not None else None
        return cls(int(d["id"]), np.array(d["vertices"], dtype=float), d["kind"], d.get("upright"), grid)


@dataclass(frozen=True, eq=False)
class Decomposition:
    """A tiling of a polygonal domain together with the measurement arc.

    ``sigma`` is an ordered chain of segments; consecutive segments share an
    endpoint. ``sigma_closed`` marks the full-boundary test mode in which the
    chain closes on itself.
    """

    frame: ObliqueFrame
    kind: str
    cells: tuple[Cell, ...]
    sigma: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    shift: float | None = None
    params: dict = field(default_factory=dict)
    sigma_closed: bool = False

    def __post_init__(self):
        if self.kind not in DECOMPOSITION_KINDS:
            raise ValueError(f"unknown decomposition kind {self.kind!r}")
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(
            self, "sigma", tuple((tuple(map(float, p)), tuple(map(float, q))) for p, q in self.sigma)
        )

    # -- derived geometry -------------------------------------------------

    @property
    def domain(self) -> Polygon:
        cached = self.__dict__.get("_domain")
        if cached is None:
            cached = shapely.union_all([c.polygon for c in self.cells], grid_size=1e-12)
            if cached.geom_type != "Polygon":
                raise ValueError("cells do not form a connected domain")
            cached = Polygon(_drop_collinear(np.asarray(cached.exterior.coords)[:-1]))
            cached = shapely.geometry.polygon.orient(cached, 1.0)
            self.__dict__["_domain"] = cached
        return cached

    @property
    def area(self) -> float:
        return float(sum(c.area for c in self.cells))

    @property
    def outline(self) -> np.ndarray:
        """Counterclockwise vertices of the outer boundary of the domain."""
        return np.asarray(self.domain.exterior.coords)[:-1]

    @property
    def sigma_polyline(self) -> np.ndarray:
        """Ordered points of the Σ chain (first point repeated when closed)."""
        pts = [self.sigma[0][0]] + [seg[1] for seg in self.sigma]
        return np.array(pts, dtype=float)

    @property
    def diameter(self) -> float:
        v = self.outline
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)))

    def cell(self, cid: int) -> Cell:
        c = self.cells[cid]
        if c.id != cid:
            raise KeyError(cid)
        return c

    def on_boundary(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ring = self.domain.exterior
        return shapely.distance(shapely.points(pts), ring) <= tol

    def locate(self, pts) -> np.ndarray:
        """Index of the cell containing each point (-1 when outside)."""
        return locate_points(self.cells, pts)

    def with_sigma(self, sigma, closed: bool = False) -> "Decomposition":
        return Decomposition(self.frame, self.kind, self.cells, sigma, self.shift, dict(self.params), closed)

    def full_boundary(self) -> "Decomposition":
        """Same tiling with Σ replaced by the whole boundary (test mode)."""
        v = self.outline
        segs = [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]
        return self.with_sigma(segs, closed=True)

    def transformed(self, A, b=(0.0, 0.0)) -> "Decomposition":
        """Image under ``x -> A x + b`` (A with positive determinant)."""
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if np.linalg.det(A) <= 0:
            raise ValueError("affine map must preserve orientation")
        cells = [Cell(c.id, c.vertices @ A.T + b, c.kind, c.upright, c.grid) for c in self.cells]
        sigma = [(A @ np.asarray(p) + b, A @ np.asarray(q) + b) for p, q in self.sigma]
        return Decomposition(self.frame, self.kind, cells, sigma, self.shift, dict(self.params), self.sigma_closed)

    # -- serialization ----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "frame": {"theta": self.frame.theta},
            "kind": self.kind,
            "params": dict(sorted(self.params.items())),
            "cells": [c.to_json() for c in self.cells],
            "sigma": [[list(p), list(q)] for p, q in self.sigma],
            "sigma_closed": self.sigma_closed,
            "shift": self.shift,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Decomposition":
        return cls(
            ObliqueFrame(float(d["frame"]["theta"])),
            d["kind"],
            [Cell.from_json(c) for c in d["cells"]],
            [(tuple(p), tuple(q)) for p, q in d["sigma"]],
            d.get("shift"),
            dict(d.get("params", {})),
            bool(d.get("sigma_closed", False)),
        )


def locate_points(cells: Sequence[Cell], pts) -> np.ndarray:
    """Index (position in ``cells``) of the cell containing each point, -1 if none."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.full(len(pts), -1, dtype=np.int64)
    for k, c in enumerate(cells):
        lo = c.vertices.min(axis=0) - 1e-12
        hi = c.vertices.max(axis=0) + 1e-12
        cand = np.flatnonzero(np.all((pts >= lo) & (pts <= hi), axis=1) & (out < 0))
        if cand.size == 0:
            continue
        inside = shapely.contains_xy(c.polygon, pts[cand, 0], pts[cand, 1])
        out[cand[inside]] = k
    return out


def breakpoints(step: float, length: float = 1.0) -> np.ndarray:
    """``0, step, 2 step, ...`` up to ``length``, closing with a remainder when needed.

    When ``step`` divides ``length`` within :data:`DIVISION_TOL` no remainder
    interval is produced.
    """
    n = int(math.floor(length / step + DIVISION_TOL))
    pts = [k * step for k in range(n + 1)]
    if abs(length - n * step) <= DIVISION_TOL * max(1.0, length):
        pts[-1] = length
    else:
        pts.append(length)
    return np.array(pts)


# ---------------------------------------------------------------------------
# Parallelogram decomposition
# ---------------------------------------------------------------------------


def _check_r(r: float, name: str = "r"):
    if not (0.0 < r <= 1.0):
        raise ValueError(f"{name} must lie in (0, 1], got {r!r}")


def parallelogram_kind(i: int, j: int, n_full: int, has_remainder: bool) -> str:
    top = has_remainder and j == n_full
    right = has_remainder and i == n_full
    if top and right:
        return "top-corner-U"
    if top:
        return "top-parallelogram"
    if right:
        return "parallelogram-remainder"
    return "rhombus"


def parallelogram_cell(r: float, theta: float, i: int, j: int, cid: int = 0) -> Cell:
    """Cell ``(i, j)`` of the stair construction without building the whole tiling."""
    brk = breakpoints(r)
    if not (0 <= i < len(brk) - 1 and 0 <= j < len(brk) - 1):
        raise IndexError((i, j))
    frame = ObliqueFrame(theta)
    a0, a1, b0, b1 = brk[i], brk[i + 1], brk[j], brk[j + 1]
    verts = frame.to_cartesian([a0, a1, a1, a0], [b0, b0, b1, b1])
    n_full = int(math.floor(1.0 / r + DIVISION_TOL))
    has_rem = n_full < len(brk) - 1
    return Cell(cid, verts, parallelogram_kind(i, j, n_full, has_rem), grid=(i, j))


def parallelogram_grid_size(r: float) -> int:
    return len(breakpoints(r)) - 1


def parallelogram_cell_at(r: float, theta: float, point) -> tuple[int, int]:
    """Grid index of the parallelogram cell containing a Cartesian point."""
    a, b = ObliqueFrame(theta).to_oblique(point)
    brk = breakpoints(r)
    i = int(np.clip(np.searchsorted(brk, a, side="right") - 1, 0, len(brk) - 2))
    j = int(np.clip(np.searchsorted(brk, b, side="right") - 1, 0, len(brk) - 2))
    return i, j


def oblique_square_sigma(frame: ObliqueFrame, lo: float = 0.0, hi: float = 1.0):
    """Σ = left edge followed by bottom edge of the oblique square ``[lo, hi]^2``."""
    p_top = frame.to_cartesian(lo, hi)
    p0 = frame.to_cartesian(lo, lo)
    p_right = frame.to_cartesian(hi, lo)
    return [(p_top, p0), (p0, p_right)]


def build_parallelogram_decomposition(r: float, theta: float) -> Decomposition:
    """Stair tiling of the oblique unit square by side-``r`` rhombi.

    Every stair is a horizontal row of rhombi closed by a remainder
    parallelogram of width ``1 - n r``; the top row consists of ``r`` by
    remainder parallelograms and the remainder corner cell ``U``.

    Examples
    --------
    >>> len(build_parallelogram_decomposition(0.4, math.pi / 2).cells)
    9
    """
    _check_r(r)
    frame = ObliqueFrame(theta)
    brk = breakpoints(r)
    m = len(brk) - 1
    n_full = int(math.floor(1.0 / r + DIVISION_TOL))
    has_rem = n_full < m
    cells = []
    for j in range(m):
        for i in range(m):
            a0, a1, b0, b1 = brk[i], brk[i + 1], brk[j], brk[j + 1]
            verts = frame.to_cartesian([a0, a1, a1, a0], [b0, b0, b1, b1])
            cells.append(Cell(len(cells), verts, parallelogram_kind(i, j, n_full, has_rem), grid=(i, j)))
    return Decomposition(frame, "parallelogram", cells, oblique_square_sigma(frame), None, {"r": r})


# ---------------------------------------------------------------------------
# Trapezoid domains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrapezoidDomain:
    """Union of ``n_pairs`` upright and inverted isosceles trapezoids.

    Every trapezoid has unit legs and lower angle ``theta`` (``pi - theta``
    for the inverted ones); its shorter base has unit length. Pair ``i``
    consists of an upright trapezoid followed by an inverted one glued along
    the common leg and slid upward along it by the lateral length ``q``. The
    next pair is glued to the right leg of the inverted trapezoid, so the
    domain climbs by ``q`` per pair.
    """

    n_pairs: int
    theta: float
    q: float
    pieces: tuple  # ((4, 2) array BL, BR, TR, TL ; upright flag ; lateral offset)
    polygon: Polygon
    sigma: tuple

    @property
    def frame(self) -> ObliqueFrame:
        return ObliqueFrame(self.theta)

    @property
    def lateral_height(self) -> float:
        return max(off for _, _, off in self.pieces) + 1.0

    @property
    def area(self) -> float:
        return float(self.polygon.area)

    @property
    def outline(self) -> np.ndarray:
        return np.asarray(self.polygon.exterior.coords)[:-1]


def trapezoid_area(theta: float) -> float:
    c, s = math.cos(theta), math.sin(theta)
    bottom = 1.0 + 2.0 * max(c, 0.0)
    top = bottom - 2.0 * c
    return 0.5 * (bottom + top) * s


def build_trapezoid_domain(n_pairs: int, theta: float, q: float) -> TrapezoidDomain:
    """Glue ``n_pairs`` upright/inverted trapezoid pairs into a domain.

    Σ is the boundary chain running from the top of the leftmost leg down
    around the bottom to the top of the rightmost leg.
    """
    if int(n_pairs) != n_pairs or n_pairs < 1:
        raise ValueError(f"n_pairs must be a positive integer, got {n_pairs!r}")
    if not (0.0 < theta < math.pi):
        raise ValueError(f"theta must lie in (0, pi), got {theta!r}")
    if abs(theta - math.pi / 2) < 1e-12:
        raise ValueError("theta = pi/2 gives rectangles with no slant; the trapezoid condition fails")
    if not (0.0 < q < 1.0):
        raise ValueError(f"q must lie in (0, 1), got {q!r}")
    c, s = math.cos(theta), math.sin(theta)
    bottom = 1.0 + 2.0 * max(c, 0.0)
    top = bottom - 2.0 * c
    climb = np.array([-c, s])  # unit vector along the leg shared inside a pair
    pieces = []
    for i in range(int(n_pairs)):
        x0 = i * (bottom + top)
        up = np.array([[x0, 0.0], [x0 + bottom, 0.0], [x0 + bottom - c, s], [x0 + c, s]]) + i * q * climb
        x1 = x0 + bottom
        inv = np.array([[x1, 0.0], [x1 + top, 0.0], [x1 + top + c, s], [x1 - c, s]]) + (i + 1) * q * climb
        pieces.append((up, True, i * q))
        pieces.append((inv, False, (i + 1) * q))
    poly = shapely.union_all([Polygon(p) for p, _, _ in pieces], grid_size=1e-12)
    if poly.geom_type != "Polygon" or not poly.is_valid:
        raise ValueError("trapezoid pieces do not form a simple domain")
    ring = _drop_collinear(np.asarray(poly.exterior.coords)[:-1])
    poly = shapely.geometry.polygon.orient(Polygon(ring), 1.0)
    sigma = _trapezoid_sigma(poly, pieces[0][0][3], pieces[-1][0][2])
    return TrapezoidDomain(int(n_pairs), float(theta), float(q), tuple(pieces), poly, tuple(sigma))


def _ring_index(ring: np.ndarray, p, tol=1e-9) -> int:
    d = np.linalg.norm(ring - np.asarray(p), axis=1)
    k = int(np.argmin(d))
    if d[k] > tol:
        raise ValueError("point is not a vertex of the boundary")
    return k


def _trapezoid_sigma(poly: Polygon, start, end):
    ring = np.asarray(poly.exterior.coords)[:-1]
    i0 = _ring_index(ring, start)
    i1 = _ring_index(ring, end)
    segs = []
    k = i0
    while k != i1:
        nxt = (k + 1) % len(ring)
        segs.append((ring[k], ring[nxt]))
        k = nxt
    return segs


def _slice_piece(piece: np.ndarray, lam0: float, lam1: float) -> np.ndarray:
    bl, br, tr, tl = piece
    left = lambda t: bl + t * (tl - bl)  # noqa: E731
    right = lambda t: br + t * (tr - br)  # noqa: E731
    return np.array([left(lam0), right(lam0), right(lam1), left(lam1)])


def build_trapezoid_decomposition(domain: TrapezoidDomain, r: float) -> Decomposition:
    """Slice every trapezoid from its own bottom into pieces of lateral side ``r``."""
    _check_r(r)
    brk = breakpoints(r)
    full = int(math.floor(1.0 / r + DIVISION_TOL))
    cells = []
    for p_idx, (piece, upright, _) in enumerate(domain.pieces):
        for k in range(len(brk) - 1):
            if k >= full:
                kind = "trapezoid-remainder"
            else:
                kind = "trapezoid" if upright else "inverted-trapezoid"
            verts = _slice_piece(piece, brk[k], brk[k + 1])
            cells.append(Cell(len(cells), verts, kind, upright=upright, grid=(p_idx, k)))
    return Decomposition(
        domain.frame, "trapezoid", cells, domain.sigma, domain.q, {"r": r, "n_pairs": domain.n_pairs}
    )


def build_lateral_decomposition(domain: TrapezoidDomain, r0: float) -> Decomposition:
    """Cut the domain into horizontal strips of lateral side ``r0``.

    A strip that meets the domain in several components contributes one
    cell per component. Strip cells are in general not quadrilaterals.
    """
    height = domain.lateral_height
    if not (0.0 < r0 <= height * (1 + DIVISION_TOL)):
        raise ValueError(f"r0 must lie in (0, {height}], got {r0!r}")
    s = math.sin(domain.theta)
    brk = breakpoints(min(r0, height), height)
    x0, _, x1, _ = domain.polygon.bounds
    cells = []
    for k in range(len(brk) - 1):
        strip = box(x0 - 1.0, brk[k] * s, x1 + 1.0, brk[k + 1] * s)
        part = domain.polygon.intersection(strip)
        comps = [g for g in getattr(part, "geoms", [part]) if g.geom_type == "Polygon" and g.area > 0]
        comps.sort(key=lambda g: (g.bounds[0], g.bounds[1]))
        for m, g in enumerate(comps):
            verts = _drop_collinear(np.asarray(g.exterior.coords)[:-1])
            cells.append(Cell(len(cells), verts, "lateral", grid=(k, m)))
    return Decomposition(
        domain.frame, "lateral", cells, domain.sigma, domain.q, {"r0": r0, "n_pairs": domain.n_pairs}
    )


# ---------------------------------------------------------------------------
# Exposed corners
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExposedCorner:
    point: tuple[float, float]
    cell_id: int
    corner_angle: float
    corner_role: str


def _corner_role(cell: Cell, k: int, tol: float) -> str:
    v = cell.vertices
    y = v[:, 1]
    low = y[k] <= y.min() + tol
    others = v[np.abs(y - y[k]) <= tol]
    left = v[k, 0] <= others[:, 0].min() + tol
    return ("lower-" if low else "upper-") + ("left" if left else "right")


def find_exposed_corners(
    decomposition: Decomposition | Sequence[Cell], support_cell_ids: Iterable[int], tol: float = 1e-9,
    boundary: Polygon | None = None,
) -> list[ExposedCorner]:
    """Vertices of the support that belong to exactly one support cell and lie off the boundary.

    A vertex of one support cell that lies on an edge of another support
    cell is not exposed. An empty result means the support touches the
    boundary everywhere it has corners, and the domain has to be extended.
    """
    ids = sorted(set(support_cell_ids))
    if not ids:
        raise ValueError("support set is empty")
    if isinstance(decomposition, Decomposition):
        by_id = {c.id: c for c in decomposition.cells}
        ring = decomposition.domain.exterior
    else:
        by_id = {c.id: c for c in decomposition}
        if boundary is None:
            raise ValueError("boundary polygon required when passing bare cells")
        ring = boundary.exterior
    support = [by_id[i] for i in ids]
    bounds = [shapely.boundary(c.polygon) for c in support]
    out = []
    for cell in support:
        for k, p in enumerate(cell.vertices):
            if shapely.distance(shapely.Point(p), ring) <= tol:
                continue
            touching = sum(
                1 for other, bd in zip(support, bounds) if other is not cell and shapely.distance(shapely.Point(p), bd) <= tol
            )
            if touching:
                continue
            out.append(ExposedCorner((float(p[0]), float(p[1])), cell.id, cell.interior_angle(k), _corner_role(cell, k, tol)))
    return out


# ---------------------------------------------------------------------------
# Shared corners and the rationality heuristic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RationalityCheck:
    ratio: float
    numerator: int
    denominator: int
    flagged: bool


def rationality_check(x: float, max_denominator: int = 64, tol: float = 1e-9) -> RationalityCheck:
    """Continued-fraction test: is ``x`` within ``tol`` of ``p/q`` with ``q <= max_denominator``."""
    frac = Fraction(x).limit_denominator(max_denominator)
    flagged = abs(x - frac.numerator / frac.denominator) <= tol
    return RationalityCheck(float(x), frac.numerator, frac.denominator, bool(flagged))


@dataclass(frozen=True)
class SharedCornerReport:
    shared: tuple  # ((x, y), perturbation cell id)
    ratio_check: RationalityCheck | None
    shift_check: RationalityCheck | None

    @property
    def any_shared(self) -> bool:
        return len(self.shared) > 0

    @property
    def flagged(self) -> bool:
        checks = [c for c in (self.ratio_check, self.shift_check) if c is not None]
        return self.any_shared or any(c.flagged for c in checks)


def _scale_param(d: Decomposition) -> float | None:
    return d.params.get("r", d.params.get("r0"))


def shared_corner_test(bg: Decomposition, pert: Decomposition | Sequence[Cell], tol: float = 1e-9) -> SharedCornerReport:
    """Perturbation-cell corners lying on background cell edges or corners.

    Corners on the domain boundary are ignored. The report also carries the
    rationality heuristic for ``r / r0`` (and ``q / r0`` for trapezoid
    domains).
    """
    pert_cells = pert.cells if isinstance(pert, Decomposition) else tuple(pert)
    if isinstance(pert, Decomposition) and abs(pert.frame.theta - bg.frame.theta) > 1e-12:
        raise ValueError("decompositions use different frames")
    ring = bg.domain.exterior
    lines = unary_union([LineString(np.vstack([c.vertices, c.vertices[:1]])) for c in bg.cells])
    pts, owners = [], []
    for c in pert_cells:
        for p in c.vertices:
            pts.append(p)
            owners.append(c.id)
    pts = np.array(pts)
    geoms = shapely.points(pts)
    near_bg = shapely.distance(geoms, lines) <= tol
    off_boundary = shapely.distance(geoms, ring) > tol
    hit = np.flatnonzero(near_bg & off_boundary)
    seen = {}
    for k in hit:
        key = (round(pts[k, 0] / tol), round(pts[k, 1] / tol))
        seen.setdefault(key, ((float(pts[k, 0]), float(pts[k, 1])), owners[k]))
    r0 = _scale_param(bg)
    r = pert.params.get("r") if isinstance(pert, Decomposition) else None
    ratio = rationality_check(r / r0) if (r is not None and r0) else None
    shift = rationality_check(bg.shift / r0) if (bg.shift is not None and r0) else None
    return SharedCornerReport(tuple(seen.values()), ratio, shift)


# ---------------------------------------------------------------------------
# Domain extension
# ---------------------------------------------------------------------------


def extend_domain(decomposition: Decomposition, layers: int, width: float | None = None) -> Decomposition:
    """Enlarge the domain by ``layers`` rings of extension cells.

    Parallelogram tilings grow by rings of oblique cells of side ``width``
    (default: the tiling's ``r``). Other tilings are embedded in a box with
    margin ``layers * width`` (default width: a quarter of the domain
    height), whose complement is split into extension cells. Σ moves to the
    outer boundary, so the original cells no longer touch it.
    """
    if layers < 0:
        raise ValueError("layers must be nonnegative")
    if layers == 0:
        return decomposition
    d = decomposition
    cells = list(d.cells)
    if d.kind == "parallelogram":
        w = float(width if width is not None else d.params["r"])
        frame = d.frame
        lo, hi = -layers * w, 1.0 + layers * w
        brk = np.concatenate([lo + w * np.arange(layers), breakpoints(d.params["r"]), 1.0 + w * np.arange(1, layers + 1)])
        m = len(brk) - 1
        for j in range(m):
            for i in range(m):
                if layers <= i < m - layers and layers <= j < m - layers:
                    continue
                verts = frame.to_cartesian([brk[i], brk[i + 1], brk[i + 1], brk[i]], [brk[j], brk[j], brk[j + 1], brk[j + 1]])
                cells.append(Cell(len(cells), verts, "extension", grid=(i - layers, j - layers)))
        sigma = oblique_square_sigma(frame, lo, hi)
    else:
        x0, y0, x1, y1 = d.domain.bounds
        w = float(width if width is not None else 0.25 * (y1 - y0))
        m = layers * w
        outer = box(x0 - m, y0 - m, x1 + m, y1 + m)
        rest = outer.difference(d.domain)
        bands = [box(x0 - 2 * m, y0 - 2 * m, x1 + 2 * m, y0), box(x0 - 2 * m, y0, x1 + 2 * m, y1),
                 box(x0 - 2 * m, y1, x1 + 2 * m, y1 + 2 * m)]
        pieces = []
        for band in bands:
            part = rest.intersection(band)
            pieces.extend(g for g in getattr(part, "geoms", [part]) if g.geom_type == "Polygon" and g.area > 1e-14)
        pieces.sort(key=lambda g: (round(g.bounds[1], 12), round(g.bounds[0], 12)))
        for g in pieces:
            cells.append(Cell(len(cells), _drop_collinear(np.asarray(g.exterior.coords)[:-1]), "extension"))
        X0, Y0, X1, Y1 = outer.bounds
        sigma = [((X0, Y1), (X0, Y0)), ((X0, Y0), (X1, Y0)), ((X1, Y0), (X1, Y1))]
    params = dict(d.params, extension_layers=layers, extension_width=w)
    return Decomposition(d.frame, d.kind, cells, sigma, d.shift, params)


def check_partition(decomposition: Decomposition, tol: float = 1e-10) -> None:
    """Raise when cells overlap or fail to cover the domain."""
    d = decomposition
    polys = [c.polygon for c in d.cells]
    total = sum(p.area for p in polys)
    union = shapely.union_all(polys, grid_size=1e-12)
    if abs(union.area - total) > tol * max(total, 1.0):
        raise ValueError("cells overlap")
    if union.geom_type != "Polygon" or len(union.interiors):
        raise ValueError("cells do not tile a simply connected domain")


def segments_geometry(segments) -> MultiLineString:
    return MultiLineString([[tuple(p), tuple(q)] for p, q in segments])
