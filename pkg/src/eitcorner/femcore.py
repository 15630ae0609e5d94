"""Conforming triangulation, P1 assembly and the zero-mean Neumann solver.

The mesher is a small conforming Delaunay refinement on top of
``scipy.spatial.Delaunay``: every cell edge and every requested boundary
point is a constraint, constraint segments are split until they appear in
the Delaunay triangulation and are not encroached, and circumcenters of
poorly shaped or oversized triangles are inserted until the angle and size
bounds hold.

The Neumann problem ``div(gamma grad u) = 0`` with ``gamma grad u . nu = f``
is solved in the space of functions with zero boundary mean, enforced by a
single Lagrange multiplier::

    [ K   c ] [u  ]   [b]
    [ c^T 0 ] [lam] = [0]

where ``c_i`` is the boundary integral of the hat function ``phi_i``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import shapely
from scipy.spatial import Delaunay, cKDTree

from .geometry import Cell, Decomposition, locate_points, segments_geometry

# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Mesh:
    """Triangle mesh of a decomposed domain.

    Attributes
    ----------
    nodes : ndarray, shape (N, 2)
    triangles : ndarray, shape (T, 3)
        Counterclockwise node triples.
    boundary_edges : ndarray, shape (E, 2)
        Boundary edges oriented counterclockwise around the domain.
    sigma_edges : ndarray of bool, shape (E,)
        Whether each boundary edge lies on Σ.
    decompositions : tuple of Decomposition
        Tilings the mesh conforms to; ``cell_ids[k][t]`` is the cell of
        ``decompositions[k]`` containing triangle ``t``.
    sigma : tuple
        Σ chain the mesh was built for and whether it is closed.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    sigma_edges: np.ndarray
    decompositions: tuple = ()
    cell_ids: tuple = ()
    sigma: tuple = ()
    sigma_closed: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def h(self) -> float:
        """Largest element diameter (longest edge)."""
        p = self.nodes[self.triangles]
        e = np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2)
        return float(e.max())

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def areas(self) -> np.ndarray:
        return _geometry(self)[1]

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, in degrees."""
        return float(np.degrees(triangle_angles(self.nodes, self.triangles).min()))

    @property
    def signature(self) -> str:
        """Content hash used to detect identical data and inversion meshes."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        return h.hexdigest()

    def cell_index(self, cells) -> np.ndarray:
        """Position in ``cells`` of the cell containing each triangle (-1 if none).

        ``cells`` may be a decomposition the mesh was built with (cached
        lookup) or any sequence of cells, which is located by centroid.
        """
        for k, d in enumerate(self.decompositions):
            if d is cells:
                return self.cell_ids[k]
        seq = cells.cells if isinstance(cells, Decomposition) else tuple(cells)
        key = ("cells", tuple(id(c) for c in seq))
        if key not in self._cache:
            self._cache[key] = locate_points(seq, self.centroids)
        return self._cache[key]

    @property
    def sigma_nodes(self) -> np.ndarray:
        """Nodes on Σ ordered by arclength along the chain."""
        return self._sigma_param()[0]

    @property
    def sigma_arclength(self) -> np.ndarray:
        return self._sigma_param()[1]

    def _sigma_param(self):
        if "sigma_param" not in self._cache:
            nodes = np.unique(self.boundary_edges[self.sigma_edges])
            s = chain_arclength(self.sigma, self.nodes[nodes])
            if self.sigma_closed:
                s = np.mod(s, chain_length(self.sigma))
                s[np.isclose(s, chain_length(self.sigma), rtol=0, atol=1e-12)] = 0.0
            order = np.argsort(s, kind="stable")
            self._cache["sigma_param"] = (nodes[order], s[order])
        return self._cache["sigma_param"]

    # -- export -------------------------------------------------------------

    def write_triangle_files(self, stem: str) -> None:
        """Write ``stem.node`` and ``stem.ele`` in the ASCII Triangle format.

        Node markers are 1 on the boundary, 2 on Σ and 0 inside; the element
        attribute is the cell id in the first decomposition.
        """
        marker = np.zeros(self.n_nodes, dtype=int)
        marker[self.boundary_edges.ravel()] = 1
        marker[self.boundary_edges[self.sigma_edges].ravel()] = 2
        with open(stem + ".node", "w") as fh:
            fh.write(f"{self.n_nodes} 2 0 1\n")
            for i, (x, y) in enumerate(self.nodes):
                fh.write(f"{i} {x:.17g} {y:.17g} {marker[i]}\n")
        attr = self.cell_ids[0] if self.cell_ids else np.zeros(self.n_triangles, dtype=int)
        with open(stem + ".ele", "w") as fh:
            fh.write(f"{self.n_triangles} 3 1\n")
            for t, (a, b, c) in enumerate(self.triangles):
                fh.write(f"{t} {a} {b} {c} {attr[t]}\n")


def triangle_angles(nodes, triangles) -> np.ndarray:
    p = nodes[triangles]
    out = np.empty(triangles.shape)
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        w = p[:, (k + 2) % 3] - p[:, k]
        cross = np.abs(u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0])
        out[:, k] = np.arctan2(cross, np.einsum("ij,ij->i", u, w))
    return out


def chain_length(sigma) -> float:
    return float(sum(np.linalg.norm(np.subtract(q, p)) for p, q in sigma))


def chain_arclength(sigma, pts, tol: float = 1e-9) -> np.ndarray:
    """Arclength position of points lying on a segment chain."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.full(len(pts), np.nan)
    start = 0.0
    for p, q in sigma:
        p = np.asarray(p)
        q = np.asarray(q)
        d = q - p
        L = float(np.linalg.norm(d))
        t = (pts - p) @ d / (L * L)
        proj = p + np.clip(t, 0.0, 1.0)[:, None] * d
        on = (np.linalg.norm(pts - proj, axis=1) <= tol * max(1.0, L)) & np.isnan(out)
        out[on] = start + np.clip(t[on], 0.0, 1.0) * L
        start += L
    if np.isnan(out).any():
        raise ValueError("point is not on the Σ chain")
    return out


# ---------------------------------------------------------------------------
# Conforming Delaunay refinement
# ---------------------------------------------------------------------------


def _segment_pieces(cells: Sequence[Cell], extra_segments) -> list:
    lines = []
    for c in cells:
        for p, q in c.edges():
            lines.append(shapely.LineString([p, q]))
    for p, q in extra_segments:
        lines.append(shapely.LineString([p, q]))
    noded = shapely.union_all(lines, grid_size=None)
    geoms = getattr(noded, "geoms", [noded])
    segs = []
    for g in geoms:
        c = np.asarray(g.coords)
        for k in range(len(c) - 1):
            segs.append((c[k], c[k + 1]))
    return segs


class _PointSet:
    """Growing point array with snapping of near-duplicates."""

    def __init__(self, tol):
        self.pts = []
        self.tol = tol
        self.keys = {}

    def add(self, p) -> int:
        key = (round(p[0] / self.tol), round(p[1] / self.tol))
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                k = self.keys.get((key[0] + dx, key[1] + dy))
                if k is not None and np.hypot(*(self.pts[k] - p)) <= self.tol:
                    return k
        self.pts.append(np.asarray(p, dtype=float))
        self.keys[key] = len(self.pts) - 1
        return len(self.pts) - 1


def _size_function(target_h, corners, grading_levels, slope=0.5):
    """Element size ``clip(slope * dist_to_corner, target_h / 2^levels, target_h)``."""
    if not grading_levels or len(corners) == 0:
        return lambda x: np.full(len(np.atleast_2d(x)), target_h)
    tree = cKDTree(corners)
    floor = target_h * 0.5**grading_levels

    def hfun(x):
        d, _ = tree.query(np.atleast_2d(x))
        return np.clip(slope * d, floor, target_h)

    return hfun


def _input_angles(points, segs):
    """Smallest angle between constraint segments at each input vertex."""
    inc = {}
    for a, b in segs:
        inc.setdefault(a, []).append(b)
        inc.setdefault(b, []).append(a)
    ang = {}
    for v, nb in inc.items():
        if len(nb) < 2:
            continue
        d = points[nb] - points[v]
        th = np.sort(np.arctan2(d[:, 1], d[:, 0]))
        gaps = np.diff(np.concatenate([th, th[:1] + 2 * np.pi]))
        ang[v] = float(gaps.min())
    return ang


def triangulate(
    decomposition,
    target_h: float,
    *,
    extra_cells: Sequence[Cell] = (),
    points=(),
    grading: int = 0,
    min_angle: float = 20.0,
    max_rounds: int = 200,
    sigma=None,
    sigma_closed: bool | None = None,
) -> Mesh:
    """Conforming quality triangulation of a decomposed domain.

    Parameters
    ----------
    decomposition : Decomposition or sequence of Decomposition
        All cell edges of all decompositions become constraints. The first
        decomposition defines the domain and Σ.
    target_h : float
        Upper bound for the element edge length (up to a factor 1.5).
    extra_cells : sequence of Cell
        Additional cells (e.g. a lazily generated subset of a fine tiling)
        whose edges must be resolved.
    points : array_like, shape (m, 2)
        Points on constraint segments that must become mesh nodes.
    grading : int
        Number of halvings of the element size toward cell corners; the size
        grows linearly with the distance to the nearest corner.
    min_angle : float
        Requested minimum angle in degrees. Triangles at input corners
        sharper than twice this value are left alone, and so are triangles
        whose shortest edge is below ``target_h / 2^(grading + 5)``; the
        latter only occur between nearly coincident constraint lines.
    """
    if not target_h > 0:
        raise ValueError("target_h must be positive")
    decomps = (decomposition,) if isinstance(decomposition, Decomposition) else tuple(decomposition)
    base = decomps[0]
    domain = base.domain
    if sigma is None:
        sigma, sigma_closed = base.sigma, base.sigma_closed
    scale = max(base.diameter, 1e-300)
    snap = 1e-12 * scale
    all_cells = [c for d in decomps for c in d.cells] + list(extra_cells)
    for c in all_cells:
        if min(np.linalg.norm(p - q) for p, q in c.edges()) < 1e-9 * scale:
            raise ValueError(f"cell {c.id} has an edge below the geometric resolution")
    raw = _segment_pieces(all_cells, [])
    ps = _PointSet(snap)
    segs = set()
    for p, q in raw:
        a, b = ps.add(p), ps.add(q)
        if a != b:
            segs.add((min(a, b), max(a, b)))
    required = [ps.add(p) for p in np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, 2)]
    P = np.array(ps.pts)
    segs = _split_at_points(P, segs, 1e-10 * scale)
    on_seg = np.zeros(len(P), dtype=bool)
    on_seg[np.array(sorted(segs)).ravel()] = True
    if required and not on_seg[required].all():
        raise ValueError("required point does not lie on a cell edge")
    input_vertices = set(range(len(P)))
    P = np.array(ps.pts)
    # grade toward cell vertices and measurement points: the trace is read at the latter
    hfun = _size_function(target_h, P if grading else [], grading)
    acute = {v for v, a in _input_angles(P, segs).items() if a < math.radians(2.0 * min_angle + 1.0)}
    floor = 1e-6 * target_h
    # near-coincident constraints would otherwise drive quality refinement down to their gap
    quality_floor = target_h * 0.5 ** (grading + 5)

    # initial subdivision of the constraint segments
    pts = list(P)
    subsegs = []
    for a, b in sorted(segs):
        stack = [(a, b)]
        while stack:
            u, v = stack.pop()
            L = np.linalg.norm(pts[v] - pts[u])
            if L > hfun(0.5 * (pts[u] + pts[v]))[0] * 1.0000001 and L > floor:
                pts.append(0.5 * (pts[u] + pts[v]))
                m = len(pts) - 1
                stack.extend([(m, v), (u, m)])
            else:
                subsegs.append((u, v))
    pts = np.array(pts)
    on_segment = np.zeros(len(pts), dtype=bool)
    on_segment[np.array(subsegs).ravel()] = True

    # interior lattice at spacing target_h, kept away from constraints
    x0, y0, x1, y1 = domain.bounds
    dy = target_h * math.sqrt(3) / 2
    rows = []
    for j, y in enumerate(np.arange(y0 + dy / 2, y1, dy)):
        xs = np.arange(x0 + (0.5 + 0.5 * (j % 2)) * target_h, x1, target_h)
        rows.append(np.column_stack([xs, np.full(len(xs), y)]))
    lat = np.vstack(rows) if rows else np.zeros((0, 2))
    if len(lat):
        lat = lat[shapely.contains_xy(domain, lat[:, 0], lat[:, 1])]
        lines = segments_geometry([(pts[a], pts[b]) for a, b in subsegs])
        dist = shapely.distance(shapely.points(lat), lines)
        lat = lat[dist > 0.6 * np.maximum(hfun(lat), target_h)]
    pts = np.vstack([pts, lat])
    on_segment = np.concatenate([on_segment, np.zeros(len(lat), dtype=bool)])

    pts, subsegs = _refine(pts, subsegs, on_segment, domain, hfun, acute, input_vertices, min_angle, floor, max_rounds,
                           quality_floor)
    return _finish(pts, subsegs, domain, decomps, sigma, bool(sigma_closed), snap)


def _split_at_points(P, segs, tol):
    """Split every segment at the points lying on its interior (T-junctions, overlaps)."""
    out = set()
    for a, b in segs:
        d = P[b] - P[a]
        L2 = float(np.dot(d, d))
        t = (P - P[a]) @ d / L2
        dist = np.abs((P[:, 0] - P[a, 0]) * d[1] - (P[:, 1] - P[a, 1]) * d[0]) / math.sqrt(L2)
        inner = np.flatnonzero((t > 0) & (t < 1) & (dist <= tol))
        inner = inner[(inner != a) & (inner != b)]
        chain = [a] + [int(k) for k in inner[np.argsort(t[inner])]] + [b]
        for u, v in zip(chain[:-1], chain[1:]):
            if u != v:
                out.add((min(u, v), max(u, v)))
    return out


def _edge_keys(simplices, n):
    e = np.concatenate([simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [2, 0]]])
    e.sort(axis=1)
    return e[:, 0].astype(np.int64) * n + e[:, 1]


def _inside(P, simp, domain):
    """Triangles of a Delaunay triangulation inside the domain, without flat hull slivers."""
    p = P[simp]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    longest = np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2).max(axis=1)
    cen = p.mean(axis=1)
    keep = (area > 1e-6 * longest**2) & shapely.contains_xy(domain, cen[:, 0], cen[:, 1])
    return simp[keep]


def _circumcenters(p):
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    ba, ca = b - a, c - a
    d = 2.0 * (ba[:, 0] * ca[:, 1] - ba[:, 1] * ca[:, 0])
    bb = (ba**2).sum(1)
    cc = (ca**2).sum(1)
    ux = (ca[:, 1] * bb - ba[:, 1] * cc) / d
    uy = (ba[:, 0] * cc - ca[:, 0] * bb) / d
    return a + np.column_stack([ux, uy])


def _refine(pts, subsegs, on_segment, domain, hfun, acute, input_vertices, min_angle, floor, max_rounds,
            quality_floor=0.0):
    subsegs = [tuple(s) for s in subsegs]
    min_rad = math.radians(min_angle)
    pts = list(pts)
    on_segment = list(on_segment)

    def split(seg):
        a, b = seg
        pa, pb = pts[a], pts[b]
        L = np.linalg.norm(pb - pa)
        if L <= floor:
            return None
        t = 0.5
        ends = [v for v in (a, b) if v in acute]
        if len(ends) == 1:
            # concentric shells around sharp input corners stop mutual encroachment
            unit = floor * 1e3
            dist = unit * 2.0 ** round(math.log2(0.5 * L / unit))
            frac = min(max(dist / L, 0.25), 0.75)
            t = frac if ends[0] == a else 1.0 - frac
        pts.append(pa + t * (pb - pa))
        on_segment.append(True)
        m = len(pts) - 1
        return (a, m), (m, b)

    for _ in range(max_rounds):
        P = np.array(pts)
        tri = Delaunay(P, qhull_options="Qbb Qc Qz Q12")
        n = len(P)
        keys = set(_edge_keys(tri.simplices, n).tolist())
        S = np.array(subsegs)
        skeys = np.minimum(S[:, 0], S[:, 1]).astype(np.int64) * n + np.maximum(S[:, 0], S[:, 1])
        mids = 0.5 * (P[S[:, 0]] + P[S[:, 1]])
        rad = 0.5 * np.linalg.norm(P[S[:, 1]] - P[S[:, 0]], axis=1)
        tree = cKDTree(P)
        bad_seg = np.array([k not in keys for k in skeys.tolist()])
        hits = tree.query_ball_point(mids, rad * (1 - 1e-9))
        for i, h in enumerate(hits):
            if not bad_seg[i] and any(j != S[i, 0] and j != S[i, 1] for j in h):
                bad_seg[i] = True
        if bad_seg.any():
            changed = False
            new = []
            for i, seg in enumerate(subsegs):
                if bad_seg[i]:
                    parts = split(seg)
                    if parts is not None:
                        new.extend(parts)
                        changed = True
                        continue
                new.append(seg)
            subsegs = new
            if changed:
                continue
        # quality and size of triangles inside the domain
        simp = _inside(P, tri.simplices, domain)
        cen = P[simp].mean(axis=1)
        ang = triangle_angles(P, simp)
        pe = P[simp]
        edges = np.linalg.norm(pe - np.roll(pe, 1, axis=1), axis=2)
        hloc = hfun(cen)
        too_big = edges.max(axis=1) > 1.5 * hloc
        skinny = ang.min(axis=1) < min_rad
        # a small angle sitting at a sharp input corner cannot be removed
        at_min = simp[np.arange(len(simp)), ang.argmin(axis=1)]
        protected = np.isin(at_min, list(acute)) if acute else np.zeros(len(simp), bool)
        tiny = edges.min(axis=1) <= floor * 4
        small = edges.min(axis=1) <= quality_floor
        bad = (too_big | (skinny & ~protected & ~small)) & ~tiny
        if not bad.any():
            break
        order = np.argsort(ang.min(axis=1)[bad] - 10.0 * too_big[bad])
        cc = _circumcenters(pe[bad])[order]
        size = np.maximum(edges.min(axis=1)[bad][order], floor)
        smid_tree = cKDTree(mids)
        rmax = rad.max()
        accepted = []
        acc_tree_pts = []
        to_split = set()
        for k in range(len(cc)):
            c = cc[k]
            enc = [i for i in smid_tree.query_ball_point(c, rmax) if np.linalg.norm(c - mids[i]) < rad[i] * (1 - 1e-9)]
            if enc:
                to_split.update(enc)
                continue
            if not shapely.contains_xy(domain, c[0], c[1]):
                continue
            if acc_tree_pts and np.min(np.linalg.norm(np.array(acc_tree_pts) - c, axis=1)) < 0.5 * size[k]:
                continue
            accepted.append(c)
            acc_tree_pts.append(c)
        if not accepted and not to_split:
            break
        if to_split:
            new = []
            for i, seg in enumerate(subsegs):
                parts = split(seg) if i in to_split else None
                if parts is not None:
                    new.extend(parts)
                else:
                    new.append(seg)
            subsegs = new
        for c in accepted:
            pts.append(c)
            on_segment.append(False)
    return np.array(pts), subsegs


def _finish(P, subsegs, domain, decomps, sigma, sigma_closed, snap) -> Mesh:
    tri = Delaunay(P, qhull_options="Qbb Qc Qz Q12")
    simp = _inside(P, tri.simplices, domain)
    used = np.unique(simp)
    remap = -np.ones(len(P), dtype=np.int64)
    remap[used] = np.arange(len(used))
    nodes = P[used]
    tris = remap[simp]
    p = nodes[tris]
    det = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    tris[det < 0] = tris[det < 0][:, [0, 2, 1]]
    # boundary edges: directed edges whose reverse is absent
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    n = len(nodes)
    fwd = directed[:, 0] * n + directed[:, 1]
    rev = directed[:, 1] * n + directed[:, 0]
    bnd = directed[~np.isin(fwd, rev)]
    sig_geom = segments_geometry(sigma)
    mid = nodes[bnd].mean(axis=1)
    tol = 1e3 * snap
    on_sigma = (
        (shapely.distance(shapely.points(mid), sig_geom) <= tol)
        & (shapely.distance(shapely.points(nodes[bnd[:, 0]]), sig_geom) <= tol)
        & (shapely.distance(shapely.points(nodes[bnd[:, 1]]), sig_geom) <= tol)
    )
    cen = nodes[tris].mean(axis=1)
    ids = tuple(np.array([d.cells[k].id if k >= 0 else -1 for k in locate_points(d.cells, cen)]) for d in decomps)
    return Mesh(nodes, tris, bnd, on_sigma, decomps, ids, tuple(sigma), sigma_closed)


def conformity_violations(mesh: Mesh, cells) -> int:
    """Number of triangles whose vertices are not all in the closure of one cell."""
    idx = mesh.cell_index(cells)
    seq = cells.cells if isinstance(cells, Decomposition) else tuple(cells)
    bad = 0
    for t, k in enumerate(idx):
        if k < 0:
            continue
        d = shapely.distance(shapely.points(mesh.nodes[mesh.triangles[t]]), seq[k].polygon)
        bad += int(d.max() > 1e-10)
    return bad


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _geometry(mesh: Mesh):
    if "geom" not in mesh._cache:
        p = mesh.nodes[mesh.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        area = 0.5 * det
        # gradients of the barycentric coordinates
        g = np.empty((len(p), 3, 2))
        g[:, 1] = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
        g[:, 2] = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
        g[:, 0] = -g[:, 1] - g[:, 2]
        mesh._cache["geom"] = (g, area)
    return mesh._cache["geom"]


def assemble_stiffness(mesh: Mesh, tensors: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix of ``int gamma grad u . grad v`` for per-triangle tensors."""
    g, area = _geometry(mesh)
    tensors = np.asarray(tensors, dtype=float)
    ke = area[:, None, None] * np.einsum("tia,tab,tjb->tij", g, tensors, g)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(n, n))


def boundary_mass(mesh: Mesh, edges: np.ndarray | None = None) -> sp.csr_matrix:
    """P1 mass matrix over the given boundary edges (default: all)."""
    e = mesh.boundary_edges if edges is None else edges
    L = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    loc = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    vals = (L[:, None, None] * loc).ravel()
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def boundary_weights(mesh: Mesh) -> np.ndarray:
    """``c_i = int_{boundary} phi_i ds``."""
    e = mesh.boundary_edges
    L = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    c = np.zeros(mesh.n_nodes)
    np.add.at(c, e[:, 0], 0.5 * L)
    np.add.at(c, e[:, 1], 0.5 * L)
    return c


def export_coo(matrix, path: str) -> None:
    """Write a matrix as ``row col value`` lines (zero-based), header ``nrows ncols nnz``."""
    m = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]} {m.nnz}\n")
        for i, j, v in zip(m.row, m.col, m.data):
            fh.write(f"{i} {j} {v:.17g}\n")


# ---------------------------------------------------------------------------
# Boundary data and solutions
# ---------------------------------------------------------------------------


@dataclass
class NeumannData:
    """Flux density, linear on every boundary edge (possibly discontinuous at nodes).

    ``values[e, k]`` is the flux at endpoint ``k`` of ``mesh.boundary_edges[e]``.
    """

    mesh: Mesh
    values: np.ndarray

    @classmethod
    def from_function(cls, mesh: Mesh, g: Callable, sigma_only: bool = False) -> "NeumannData":
        """Sample ``g(x, normal)`` at edge endpoints, using each edge's outward normal."""
        e = mesh.boundary_edges
        d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
        nu = np.column_stack([d[:, 1], -d[:, 0]]) / np.linalg.norm(d, axis=1)[:, None]
        vals = np.column_stack([g(mesh.nodes[e[:, 0]], nu), g(mesh.nodes[e[:, 1]], nu)])
        if sigma_only:
            vals[~mesh.sigma_edges] = 0.0
        return cls(mesh, vals)

    @classmethod
    def from_nodal(cls, mesh: Mesh, nodal: np.ndarray) -> "NeumannData":
        """Continuous flux given by nodal values (only boundary entries are used)."""
        return cls(mesh, np.asarray(nodal, dtype=float)[mesh.boundary_edges])

    def load(self) -> np.ndarray:
        e = self.mesh.boundary_edges
        L = np.linalg.norm(self.mesh.nodes[e[:, 1]] - self.mesh.nodes[e[:, 0]], axis=1)
        v = self.values
        b = np.zeros(self.mesh.n_nodes)
        np.add.at(b, e[:, 0], L * (2 * v[:, 0] + v[:, 1]) / 6.0)
        np.add.at(b, e[:, 1], L * (v[:, 0] + 2 * v[:, 1]) / 6.0)
        return b

    def total(self) -> float:
        e = self.mesh.boundary_edges
        L = np.linalg.norm(self.mesh.nodes[e[:, 1]] - self.mesh.nodes[e[:, 0]], axis=1)
        return float(np.sum(L * self.values.sum(axis=1)) / 2.0)

    def abs_total(self) -> float:
        e = self.mesh.boundary_edges
        L = np.linalg.norm(self.mesh.nodes[e[:, 1]] - self.mesh.nodes[e[:, 0]], axis=1)
        return float(np.sum(L * np.abs(self.values).sum(axis=1)) / 2.0)


@dataclass
class FemSolution:
    u: np.ndarray
    multiplier: float | np.ndarray
    residual: float


class CompatibilityError(ValueError):
    """Neumann data with nonzero total flux."""


class NeumannSolver:
    """Factorized saddle system for one mesh and one conductivity.

    ``solve`` accepts one load vector or a matrix of columns; the
    factorization is reused, so many right-hand sides are cheap.
    """

    def __init__(self, mesh: Mesh, tensors: np.ndarray):
        tensors = np.asarray(tensors, dtype=float)
        if tensors.shape != (mesh.n_triangles, 2, 2):
            raise ValueError("expected one 2x2 tensor per triangle")
        lam_min = np.linalg.eigvalsh(0.5 * (tensors + tensors.transpose(0, 2, 1)))[:, 0]
        if lam_min.min() <= 0:
            raise ValueError("conductivity is not positive definite on every triangle")
        self.mesh = mesh
        self.K = assemble_stiffness(mesh, tensors)
        self.c = boundary_weights(mesh)
        n = mesh.n_nodes
        c = sp.csr_matrix(self.c[None, :])
        S = sp.bmat([[self.K, c.T], [c, None]], format="csc")
        self._lu = spla.splu(S, permc_spec="MMD_AT_PLUS_A")
        self._n = n

    def solve(self, load: np.ndarray):
        load = np.asarray(load, dtype=float)
        single = load.ndim == 1
        B = load[:, None] if single else load
        rhs = np.vstack([B, np.zeros((1, B.shape[1]))])
        X = self._lu.solve(rhs)
        # one step of iterative refinement keeps the residual at roundoff level
        R = rhs - self._apply(X)
        X = X + self._lu.solve(R)
        U, lam = X[: self._n], X[self._n]
        res = np.linalg.norm(self.K @ U + np.outer(self.c, lam) - B, axis=0)
        if single:
            return U[:, 0], float(lam[0]), float(res[0])
        return U, lam, res

    def _apply(self, X):
        U, lam = X[: self._n], X[self._n]
        top = self.K @ U + np.outer(self.c, lam)
        return np.vstack([top, (self.c @ U)[None, :]])


def _tensors(mesh, gamma):
    from .conductivity import triangle_tensors

    return triangle_tensors(gamma, mesh)


def solve_neumann(mesh: Mesh, gamma, f: NeumannData, tol: float = 1e-10) -> FemSolution:
    """Solve the zero-boundary-mean Neumann problem for flux ``f``.

    Raises
    ------
    CompatibilityError
        If the total flux ``<f, 1>`` is not zero.
    ValueError
        If ``gamma`` is not positive definite.
    """
    total = f.total()
    if abs(total) > tol * max(f.abs_total(), 1.0):
        raise CompatibilityError(f"Neumann data has nonzero total flux {total:.3g}")
    solver = NeumannSolver(mesh, _tensors(mesh, gamma))
    u, lam, res = solver.solve(f.load())
    return FemSolution(u, lam, res)


def solve_adjoint_source(mesh: Mesh, gamma, H, u: FemSolution | np.ndarray, solver: NeumannSolver | None = None) -> FemSolution:
    """Solve ``int gamma grad u' . grad phi = -int H grad u . grad phi`` with zero boundary mean."""
    if solver is None:
        solver = NeumannSolver(mesh, _tensors(mesh, gamma))
    uu = u.u if isinstance(u, FemSolution) else np.asarray(u)
    KH = assemble_stiffness(mesh, _tensors(mesh, H))
    up, lam, res = solver.solve(-(KH @ uu))
    return FemSolution(up, lam, res)


def boundary_trace_on_sigma(sol: FemSolution | np.ndarray, mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Nodal values on Σ in arclength order, i.e. coefficients in the P1 basis of the Σ edges.

    Returns
    -------
    nodes : ndarray of int
    values : ndarray
    """
    u = sol.u if isinstance(sol, FemSolution) else np.asarray(sol)
    nodes = mesh.sigma_nodes
    return nodes, u[nodes]


def boundary_mean(mesh: Mesh, u: np.ndarray) -> float:
    c = boundary_weights(mesh)
    return float(c @ u / c.sum())
