"""
Structured meshes of the unit interval and unit square.

Triangles come from splitting every square of an ``n x n`` grid along its
(+1, +1) diagonal. A :class:`MeshHierarchy` couples a coarse mesh with a
conforming refinement and stores, for every coarse element, the fine cells
and fine vertices it contains in a numbering that is identical for all coarse
elements of the same shape. That layout is what the multiscale basis code
relies on: a function given by its values on the fine vertices of every
coarse element separately (a *broken* fine field) is a flat vector indexed
by ``K * n_local + l``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_GEOM_TOL = 1e-12


class MeshError(ValueError):
    """Raised on invalid mesh parameters."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """A uniform simplicial mesh of ``(0, L)`` or ``(0, L)^2``.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    points : ndarray, shape (n_vertices, dim)
        Vertex coordinates, sorted lexicographically.
    cells : ndarray, shape (n_cells, dim + 1)
        Vertex indices of each interval / triangle (counter-clockwise).
    boundary : ndarray of bool, shape (n_vertices,)
        True for vertices lying on the boundary of the domain.
    n : int
        Number of subdivisions per direction.
    length : float
        Side length of the domain.
    """

    dim: int
    points: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    n: int
    length: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> float:
        """Characteristic mesh size (length of a grid step)."""
        return self.length / self.n

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def interior(self) -> np.ndarray:
        """Indices of the non-boundary vertices (the P1 degrees of freedom)."""
        if "interior" not in self._cache:
            self._cache["interior"] = np.flatnonzero(~self.boundary)
        return self._cache["interior"]

    def measures(self) -> np.ndarray:
        if "measures" not in self._cache:
            p = self.points[self.cells]
            if self.dim == 1:
                m = p[:, 1, 0] - p[:, 0, 0]
            else:
                e1 = p[:, 1] - p[:, 0]
                e2 = p[:, 2] - p[:, 0]
                m = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
            self._cache["measures"] = m
        return self._cache["measures"]

    def barycenters(self) -> np.ndarray:
        if "barycenters" not in self._cache:
            self._cache["barycenters"] = self.points[self.cells].mean(axis=1)
        return self._cache["barycenters"]

    def gradients(self) -> np.ndarray:
        """Gradients of the P1 hat functions, shape (n_cells, dim + 1, dim)."""
        if "gradients" not in self._cache:
            self._cache["gradients"] = simplex_gradients(self.points[self.cells])
        return self._cache["gradients"]

    def to_text(self) -> str:
        """Plain-text listing: a header, one vertex per line, one cell per line."""
        lines = [f"dim {self.dim} vertices {self.n_vertices} cells {self.n_cells}"]
        for p, on_b in zip(self.points, self.boundary):
            coords = " ".join(f"{c:.17g}" for c in p)
            lines.append(f"v {coords} {int(on_b)}")
        for c in self.cells:
            lines.append("c " + " ".join(str(int(i)) for i in c))
        return "\n".join(lines) + "\n"


def simplex_gradients(p: np.ndarray) -> np.ndarray:
    """P1 basis gradients on a stack of simplices ``p`` of shape (m, d+1, d)."""
    d = p.shape[-1]
    if d == 1:
        h = p[:, 1, 0] - p[:, 0, 0]
        g = np.empty((p.shape[0], 2, 1))
        g[:, 0, 0] = -1.0 / h
        g[:, 1, 0] = 1.0 / h
        return g
    jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns e1, e2
    inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return np.einsum("kd,mjd->mkj", ref, inv_t)


def build_structured(dim: int, length: float = 1.0, n: int = 1) -> Mesh:
    """Uniform mesh of ``(0, length)^dim`` with ``n`` subdivisions per axis."""
    if dim not in (1, 2):
        raise MeshError(f"dimension must be 1 or 2, got {dim}")
    if int(n) != n or n < 1:
        raise MeshError(f"subdivision count must be a positive integer, got {n}")
    n = int(n)
    x = np.linspace(0.0, length, n + 1)
    if dim == 1:
        points = x[:, None]
        cells = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
        boundary = np.zeros(n + 1, dtype=bool)
        boundary[[0, n]] = True
        return Mesh(1, points, cells, boundary, n, float(length))

    # vertex (i, j) at (x_i, x_j) has index i * (n + 1) + j
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    points = np.column_stack([x[ii.ravel()], x[jj.ravel()]])
    si, sj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    si, sj = si.ravel(), sj.ravel()
    v00 = si * (n + 1) + sj
    v10 = (si + 1) * (n + 1) + sj
    v11 = v10 + 1
    v01 = v00 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper
    boundary = (ii.ravel() == 0) | (ii.ravel() == n) | (jj.ravel() == 0) | (jj.ravel() == n)
    return Mesh(2, points, cells, boundary, n, float(length))


def grid_nested_dissection(ni: int, nj: int, leaf: int = 8) -> np.ndarray:
    """Nested-dissection ordering of an ``ni x nj`` grid of unknowns stored as ``i * nj + j``.

    Grid lines separate the two halves because the triangulation only
    connects vertices whose indices differ by at most one in each direction.
    The returned array lists unknowns in elimination order.
    """
    out = []

    def rec(i0, i1, j0, j1):
        if i1 <= i0 or j1 <= j0:
            return
        if (i1 - i0) * (j1 - j0) <= leaf * leaf:
            ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
            out.append((ii * nj + jj).ravel())
        elif i1 - i0 >= j1 - j0:
            m = (i0 + i1) // 2
            rec(i0, m, j0, j1)
            rec(m + 1, i1, j0, j1)
            out.append(m * nj + np.arange(j0, j1))
        else:
            m = (j0 + j1) // 2
            rec(i0, i1, j0, m)
            rec(i0, i1, m + 1, j1)
            out.append(np.arange(i0, i1) * nj + m)

    rec(0, ni, 0, nj)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def interior_ordering(mesh: Mesh) -> np.ndarray | None:
    """Fill-reducing ordering of the interior vertices of a structured 2D mesh (None in 1D)."""
    if mesh.dim != 2:
        return None
    return grid_nested_dissection(mesh.n - 1, mesh.n - 1)


def locate_cells(mesh: Mesh, x: np.ndarray) -> np.ndarray:
    """Index of the cell of a structured mesh containing each point of ``x`` (interior points)."""
    x = np.atleast_2d(x)
    h = mesh.size
    i = np.clip(np.floor(x[:, 0] / h).astype(np.int64), 0, mesh.n - 1)
    if mesh.dim == 1:
        return i
    j = np.clip(np.floor(x[:, 1] / h).astype(np.int64), 0, mesh.n - 1)
    dx = x[:, 0] - i * h
    dy = x[:, 1] - j * h
    upper = dy > dx
    return 2 * (i * mesh.n + j) + upper


def barycentric(simplex: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points ``x`` (m, d) in one simplex (d+1, d)."""
    d = simplex.shape[1]
    t = (simplex[1:] - simplex[0]).T.reshape(d, d)
    lam = np.linalg.solve(t, (x - simplex[0]).T).T
    return np.column_stack([1.0 - lam.sum(axis=1), lam])


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """A coarse mesh and a conforming refinement by an integer ratio.

    Attributes
    ----------
    coarse, fine : Mesh
    ratio : int
        ``coarse.size / fine.size``.
    parent : ndarray, shape (fine.n_cells,)
        Coarse cell containing each fine cell.
    children : ndarray, shape (coarse.n_cells, n_children)
        Fine cells of each coarse cell, sorted by global index.
    local_vertices : ndarray, shape (coarse.n_cells, n_local)
        Fine vertices in the closure of each coarse cell, sorted.
    local_cells : ndarray, shape (coarse.n_cells, n_children, dim + 1)
        ``children`` expressed in local vertex numbering.
    local_barycentric : ndarray, shape (coarse.n_cells, n_local, dim + 1)
        Barycentric coordinates of the local vertices w.r.t. the coarse cell,
        i.e. the values of the coarse hat functions.
    """

    coarse: Mesh
    fine: Mesh
    ratio: int
    parent: np.ndarray
    children: np.ndarray
    local_vertices: np.ndarray
    local_cells: np.ndarray
    local_barycentric: np.ndarray

    @property
    def n_local(self) -> int:
        return self.local_vertices.shape[1]

    @property
    def n_broken(self) -> int:
        return self.local_vertices.size

    @property
    def broken_cells(self) -> np.ndarray:
        """Fine cells in broken numbering, ordered coarse cell by coarse cell."""
        offs = (np.arange(self.coarse.n_cells) * self.n_local)[:, None, None]
        return (self.local_cells + offs).reshape(-1, self.fine.dim + 1)

    @property
    def broken_cell_ids(self) -> np.ndarray:
        """Global fine cell id of every broken cell."""
        return self.children.ravel()

    def to_broken(self, u_fine: np.ndarray) -> np.ndarray:
        """Restrict a conforming fine nodal field to the broken layout."""
        return np.asarray(u_fine)[self.local_vertices.ravel()]

    def to_conforming(self, u_broken: np.ndarray) -> np.ndarray:
        """Fine nodal field from a broken one, averaging the copies of shared vertices."""
        idx = self.local_vertices.ravel()
        n = self.fine.n_vertices
        return np.bincount(idx, np.asarray(u_broken, dtype=float), n) / np.bincount(idx, minlength=n)

    def local_boundary(self, k: int) -> np.ndarray:
        """Local indices of the fine vertices lying on the boundary of coarse cell ``k``."""
        return np.flatnonzero(self.local_barycentric[k].min(axis=1) < _GEOM_TOL)


def refine(coarse: Mesh, ratio: int) -> MeshHierarchy:
    """Refine ``coarse`` uniformly by an integer ``ratio`` and build parent/child maps."""
    if int(ratio) != ratio or ratio < 1:
        raise MeshError(f"refinement ratio must be a positive integer, got {ratio}")
    ratio = int(ratio)
    fine = build_structured(coarse.dim, coarse.length, coarse.n * ratio)
    parent = locate_cells(coarse, fine.barycenters())
    order = np.argsort(parent, kind="stable")
    n_children = ratio**coarse.dim
    children = order.reshape(coarse.n_cells, n_children)

    verts = fine.cells[children]  # (nK, nc, d+1)
    flat = verts.reshape(coarse.n_cells, -1)
    local_vertices = np.sort(flat, axis=1)
    # unique per row; every row has the same count on a structured refinement
    keep = np.ones_like(local_vertices, dtype=bool)
    keep[:, 1:] = local_vertices[:, 1:] != local_vertices[:, :-1]
    counts = keep.sum(axis=1)
    if np.any(counts != counts[0]):
        raise MeshError("coarse cells have differing fine vertex counts")
    local_vertices = local_vertices[keep].reshape(coarse.n_cells, counts[0])
    local_cells = np.empty_like(verts)
    for k in range(coarse.n_cells):
        local_cells[k] = np.searchsorted(local_vertices[k], verts[k])

    n_local = local_vertices.shape[1]
    lam = np.empty((coarse.n_cells, n_local, coarse.dim + 1))
    cp = coarse.points[coarse.cells]
    for k in range(coarse.n_cells):
        lam[k] = barycentric(cp[k], fine.points[local_vertices[k]])
    lam[np.abs(lam) < _GEOM_TOL] = 0.0
    return MeshHierarchy(coarse, fine, ratio, parent, children, local_vertices, local_cells, lam)


@dataclass(frozen=True)
class LayerMask:
    """Classification of fine cells into the outflow boundary layer or not."""

    inside: np.ndarray
    width: float
    undefined: bool = False

    @property
    def outside(self) -> np.ndarray:
        return ~self.inside


def layer_width(peclet: float) -> float:
    """Approximate outflow layer width ``log(Pe) / Pe``; zero when ``Pe <= 1``."""
    if peclet <= 1.0:
        return 0.0
    return math.log(peclet) / peclet


def layer_mask(fine: Mesh, peclet: float) -> LayerMask:
    """Tag fine cells whose barycenter lies in the layer near ``x = L`` (and ``y = L``)."""
    if peclet <= 1.0:
        log.warning("Peclet number %.3g <= 1: boundary layer undefined", peclet)
        return LayerMask(np.zeros(fine.n_cells, dtype=bool), 0.0, undefined=True)
    width = layer_width(peclet)
    c = fine.barycenters()
    edge = fine.length - width
    inside = c[:, 0] > edge
    if fine.dim == 2:
        inside |= c[:, 1] > edge
    return LayerMask(inside, width)


@dataclass(frozen=True, eq=False)
class OversamplingPatch:
    """Enlarged domain around a coarse cell used for oversampled local problems.

    Attributes
    ----------
    cell : int
        Target coarse cell.
    simplex : ndarray, shape (dim + 1, dim)
        The homothetic copy of the coarse cell (before clipping).
    cells : ndarray
        Fine cells forming the (grid-snapped) patch.
    vertices : ndarray
        Fine vertices of the patch, sorted.
    boundary : ndarray of bool
        Patch-boundary flag for each entry of ``vertices``.
    """

    cell: int
    simplex: np.ndarray
    cells: np.ndarray
    vertices: np.ndarray
    boundary: np.ndarray
    polygon: np.ndarray

    def area(self, fine: Mesh) -> float:
        return float(fine.measures()[self.cells].sum())


def _clip_polygon_to_box(poly: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex polygon against an axis-aligned box."""
    out = [tuple(p) for p in poly]
    for axis in range(poly.shape[1]):
        for bound, keep_le in ((lo, False), (hi, True)):
            src, out = out, []
            if not src:
                break
            for a, b in zip(src, src[1:] + src[:1]):
                ina = a[axis] <= bound if keep_le else a[axis] >= bound
                inb = b[axis] <= bound if keep_le else b[axis] >= bound
                if ina:
                    out.append(a)
                if ina != inb:
                    t = (bound - a[axis]) / (b[axis] - a[axis])
                    out.append(tuple(np.asarray(a) + t * (np.asarray(b) - np.asarray(a))))
    return np.array(out)


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _triangles_intersect(tri: np.ndarray, tris: np.ndarray, tol: float) -> np.ndarray:
    """Separating-axis test between one triangle and a stack of triangles (closed sets)."""
    hit = np.ones(tris.shape[0], dtype=bool)
    axes = []
    for t in (tri[None], tris):
        e = np.roll(t, -1, axis=1) - t
        axes.append(np.stack([-e[..., 1], e[..., 0]], axis=-1))
    a0 = np.broadcast_to(axes[0], (tris.shape[0], 3, 2))
    for ax in np.concatenate([a0, axes[1]], axis=1).transpose(1, 0, 2):
        p1 = np.einsum("md,kd->mk", ax, tri)
        p2 = np.einsum("md,mkd->mk", ax, tris)
        sep = (p1.max(axis=1) < p2.min(axis=1) - tol) | (p2.max(axis=1) < p1.min(axis=1) - tol)
        hit &= ~sep
    return hit


def oversampling_patch(hierarchy: MeshHierarchy, cell: int, ratio: float = 3.0) -> OversamplingPatch:
    """Homothety of coarse ``cell`` by ``ratio`` about its barycenter, clipped to the domain.

    The patch is snapped to the fine grid: it is made of the fine cells whose
    closure meets the clipped homothetic simplex.
    """
    if ratio < 1:
        raise MeshError(f"oversampling ratio must be >= 1, got {ratio}")
    coarse, fine = hierarchy.coarse, hierarchy.fine
    simplex = coarse.points[coarse.cells[cell]]
    center = simplex.mean(axis=0)
    big = center + ratio * (simplex - center)
    L = fine.length
    tol = 1e-9 * fine.size
    if ratio == 1:
        cells = hierarchy.children[cell]
    elif fine.dim == 1:
        lo, hi = max(big[:, 0].min(), 0.0), min(big[:, 0].max(), L)
        c = fine.points[fine.cells][:, :, 0]
        cells = np.flatnonzero((c[:, 1] >= lo + tol) & (c[:, 0] <= hi - tol))
    else:
        tris = fine.points[fine.cells]
        lo, hi = big.min(axis=0) - fine.size, big.max(axis=0) + fine.size
        cand = np.flatnonzero(
            np.all(tris.max(axis=1) >= lo, axis=1) & np.all(tris.min(axis=1) <= hi, axis=1)
        )
        # strictly overlapping cells only: touching at a single edge/vertex is not enough
        cells = cand[_triangles_intersect(big, tris[cand], -tol)]
    if fine.dim == 1:
        polygon = np.array([[max(big[:, 0].min(), 0.0)], [min(big[:, 0].max(), L)]])
    else:
        polygon = _clip_polygon_to_box(big, 0.0, L)
    vertices = np.unique(fine.cells[cells])
    boundary = _patch_boundary(fine, cells, vertices)
    return OversamplingPatch(cell, big, cells, vertices, boundary, polygon)


def _patch_boundary(fine: Mesh, cells: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Flag patch vertices on the topological boundary of the union of ``cells``."""
    c = fine.cells[cells]
    if fine.dim == 1:
        ends = np.concatenate([c[:, 0], c[:, 1]])
    else:
        edges = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        ends = uniq[counts == 1].ravel()
    if fine.dim == 1:
        vals, counts = np.unique(ends, return_counts=True)
        ends = vals[counts == 1]
    on = np.isin(vertices, ends) | fine.boundary[vertices]
    return on
