"""
P1 finite elements: coefficient fields, stabilization parameters and the
assembly of every bilinear and linear form used by the solvers.

All assembly routines work on a :class:`CellGeometry`, which is either a
plain conforming mesh or the *broken* layout of a mesh hierarchy (fine
cells renumbered coarse element by coarse element, with duplicated vertices
on coarse element boundaries). Assembling on the broken layout produces the
block-diagonal matrices used to build multiscale basis functions and to
evaluate forms on nonconforming spaces.

Matrices are assembled on all vertices; Dirichlet conditions are imposed by
restricting to the interior degrees of freedom (:meth:`P1Space.restrict`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshHierarchy

ScalarField = Union[float, Callable[[np.ndarray], np.ndarray]]


class AssemblyError(ValueError):
    """Raised when a form cannot be assembled (e.g. a non-elliptic coefficient)."""


# --------------------------------------------------------------------------
# coefficient fields
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OscillatoryDiffusion:
    """Scalar diffusion ``alpha * (1 + delta * cos(2 pi x_1 / eps))``.

    Parameters
    ----------
    alpha : float
        Mean diffusivity, > 0.
    delta : float
        Relative amplitude, ``0 <= delta < 1``.
    eps : float
        Oscillation period, > 0.
    """

    alpha: float
    delta: float = 0.0
    eps: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0 <= self.delta < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @property
    def alpha1(self) -> float:
        """Lower ellipticity bound."""
        return self.alpha * (1.0 - self.delta)

    @property
    def alpha2(self) -> float:
        """Upper ellipticity bound."""
        return self.alpha * (1.0 + self.delta)

    @property
    def is_constant(self) -> bool:
        return self.delta == 0.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.delta == 0.0:
            return np.full(x.shape[0], self.alpha)
        return self.alpha * (1.0 + self.delta * np.cos(2.0 * np.pi * x[:, 0] / self.eps))

    def sup_deviation(self, value: float) -> float:
        """``sup |A - value|`` over the domain (the cosine reaches both extremes)."""
        return max(abs(self.alpha2 - value), abs(self.alpha1 - value))

    def derivative_sup(self) -> float:
        """``sup |dA/dx_1|``."""
        return self.alpha * self.delta * 2.0 * np.pi / self.eps

    def shifted(self, beta: float) -> "ShiftedDiffusion":
        return ShiftedDiffusion(self, beta)


@dataclass(frozen=True)
class ShiftedDiffusion:
    """``beta + A(x)`` for a base diffusion field ``A``."""

    base: OscillatoryDiffusion
    beta: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.beta + self.base(x)


def evaluate(field: ScalarField, x: np.ndarray) -> np.ndarray:
    """Evaluate a scalar field given as a constant or a callable at points ``x``."""
    x = np.atleast_2d(x)
    if isinstance(field, np.ndarray) and field.ndim == 1 and field.size == x.shape[0]:
        return field.astype(float)  # already sampled per cell
    if callable(field):
        return np.asarray(field(x), dtype=float).reshape(x.shape[0])
    return np.full(x.shape[0], float(field))


def as_velocity(b, dim: int) -> np.ndarray:
    """Normalize a constant transport field to a ``(dim,)`` array."""
    v = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if v.size == 1 and dim > 1:
        v = np.full(dim, v[0])
    if v.size != dim:
        raise ValueError(f"transport field has {v.size} components, expected {dim}")
    return v


def global_peclet(b, alpha: float, norm: str = "max") -> float:
    """Global Peclet number ``||b|| / (2 alpha)``.

    ``norm="max"`` uses the componentwise sup of ``b``; ``norm="euclidean"``
    its Euclidean length.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return velocity_norm(b, norm) / (2.0 * alpha)


def velocity_norm(b, norm: str = "max") -> float:
    v = np.atleast_1d(np.asarray(b, dtype=float))
    if norm == "max":
        return float(np.max(np.abs(v)))
    if norm == "euclidean":
        return float(np.linalg.norm(v))
    raise ValueError(f"unknown norm {norm!r}")


# --------------------------------------------------------------------------
# stabilization parameter
# --------------------------------------------------------------------------


def coth_minus_inverse(x: float) -> float:
    """``coth(x) - 1/x``, accurate for small ``x`` and overflow-free for large ``x``."""
    if x < 1e-3:
        return x / 3.0 - x**3 / 45.0
    if x > 20.0:
        # coth(x) = 1 + 2 e^{-2x} / (1 - e^{-2x})
        e = math.exp(-2.0 * x)
        return 1.0 + 2.0 * e / (1.0 - e) - 1.0 / x
    return 1.0 / math.tanh(x) - 1.0 / x


@dataclass(frozen=True)
class StabParams:
    """Elementwise SUPG parameter for a constant transport field.

    Attributes
    ----------
    mode : {"coth", "simple", "none"}
        ``coth``: ``H/(2|b|) (coth Pe_K - 1/Pe_K)`` with ``Pe_K = |b| H / (2 alpha)``;
        ``simple``: ``H/(2|b|)``; ``none``: zero.
    tau : float
        Value on every coarse element.
    degenerate : bool
        True when ``|b| = 0`` so that tau had to be set to zero.
    rho : int
        -1, 0 or 1 for the DW, SUPG and GLS variants (identical for P1).
    """

    mode: str
    tau: float
    degenerate: bool = False
    rho: int = 0


def tau_field(mode: str, alpha: float, b, H: float, norm: str = "euclidean", rho: int = 0) -> StabParams:
    """Stabilization parameter on elements of size ``H``."""
    if rho not in (-1, 0, 1):
        raise ValueError("rho must be -1, 0 or 1")
    if mode == "none":
        return StabParams(mode, 0.0, False, rho)
    bn = velocity_norm(b, norm)
    if bn == 0.0:
        return StabParams(mode, 0.0, True, rho)
    if mode == "simple":
        return StabParams(mode, H / (2.0 * bn), False, rho)
    if mode == "coth":
        pe = bn * H / (2.0 * alpha)
        return StabParams(mode, H / (2.0 * bn) * coth_minus_inverse(pe), False, rho)
    raise ValueError(f"unknown stabilization mode {mode!r}")


# --------------------------------------------------------------------------
# geometry and spaces
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CellGeometry:
    """Connectivity plus per-cell geometric data needed by the assembly routines."""

    points: np.ndarray
    cells: np.ndarray
    measures: np.ndarray
    gradients: np.ndarray
    barycenters: np.ndarray

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "CellGeometry":
        return cls(mesh.points, mesh.cells, mesh.measures(), mesh.gradients(), mesh.barycenters())

    @classmethod
    def broken(cls, hierarchy: MeshHierarchy) -> "CellGeometry":
        fine = hierarchy.fine
        ids = hierarchy.broken_cell_ids
        return cls(
            fine.points[hierarchy.local_vertices.ravel()],
            hierarchy.broken_cells,
            fine.measures()[ids],
            fine.gradients()[ids],
            fine.barycenters()[ids],
        )


def geometry(obj) -> CellGeometry:
    if isinstance(obj, CellGeometry):
        return obj
    if isinstance(obj, Mesh):
        return CellGeometry.from_mesh(obj)
    if isinstance(obj, P1Space):
        return CellGeometry.from_mesh(obj.mesh)
    raise TypeError(f"cannot build a cell geometry from {type(obj).__name__}")


@dataclass(frozen=True, eq=False)
class P1Space:
    """Continuous P1 space with homogeneous Dirichlet conditions."""

    mesh: Mesh

    @property
    def dofs(self) -> np.ndarray:
        return self.mesh.interior

    @property
    def n_dofs(self) -> int:
        return self.dofs.size

    def restrict(self, matrix: sp.spmatrix) -> sp.csr_matrix:
        """Submatrix on interior dofs (eliminates the Dirichlet vertices)."""
        d = self.dofs
        return sp.csr_matrix(matrix)[d][:, d].tocsr()

    def restrict_vector(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v)[self.dofs]

    def extend(self, u: np.ndarray) -> np.ndarray:
        """Nodal vector on all vertices, zero on the boundary."""
        full = np.zeros(self.mesh.n_vertices)
        full[self.dofs] = u
        return full


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------


def _scatter(cells: np.ndarray, elem: np.ndarray, n: int) -> sp.csr_matrix:
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    m = sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def cell_values(geom: CellGeometry, coef: ScalarField) -> np.ndarray:
    """Coefficient sampled at cell barycenters (midpoint rule)."""
    return evaluate(coef, geom.barycenters)


def diffusion_elements(geom: CellGeometry, coef: ScalarField = 1.0) -> np.ndarray:
    a = cell_values(geom, coef)
    if np.any(~(a > 0)):
        raise AssemblyError("diffusion coefficient is not positive at every quadrature point")
    g = geom.gradients
    return (a * geom.measures)[:, None, None] * np.einsum("mid,mjd->mij", g, g)


def assemble_diffusion(obj, coef: ScalarField = 1.0) -> sp.csr_matrix:
    """Matrix of ``int coef grad(phi_j) . grad(phi_i)`` on all vertices."""
    geom = geometry(obj)
    return _scatter(geom.cells, diffusion_elements(geom, coef), geom.n_vertices)


def convection_elements(geom: CellGeometry, b) -> np.ndarray:
    bv = as_velocity(b, geom.dim)
    bg = geom.gradients @ bv  # (m, k): b . grad(phi_j)
    k = geom.cells.shape[1]
    return np.broadcast_to((geom.measures / k)[:, None, None] * bg[:, None, :], (len(bg), k, k))


def assemble_convection(obj, b) -> sp.csr_matrix:
    """Matrix of ``int (b . grad(phi_j)) phi_i`` for a constant field ``b``."""
    geom = geometry(obj)
    return _scatter(geom.cells, np.ascontiguousarray(convection_elements(geom, b)), geom.n_vertices)


def supg_elements(geom: CellGeometry, b, tau) -> np.ndarray:
    bv = as_velocity(b, geom.dim)
    bg = geom.gradients @ bv
    t = np.broadcast_to(np.asarray(tau, dtype=float), geom.measures.shape)
    return (t * geom.measures)[:, None, None] * bg[:, :, None] * bg[:, None, :]


def assemble_supg(obj, b, stab: StabParams | float | np.ndarray) -> sp.csr_matrix:
    """Matrix of ``sum_K tau_K (b . grad(phi_j), b . grad(phi_i))_K``.

    For P1 functions the diffusive part of the residual vanishes on each
    element, so the SUPG, GLS and DW variants give the same matrix. ``stab``
    may also be a per-cell array of tau values.
    """
    geom = geometry(obj)
    tau = stab.tau if isinstance(stab, StabParams) else stab
    return _scatter(geom.cells, supg_elements(geom, b, tau), geom.n_vertices)


def assemble_mass(obj) -> sp.csr_matrix:
    geom = geometry(obj)
    k = geom.cells.shape[1]
    d = k - 1
    local = (np.ones((k, k)) + np.eye(k)) / ((d + 1) * (d + 2))
    elem = geom.measures[:, None, None] * local[None]
    return _scatter(geom.cells, elem, geom.n_vertices)


def assemble_load(obj, f: ScalarField = 1.0) -> np.ndarray:
    """Vector ``F_i = int f phi_i`` (f sampled at cell barycenters)."""
    geom = geometry(obj)
    k = geom.cells.shape[1]
    vals = cell_values(geom, f) * geom.measures / k
    return np.bincount(geom.cells.ravel(), np.repeat(vals, k), minlength=geom.n_vertices)


def assemble_supg_load(obj, b, stab: StabParams | float | np.ndarray, f: ScalarField = 1.0) -> np.ndarray:
    """Vector ``sum_K tau_K (f, b . grad(phi_i))_K``."""
    geom = geometry(obj)
    tau = stab.tau if isinstance(stab, StabParams) else stab
    bv = as_velocity(b, geom.dim)
    bg = geom.gradients @ bv
    t = np.broadcast_to(np.asarray(tau, dtype=float), geom.measures.shape)
    vals = (t * geom.measures * cell_values(geom, f))[:, None] * bg
    return np.bincount(geom.cells.ravel(), vals.ravel(), minlength=geom.n_vertices)


def interpolation_matrix(hierarchy: MeshHierarchy, broken: bool = False) -> sp.csr_matrix:
    """Values at the fine vertices of the coarse P1 hat functions (all coarse vertices).

    With ``broken=True`` the rows follow the broken layout of ``hierarchy``.
    """
    nK, nl = hierarchy.local_vertices.shape
    k = hierarchy.coarse.cells.shape[1]
    lam = hierarchy.local_barycentric  # (nK, nl, k)
    rows = np.repeat(np.arange(nK * nl), k)
    cols = np.repeat(hierarchy.coarse.cells, nl, axis=0).reshape(-1)
    vals = lam.reshape(-1)
    keep = vals != 0.0
    shape = (nK * nl, hierarchy.coarse.n_vertices)
    m = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=shape)
    if broken:
        return m
    # pick one broken copy of each fine vertex
    flat = hierarchy.local_vertices.ravel()
    _, first = np.unique(flat, return_index=True)
    out = m[first]
    return sp.csr_matrix(out)


def assemble_load_fine(hierarchy: MeshHierarchy, u_fine: np.ndarray) -> np.ndarray:
    """Coarse load ``int u_h phi_i`` for a fine P1 nodal field ``u_h``, integrated exactly on the fine mesh."""
    if not isinstance(hierarchy, MeshHierarchy):
        raise TypeError("fine-field load assembly needs a MeshHierarchy")
    mass = assemble_mass(hierarchy.fine)
    p0 = interpolation_matrix(hierarchy)
    return p0.T @ (mass @ np.asarray(u_fine, dtype=float))


def coarse_average(hierarchy: MeshHierarchy, coef: ScalarField) -> np.ndarray:
    """Mean of a coefficient over each coarse cell, sampled at fine cell midpoints."""
    fine = hierarchy.fine
    vals = cell_values(CellGeometry.from_mesh(fine), coef) * fine.measures()
    sums = np.bincount(hierarchy.parent, vals, minlength=hierarchy.coarse.n_cells)
    return sums / hierarchy.coarse.measures()


def coarse_cell_average(mesh: Mesh, coef: ScalarField, n_sub: int = 16) -> np.ndarray:
    """Mean of a coefficient over each cell of ``mesh`` using a sub-grid midpoint rule."""
    from .mesh import refine

    return coarse_average(refine(mesh, n_sub), coef)
