"""
Multiscale basis functions built by local fine-mesh solves.

Every space is stored through its prolongation ``P``: a sparse matrix whose
rows follow the broken fine layout of a :class:`~msfem_lab.mesh.MeshHierarchy`
and whose columns are coarse degrees of freedom. A coarse coefficient vector
``c`` is the fine field ``P @ c`` (one copy of the values per coarse element),
so conforming and nonconforming spaces are handled alike, and any form
assembled on the broken geometry is projected to the coarse level as
``P.T @ A_b @ P``.

Supported boundary conditions for the local problems:

``linear``
    Dirichlet data equal to the coarse P1 hat functions (conforming space).
``oversampling``
    Local problems on an enlarged patch with linear data, restricted to the
    element and recombined so the nodal values at its vertices are those of
    the hat functions (nonconforming).
``crouzeix_raviart``
    Degrees of freedom are the averages on coarse edges; local problems have
    natural boundary conditions and one multiplier per edge (nonconforming).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import fem
from .linalg import LinearSolver, SolverConfig, lu_factorize
from .mesh import MeshHierarchy, barycentric, oversampling_patch

log = logging.getLogger(__name__)

VARIANTS = ("linear", "oversampling", "crouzeix_raviart")
KINDS = ("diffusion_only", "advection_diffusion")


class BasisConstructionError(RuntimeError):
    """A local problem could not be solved; ``cell`` identifies the coarse element."""

    def __init__(self, msg, cell):
        super().__init__(msg)
        self.cell = cell


@dataclass(eq=False)
class MultiscaleSpace:
    """Multiscale approximation space on a mesh hierarchy.

    Attributes
    ----------
    hierarchy : MeshHierarchy
    kind : {"diffusion_only", "advection_diffusion"}
    variant : {"linear", "oversampling", "crouzeix_raviart"}
    prolongation : scipy.sparse.csr_matrix, shape (n_broken, n_dofs)
        Coarse coefficients to broken fine nodal values.
    dofs : ndarray
        Coarse vertices (linear, oversampling) or coarse edges
        (Crouzeix-Raviart) carrying the degrees of freedom.
    conforming : bool
    local_basis : ndarray, shape (n_coarse_cells, n_local, dim + 1)
        Values of the local basis functions of every coarse element.
    max_local_residual : float
        Largest relative residual of the local discrete problems.
    local_iterations : int
        Total Krylov iterations spent on local problems (iterative backend).
    """

    hierarchy: MeshHierarchy
    kind: str
    variant: str
    prolongation: sp.csr_matrix
    dofs: np.ndarray
    conforming: bool
    local_basis: np.ndarray
    max_local_residual: float = 0.0
    local_iterations: int = 0
    ratio: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_dofs(self) -> int:
        return self.prolongation.shape[1]

    def fine_field(self, coeffs: np.ndarray) -> np.ndarray:
        """Broken fine nodal values of the function with coarse coefficients ``coeffs``."""
        return self.prolongation @ np.asarray(coeffs, dtype=float)

    def partition_of_unity_error(self) -> float:
        """``max |sum_i psi_i - 1|`` over the fine nodes of every coarse element."""
        return float(np.max(np.abs(self.local_basis.sum(axis=2) - 1.0)))


# --------------------------------------------------------------------------
# local solves
# --------------------------------------------------------------------------


def _local_solver(matrix: sp.spmatrix, kind: str, config: SolverConfig) -> LinearSolver:
    if config.backend == "direct_lu":
        return LinearSolver(matrix, config)
    backend = "cg" if kind == "diffusion_only" else "gmres"
    cfg = SolverConfig(backend, config.tol, config.restart, config.max_iter, config.preconditioner)
    return LinearSolver(matrix, cfg)


def _dirichlet_solve(mat, interior, boundary, data, kind, config, cell):
    """Solve ``mat u = 0`` on ``interior`` with ``u = data`` on ``boundary`` for each column of ``data``."""
    if len(interior) == 0:
        return np.array(data, dtype=float), 0.0, 0
    a_ii = mat[interior][:, interior]
    a_ib = mat[interior][:, boundary]
    rhs = -(a_ib @ data[boundary])
    its = 0
    try:
        if config.backend == "direct_lu" and _is_tridiagonal(a_ii):
            x = _solve_tridiagonal(a_ii, rhs)
        elif config.backend == "direct_lu":
            x = _local_solver(a_ii, kind, config).solve(rhs)
        else:
            solver = _local_solver(a_ii, kind, config)
            x = np.column_stack([solver.solve(rhs[:, j]) for j in range(rhs.shape[1])])
            its = solver.iterations
    except ArithmeticError as exc:
        raise BasisConstructionError(f"local problem failed on coarse element {cell}: {exc}", cell) from exc
    out = np.array(data, dtype=float)
    out[interior] = x.reshape(len(interior), -1)
    res = a_ii @ out[interior] + a_ib @ data[boundary]
    scale = max(np.linalg.norm(rhs), 1e-300)
    return out, float(np.linalg.norm(res) / scale), its


def _is_tridiagonal(mat: sp.spmatrix) -> bool:
    coo = mat.tocoo()
    return mat.shape[0] > 2 and bool(np.all(np.abs(coo.row - coo.col) <= 1))


def _solve_tridiagonal(mat: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Banded LU for 1D local problems, much cheaper than a general sparse factorization."""
    n = mat.shape[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = mat.diagonal(1)
    ab[1] = mat.diagonal(0)
    ab[2, :-1] = mat.diagonal(-1)
    try:
        x = scipy.linalg.solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise ArithmeticError("singular tridiagonal local matrix")
    return x


def _vertex_indices(lam: np.ndarray) -> np.ndarray:
    """Local indices of the coarse element vertices (where a barycentric coordinate is 1)."""
    return np.argmax(lam, axis=0)


def _linear_basis(h: MeshHierarchy, local_op: sp.csr_matrix, kind, config):
    nK, nl = h.local_vertices.shape
    k = h.coarse.cells.shape[1]
    basis = np.empty((nK, nl, k))
    worst, its = 0.0, 0
    for c in range(nK):
        s = slice(c * nl, (c + 1) * nl)
        mat = local_op[s, s].tocsr()
        lam = h.local_barycentric[c]
        bnd = h.local_boundary(c)
        mask = np.ones(nl, dtype=bool)
        mask[bnd] = False
        inner = np.flatnonzero(mask)
        basis[c], res, it = _dirichlet_solve(mat, inner, bnd, lam, kind, config, c)
        worst, its = max(worst, res), its + it
    return basis, worst, its


def _oversampling_basis(h: MeshHierarchy, fine_op: sp.csr_matrix, kind, config, ratio):
    nK, nl = h.local_vertices.shape
    k = h.coarse.cells.shape[1]
    basis = np.empty((nK, nl, k))
    worst, its = 0.0, 0
    pts = h.fine.points
    for c in range(nK):
        patch = oversampling_patch(h, c, ratio)
        verts = patch.vertices
        data = barycentric(patch.simplex, pts[verts])
        bnd = np.flatnonzero(patch.boundary)
        inner = np.flatnonzero(~patch.boundary)
        mat = fine_op[verts][:, verts].tocsr()
        chi, res, it = _dirichlet_solve(mat, inner, bnd, data, kind, config, c)
        worst, its = max(worst, res), its + it
        chi_k = chi[np.searchsorted(verts, h.local_vertices[c])]
        corners = _vertex_indices(h.local_barycentric[c])
        try:
            recomb = np.linalg.inv(chi_k[corners])
        except np.linalg.LinAlgError as exc:
            raise BasisConstructionError(f"singular recombination on coarse element {c}", c) from exc
        basis[c] = chi_k @ recomb
    return basis, worst, its


def coarse_edges(hierarchy: MeshHierarchy):
    """Edges of the coarse mesh.

    Returns
    -------
    cell_edges : ndarray, shape (n_cells, 3)
        Edge id of the edge opposite each local vertex.
    interior : ndarray of bool, shape (n_edges,)
        True for edges shared by two coarse cells.
    """
    cells = hierarchy.coarse.cells
    opp = np.stack([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1)
    pairs = np.sort(opp.reshape(-1, 2), axis=1)
    uniq, inv, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    return inv.reshape(cells.shape[0], 3), counts == 2, uniq


def _edge_average_rows(lam: np.ndarray) -> np.ndarray:
    """Trapezoidal edge-average functionals on the fine vertices of one coarse triangle."""
    nl, k = lam.shape
    rows = np.zeros((k, nl))
    for j in range(k):
        on = np.flatnonzero(lam[:, j] == 0.0)
        t = lam[on, (j + 1) % k]
        order = np.argsort(t)
        on, t = on[order], t[order]
        w = np.zeros(len(t))
        dt = np.diff(t)
        w[:-1] += dt / 2
        w[1:] += dt / 2
        rows[j, on] = w / w.sum()
    return rows


def _cr_basis(h: MeshHierarchy, local_op: sp.csr_matrix, kind, config):
    nK, nl = h.local_vertices.shape
    basis = np.empty((nK, nl, 3))
    worst = 0.0
    for c in range(nK):
        s = slice(c * nl, (c + 1) * nl)
        mat = local_op[s, s]
        cons = sp.csr_matrix(_edge_average_rows(h.local_barycentric[c]))
        saddle = sp.bmat([[mat, cons.T], [cons, None]], format="csc")
        rhs = np.zeros((nl + 3, 3))
        rhs[nl:] = np.eye(3)
        try:
            sol = lu_factorize(saddle).solve(rhs)
        except ArithmeticError as exc:
            raise BasisConstructionError(f"local problem failed on coarse element {c}: {exc}", c) from exc
        res = np.linalg.norm(saddle @ sol - rhs) / np.linalg.norm(rhs)
        worst = max(worst, res)
        basis[c] = sol[:nl]
    return basis, worst, 0


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def build_space(
    hierarchy: MeshHierarchy,
    A,
    b=None,
    variant: str = "linear",
    ratio: float = 3.0,
    solver: SolverConfig | None = None,
    broken_forms: dict | None = None,
) -> MultiscaleSpace:
    """Build a multiscale space by solving one local problem per coarse element and local dof.

    Parameters
    ----------
    hierarchy : MeshHierarchy
    A : float or callable
        Diffusion coefficient.
    b : array_like, optional
        Constant transport field. When given (and nonzero), the local problems
        include the transport term (advection-diffusion basis).
    variant : {"linear", "oversampling", "crouzeix_raviart"}
    ratio : float
        Oversampling ratio.
    solver : SolverConfig
        Local solver; for an iterative backend CG is used on diffusion-only
        problems and GMRES on advection-diffusion ones.
    broken_forms : dict, optional
        Cache of assembled broken matrices shared with the caller.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown boundary condition variant {variant!r}")
    solver = solver or SolverConfig()
    kind = "diffusion_only" if b is None or not np.any(np.asarray(b)) else "advection_diffusion"
    dim = hierarchy.fine.dim
    if variant == "crouzeix_raviart" and dim == 1:
        variant_eff = "linear"  # edge averages are point values in 1D
    else:
        variant_eff = variant

    if variant_eff == "oversampling":
        op = fem.assemble_diffusion(hierarchy.fine, A)
        if kind == "advection_diffusion":
            op = op + fem.assemble_convection(hierarchy.fine, b)
        basis, res, its = _oversampling_basis(hierarchy, op.tocsr(), kind, solver, ratio)
    else:
        forms = broken_forms if broken_forms is not None else {}
        op = broken_operator(hierarchy, A, b if kind == "advection_diffusion" else None, forms)
        if variant_eff == "linear":
            basis, res, its = _linear_basis(hierarchy, op, kind, solver)
        else:
            basis, res, its = _cr_basis(hierarchy, op, kind, solver)

    nK, nl = hierarchy.local_vertices.shape
    k = basis.shape[2]
    rows = np.repeat(np.arange(nK * nl), k)
    if variant_eff == "crouzeix_raviart":
        cell_edges, interior, _ = coarse_edges(hierarchy)
        cols = np.repeat(cell_edges, nl, axis=0).reshape(-1)
        dofs = np.flatnonzero(interior)
        n_glob = interior.size
    else:
        cols = np.repeat(hierarchy.coarse.cells, nl, axis=0).reshape(-1)
        dofs = hierarchy.coarse.interior
        n_glob = hierarchy.coarse.n_vertices
    full = sp.csr_matrix((basis.reshape(-1), (rows, cols)), shape=(nK * nl, n_glob))
    prolong = full[:, dofs].tocsr()
    space = MultiscaleSpace(
        hierarchy, kind, variant, prolong, dofs, variant_eff == "linear", basis, res, its, ratio
    )
    log.debug("built %s/%s space: %d dofs, local residual %.2e", kind, variant, space.n_dofs, res)
    return space


def _broken_geometry(hierarchy: MeshHierarchy, cache: dict) -> fem.CellGeometry:
    if "geometry" not in cache:
        cache["geometry"] = fem.CellGeometry.broken(hierarchy)
    return cache["geometry"]


def broken_operator(hierarchy: MeshHierarchy, A, b=None, cache: dict | None = None) -> sp.csr_matrix:
    """Broken matrix of ``int A grad u . grad v + (b . grad u) v``."""
    cache = cache if cache is not None else {}
    geom = _broken_geometry(hierarchy, cache)
    key = ("diffusion", id(A) if callable(A) else A)
    if key not in cache:
        cache[key] = fem.assemble_diffusion(geom, A)
    op = cache[key]
    if b is not None and np.any(np.asarray(b)):
        ckey = ("convection", tuple(np.atleast_1d(b)))
        if ckey not in cache:
            cache[ckey] = fem.assemble_convection(geom, b)
        op = op + cache[ckey]
    return op.tocsr()


def coarse_assemble(space: MultiscaleSpace, fine_form: sp.spmatrix, test_space: MultiscaleSpace | None = None):
    """Galerkin matrix ``P_test^T A_b P`` of a form assembled on the broken geometry."""
    p = space.prolongation
    if fine_form.shape[0] != p.shape[0]:
        raise ValueError("fine form does not match the hierarchy of the space")
    q = p if test_space is None else test_space.prolongation
    return (q.T @ (fine_form @ p)).tocsr()


def coarse_interpolation(hierarchy: MeshHierarchy, broken: bool = True) -> sp.csr_matrix:
    """Coarse P1 interior dofs to fine nodal values (broken layout by default)."""
    return fem.interpolation_matrix(hierarchy, broken=broken)[:, hierarchy.coarse.interior].tocsr()


def project_onto_space(v_broken: np.ndarray, space: MultiscaleSpace, form: sp.spmatrix) -> np.ndarray:
    """Galerkin projection onto ``space`` in the inner product of ``form`` (a broken SPD matrix).

    Returns the coarse coefficients ``c`` with ``a(P c - v, w) = 0`` for all ``w`` in the space.
    """
    gram = coarse_assemble(space, form)
    rhs = space.prolongation.T @ (form @ np.asarray(v_broken, dtype=float))
    return lu_factorize(gram).solve(rhs)


def projection_form(space: MultiscaleSpace, name: str, beta: float, alpha_spl: float, A=None, cache=None):
    """Broken matrix of the ``a1`` form ``(beta + alpha_spl) grad . grad`` or the ``a2`` form ``(beta + A) grad . grad``."""
    cache = cache if cache is not None else {}
    geom = _broken_geometry(space.hierarchy, cache)
    if name == "a1":
        return (beta + alpha_spl) * fem.assemble_diffusion(geom, 1.0)
    if name == "a2":
        if A is None:
            raise ValueError("the a2 form needs the diffusion coefficient")
        return beta * fem.assemble_diffusion(geom, 1.0) + fem.assemble_diffusion(geom, A)
    raise ValueError(f"unknown projection form {name!r}")


# --------------------------------------------------------------------------
# cache
# --------------------------------------------------------------------------


def cache_key(eps: float, H: float, h: float, kind: str, variant: str) -> str:
    return f"eps{eps:.6g}_H{H:.6g}_h{h:.6g}_{kind}_{variant}"


def save_space(space: MultiscaleSpace, path, eps: float) -> str:
    """Write the per-element basis values to an ``.npz`` file; returns the key."""
    h = space.hierarchy
    key = cache_key(eps, h.coarse.size, h.fine.size, space.kind, space.variant)
    np.savez_compressed(
        path,
        key=np.array(key),
        local_basis=space.local_basis,
        data=space.prolongation.data,
        indices=space.prolongation.indices,
        indptr=space.prolongation.indptr,
        shape=np.array(space.prolongation.shape),
        dofs=space.dofs,
        conforming=np.array(space.conforming),
    )
    return key


def load_space(path, hierarchy: MeshHierarchy, eps: float, kind: str, variant: str) -> MultiscaleSpace:
    """Load a space written by :func:`save_space`, checking that its key matches."""
    with np.load(path) as z:
        key = str(z["key"])
        want = cache_key(eps, hierarchy.coarse.size, hierarchy.fine.size, kind, variant)
        if key != want:
            raise KeyError(f"cached basis {key!r} does not match {want!r}")
        p = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
        return MultiscaleSpace(
            hierarchy, kind, variant, p, z["dofs"], bool(z["conforming"]), z["local_basis"]
        )
