"""
Sparse linear algebra: LU factorization and diagonally preconditioned
GMRES / CG with iteration counts.

Matrices are :class:`scipy.sparse.csr_matrix`; the LU factorization is
SuperLU through :func:`scipy.sparse.linalg.splu`. The Krylov solvers are
implemented here so the stopping rules and iteration counts used in the
cost study are under our control.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "SingularMatrixError",
    "NonConvergenceError",
    "IndefiniteMatrixError",
    "Factorization",
    "lu_factorize",
    "lu_solve",
    "gmres",
    "cg",
    "solve",
    "LinearSolver",
]


class SingularMatrixError(ArithmeticError):
    """The matrix is (numerically) singular."""


class NonConvergenceError(ArithmeticError):
    """An iterative solver hit its iteration limit.

    Attributes
    ----------
    x : ndarray
        Best iterate found (smallest residual).
    iterations : int
    residual : float
    """

    def __init__(self, msg, x, iterations, residual):
        super().__init__(msg)
        self.x = x
        self.iterations = iterations
        self.residual = residual


class IndefiniteMatrixError(ArithmeticError):
    """CG met a direction with non-positive curvature."""


@dataclass(frozen=True)
class SolverConfig:
    """Linear solver selection.

    Attributes
    ----------
    backend : {"direct_lu", "gmres", "cg"}
    tol : float
        GMRES: bound on the relative preconditioned residual. CG: bound on the
        squared relative preconditioned residual.
    restart : int
        GMRES restart length.
    max_iter : int
    preconditioner : {"diagonal", "none"}
    relative : bool
        Measure residuals relative to the preconditioned right-hand side.
    """

    backend: str = "direct_lu"
    tol: float | None = None
    restart: int = 200
    max_iter: int = 20000
    preconditioner: str = "diagonal"
    relative: bool = True

    def __post_init__(self):
        if self.backend not in ("direct_lu", "gmres", "cg"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.preconditioner not in ("diagonal", "none"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    @property
    def tolerance(self) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-20 if self.backend == "cg" else 1e-11


# --------------------------------------------------------------------------
# direct
# --------------------------------------------------------------------------


class Factorization:
    """Reusable sparse LU factorization."""

    def __init__(self, lu, n: int, perm: np.ndarray | None = None):
        self._lu = lu
        self.n = n
        self._perm = perm

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.n:
            raise ValueError(f"rhs has {rhs.shape[0]} rows, expected {self.n}")
        if self.n == 0:
            return rhs.copy()
        if self._perm is None:
            return self._lu.solve(rhs)
        out = np.empty_like(rhs)
        out[self._perm] = self._lu.solve(rhs[self._perm])
        return out


def lu_factorize(a: sp.spmatrix, ordering: np.ndarray | None = None) -> Factorization:
    """Sparse LU with a fill-reducing ordering.

    Parameters
    ----------
    a : sparse matrix
    ordering : ndarray, optional
        Symmetric elimination order to use instead of SuperLU's minimum-degree
        ordering (e.g. nested dissection on a grid). Row pivoting then prefers
        the diagonal.
    """
    a = sp.csc_matrix(a)
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if n == 0:
        return Factorization(None, 0)
    try:
        if ordering is None:
            lu = spla.splu(a, permc_spec="MMD_AT_PLUS_A")
        else:
            ordering = np.asarray(ordering)
            if not np.array_equal(np.sort(ordering), np.arange(n)):
                raise ValueError("ordering is not a permutation")
            a = sp.csr_matrix(a)[ordering][:, ordering].tocsc()
            lu = spla.splu(a, permc_spec="NATURAL", diag_pivot_thresh=0.1, options={"SymmetricMode": True})
    except RuntimeError as exc:  # SuperLU reports exact singularity this way
        raise SingularMatrixError(str(exc)) from exc
    d = lu.U.diagonal()
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise SingularMatrixError("zero pivot in LU factorization")
    return Factorization(lu, n, ordering)


def lu_solve(fact: Factorization, rhs: np.ndarray) -> np.ndarray:
    return fact.solve(rhs)


# --------------------------------------------------------------------------
# Krylov
# --------------------------------------------------------------------------


def _diag_inverse(a: sp.spmatrix, kind: str) -> np.ndarray:
    n = a.shape[0]
    if kind == "none":
        return np.ones(n)
    d = a.diagonal()
    if np.any(d == 0):
        raise SingularMatrixError("zero diagonal entry: diagonal preconditioner undefined")
    return 1.0 / d


def gmres(a: sp.spmatrix, rhs: np.ndarray, config: SolverConfig | None = None, x0=None):
    """Left-preconditioned restarted GMRES.

    Returns
    -------
    x : ndarray
    iterations : int
        Total number of Arnoldi steps.

    Raises
    ------
    NonConvergenceError
        When ``config.max_iter`` steps do not reach the tolerance.
    """
    config = config or SolverConfig("gmres")
    a = sp.csr_matrix(a)
    n = a.shape[0]
    b = np.asarray(rhs, dtype=float)
    minv = _diag_inverse(a, config.preconditioner)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    pb = minv * b
    scale = np.linalg.norm(pb) if config.relative else 1.0
    if scale == 0.0:
        return np.zeros(n), 0
    tol = config.tolerance * scale
    m = max(1, min(config.restart, n))
    its = 0
    best_x, best_r = x.copy(), np.inf
    while True:
        r = minv * (b - a @ x)
        beta = np.linalg.norm(r)
        if beta < best_r:
            best_x, best_r = x.copy(), beta
        if beta <= tol:
            return x, its
        if its >= config.max_iter:
            raise NonConvergenceError(
                f"GMRES did not converge in {its} iterations (residual {beta / scale:.3e})",
                best_x, its, beta / scale,
            )
        v = np.zeros((m + 1, n))
        h = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        v[0] = r / beta
        k_done = 0
        for k in range(m):
            w = minv * (a @ v[k])
            # modified Gram-Schmidt, then one reorthogonalization pass
            for _ in range(2):
                c = v[: k + 1] @ w
                w -= c @ v[: k + 1]
                h[: k + 1, k] += c
            h[k + 1, k] = np.linalg.norm(w)
            if h[k + 1, k] > 0:
                v[k + 1] = w / h[k + 1, k]
            for i in range(k):
                t = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = t
            den = np.hypot(h[k, k], h[k + 1, k])
            if den == 0.0:
                raise SingularMatrixError("GMRES breakdown: singular Hessenberg matrix")
            cs[k], sn[k] = h[k, k] / den, h[k + 1, k] / den
            h[k, k] = den
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            its += 1
            k_done = k + 1
            if abs(g[k + 1]) <= tol or its >= config.max_iter:
                break
        y = sla.solve_triangular(h[:k_done, :k_done], g[:k_done])
        x = x + y @ v[:k_done]


def cg(a: sp.spmatrix, rhs: np.ndarray, config: SolverConfig | None = None, x0=None):
    """Diagonally preconditioned conjugate gradients for SPD matrices.

    The stopping test is ``(r, M^{-1} r) <= tol * (b, M^{-1} b)`` (squared
    preconditioned residual), matching a tolerance such as 1e-20.

    Returns
    -------
    x : ndarray
    iterations : int
    """
    config = config or SolverConfig("cg")
    a = sp.csr_matrix(a)
    n = a.shape[0]
    b = np.asarray(rhs, dtype=float)
    minv = _diag_inverse(a, config.preconditioner)
    if np.any(minv < 0):
        raise IndefiniteMatrixError("negative diagonal entry in a matrix passed to CG")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - a @ x
    z = minv * r
    rz = r @ z
    ref = (b @ (minv * b)) if config.relative else 1.0
    if ref == 0.0:
        return np.zeros(n), 0
    tol = config.tolerance * ref
    p = z.copy()
    its = 0
    best_x, best_r = x.copy(), rz
    while rz > tol:
        if its >= config.max_iter:
            raise NonConvergenceError(
                f"CG did not converge in {its} iterations", best_x, its, float(np.sqrt(best_r / ref))
            )
        ap = a @ p
        curv = p @ ap
        if curv <= 0:
            raise IndefiniteMatrixError(f"non-positive curvature {curv:.3e} at iteration {its}")
        step = rz / curv
        x += step * p
        r -= step * ap
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        its += 1
        if rz < best_r:
            best_x, best_r = x.copy(), rz
    return x, its


def solve(a: sp.spmatrix, rhs: np.ndarray, config: SolverConfig | None = None):
    """Solve ``a x = rhs`` with the configured backend; returns ``(x, iterations)``."""
    config = config or SolverConfig()
    if config.backend == "direct_lu":
        return lu_factorize(a).solve(rhs), 1
    if config.backend == "gmres":
        return gmres(a, rhs, config)
    return cg(a, rhs, config)


class LinearSolver:
    """A matrix bound to a backend, with the offline work (factorization) done up front.

    ``solve`` accumulates the number of iterations in :attr:`iterations`.
    """

    def __init__(self, a: sp.spmatrix, config: SolverConfig | None = None):
        self.config = config or SolverConfig()
        self.matrix = sp.csr_matrix(a)
        self.iterations = 0
        self._fact = lu_factorize(self.matrix) if self.config.backend == "direct_lu" else None

    def solve(self, rhs: np.ndarray, x0=None) -> np.ndarray:
        if self._fact is not None:
            self.iterations += 1
            return self._fact.solve(rhs)
        if self.config.backend == "gmres":
            x, its = gmres(self.matrix, rhs, self.config, x0)
        else:
            x, its = cg(self.matrix, rhs, self.config, x0)
        self.iterations += its
        return x
