"""
Splitting iterations alternating a coarse stabilized single-scale solve with
a multiscale pure-diffusion solve, with optional damping ``beta`` and
projection of the lagged transport term onto the multiscale space.

With coarse P1 coefficients ``u_e`` (even iterates) and multiscale
coefficients ``u_o`` (odd iterates) the discrete scheme is::

    M0 u_e' = F + lag(u_e) - M3 u_o + beta B u_o        (coarse, SUPG)
    K2 u_o' = R2 u_e'                                    (multiscale)

where ``M0 = (beta + alpha_spl) L0 + C0 + S0``, ``lag(u_e) = (C0 + S0) u_e``
(or ``M3 P(u_e)`` with the projection), ``M3`` is the transport plus
streamline term of a multiscale field tested against coarse hats, integrated
on the fine mesh, ``B`` the Laplacian pairing of the same fields,
``K2 = beta L + A`` on the multiscale space and ``R2`` the
``(beta + alpha_spl)`` Laplacian pairing of coarse and multiscale fields.
``beta = 0`` without projection is the undamped scheme.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as so
import scipy.sparse as sp

from . import fem
from .linalg import LinearSolver, SolverConfig
from .methods import as_discretization
from .problem import Discretization, MethodReport, Timer, timed_online

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# damping parameter
# --------------------------------------------------------------------------


def contraction_factor(x, R: float, a: float, c: float):
    """``g(x) = R / ((x + a)(x + c)) + x / (x + c)``."""
    x = np.asarray(x, dtype=float)
    return R / ((x + a) * (x + c)) + x / (x + c)


def beta_optimize(
    c_omega: float,
    b_norm: float,
    deviation: float,
    alpha1: float,
    alpha_spl: float,
    H: float = 0.0,
    formula: str = "lemma4",
) -> tuple[float, float]:
    """Damping ``beta = argmin_{x >= 0} g(x)`` and the contraction factor ``rho = g(beta)``.

    ``g(x) = r ||A - alpha_spl|| / ((x + alpha_spl)(x + alpha1)) + x / (x + alpha1)``
    with ``r = C ||b||`` (``lemma3``) or ``r = (C + H/2) ||b||`` (``lemma4``).
    The minimizer is a root of ``c (x + a)^2 = R (2x + a + c)``; the result
    is cross-checked with a golden-section search.

    Returns
    -------
    beta, rho : float
    """
    if formula not in ("lemma3", "lemma4"):
        raise ValueError(f"unknown formula {formula!r}")
    for name, v in (("c_omega", c_omega), ("alpha1", alpha1), ("alpha_spl", alpha_spl)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    if b_norm < 0 or deviation < 0 or H < 0:
        raise ValueError("norms and H must be non-negative")
    r = (c_omega + (H / 2.0 if formula == "lemma4" else 0.0)) * b_norm
    R = r * deviation
    a, c = alpha_spl, alpha1
    if R == 0.0:
        return 0.0, 0.0
    # c x^2 + (2ac - 2R) x + c a^2 - R (a + c) = 0
    qa, qb, qc = c, 2 * a * c - 2 * R, c * a * a - R * (a + c)
    disc = qb * qb - 4 * qa * qc
    cands = [0.0]
    if disc >= 0:
        root = (-qb + math.sqrt(disc)) / (2 * qa)
        if root > 0:
            cands.append(root)
    vals = [float(contraction_factor(x, R, a, c)) for x in cands]
    i = int(np.argmin(vals))
    beta, rho = cands[i], vals[i]

    # golden-section cross-check on a bracket around the candidate
    hi = max(10.0 * beta, 10.0 * (a + c), 1.0)
    res = so.minimize_scalar(lambda x: float(contraction_factor(abs(x), R, a, c)), bracket=(0.0, hi / 2, hi), method="golden")
    if res.fun < rho - 1e-12 * max(1.0, abs(rho)):
        log.warning("golden-section search improved on the closed form: %.6g < %.6g", res.fun, rho)
        beta, rho = abs(float(res.x)), float(res.fun)
    return beta, rho


def beta_for_problem(disc: Discretization, formula: str = "lemma4") -> tuple[float, float]:
    p = disc.problem
    return beta_optimize(p.c_omega, p.b_size, p.A.sup_deviation(p.spl), p.A.alpha1, p.spl, disc.H, formula)


# --------------------------------------------------------------------------
# iterations
# --------------------------------------------------------------------------


@dataclass
class SplittingState:
    """Iterates and history of a splitting run.

    Attributes
    ----------
    u_even : ndarray
        Coarse P1 coefficients (interior dofs).
    u_odd : ndarray
        Multiscale coefficients.
    n : int
        Number of completed passes (one pass = one coarse and one multiscale solve).
    residuals : list of float
        Stopping-criterion residual after every pass.
    increments : list of float
        H1 seminorm of the difference of consecutive even iterates.
    beta : float
    projection : bool
    converged, diverged : bool
    """

    u_even: np.ndarray
    u_odd: np.ndarray
    n: int = 0
    residuals: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    beta: float = 0.0
    projection: bool = False
    rho: float | None = None
    converged: bool = False
    diverged: bool = False
    trajectory: list = field(default_factory=list)


@dataclass
class SplittingOperators:
    """Assembled matrices of the splitting scheme (coarse interior dofs by multiscale dofs)."""

    M0: sp.csr_matrix
    M2: sp.csr_matrix
    M3: sp.csr_matrix
    B: sp.csr_matrix
    K2: sp.csr_matrix
    R2: sp.csr_matrix
    F: np.ndarray
    L0: sp.csr_matrix
    gram: sp.csr_matrix | None
    cross: sp.csr_matrix | None


def splitting_operators(disc: Discretization, space, beta: float, stab_rhs: str, tau: float, projection: bool):
    p = disc.problem
    a = p.spl
    cs = disc.coarse_space
    coarse = disc.coarse
    L0 = cs.restrict(fem.assemble_diffusion(coarse, 1.0))
    C0 = cs.restrict(fem.assemble_convection(coarse, p.b))
    S0 = cs.restrict(fem.assemble_supg(coarse, p.b, tau))
    F = cs.restrict_vector(fem.assemble_load(coarse, p.f) + fem.assemble_supg_load(coarse, p.b, tau, p.f))
    P0 = disc.interpolation
    P = space.prolongation
    Lb = disc.broken("laplace")
    Cb = disc.broken("convection")
    if stab_rhs == "f1":
        M2 = (C0 + S0).tocsr()
        M3 = (P0.T @ ((Cb + disc.broken("supg", tau)) @ P)).tocsr()
    elif stab_rhs == "f":
        M2 = C0.tocsr()
        M3 = (P0.T @ (Cb @ P)).tocsr()
    else:
        raise ValueError(f"unknown stabilization right-hand side {stab_rhs!r}")
    LbP = Lb @ P
    B = (P0.T @ LbP).tocsr()
    gram_l = (P.T @ LbP).tocsr()
    K2 = (beta * gram_l + P.T @ (disc.broken("diffusion") @ P)).tocsr()
    cross = (P.T @ (Lb @ P0)).tocsr()
    R2 = ((beta + a) * cross).tocsr()
    M0 = ((beta + a) * L0 + C0 + S0).tocsr()
    return SplittingOperators(M0, M2, M3, B, K2, R2, F, L0, gram_l if projection else None, cross if projection else None)


def _krylov_config(config: SolverConfig, backend: str) -> SolverConfig:
    if config.backend == "direct_lu":
        return config
    return SolverConfig(backend, config.tol, config.restart, config.max_iter, config.preconditioner, config.relative)


def solve_splitting_damped(
    disc,
    beta="auto",
    use_projection: bool = False,
    tolerance: float = 1e-9,
    max_iter: int = 200_000,
    stab_rhs: str = "f1",
    tau_mode: str = "coth",
    formula: str = "lemma4",
    variant: str = "linear",
    u0: np.ndarray | None = None,
    record_trajectory: bool = False,
    H=None,
    ratio=None,
    name: str | None = None,
) -> tuple[MethodReport, SplittingState]:
    """Damped splitting iterations.

    Parameters
    ----------
    disc : Discretization or ProblemSpec
    beta : "auto" or float
        ``auto`` minimizes the contraction factor (see :func:`beta_optimize`).
    use_projection : bool
        Replace the lagged transport term by its value at the projection of
        the even iterate onto the multiscale space (Laplacian inner product).
    tolerance : float
        Bound on the Euclidean norm of the residual of the coarse equation.
    stab_rhs : {"f1", "f"}
        Source in the streamline load: the full right-hand side including the
        transport of ``u_e - u_o`` (``f1``) or the bare source ``f``.
    tau_mode : {"coth", "simple"}
        Stabilization parameter, computed with ``alpha_spl``.
    u0 : ndarray, optional
        Initial even iterate (coarse interior coefficients); the initial odd
        iterate is then obtained from the multiscale step. Defaults to zero.
    record_trajectory : bool
        Keep a copy of every even iterate.

    Returns
    -------
    report : MethodReport
    state : SplittingState
    """
    disc = as_discretization(disc, H, ratio)
    p = disc.problem
    rho = None
    if beta == "auto":
        beta, rho = beta_for_problem(disc, formula)
    beta = float(beta)
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if rho is None and beta > 0:
        rho = float(contraction_factor(
            beta, (p.c_omega + disc.H / 2) * p.b_size * p.A.sup_deviation(p.spl), p.spl, p.A.alpha1))

    space, build_time = disc.space("diffusion_only", variant)
    off, on = Timer(), Timer()
    off.elapsed = build_time
    config = disc.solver
    with off:
        tau = fem.tau_field(tau_mode, p.spl, p.b, disc.H, p.tau_norm).tau
        ops = splitting_operators(disc, space, beta, stab_rhs, tau, use_projection)
        coarse_solver = LinearSolver(ops.M0, _krylov_config(config, "gmres"))
        ms_solver = LinearSolver(ops.K2, _krylov_config(config, "cg"))
        proj_solver = LinearSolver(ops.gram, _krylov_config(config, "cg")) if use_projection else None

    def lag(ue):
        if proj_solver is None:
            return ops.M2 @ ue
        return ops.M3 @ proj_solver.solve(ops.cross @ ue)

    def rhs(ue, uo):
        r = ops.F + lag(ue) - ops.M3 @ uo
        if beta:
            r = r + beta * (ops.B @ uo)
        return r

    n0 = ops.M0.shape[0]

    def iterate():
        ue = np.zeros(n0) if u0 is None else np.array(u0, dtype=float)
        uo = np.zeros(space.n_dofs) if u0 is None else ms_solver.solve(ops.R2 @ ue)
        state = SplittingState(ue, uo, beta=beta, projection=use_projection, rho=rho)
        if record_trajectory:
            state.trajectory.append(ue.copy())
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(1, max_iter + 1):
                ue_new = coarse_solver.solve(rhs(ue, uo), ue)
                uo_new = ms_solver.solve(ops.R2 @ ue_new, uo)
                res = float(np.linalg.norm(ops.M0 @ ue_new - rhs(ue_new, uo_new)))
                d = ue_new - ue
                inc = float(math.sqrt(max(d @ (ops.L0 @ d), 0.0))) if np.all(np.isfinite(d)) else math.inf
                ue, uo = ue_new, uo_new
                state.n = n
                state.residuals.append(res)
                state.increments.append(inc)
                if record_trajectory:
                    state.trajectory.append(ue.copy())
                if not math.isfinite(res) or res > 1e150:
                    state.diverged = True
                    break
                if res < tolerance:
                    state.converged = True
                    break
        state.u_even, state.u_odd = ue, uo
        return state

    solves = []

    def run():
        st = iterate()
        solves.append(coarse_solver.iterations + ms_solver.iterations)
        return st

    state = timed_online(run, on)
    ue, uo = state.u_even, state.u_odd
    if not state.converged and not state.diverged:
        log.warning("splitting stopped after %d passes with residual %.3e", state.n, state.residuals[-1])
    label = name or ("Splitting" if beta == 0 and not use_projection else "Splitting-damped")
    report = MethodReport(
        label,
        space.fine_field(uo),
        uo,
        off.elapsed,
        on.elapsed,
        solves[0],
        splitting_iterations=state.n,
        conforming=space.conforming,
        extra={"beta": beta, "rho": rho, "tau": tau, "converged": state.converged,
               "residuals": state.residuals, "even": disc.interpolation @ ue},
    )
    return report, state


def solve_splitting(disc, tolerance: float = 1e-9, max_iter: int = 10_000, **kw) -> tuple[MethodReport, SplittingState]:
    """Undamped splitting iterations (``beta = 0``, no projection), started from zero by default."""
    kw.setdefault("name", "Splitting")
    return solve_splitting_damped(disc, 0.0, False, tolerance, max_iter, **kw)
