"""
Coarse-scale methods: P1 (plain, SUPG, upwind), MsFEM, Stab-MsFEM and
Adv-MsFEM.

Every method takes a :class:`~msfem_lab.problem.Discretization` and returns a
:class:`~msfem_lab.problem.MethodReport` whose fine field is stored in the
broken layout of the hierarchy, so conforming and nonconforming solutions are
compared with the same error routines.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import fem
from .linalg import LinearSolver, SolverConfig
from .problem import Discretization, MethodReport, ProblemSpec, Timer, timed_online

STABILIZATIONS = ("none", "supg", "upwind")


def as_discretization(obj, H: float | None = None, ratio: int | None = None, solver: SolverConfig | None = None):
    """Accept a :class:`Discretization` or build one from a problem and a coarse size."""
    if isinstance(obj, Discretization):
        return obj
    if isinstance(obj, ProblemSpec):
        if H is None:
            raise ValueError("a coarse mesh size H is required")
        return Discretization(obj, H, ratio, solver)
    raise TypeError(f"expected a Discretization or ProblemSpec, got {type(obj).__name__}")


def _coarse_solve(mat: sp.spmatrix, rhs: np.ndarray, config: SolverConfig, offline: Timer, online: Timer):
    """Factorize (offline) and solve (online); iterative backends use GMRES online."""
    cfg = config if config.backend == "direct_lu" else SolverConfig(
        "gmres", config.tol, config.restart, config.max_iter, config.preconditioner, config.relative
    )
    with offline:
        solver = LinearSolver(mat, cfg)
    first = []

    def run():
        x = solver.solve(rhs)
        first.append(solver.iterations)
        return x

    x = timed_online(run, online)
    return x, first[0]


def coarse_p1_forms(disc: Discretization, tau: float = 0.0):
    """Coarse P1 matrices on interior dofs: diffusion (cell-averaged A), convection, SUPG and loads."""
    p = disc.problem
    coarse = disc.coarse
    space = disc.coarse_space
    a_bar = fem.coarse_average(disc.hierarchy, disc.A)
    diff = space.restrict(fem.assemble_diffusion(coarse, a_bar))
    conv = space.restrict(fem.assemble_convection(coarse, p.b))
    load = space.restrict_vector(fem.assemble_load(coarse, p.f))
    if tau > 0:
        stab = space.restrict(fem.assemble_supg(coarse, p.b, tau))
        sload = space.restrict_vector(fem.assemble_supg_load(coarse, p.b, tau, p.f))
    else:
        stab = sp.csr_matrix(diff.shape)
        sload = np.zeros_like(load)
    return diff, conv, stab, load, sload


def solve_p1(disc, stabilization: str = "none", tau_mode: str = "coth", H=None, ratio=None) -> MethodReport:
    """Single-scale P1 method on the coarse mesh.

    The diffusion is integrated exactly against the constant P1 gradients,
    i.e. with the mean of ``A`` over each coarse cell.

    Parameters
    ----------
    disc : Discretization or ProblemSpec
    stabilization : {"none", "supg", "upwind"}
        ``supg`` uses ``tau_mode`` (default coth); ``upwind`` uses ``H / (2 |b|)``.
    """
    if stabilization not in STABILIZATIONS:
        raise ValueError(f"unknown stabilization {stabilization!r}")
    disc = as_discretization(disc, H, ratio)
    off, on = Timer(), Timer()
    with off:
        if stabilization == "none":
            tau = 0.0
        else:
            tau = disc.tau("simple" if stabilization == "upwind" else tau_mode)
        diff, conv, stab, load, sload = coarse_p1_forms(disc, tau)
        mat = diff + conv + stab
    x, its = _coarse_solve(mat, load + sload, disc.solver, off, on)
    name = {"none": "P1", "supg": "P1-SUPG", "upwind": "P1-Upwind"}[stabilization]
    return MethodReport(name, disc.interpolation @ x, x, off.elapsed, on.elapsed, its, extra={"tau": tau})


def _multiscale_solve(disc: Discretization, name: str, kind: str, variant: str, tau: float, ratio: float):
    space, build_time = disc.space(kind, variant, ratio)
    off, on = Timer(), Timer()
    off.elapsed = build_time
    p = disc.problem
    with off:
        form = disc.broken("diffusion") + disc.broken("convection")
        rhs_b = disc.broken_load("f")
        if tau > 0:
            form = form + disc.broken("supg", tau)
            rhs_b = rhs_b + disc.broken_load("supg", tau)
        pr = space.prolongation
        mat = (pr.T @ (form @ pr)).tocsr()
        rhs = pr.T @ rhs_b
    x, its = _coarse_solve(mat, rhs, disc.solver, off, on)
    return MethodReport(
        name,
        space.fine_field(x),
        x,
        off.elapsed,
        on.elapsed,
        its,
        conforming=space.conforming,
        extra={"tau": tau, "variant": variant, "local_iterations": space.local_iterations,
               "max_local_residual": space.max_local_residual, "b": p.b},
    )


def solve_msfem(disc, variant: str = "linear", ratio: float = 3.0, H=None, h_ratio=None) -> MethodReport:
    """Galerkin MsFEM with diffusion-only basis functions."""
    disc = as_discretization(disc, H, h_ratio)
    return _multiscale_solve(disc, "MsFEM", "diffusion_only", variant, 0.0, ratio)


def solve_stab_msfem(disc, tau_mode: str = "coth", variant: str = "linear", ratio: float = 3.0, H=None, h_ratio=None) -> MethodReport:
    """MsFEM with the streamline term ``sum_K (tau b . grad u, b . grad v)_K`` and its load."""
    disc = as_discretization(disc, H, h_ratio)
    tau = disc.tau(tau_mode) if tau_mode != "none" else 0.0
    return _multiscale_solve(disc, "Stab-MsFEM", "diffusion_only", variant, tau, ratio)


def solve_adv_msfem(disc, variant: str = "linear", ratio: float = 3.0, H=None, h_ratio=None) -> MethodReport:
    """Galerkin MsFEM whose basis functions solve the local advection-diffusion problems."""
    disc = as_discretization(disc, H, h_ratio)
    kind = "advection_diffusion" if np.any(disc.problem.velocity) else "diffusion_only"
    suffix = {"linear": "lin", "oversampling": "OS", "crouzeix_raviart": "CR"}.get(variant, variant)
    return _multiscale_solve(disc, f"Adv-MsFEM-{suffix}", kind, variant, 0.0, ratio)


def coarse_matrix(disc: Discretization, method: str, variant: str = "linear", tau_mode: str = "coth") -> sp.csr_matrix:
    """Coarse stiffness matrix of a method (without solving), for inspection and tests."""
    if method in ("P1", "P1-SUPG", "P1-Upwind"):
        tau = 0.0 if method == "P1" else disc.tau("simple" if method == "P1-Upwind" else tau_mode)
        diff, conv, stab, _, _ = coarse_p1_forms(disc, tau)
        return (diff + conv + stab).tocsr()
    kind = "advection_diffusion" if method == "Adv-MsFEM" else "diffusion_only"
    space, _ = disc.space(kind, variant)
    form = disc.broken("diffusion") + disc.broken("convection")
    if method == "Stab-MsFEM":
        form = form + disc.broken("supg", disc.tau(tau_mode))
    pr = space.prolongation
    return (pr.T @ (form @ pr)).tocsr()
