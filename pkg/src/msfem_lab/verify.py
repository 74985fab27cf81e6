"""
Numerical verification of the theoretical statements: 1D closed forms,
splitting convergence and divergence, the 1D error bounds and convergence
rates.

Each check returns raw measurements; pass/fail thresholds belong to the
caller (the ``verify-theory`` command and the acceptance tests).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .mesh import build_structured
from .methods import coarse_matrix, solve_adv_msfem, solve_msfem, solve_p1, solve_stab_msfem
from .problem import Discretization, ProblemSpec, adv_msfem_1d_closed_form, exact_solution_1d, solve_reference
from .splitting import solve_splitting, solve_splitting_damped


@dataclass
class Measurement:
    """Named measured values of one check, with free-form details."""

    name: str
    values: dict
    details: dict = field(default_factory=dict)


def _tridiag(n, sub, diag, sup):
    return np.diag(np.full(n, diag)) + np.diag(np.full(n - 1, sub), -1) + np.diag(np.full(n - 1, sup), 1)


def closed_form_1d(n_draws: int = 10, seed: int = 0, ratio: int = 8192) -> Measurement:
    """Compare assembled 1D coarse matrices with the closed-form tridiagonal stencil.

    Draws ``(alpha, b, H)`` with ``|b| H / alpha`` uniform in ``[1, 50]``.
    Deviations are entrywise and scaled by the largest stencil entry, since
    the far off-diagonal entry can be as small as ``exp(-50)``.
    """
    rng = np.random.default_rng(seed)
    adv, supg, draws = [], [], []
    for _ in range(n_draws):
        H = float(rng.choice([1 / 4, 1 / 8]))
        s = rng.uniform(1.0, 50.0)
        b = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 4.0))
        alpha = abs(b) * H / s
        disc = Discretization(ProblemSpec(dim=1, alpha=alpha, delta=0.0, eps=1.0, b=(b,)), H, ratio=ratio)
        m_adv = coarse_matrix(disc, "Adv-MsFEM").toarray()
        m_supg = coarse_matrix(disc, "P1-SUPG", tau_mode="coth").toarray()
        ref = _tridiag(m_adv.shape[0], *adv_msfem_1d_closed_form(alpha, b, H))
        scale = np.abs(ref).max()
        adv.append(np.abs(m_adv - ref).max() / scale)
        supg.append(np.abs(m_supg - ref).max() / scale)
        draws.append((alpha, b, H))
    return Measurement("closed_form_1d", {"adv_msfem": max(adv), "p1_supg": max(supg)},
                       {"draws": draws, "adv_per_draw": adv, "supg_per_draw": supg})


def splitting_matched(H: float = 1 / 16, ratio: int = 8) -> Measurement:
    """Constant diffusion equal to ``alpha_spl``: the splitting solves the problem in one pass."""
    disc = Discretization(ProblemSpec(dim=1, alpha=1 / 64, delta=0.0, eps=1.0, b=(1.0,)), H, ratio=ratio)
    _, state = solve_splitting(disc)
    return Measurement("splitting_matched", {"passes": state.n, "residual": state.residuals[0]})


def splitting_divergence(H: float = 1 / 64, ratio: int = 4, passes: int = 30) -> Measurement:
    """Growth of the undamped splitting for constant ``A`` when the divergence condition holds.

    ``A = 0.01``, ``alpha_spl = 0.05``, ``b = 1``, ``f = 0`` and initial even iterate
    ``cos(2 pi x) - 1``; the measured ratio is the geometric mean of consecutive
    residual ratios after a burn-in.
    """
    problem = ProblemSpec(dim=1, alpha=0.01, delta=0.0, eps=1.0, b=(1.0,), f=0.0, alpha_spl=0.05)
    cond = analysis.check_splitting_conditions(problem)
    disc = Discretization(problem, H, ratio=ratio)
    x = disc.coarse.points[disc.coarse.interior, 0]
    _, state = solve_splitting(disc, u0=np.cos(2 * np.pi * x) - 1, max_iter=passes)
    measured = analysis.growth_ratio(state.residuals, burn_in=10)
    return Measurement("splitting_divergence",
                       {"measured": measured, "predicted": cond.growth_ratio,
                        "condition": cond.divergence_condition, "diverging": state.residuals[-1] > state.residuals[0]},
                       {"residuals": state.residuals})


def splitting_damped(disc: Discretization, burn_in: int = 5) -> Measurement:
    """Damped splitting with the optimal ``beta`` against the undamped one on the same discretization.

    The contraction is the largest ratio of consecutive energy increments of
    the even iterates after ``burn_in`` passes.
    """
    _, naive = solve_splitting(disc)
    rep, damped = solve_splitting_damped(disc, "auto")
    inc = np.asarray(damped.increments)
    ratios = inc[burn_in + 1:] / inc[burn_in:-1]
    return Measurement("splitting_damped", {
        "beta": rep.extra["beta"],
        "rho": rep.extra["rho"],
        "converged": damped.converged and naive.converged,
        "naive_iterations": naive.n,
        "damped_iterations": damped.n,
        "iteration_ratio": damped.n / naive.n,
        "contraction": float(ratios.max()) if ratios.size else math.nan,
    })


def _seminorm_error(report, disc: Discretization) -> float:
    return analysis.h1_seminorm(disc.hierarchy, report.u - disc.reference_broken)


def _random_problem(rng) -> ProblemSpec:
    alpha = 10 ** rng.uniform(-3.0, -1.2)
    delta = rng.uniform(0.0, 0.9)
    eps = 1 / 2 ** int(rng.integers(2, 7))
    b = rng.uniform(0.5, 4.0)
    return ProblemSpec(dim=1, alpha=alpha, delta=delta, eps=eps, b=(b,))


def theorem_bounds(n_draws: int = 20, seed: int = 0, fine_cells: int = 2**15) -> Measurement:
    """Explicit-constant bounds for MsFEM and Adv-MsFEM on random 1D draws.

    The error is the H1 seminorm against a fine P1 reference with
    ``fine_cells`` cells; draws that violate the hypotheses are redrawn.
    """
    rng = np.random.default_rng(seed)
    ms, adv = [], []
    while len(ms) < n_draws:
        p = _random_problem(rng)
        H = 1 / 2 ** int(rng.integers(3, 7))
        if not analysis.theorem_hypotheses(p, 3, H):
            continue
        disc = Discretization(p, H, ratio=int(fine_cells * H))
        ms.append(dict(problem=p, H=H, h=disc.h, error=_seminorm_error(solve_msfem(disc), disc)))
        adv.append(dict(problem=p, H=H, h=disc.h, error=_seminorm_error(solve_adv_msfem(disc), disc)))
    c3 = analysis.verify_theorem_bounds(3, ms)
    c6 = analysis.verify_theorem_bounds(6, adv)
    return Measurement("theorem_bounds", {
        "msfem_satisfied": sum(c.satisfied for c in c3),
        "adv_satisfied": sum(c.satisfied for c in c6),
        "draws": n_draws,
        "msfem_worst_ratio": max(c.lhs / c.rhs for c in c3),
        "adv_worst_ratio": max(c.lhs / c.rhs for c in c6),
    }, {"msfem": c3, "adv": c6})


def zero_mean_source(x: np.ndarray) -> np.ndarray:
    """``cos(2 pi x)``: its reduced transport solution vanishes at both ends, so no outflow layer forms."""
    return np.cos(2 * np.pi * np.asarray(x)[..., 0])


LAYER_FREE_PROBLEM = ProblemSpec(dim=1, alpha=5 / 128, delta=0.9, eps=1 / 256, b=(1.0,), f=zero_mean_source)


def stabilized_constants(problem: ProblemSpec | None = None, Hs=(1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128),
                         fine_cells: int = 2**15) -> Measurement:
    """Fitted constants of the Stab-MsFEM bounds (``tau = H / (2|b|)``) across ``H``.

    The default problem (constant source, hence an outflow layer narrower than
    every ``H``) satisfies ``|b| H / (2 alpha1) >= 1`` for every ``H``, as does
    :data:`LAYER_FREE_PROBLEM`.
    """
    p = problem or ProblemSpec(dim=1, alpha=1 / 512, delta=0.5, eps=1 / 256, b=(1.0,))
    rows = []
    for H in Hs:
        disc = Discretization(p, H, ratio=int(fine_cells * H))
        rows.append(dict(problem=p, H=H, h=disc.h, error=_seminorm_error(solve_stab_msfem(disc, "simple"), disc)))
    out, details = {}, {}
    for th in (4, 5):
        checks = analysis.verify_theorem_bounds(th, rows)
        c, spread = analysis.constant_spread(checks)
        out[f"theorem{th}_constant"] = c
        out[f"theorem{th}_spread"] = spread
        details[f"theorem{th}"] = checks
    out["applicable"] = all(analysis.theorem_hypotheses(p, 4, H) for H in Hs)
    return Measurement("stabilized_constants", out, details)


def stability_bound(n_draws: int = 20, seed: int = 0, n_cells: int = 2**15) -> Measurement:
    """H1 stability bound and maximum-principle envelope of the 1D solution on random draws."""
    rng = np.random.default_rng(seed)
    mesh = build_structured(1, 1.0, n_cells)
    x = mesh.points[:, 0]
    worst_ratio, worst_excess, count = 0.0, -math.inf, 0
    while count < n_draws:
        p = _random_problem(rng)
        if rng.random() < 0.5:
            p = p.with_(b=(-p.b[0],))
        if not analysis.theorem_hypotheses(p, "prop2", 1.0):
            continue
        u = solve_reference(p, mesh)
        worst_ratio = max(worst_ratio, analysis.h1_seminorm(mesh, u) / analysis.bound_prop2(p))
        env = analysis.max_principle_envelope(p, x)
        worst_excess = max(worst_excess, float(np.max(u - env)))
        count += 1
    return Measurement("stability_bound", {"worst_ratio": worst_ratio, "envelope_excess": worst_excess, "draws": count})


def supg_rate(alpha: float = 1 / 16, Hs=(1 / 16, 1 / 32, 1 / 64, 1 / 128, 1 / 256)) -> Measurement:
    """Slope of the P1-SUPG H1-seminorm error against the exact 1D solution.

    With ``b = 1`` and ``alpha = 1/16`` every mesh has ``Pe H <= 1/2``.
    """
    p = ProblemSpec(dim=1, alpha=alpha, delta=0.0, eps=1.0, b=(1.0,))
    exact = exact_solution_1d(alpha, 1.0, 1.0, 1.0)
    samples = []
    for H in Hs:
        disc = Discretization(p, H, ratio=2)
        rep = solve_p1(disc, "supg")
        err = analysis.exact_errors_1d(disc.coarse, disc.coarse_space.extend(rep.coarse), exact)
        samples.append((H, err["H1_semi"]))
    return Measurement("supg_rate", {"slope": analysis.estimate_rate(samples),
                                     "max_peclet_H": p.peclet * max(Hs)}, {"samples": samples})
