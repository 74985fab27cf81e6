"""
Error metrics, convergence rates and numerical checks of the error bounds
and splitting convergence conditions.

Errors are relative to the reference solution and computed on the fine
mesh with exact P1 quadrature per fine element. Fields may be given on the
fine vertices (conforming) or in the broken layout of a hierarchy; in the
latter case all gradients are taken elementwise (broken H1 norm).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import fem
from .mesh import LayerMask, Mesh, MeshHierarchy

COLUMNS = ("e_L2", "e_H1", "e_Linf", "e_H1_in", "e_H1_out")


class UndefinedErrorError(ZeroDivisionError):
    """The reference solution has zero norm, so relative errors are undefined."""


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------


def cell_norms(geom: fem.CellGeometry, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell squared L2 norm and squared H1 seminorm of the P1 field with nodal values ``v``."""
    vals = np.asarray(v, dtype=float)[geom.cells]  # (n_cells, k)
    k = geom.cells.shape[1]
    d = k - 1
    s = vals.sum(axis=1)
    q = (vals**2).sum(axis=1)
    l2 = geom.measures * (q + s * s) / ((d + 1) * (d + 2))
    grad = np.einsum("ck,ckd->cd", vals, geom.gradients)
    h1 = geom.measures * (grad**2).sum(axis=1)
    return l2, h1


def _geometry_and_fields(u, u_ref, where):
    """Pick the geometry matching the layouts of ``u`` and ``u_ref``.

    Returns the geometry, both fields in its layout, the fine cell id of every
    geometry cell and whether the broken layout is used.
    """
    u = np.asarray(u, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if isinstance(where, MeshHierarchy):
        h = where
        if u.size == h.n_broken or u_ref.size == h.n_broken:
            if u.size == h.fine.n_vertices:
                u = h.to_broken(u)
            if u_ref.size == h.fine.n_vertices:
                u_ref = h.to_broken(u_ref)
            return fem.CellGeometry.broken(h), u, u_ref, h.broken_cell_ids, True
        where = h.fine
    if isinstance(where, Mesh):
        if u.size != where.n_vertices or u_ref.size != where.n_vertices:
            raise ValueError("fields do not live on the same fine mesh")
        return fem.CellGeometry.from_mesh(where), u, u_ref, np.arange(where.n_cells), False
    if isinstance(where, fem.CellGeometry):
        return where, u, u_ref, np.arange(where.cells.shape[0]), False
    raise TypeError("need a Mesh, MeshHierarchy or CellGeometry")


def h1_seminorm(where, v: np.ndarray) -> float:
    """(Broken) H1 seminorm of a fine P1 field."""
    geom, v, _, _, _ = _geometry_and_fields(v, v, where)
    return float(math.sqrt(cell_norms(geom, v)[1].sum()))


def l2_norm(where, v: np.ndarray) -> float:
    geom, v, _, _, _ = _geometry_and_fields(v, v, where)
    return float(math.sqrt(cell_norms(geom, v)[0].sum()))


# --------------------------------------------------------------------------
# error bundle
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorBundle:
    """Relative errors of a numerical solution.

    Attributes
    ----------
    e_L2, e_H1, e_Linf : float
        Whole-domain relative errors (full H1 norm).
    e_H1_in, e_H1_out : float
        ``||u - u_ref||_{H1(region)} / ||u_ref||_{H1(domain)}`` inside and outside the layer.
    broken : bool
        Gradients were taken elementwise on the coarse elements.
    e_L2_in, e_L2_out : float
        L2 analogues of the layer split.

    Notes
    -----
    The layer split is Pythagorean: ``e_H1**2 = e_H1_in**2 + e_H1_out**2``.
    :attr:`e_H1_in_additive` gives the additive split ``e_H1 - e_H1_out``
    instead, which some tabulations report as the inside error.
    """

    e_L2: float
    e_H1: float
    e_Linf: float
    e_H1_in: float
    e_H1_out: float
    broken: bool = False
    e_L2_in: float = float("nan")
    e_L2_out: float = float("nan")

    @property
    def e_H1_in_additive(self) -> float:
        return self.e_H1 - self.e_H1_out

    @property
    def e_L2_in_additive(self) -> float:
        return self.e_L2 - self.e_L2_out

    def row(self) -> list[float]:
        """Values in the column order of :data:`COLUMNS`."""
        return [getattr(self, c) for c in COLUMNS]

    def as_dict(self) -> dict:
        return asdict(self)


def compute_errors(u, u_ref, mask: LayerMask | None, where, broken: bool | None = None) -> ErrorBundle:
    """Relative errors of ``u`` with respect to ``u_ref``.

    Parameters
    ----------
    u, u_ref : ndarray
        Fine nodal values, either on the fine vertices or in the broken layout.
    mask : LayerMask, optional
        Layer classification of the fine cells; without it the layer errors are NaN.
    where : Mesh or MeshHierarchy
        Fine mesh, or the hierarchy when any field uses the broken layout.
    broken : bool, optional
        Recorded in the bundle; defaults to whether the broken layout was used.

    Raises
    ------
    UndefinedErrorError
        If ``u_ref`` vanishes.
    """
    geom, u, u_ref, ids, used_broken = _geometry_and_fields(u, u_ref, where)
    e = u - u_ref
    l2e, h1e = cell_norms(geom, e)
    l2r, h1r = cell_norms(geom, u_ref)
    ref_l2 = math.sqrt(l2r.sum())
    ref_h1 = math.sqrt(l2r.sum() + h1r.sum())
    ref_inf = float(np.max(np.abs(u_ref)))
    if ref_h1 == 0.0 or ref_inf == 0.0:
        raise UndefinedErrorError("reference solution is zero; relative errors are undefined")
    full = l2e + h1e
    if mask is not None:
        inside = mask.inside[ids]
        e_in = math.sqrt(full[inside].sum()) / ref_h1
        e_out = math.sqrt(full[~inside].sum()) / ref_h1
        l2_in = math.sqrt(l2e[inside].sum()) / ref_l2
        l2_out = math.sqrt(l2e[~inside].sum()) / ref_l2
    else:
        e_in = e_out = l2_in = l2_out = float("nan")
    return ErrorBundle(
        e_L2=math.sqrt(l2e.sum()) / ref_l2,
        e_H1=math.sqrt(full.sum()) / ref_h1,
        e_Linf=float(np.max(np.abs(e))) / ref_inf,
        e_H1_in=e_in,
        e_H1_out=e_out,
        broken=used_broken if broken is None else broken,
        e_L2_in=l2_in,
        e_L2_out=l2_out,
    )


def report_errors(report, disc) -> ErrorBundle:
    """Fill ``report.errors`` against the reference solution of a discretization."""
    report.errors = compute_errors(report.u, disc.reference_broken, disc.mask, disc.hierarchy, not report.conforming)
    return report.errors


# --------------------------------------------------------------------------
# errors against a closed-form solution (1D)
# --------------------------------------------------------------------------


def exact_errors_1d(mesh: Mesh, u: np.ndarray, exact, n_gauss: int = 8, mask: LayerMask | None = None) -> dict:
    """Errors of a P1 field on a 1D mesh against a closed-form solution, by Gauss quadrature.

    ``exact`` must provide ``__call__`` and ``derivative``. Returns absolute and
    relative L2 / H1-seminorm / full H1 errors; with ``mask`` also the full H1
    error inside and outside the layer (relative). The ``*_additive`` entries
    are the whole-domain error minus the outside error.
    """
    if mesh.dim != 1:
        raise ValueError("closed-form errors are implemented for 1D meshes")
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    t = (xg + 1) / 2
    w = wg / 2
    a = mesh.points[mesh.cells[:, 0], 0]
    b = mesh.points[mesh.cells[:, 1], 0]
    hk = b - a
    x = a[:, None] + hk[:, None] * t[None, :]
    u = np.asarray(u, dtype=float)
    ua, ub = u[mesh.cells[:, 0]], u[mesh.cells[:, 1]]
    uh = ua[:, None] * (1 - t) + ub[:, None] * t
    duh = ((ub - ua) / hk)[:, None]
    ue = exact(x)
    due = exact.derivative(x)
    l2 = ((uh - ue) ** 2 * w).sum(axis=1) * hk
    h1 = ((duh - due) ** 2 * w).sum(axis=1) * hk
    rl2 = ((ue**2) * w).sum(axis=1) * hk
    rh1 = ((due**2) * w).sum(axis=1) * hk
    ref_full = math.sqrt(rl2.sum() + rh1.sum())
    out = {
        "L2": math.sqrt(l2.sum()),
        "H1_semi": math.sqrt(h1.sum()),
        "H1": math.sqrt(l2.sum() + h1.sum()),
        "e_L2": math.sqrt(l2.sum() / rl2.sum()),
        "e_H1": math.sqrt(l2.sum() + h1.sum()) / ref_full,
    }
    if mask is not None:
        inside = mask.inside
        full = l2 + h1
        out["e_H1_in"] = math.sqrt(full[inside].sum()) / ref_full
        out["e_H1_out"] = math.sqrt(full[~inside].sum()) / ref_full
        out["e_H1_in_additive"] = out["e_H1"] - out["e_H1_out"]
        out["e_L2_out"] = math.sqrt(l2[~inside].sum() / rl2.sum())
        out["e_L2_in_additive"] = out["e_L2"] - out["e_L2_out"]
    return out


# --------------------------------------------------------------------------
# rates
# --------------------------------------------------------------------------


def estimate_rate(samples) -> float:
    """Least-squares slope of ``log(error)`` against ``log(H)``.

    Parameters
    ----------
    samples : sequence of (H, error)
        At least three samples with distinct ``H``.
    """
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3 or arr.shape[1] != 2:
        raise ValueError("need at least three (H, error) samples")
    if np.any(arr <= 0):
        raise ValueError("mesh sizes and errors must be positive")
    if np.unique(arr[:, 0]).size != arr.shape[0]:
        raise ValueError("mesh sizes must be distinct")
    slope, _ = np.polyfit(np.log(arr[:, 0]), np.log(arr[:, 1]), 1)
    return float(slope)


# --------------------------------------------------------------------------
# splitting conditions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplittingConditions:
    """Convergence indicators of the undamped splitting.

    Attributes
    ----------
    rho : float
        ``C ||b|| / alpha1 * ||A - alpha_spl|| / alpha_spl``; the iterations provably converge when < 1.
    rho_minus : float
        ``C ||b|| / alpha1 * (a+ - a-) / (a+ + a-)``, the smallest ``rho`` over all ``alpha_spl``.
    sufficient : bool
        ``rho < 1``.
    divergence_condition : bool or None
        For constant ``A = alpha*`` in 1D: ``b / alpha_spl < b / (2 alpha*) - 2 pi^2 alpha* / b``.
    growth_ratio : float or None
        Predicted per-pass growth factor ``|lambda| / sqrt((b/alpha_spl)^2 + 4 pi^2)`` with
        ``lambda = (b / alpha_spl)(1 - alpha_spl / alpha*)``.
    """

    rho: float
    rho_minus: float
    sufficient: bool
    divergence_condition: bool | None
    growth_ratio: float | None


def check_splitting_conditions(problem) -> SplittingConditions:
    A = problem.A
    a = problem.spl
    bn = problem.b_size
    c = problem.c_omega
    rho = c * bn / A.alpha1 * A.sup_deviation(a) / a
    a_plus, a_minus = A.alpha2, A.alpha1
    rho_minus = c * bn / A.alpha1 * (a_plus - a_minus) / (a_plus + a_minus)
    cond = ratio = None
    if A.is_constant and problem.dim == 1 and bn > 0:
        b = abs(problem.b[0])
        star = A.alpha
        cond = b / a < b / (2 * star) - 2 * math.pi**2 * star / b
        lam = (b / a) * (1 - a / star)
        ratio = abs(lam) / math.sqrt((b / a) ** 2 + 4 * math.pi**2)
    return SplittingConditions(rho, rho_minus, rho < 1, cond, ratio)


def growth_ratio(history, burn_in: int = 5) -> float:
    """Geometric mean of consecutive ratios of a history after ``burn_in`` entries."""
    h = np.asarray(history, dtype=float)
    h = h[np.isfinite(h) & (h > 0)]
    if h.size < burn_in + 2:
        raise ValueError("history too short to estimate a growth ratio")
    tail = h[burn_in:]
    return float(np.exp(np.mean(np.diff(np.log(tail)))))


# --------------------------------------------------------------------------
# error bounds (1D)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    """Comparison of a measured error with a theoretical bound.

    Attributes
    ----------
    name : str
    lhs : float
        Measured H1-seminorm error.
    rhs : float
        Bound; for bounds with an unnamed constant this already includes the fitted constant.
    satisfied : bool
        ``lhs <= rhs (1 + 1e-9)``.
    constant : float
        Fitted constant (1 for explicit bounds).
    applicable : bool
        False when the hypotheses of the statement do not hold.
    H : float
    """

    name: str
    lhs: float
    rhs: float
    satisfied: bool
    constant: float = 1.0
    applicable: bool = True
    H: float = float("nan")


def _params(problem):
    A = problem.A
    b = abs(problem.b[0])
    L = problem.length
    return A.alpha1, A.alpha2, b, L, source_norm(problem)


def source_norm(problem, n_cells: int = 4096) -> float:
    """``||f||_{L2(0, L)}`` of a 1D source; callables are integrated by 4-point Gauss per cell."""
    L = problem.length
    if not callable(problem.f):
        return abs(float(problem.f)) * math.sqrt(L)
    xg, wg = np.polynomial.legendre.leggauss(4)
    edges = np.linspace(0.0, L, n_cells + 1)
    hk = np.diff(edges)
    x = edges[:-1, None] + hk[:, None] * (xg + 1) / 2
    vals = fem.evaluate(problem.f, x.reshape(-1, 1)).reshape(x.shape)
    return float(math.sqrt(((vals**2) * wg / 2).sum(axis=1) @ hk))


def bound_prop2(problem) -> float:
    """``sqrt(2 alpha2 L) / (alpha1 sqrt|b|) ||f||``."""
    a1, a2, b, L, fn = _params(problem)
    return math.sqrt(2 * a2 * L) / (a1 * math.sqrt(b)) * fn


def max_principle_envelope(problem, x: np.ndarray, refine: int = 8) -> np.ndarray:
    """Upper envelope ``(alpha2 f / |b|) int dy / A`` of the 1D solution for a constant ``f >= 0``.

    The integral runs from the inflow end: from 0 for ``b > 0`` and from ``L``
    for ``b < 0``. ``x`` must be sorted; the integral uses the trapezoidal
    rule on a grid ``refine`` times finer than ``x``.
    """
    if problem.dim != 1 or callable(problem.f) or problem.f < 0:
        raise ValueError("the envelope applies to 1D problems with a constant non-negative source")
    a1, a2, b, L, _ = _params(problem)
    x = np.asarray(x, dtype=float)
    t = np.linspace(0.0, 1.0, refine + 1)[:-1]
    pts = np.append((x[:-1, None] + np.diff(x)[:, None] * t).ravel(), x[-1])
    w = 1.0 / fem.evaluate(problem.A, pts[:, None])
    cum = np.concatenate([[0.0], np.cumsum(np.diff(pts) * (w[1:] + w[:-1]) / 2)])[::refine]
    if problem.b[0] < 0:
        cum = cum[-1] - cum
    return a2 * float(problem.f) / b * cum


def bound_theorem3(problem, H: float) -> float:
    a1, a2, b, L, fn = _params(problem)
    return H * (math.sqrt(a2 / a1) + b * H / a1) * (1 + math.sqrt(2 * a2 * L * b) / a1) * fn / a1


def bound_theorem6(problem, H: float) -> float:
    a1, a2, b, L, fn = _params(problem)
    return H * (math.sqrt(a2 / a1) + b * H / a1) * fn / a1


def bound_theorem4(problem, H: float) -> float:
    """Bound with unit constant."""
    a1, a2, b, L, fn = _params(problem)
    return H * (1 + math.sqrt(a2**2 / a1**2 + b * H / a1)) * (1 + math.sqrt(2 * a2 * L * b) / a1) * fn / a1


def discretization_term(problem, h: float) -> float:
    """Fine-scale term ``e_h`` of the fully discrete bound."""
    a1, a2, b, L, fn = _params(problem)
    dev = problem.A.derivative_sup() + b  # sup |A' - b|; A' takes both signs
    return h * (math.sqrt(a2 / a1) + b * h / a1) * (1 + math.sqrt(2 * a2 * L / b) * dev / a1) * fn / a1


def bound_theorem5(problem, H: float, h: float) -> float:
    """Bound with unit constant."""
    a1, a2, b, L, fn = _params(problem)
    s = math.sqrt(a2**2 / a1**2 + b * H / a1)
    return (1 + H * b / a1 + H * b / a1 * s) * discretization_term(problem, h) + bound_theorem4(problem, H)


def theorem_hypotheses(problem, theorem, H: float) -> bool:
    a1, a2, b, L, _ = _params(problem)
    if problem.dim != 1 or b == 0:
        return False
    if theorem == "prop2" or theorem == 3:
        return b * L / a2 >= 1
    if theorem in (4, 5):
        return b * L / a2 >= 1 and b * H / (2 * a1) >= 1
    return True


def verify_theorem_bounds(theorem, samples, problem=None) -> list[BoundCheck]:
    """Check an error bound on measured errors.

    Parameters
    ----------
    theorem : {3, 4, 5, 6}
        3: MsFEM; 6: Adv-MsFEM (explicit constants, checked directly).
        4, 5: Stab-MsFEM with ``tau = H / (2|b|)``, without and with the fine-scale
        term; the smallest constant making every sample satisfy the bound is
        fitted and reported on every check.
    samples : sequence of dict
        Each with keys ``problem``, ``H``, ``h`` and ``error`` (H1-seminorm error).

    Returns
    -------
    list of BoundCheck
        Samples violating the hypotheses are returned with ``applicable=False``.
    """
    if theorem not in (3, 4, 5, 6):
        raise ValueError("theorem must be 3, 4, 5 or 6")
    rows = []
    for s in samples:
        p = s.get("problem", problem)
        H, h, err = s["H"], s.get("h", 0.0), s["error"]
        ok = theorem_hypotheses(p, theorem, H)
        if theorem == 3:
            rhs = bound_theorem3(p, H)
        elif theorem == 6:
            rhs = bound_theorem6(p, H)
        elif theorem == 4:
            rhs = bound_theorem4(p, H)
        else:
            rhs = bound_theorem5(p, H, h)
        rows.append((p, H, err, rhs, ok))
    if theorem in (3, 6):
        return [BoundCheck(f"theorem{theorem}", e, r, e <= r * (1 + 1e-9), 1.0, ok, H) for _, H, e, r, ok in rows]
    applicable = [e / r for _, _, e, r, ok in rows if ok]
    c = max(applicable) if applicable else float("nan")
    return [BoundCheck(f"theorem{theorem}", e, c * r, e <= c * r * (1 + 1e-9), c, ok, H) for _, H, e, r, ok in rows]


def constant_spread(checks: list[BoundCheck]) -> tuple[float, float]:
    """Fitted constant and ``max / min`` of the per-sample ratios ``lhs / (rhs / C)``."""
    use = [c for c in checks if c.applicable]
    if not use:
        return float("nan"), float("nan")
    ratios = np.array([c.lhs / (c.rhs / c.constant) for c in use])
    return float(ratios.max()), float(ratios.max() / ratios.min())
