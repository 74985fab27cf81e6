import math

import numpy as np
import pytest

from msfem_lab import analysis
from msfem_lab.methods import solve_adv_msfem, solve_msfem, solve_p1
from msfem_lab.mesh import build_structured, layer_mask
from msfem_lab.problem import Discretization, ProblemSpec, solve_reference


@pytest.fixture(scope="module")
def field():
    m = build_structured(2, 1.0, 32)
    u_ref = solve_reference(ProblemSpec(alpha=1 / 32, delta=0.5, eps=1 / 4), m)
    u = u_ref + 0.01 * np.sin(7 * m.points[:, 0]) * m.points[:, 1]
    return m, u, u_ref, layer_mask(m, 32.0)


def test_identical_fields(field):
    m, _, u_ref, mask = field
    e = analysis.compute_errors(u_ref, u_ref, mask, m)
    assert e.row() == [0.0] * 5


def test_homogeneity(field):
    m, _, u_ref, mask = field
    e = analysis.compute_errors(2 * u_ref, u_ref, mask, m)
    assert e.e_L2 == pytest.approx(1) and e.e_H1 == pytest.approx(1) and e.e_Linf == pytest.approx(1)


def test_pythagoras_and_scale_invariance(field):
    m, u, u_ref, mask = field
    e = analysis.compute_errors(u, u_ref, mask, m)
    assert e.e_H1**2 == pytest.approx(e.e_H1_in**2 + e.e_H1_out**2, rel=1e-12)
    s = analysis.compute_errors(1e3 * u, 1e3 * u_ref, mask, m)
    assert np.allclose(s.row(), e.row(), rtol=1e-12)


def test_zero_reference(field):
    m, u, _, mask = field
    with pytest.raises(analysis.UndefinedErrorError):
        analysis.compute_errors(u, np.zeros_like(u), mask, m)


def test_broken_layout(small):
    rep = solve_adv_msfem(small, "crouzeix_raviart")
    e = analysis.report_errors(rep, small)
    assert e.broken and 0 < e.e_H1 < 1
    conf = solve_msfem(small)
    e2 = analysis.report_errors(conf, small)
    # broken and conforming norms agree on a conforming field
    c = analysis.compute_errors(small.hierarchy.to_conforming(conf.u), small.reference, small.mask, small.fine)
    assert np.allclose(e2.row(), c.row(), rtol=1e-10)


def test_mismatched_fields():
    m = build_structured(2, 1.0, 4)
    with pytest.raises(ValueError):
        analysis.compute_errors(np.ones(3), np.ones(m.n_vertices), None, m)


@pytest.mark.parametrize("p,c", [(1.0, 1.0), (2.0, 3.0), (0.5, 0.1)])
def test_estimate_rate_exact(p, c):
    Hs = [1 / 8, 1 / 16, 1 / 32, 1 / 64]
    assert analysis.estimate_rate([(H, c * H**p) for H in Hs]) == pytest.approx(p, abs=1e-12)


def test_estimate_rate_errors():
    with pytest.raises(ValueError):
        analysis.estimate_rate([(0.5, 1.0), (0.25, 0.5)])
    with pytest.raises(ValueError):
        analysis.estimate_rate([(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)])


def test_msfem_rate_1d():
    p = ProblemSpec(dim=1, alpha=1 / 16, delta=0.5, eps=1 / 1024, b=(1.0,))
    samples = []
    for H in (1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128):
        d = Discretization(p, H, ratio=int(2**16 * H))
        samples.append((H, analysis.h1_seminorm(d.hierarchy, solve_msfem(d).u - d.reference_broken)))
    assert 0.8 <= analysis.estimate_rate(samples) <= 1.2


def test_splitting_conditions():
    ref = analysis.check_splitting_conditions(ProblemSpec(alpha=1 / 128, delta=0.5, eps=1 / 64))
    assert ref.rho_minus == pytest.approx(128)
    matched = analysis.check_splitting_conditions(ProblemSpec(dim=1, alpha=0.1, delta=0.0, eps=1.0, b=(1.0,)))
    assert matched.rho == 0 and matched.sufficient
    div = analysis.check_splitting_conditions(
        ProblemSpec(dim=1, alpha=0.01, delta=0.0, eps=1.0, b=(1.0,), alpha_spl=0.05))
    assert div.divergence_condition
    assert div.growth_ratio == pytest.approx(80 / math.sqrt(400 + 4 * math.pi**2), rel=1e-12)
    # iterate the Fourier coefficients of (u_2n)' under -lambda M
    q = 20.0
    lam = q * (1 - 0.05 / 0.01)
    k = 2 * math.pi
    m = np.array([[-q, -k], [k, -q]]) / (q**2 + k**2)
    v = np.array([0.0, -k])
    norms = []
    for _ in range(30):
        v = -lam * (m @ v)
        norms.append(np.linalg.norm(v))
    assert analysis.growth_ratio(norms) == pytest.approx(div.growth_ratio, rel=1e-10)


def test_growth_ratio():
    assert analysis.growth_ratio([3.0**k for k in range(12)]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        analysis.growth_ratio([1.0, 2.0])


def test_theorem3_example():
    p = ProblemSpec(dim=1, alpha=1 / 64, delta=0.5, eps=1 / 128, b=(4.0,))
    H = 1 / 16
    d = Discretization(p, H, ratio=2048)
    err = analysis.h1_seminorm(d.hierarchy, solve_msfem(d).u - d.reference_broken)
    check, = analysis.verify_theorem_bounds(3, [dict(problem=p, H=H, h=d.h, error=err)])
    assert check.applicable and check.satisfied and check.lhs > 0


def test_theorem6_constant_coefficient():
    p = ProblemSpec(dim=1, alpha=1 / 64, delta=0.0, eps=1.0, b=(1.0,))
    rows = []
    for H in (1 / 8, 1 / 16, 1 / 32):
        d = Discretization(p, H, ratio=int(4096 * H))
        rows.append(dict(problem=p, H=H, h=d.h, error=analysis.h1_seminorm(d.hierarchy, solve_adv_msfem(d).u - d.reference_broken)))
    checks = analysis.verify_theorem_bounds(6, rows)
    assert all(c.satisfied for c in checks)
    assert checks[-1].rhs < checks[0].rhs


def test_fitted_constants():
    p = ProblemSpec(dim=1, alpha=1 / 512, delta=0.5, eps=1 / 256, b=(1.0,))
    rows = [dict(problem=p, H=H, h=1e-4, error=0.1 * analysis.bound_theorem4(p, H)) for H in (1 / 8, 1 / 16)]
    checks = analysis.verify_theorem_bounds(4, rows)
    c, spread = analysis.constant_spread(checks)
    assert c == pytest.approx(0.1) and spread == pytest.approx(1.0) and all(k.satisfied for k in checks)


def test_inapplicable_not_failure():
    p = ProblemSpec(dim=1, alpha=1.0, delta=0.0, eps=1.0, b=(1.0,))
    check, = analysis.verify_theorem_bounds(4, [dict(problem=p, H=1 / 8, h=1e-3, error=1.0)])
    assert not check.applicable
    with pytest.raises(ValueError):
        analysis.verify_theorem_bounds(7, [])


def test_prop2_and_envelope():
    p = ProblemSpec(dim=1, alpha=1 / 64, delta=0.5, eps=1 / 32, b=(1.0,))
    m = build_structured(1, 1.0, 4096)
    u = solve_reference(p, m)
    assert analysis.h1_seminorm(m, u) <= analysis.bound_prop2(p)
    env = analysis.max_principle_envelope(p, m.points[:, 0])
    assert np.all(u <= env + 1e-12)
    assert env.max() <= p.A.alpha2 / (p.A.alpha1 * 1.0) + 1e-12


def test_source_norm():
    p = ProblemSpec(dim=1, alpha=0.1, delta=0.0, eps=1.0, b=(1.0,), f=lambda x: np.cos(2 * np.pi * x[..., 0]))
    assert analysis.source_norm(p) == pytest.approx(math.sqrt(0.5), rel=1e-10)
    assert analysis.source_norm(p.with_(f=2.0)) == pytest.approx(2.0)


def test_exact_errors_1d_splits():
    from msfem_lab.problem import exact_solution_1d

    d = Discretization(ProblemSpec(dim=1, alpha=1 / 256, delta=0.0, eps=1.0, b=(1.0,)), 1 / 16, ratio=64)
    e = analysis.exact_errors_1d(d.fine, d.hierarchy.to_conforming(solve_p1(d).u), exact_solution_1d(1 / 256, 1.0),
                                 mask=d.mask)
    assert e["e_H1"] ** 2 == pytest.approx(e["e_H1_in"] ** 2 + e["e_H1_out"] ** 2, rel=1e-12)
    assert e["e_H1_in_additive"] == pytest.approx(e["e_H1"] - e["e_H1_out"])
