"""Structural property suite; runs standalone with ``pytest tests/test_properties.py``."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msfem_lab import analysis, basis, bench, fem
from msfem_lab.mesh import build_structured, layer_mask, refine
from msfem_lab.problem import ProblemSpec, required_fine_size, solve_reference

coef = st.tuples(st.floats(0.01, 1.0), st.floats(0.0, 0.9), st.sampled_from([1 / 2, 1 / 4, 1 / 8, 1 / 16]))


@pytest.fixture(scope="module")
def hierarchy():
    return refine(build_structured(2, 1.0, 4), 8)


@settings(max_examples=12, deadline=None)
@given(coef, st.sampled_from(basis.VARIANTS), st.booleans())
def test_partition_of_unity(hierarchy, c, variant, transport):
    A = fem.OscillatoryDiffusion(*c)
    space = basis.build_space(hierarchy, A, (1.0, 1.0) if transport else None, variant)
    assert space.partition_of_unity_error() <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(2, 10), coef)
def test_diffusion_symmetric_positive_definite(dim, n, c):
    m = build_structured(dim, 1.0, n)
    a = fem.P1Space(m).restrict(fem.assemble_diffusion(m, fem.OscillatoryDiffusion(*c))).toarray()
    assert np.abs(a - a.T).max() <= 1e-15 * np.abs(a).max()
    np.linalg.cholesky(a)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(2, 12), st.floats(-4, 4), st.floats(-4, 4))
def test_convection_skew_symmetric(dim, n, b1, b2):
    m = build_structured(dim, 1.0, n)
    b = (b1,) if dim == 1 else (b1, b2)
    c = fem.P1Space(m).restrict(fem.assemble_convection(m, b)).toarray()
    assert np.abs(c + c.T).max() <= 1e-13


@settings(max_examples=8, deadline=None)
@given(coef, st.floats(0.0, 3.0), st.integers(0, 2**31 - 1), st.sampled_from(["a1", "a2"]))
def test_projector_idempotent_and_contracting(hierarchy, c, beta, seed, form_name):
    A = fem.OscillatoryDiffusion(*c)
    space = basis.build_space(hierarchy, A)
    form = basis.projection_form(space, form_name, beta, c[0], A)
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(space.n_dofs)
    assert np.abs(basis.project_onto_space(space.fine_field(coeffs), space, form) - coeffs).max() <= 1e-11 * max(
        1, np.abs(coeffs).max())
    v = hierarchy.to_broken(rng.standard_normal(hierarchy.fine.n_vertices))
    pv = space.fine_field(basis.project_onto_space(v, space, form))
    assert pv @ (form @ pv) <= (v @ (form @ v)) * (1 + 1e-10)


@pytest.fixture(scope="module")
def reference_field():
    m = build_structured(2, 1.0, 32)
    p = ProblemSpec(alpha=1 / 32, delta=0.5, eps=1 / 4)
    return m, solve_reference(p, m), layer_mask(m, p.peclet)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e6), st.floats(0.01, 10.0))
def test_error_metrics(reference_field, seed, scale, amp):
    m, u_ref, mask = reference_field
    u = u_ref + amp * np.random.default_rng(seed).standard_normal(u_ref.size) * 1e-2
    e = analysis.compute_errors(u, u_ref, mask, m)
    assert e.e_H1**2 == pytest.approx(e.e_H1_in**2 + e.e_H1_out**2, rel=1e-12)
    s = analysis.compute_errors(scale * u, scale * u_ref, mask, m)
    assert np.allclose(s.row(), e.row(), rtol=1e-10)
    two = analysis.compute_errors(2 * u_ref, u_ref, mask, m)
    assert [two.e_L2, two.e_H1, two.e_Linf] == pytest.approx([1.0, 1.0, 1.0], rel=1e-12)
    assert analysis.compute_errors(u_ref, u_ref, mask, m).row() == [0.0] * 5


def test_csv_determinism(tmp_path):
    c = bench.ExperimentConfig(alpha=1 / 16, eps=1 / 8, H=1 / 4, ratio=8, warmup=False,
                               methods=("P1-Upwind", "Stab-MsFEM", "Adv-MsFEM-CR", "Splitting"))
    first = bench.write_run(bench.run(c), tmp_path / "a")
    second = bench.write_run(bench.run(c), tmp_path / "b")
    for key in ("errors", "config"):
        assert first[key].read_bytes() == second[key].read_bytes()


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(0.0, 0.9), st.sampled_from([1 / 4, 1 / 8, 1 / 16, 1 / 32]),
       st.sampled_from([1 / 2, 1 / 4, 1 / 8]))
def test_auto_h_constraints(alpha, delta, eps, H):
    p = ProblemSpec(alpha=alpha, delta=delta, eps=eps)
    from msfem_lab.problem import InfeasibleMeshError, auto_ratio

    try:
        r = auto_ratio(p, H)
    except InfeasibleMeshError as exc:
        assert exc.required_h == required_fine_size(p)
        return
    h = H / r
    assert h <= eps / 16 * (1 + 1e-12)
    assert p.peclet * h <= 1 / (4 * math.sqrt(2)) * (1 + 1e-12)
    if p.peclet > 1:
        assert h <= p.layer_width / 16 * (1 + 1e-12)
    assert r == 1 or H / (r / 2) > required_fine_size(p)


def test_auto_h_asserted_in_run():
    c = bench.ExperimentConfig(alpha=1 / 8, eps=1 / 4, H=1 / 4, ratio=None, methods=("P1",), warmup=False)
    rec = bench.run(c)
    assert rec.constraints_ok and bench.check_fine_mesh(c.problem, rec.h)
