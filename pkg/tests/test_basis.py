import numpy as np
import pytest
import scipy.sparse as sp
from scipy.integrate import quad

from msfem_lab import basis, fem
from msfem_lab.linalg import SolverConfig
from msfem_lab.mesh import build_structured, refine
from msfem_lab.methods import coarse_matrix
from msfem_lab.problem import Discretization, ProblemSpec, adv_msfem_1d_closed_form

A_OSC = fem.OscillatoryDiffusion(1 / 16, 0.5, 1 / 8)


@pytest.fixture(scope="module")
def h2d():
    return refine(build_structured(2, 1.0, 4), 12)


def test_constant_coefficient_gives_hats(h2d):
    space = basis.build_space(h2d, 0.3)
    hats = fem.interpolation_matrix(h2d, broken=True)[:, h2d.coarse.interior]
    assert abs(space.prolongation - hats).max() < 1e-10
    fine = basis.broken_operator(h2d, 0.3)
    p1 = fem.P1Space(h2d.coarse).restrict(fem.assemble_diffusion(h2d.coarse, 0.3))
    assert abs(basis.coarse_assemble(space, fine) - p1).max() < 1e-10


def test_harmonic_profile_1d():
    h = refine(build_structured(1, 1.0, 4), 64)
    space = basis.build_space(h, A_OSC)
    k = 1
    lv = h.local_vertices[k]
    x = h.fine.points[lv, 0]
    mid = 0.5 * (x[1:] + x[:-1])
    w = np.diff(x) / fem.evaluate(A_OSC, mid[:, None])
    discrete = np.concatenate([[0.0], np.cumsum(w)]) / w.sum()
    left = int(np.argmin(h.coarse.points[h.coarse.cells[k], 0]))
    psi_right = space.local_basis[k, :, 1 - left]
    assert np.abs(psi_right - discrete).max() < 1e-12
    inv = lambda t: 1 / float(fem.evaluate(A_OSC, np.array([[t]]))[0])
    total = quad(inv, x[0], x[-1], limit=200)[0]
    exact = np.array([quad(inv, x[0], t, limit=200)[0] for t in x]) / total
    assert np.abs(psi_right - exact).max() < 1e-3


@pytest.mark.parametrize("variant", basis.VARIANTS)
@pytest.mark.parametrize("b", [None, (1.0, 1.0)])
def test_partition_of_unity(h2d, variant, b):
    space = basis.build_space(h2d, A_OSC, b, variant)
    assert space.partition_of_unity_error() <= 1e-10
    assert space.conforming == (variant == "linear")


def test_local_residual_iterative(h2d):
    space = basis.build_space(h2d, A_OSC, (1.0, 1.0), solver=SolverConfig("gmres", tol=1e-11))
    assert space.max_local_residual <= 1e-10 and space.local_iterations > 0
    ref = basis.build_space(h2d, A_OSC, (1.0, 1.0))
    assert abs(space.prolongation - ref.prolongation).max() < 1e-8


def test_linear_basis_boundary_values(h2d):
    space = basis.build_space(h2d, A_OSC, (1.0, 1.0))
    for k in (0, 7):
        bd = h2d.local_boundary(k)
        assert np.allclose(space.local_basis[k, bd], h2d.local_barycentric[k, bd], atol=1e-14)


def test_oversampling_vertex_values(h2d):
    space = basis.build_space(h2d, A_OSC, None, "oversampling")
    for k in range(h2d.coarse.n_cells):
        lam = h2d.local_barycentric[k]
        corners = np.flatnonzero(np.isclose(lam.max(axis=1), 1.0))
        assert len(corners) == 3
        assert np.allclose(space.local_basis[k, corners], lam[corners], atol=1e-10)


def test_identity_prolongation():
    h = refine(build_structured(2, 1.0, 3), 1)
    space = basis.build_space(h, 1.0)
    fine = basis.broken_operator(h, 1.0)
    expected = fem.P1Space(h.coarse).restrict(fem.assemble_diffusion(h.coarse, 1.0))
    assert abs(basis.coarse_assemble(space, fine) - expected).max() < 1e-12


def test_coarse_assemble_rejects_mismatch(h2d):
    space = basis.build_space(h2d, 1.0)
    with pytest.raises(ValueError):
        basis.coarse_assemble(space, sp.identity(5, format="csr"))


def test_adv_msfem_closed_form():
    alpha, b, H = 1 / 64, 1.0, 1 / 8
    disc = Discretization(ProblemSpec(dim=1, alpha=alpha, delta=0.0, eps=1.0, b=(b,)), H, ratio=4096)
    m = coarse_matrix(disc, "Adv-MsFEM").toarray()
    sub, diag, sup = adv_msfem_1d_closed_form(alpha, b, H)
    scale = abs(diag)
    assert abs(m[1, 0] - sub) / scale < 1e-6
    assert abs(m[1, 1] - diag) / scale < 1e-6
    assert abs(m[1, 2] - sup) / scale < 1e-6


def _interior_residual(h, op, values):
    nl = h.n_local
    worst = 0.0
    for k in range(h.coarse.n_cells):
        blk = op[k * nl:(k + 1) * nl][:, k * nl:(k + 1) * nl]
        inner = np.setdiff1d(np.arange(nl), h.local_boundary(k))
        r = (blk @ values[k])[inner]
        worst = max(worst, np.abs(r).max() / np.abs(blk).max())
    return worst


def test_stabilization_residual_void_on_adv_basis_1d():
    disc = Discretization(ProblemSpec(dim=1, alpha=1 / 64, delta=0.0, eps=1.0, b=(1.0,)), 1 / 8, ratio=64)
    h = disc.hierarchy
    op = (disc.broken("diffusion") + disc.broken("convection")).tocsr()
    adv, _ = disc.space("advection_diffusion")
    assert _interior_residual(h, op, adv.local_basis) < 1e-12
    assert _interior_residual(h, op, h.local_barycentric) > 1e-4


def _projection_setup(h2d):
    space = basis.build_space(h2d, A_OSC)
    form = basis.projection_form(space, "a1", 0.5, 1 / 16)
    return space, form


def test_projection_idempotent_and_zero(h2d):
    space, form = _projection_setup(h2d)
    c = np.random.default_rng(0).standard_normal(space.n_dofs)
    assert np.abs(basis.project_onto_space(space.fine_field(c), space, form) - c).max() < 1e-11
    assert np.all(basis.project_onto_space(np.zeros(h2d.n_broken), space, form) == 0)


def test_projection_galerkin_and_contraction(h2d):
    space, form = _projection_setup(h2d)
    a2 = basis.projection_form(space, "a2", 0.5, 1 / 16, A_OSC)
    rng = np.random.default_rng(1)
    lap = basis.projection_form(space, "a1", 0.0, 1.0)
    for _ in range(20):
        v = h2d.to_broken(rng.standard_normal(h2d.fine.n_vertices))
        for f in (form, a2):
            pv = space.fine_field(basis.project_onto_space(v, space, f))
            res = space.prolongation.T @ (f @ (v - pv))
            assert np.abs(res).max() <= 1e-10 * np.abs(space.prolongation.T @ (f @ v)).max()
            assert pv @ (f @ pv) <= (v @ (f @ v)) * (1 + 1e-10)
        pv = space.fine_field(basis.project_onto_space(v, space, form))
        assert pv @ (lap @ pv) <= (v @ (lap @ v)) * (1 + 1e-10)


def test_projection_form_errors(h2d):
    space = basis.build_space(h2d, 1.0)
    with pytest.raises(ValueError):
        basis.projection_form(space, "a2", 0.0, 1.0)
    with pytest.raises(ValueError):
        basis.projection_form(space, "a3", 0.0, 1.0)


def test_unknown_variant(h2d):
    with pytest.raises(ValueError):
        basis.build_space(h2d, 1.0, variant="mortar")


def test_cache_roundtrip(tmp_path, h2d):
    space = basis.build_space(h2d, A_OSC, (1.0, 1.0))
    path = tmp_path / "basis.npz"
    key = basis.save_space(space, path, 1 / 8)
    back = basis.load_space(path, h2d, 1 / 8, space.kind, space.variant)
    assert key == basis.cache_key(1 / 8, h2d.coarse.size, h2d.fine.size, space.kind, space.variant)
    assert (back.prolongation != space.prolongation).nnz == 0
    with pytest.raises(KeyError):
        basis.load_space(path, h2d, 1 / 4, space.kind, space.variant)
