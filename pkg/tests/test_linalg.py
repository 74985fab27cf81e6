import numpy as np
import pytest
import scipy.sparse as sp

from msfem_lab import fem
from msfem_lab.linalg import (
    IndefiniteMatrixError,
    LinearSolver,
    NonConvergenceError,
    SingularMatrixError,
    SolverConfig,
    cg,
    gmres,
    lu_factorize,
    solve,
)
from msfem_lab.mesh import build_structured


def laplacian(dim, n, alpha=1.0, b=None):
    m = build_structured(dim, 1.0, n)
    s = fem.P1Space(m)
    a = fem.assemble_diffusion(m, alpha)
    if b is not None:
        a = a + fem.assemble_convection(m, b)
    return m, s, s.restrict(a), s.restrict_vector(fem.assemble_load(m, 1.0))


def test_lu_identity():
    rhs = np.arange(5.0)
    assert np.array_equal(lu_factorize(sp.identity(5, format="csr")).solve(rhs), rhs)


def test_lu_hand_elimination():
    a = sp.csr_matrix([[2.0, -1, 0], [-1, 2, -1], [0, -1, 2]])
    assert np.allclose(lu_factorize(a).solve(np.array([1.0, 0, 0])), [0.75, 0.5, 0.25], atol=1e-15)


def test_lu_nodal_exactness():
    m, s, a, f = laplacian(1, 8)
    x = m.points[s.dofs, 0]
    assert np.allclose(lu_factorize(a).solve(f), x * (1 - x) / 2, atol=1e-12)


def test_lu_reusable_and_multiple_rhs():
    _, _, a, f = laplacian(2, 6, 1.0, (1.0, 1.0))
    fact = lu_factorize(a)
    rhs = np.column_stack([f, 2 * f])
    x = fact.solve(rhs)
    assert np.allclose(x[:, 1], 2 * x[:, 0])
    assert np.linalg.norm(a @ x[:, 0] - f) / np.linalg.norm(f) <= 1e-10


def test_lu_singular():
    with pytest.raises(SingularMatrixError):
        lu_factorize(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])))


def test_lu_rhs_shape_checked():
    with pytest.raises(ValueError):
        lu_factorize(sp.identity(3, format="csr")).solve(np.ones(4))


def test_gmres_trivial():
    rhs = np.array([1.0, -2.0, 3.0])
    x, its = gmres(sp.identity(3, format="csr"), rhs, SolverConfig("gmres"))
    assert its == 1 and np.allclose(x, rhs)
    x, its = gmres(2 * sp.identity(3, format="csr"), rhs, SolverConfig("gmres"))
    assert its == 1 and np.allclose(x, rhs / 2)


def test_gmres_matches_lu():
    _, _, a, f = laplacian(1, 32, 1 / 8, (1.0,))
    x, _ = gmres(a, f, SolverConfig("gmres"))
    ref = lu_factorize(a).solve(f)
    assert np.abs(x - ref).max() <= 1e-9 * np.abs(ref).max()


def test_gmres_residual_bound_holds():
    _, _, a, f = laplacian(2, 16, 1 / 64, (1.0, 1.0))
    cfg = SolverConfig("gmres", tol=1e-11)
    x, _ = gmres(a, f, cfg)
    d = 1 / a.diagonal()
    assert np.linalg.norm(d * (f - a @ x)) <= 1e-11 * np.linalg.norm(d * f) * (1 + 1e-6)


def test_gmres_nonconvergence_carries_iterate():
    _, _, a, f = laplacian(2, 16, 1 / 64, (1.0, 1.0))
    with pytest.raises(NonConvergenceError) as exc:
        gmres(a, f, SolverConfig("gmres", restart=2, max_iter=3))
    assert exc.value.x.shape == f.shape and exc.value.iterations <= 3


def test_cg_trivial_and_diagonal():
    x, its = cg(sp.identity(4, format="csr"), np.ones(4), SolverConfig("cg"))
    assert its == 1 and np.allclose(x, 1)
    d = sp.diags(np.arange(1.0, 6.0)).tocsr()
    x, its = cg(d, np.ones(5), SolverConfig("cg", preconditioner="none"))
    assert its <= 5 and np.allclose(x, 1 / np.arange(1.0, 6.0))


def test_cg_matches_lu():
    _, _, a, f = laplacian(2, 8)
    x, _ = cg(a, f, SolverConfig("cg"))
    ref = lu_factorize(a).solve(f)
    assert np.abs(x - ref).max() <= 1e-9 * np.abs(ref).max()


def test_cg_indefinite():
    a = sp.diags([1.0, -1.0, 2.0]).tocsr()
    with pytest.raises(IndefiniteMatrixError):
        cg(a, np.ones(3), SolverConfig("cg", preconditioner="none"))


def test_cg_preconditioner_does_not_hurt():
    rng = np.random.default_rng(1)
    m = build_structured(2, 1.0, 12)
    s = fem.P1Space(m)
    a = s.restrict(fem.assemble_diffusion(m, lambda x: 10 ** rng.uniform(-2, 0, len(x))))
    f = np.ones(a.shape[0])
    _, plain = cg(a, f, SolverConfig("cg", preconditioner="none"))
    _, prec = cg(a, f, SolverConfig("cg"))
    assert prec <= plain


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("cholesky")
    with pytest.raises(ValueError):
        SolverConfig("gmres", tol=0.0)
    assert SolverConfig("gmres").tolerance == 1e-11
    assert SolverConfig("cg").tolerance == 1e-20


@pytest.mark.parametrize("backend", ["direct_lu", "gmres"])
def test_linear_solver_counts(backend):
    _, _, a, f = laplacian(1, 16, 1 / 8, (1.0,))
    s = LinearSolver(a, SolverConfig(backend))
    x1 = s.solve(f)
    x2, its = solve(a, f, SolverConfig(backend))
    assert np.allclose(x1, x2, atol=1e-10) and s.iterations >= 1 and its >= 1
