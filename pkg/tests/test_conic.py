import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdclf.conic import (
    SolverError, SolverOptions, SolverUnavailable, build_program, equality_residual, smat, solve,
    svec_scale, triu_pairs,
)

SOLVERS = ["clarabel", "scs", "cvxopt"]


def psd_rows(dim, entry):
    """svec rows for a symmetric matrix whose (i, j) entry is ``entry(i, j)``."""
    rows = []
    for i, j in triu_pairs(dim):
        coefs, const = entry(i, j)
        s = svec_scale(i, j)
        rows.append(({k: s * v for k, v in coefs.items()}, s * const))
    return rows


@pytest.mark.parametrize("solver", SOLVERS)
def test_min_x_above_one(solver):
    prog = build_program(1, [1.0], [("nonneg", 1, [({0: 1.0}, -1.0)])])
    sol = solve(prog, solver)
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("solver", SOLVERS)
def test_max_t_two_by_two_psd(solver):
    def entry(i, j):
        return ({0: 1.0}, 0.0) if i != j else ({}, 1.0)

    prog = build_program(1, [-1.0], [("psd", 2, psd_rows(2, entry))])
    sol = solve(prog, solver)
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-5)
    assert len(sol.psd_blocks) == 1
    assert np.linalg.eigvalsh(sol.psd_blocks[0])[0] >= -1e-8


@pytest.mark.parametrize("solver", SOLVERS)
def test_contradictory_bounds_infeasible(solver):
    prog = build_program(1, [0.0], [("nonneg", 2, [({0: 1.0}, -1.0), ({0: -1.0}, 0.0)])])
    assert solve(prog, solver).status == "infeasible"


def test_unknown_solver():
    prog = build_program(1, [1.0], [("nonneg", 1, [({0: 1.0}, 0.0)])])
    with pytest.raises(SolverUnavailable):
        solve(prog, "mosek-but-not-really")


def test_block_row_count_checked():
    with pytest.raises(ValueError):
        build_program(1, [0.0], [("psd", 2, [({0: 1.0}, 0.0)])])


def test_smat_inverts_svec():
    M = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    s = np.array([M[i, j] * svec_scale(i, j) for i, j in triu_pairs(3)])
    assert np.array_equal(smat(s, 3), M)


def test_exp_cone_epigraph():
    # max t  s.t.  t <= log(w),  w <= 3
    rows = [({0: 1.0}, 0.0), ({}, 1.0), ({1: 1.0}, 0.0)]
    prog = build_program(2, [-1.0, 0.0], [("nonneg", 1, [({1: -1.0}, 3.0)]), ("exp", 1, rows)])
    sol = solve(prog, "clarabel")
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(np.log(3.0), abs=1e-6)


def test_cvxopt_rejects_exp_cones():
    rows = [({0: 1.0}, 0.0), ({}, 1.0), ({1: 1.0}, 0.0)]
    prog = build_program(2, [-1.0, 0.0], [("nonneg", 1, [({1: -1.0}, 3.0)]), ("exp", 1, rows)])
    with pytest.raises(SolverError):
        solve(prog, "cvxopt")


def _min_eig_program(C):
    """min <C, X>  s.t.  trace X = 1,  X psd; optimum is the smallest eigenvalue of C."""
    n = C.shape[0]
    pairs = triu_pairs(n)
    var = {p: k for k, p in enumerate(pairs)}
    c = np.array([C[i, j] * (1.0 if i == j else 2.0) for i, j in pairs])
    trace = [({var[(i, i)]: 1.0 for i in range(n)}, -1.0)]
    rows = psd_rows(n, lambda i, j: ({var[(min(i, j), max(i, j))]: 1.0}, 0.0))
    return build_program(len(pairs), c, [("zero", 1, trace), ("psd", n, rows)])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_random_sdp_matches_eigenvalue_oracle(n, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    C = G + G.T
    prog = _min_eig_program(C)
    sol = solve(prog, "clarabel")
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(np.linalg.eigvalsh(C)[0], abs=1e-6)
    assert equality_residual(prog, sol.x) <= 1e-7
    assert all(np.linalg.eigvalsh(M)[0] >= -1e-8 for M in sol.psd_blocks)
    tol = SolverOptions().tol_feas
    assert sol.diagnostics["primal_residual"] <= tol
    assert sol.diagnostics["dual_residual"] <= tol


def test_empty_program():
    prog = build_program(0, [], [])
    assert solve(prog).status == "optimal"
