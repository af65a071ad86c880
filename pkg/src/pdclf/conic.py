"""Conic programs in standard form and the solver backends that consume them.

A program reads::

    minimize    c^T x
    subject to  b - A x = s,   s in K = K_1 x K_2 x ... (in row order)

where each ``K_i`` is one of ``zero``, ``nonneg``, ``psd`` (scaled
upper-triangular, column-major packing) or ``exp`` (triples ``(u, v, w)``
with ``v * exp(u / v) <= w``).  This matches Clarabel's native layout; the
SCS and CVXOPT backends permute rows into their own conventions.
"""

from __future__ import annotations

import dataclasses
import io
import logging
import math
import time
from typing import Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

CONE_KINDS = ("zero", "nonneg", "psd", "exp")

STATUSES = ("optimal", "infeasible", "unbounded", "numerical-failure", "max-iter")


class SolverError(RuntimeError):
    pass


class SolverUnavailable(SolverError):
    pass


def cone_rows(kind: str, dim: int) -> int:
    if kind == "psd":
        return dim * (dim + 1) // 2
    if kind == "exp":
        return 3
    return dim


def triu_pairs(n: int) -> list[tuple[int, int]]:
    """Packing order of a PSD cone: upper triangle, column by column."""
    return [(i, j) for j in range(n) for i in range(j + 1)]


def svec_scale(i: int, j: int) -> float:
    return 1.0 if i == j else SQRT2


def smat(s: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    for k, (i, j) in enumerate(triu_pairs(n)):
        v = s[k] / svec_scale(i, j)
        M[i, j] = v
        M[j, i] = v
    return M


@dataclasses.dataclass(frozen=True)
class ConicProgram:
    n: int
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: tuple[tuple[str, int], ...]
    labels: tuple[str, ...] = ()
    meta: dict = dataclasses.field(default_factory=dict, compare=False)

    def __post_init__(self):
        rows = sum(cone_rows(k, d) for k, d in self.cones)
        if self.A.shape != (rows, self.n):
            raise ValueError(f"A has shape {self.A.shape}, cones need ({rows}, {self.n})")
        if self.b.shape != (rows,) or self.c.shape != (self.n,):
            raise ValueError("b / c dimension mismatch")
        for k, _ in self.cones:
            if k not in CONE_KINDS:
                raise ValueError(f"unknown cone {k!r}")

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]

    def cone_slices(self):
        """Yield ``(kind, dim, slice)`` per cone, in row order."""
        r = 0
        for kind, dim in self.cones:
            k = cone_rows(kind, dim)
            yield kind, dim, slice(r, r + k)
            r += k

    def count(self, kind: str) -> int:
        return sum(1 for k, _ in self.cones if k == kind)

    def psd_sides(self) -> list[int]:
        return [d for k, d in self.cones if k == "psd"]

    def equality_rows(self) -> int:
        return sum(d for k, d in self.cones if k == "zero")

    def dumps(self) -> str:
        """Text dump: a cone header, the objective, then one row per line.

        Row lines read ``<row> <cone> <b> | <col>:<val> ...``.
        """
        buf = io.StringIO()
        buf.write(f"# conic program n={self.n} rows={self.num_rows}\n")
        buf.write("cones " + " ".join(f"{k}:{d}" for k, d in self.cones) + "\n")
        obj = " ".join(f"{j}:{self.c[j]!r}" for j in np.flatnonzero(self.c))
        buf.write(f"objective | {obj}\n")
        A = self.A.tocsr()
        A.sort_indices()
        r = 0
        for kind, dim, sl in self.cone_slices():
            for row in range(sl.start, sl.stop):
                lo, hi = A.indptr[row], A.indptr[row + 1]
                ent = " ".join(f"{j}:{v!r}" for j, v in zip(A.indices[lo:hi], A.data[lo:hi]))
                buf.write(f"{row} {kind} {self.b[row]!r} | {ent}\n")
            r += 1
        return buf.getvalue()

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


@dataclasses.dataclass
class ConicSolution:
    status: str
    x: np.ndarray | None
    objective: float
    psd_blocks: list[np.ndarray]
    diagnostics: dict

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclasses.dataclass
class SolverOptions:
    tol_gap: float = 1e-8
    tol_feas: float = 1e-8
    max_iter: int = 200_000
    verbose: bool = False
    threads: int = 1


def equality_residual(prog: ConicProgram, x: np.ndarray) -> float:
    r = 0.0
    for kind, dim, sl in prog.cone_slices():
        if kind == "zero":
            res = prog.b[sl] - prog.A[sl] @ x
            r = max(r, float(np.max(np.abs(res))) if res.size else 0.0)
    return r


def extract_psd_blocks(prog: ConicProgram, x: np.ndarray) -> list[np.ndarray]:
    s = prog.b - prog.A @ x
    out = []
    for kind, dim, sl in prog.cone_slices():
        if kind == "psd":
            M = smat(s[sl], dim)
            out.append(0.5 * (M + M.T))
    return out


# ---------------------------------------------------------------------------
# backends

def _solve_clarabel(prog: ConicProgram, opts: SolverOptions) -> ConicSolution:
    try:
        import clarabel
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise SolverUnavailable("clarabel is not installed") from exc
    cones = []
    for kind, dim in prog.cones:
        if kind == "zero":
            cones.append(clarabel.ZeroConeT(dim))
        elif kind == "nonneg":
            cones.append(clarabel.NonnegativeConeT(dim))
        elif kind == "psd":
            cones.append(clarabel.PSDTriangleConeT(dim))
        else:
            cones.append(clarabel.ExponentialConeT())
    settings = clarabel.DefaultSettings()
    settings.verbose = opts.verbose
    settings.tol_gap_abs = opts.tol_gap
    settings.tol_gap_rel = opts.tol_gap
    settings.tol_feas = opts.tol_feas
    settings.max_iter = min(int(opts.max_iter), 2**31 - 1)
    settings.max_threads = int(opts.threads)
    P = sp.csc_matrix((prog.n, prog.n))
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, prog.c, sp.csc_matrix(prog.A), prog.b, cones, settings)
    res = solver.solve()
    elapsed = time.perf_counter() - t0
    st = str(res.status)
    status = {
        "Solved": "optimal",
        "AlmostSolved": "optimal",
        "PrimalInfeasible": "infeasible",
        "AlmostPrimalInfeasible": "infeasible",
        "DualInfeasible": "unbounded",
        "AlmostDualInfeasible": "unbounded",
        "MaxIterations": "max-iter",
        "MaxTime": "max-iter",
    }.get(st, "numerical-failure")
    x = np.asarray(res.x, dtype=float)
    diag = {
        "solver": "clarabel",
        "raw_status": st,
        "iterations": int(res.iterations),
        "solve_time": elapsed,
        "primal_residual": float(res.r_prim),
        "dual_residual": float(res.r_dual),
    }
    return ConicSolution(status, x, float(res.obj_val), [], diag)


def _scs_layout(prog: ConicProgram):
    """Row permutation and scaling taking Clarabel's layout to SCS's."""
    groups = {"zero": [], "nonneg": [], "psd": [], "exp": []}
    for kind, dim, sl in prog.cone_slices():
        rows = list(range(sl.start, sl.stop))
        if kind == "psd":
            # SCS packs the lower triangle column-major; for a symmetric matrix
            # that is the upper triangle row-major.
            pos = {p: k for k, p in enumerate(triu_pairs(dim))}
            rows = [sl.start + pos[(i, j)] for i in range(dim) for j in range(i, dim)]
        groups[kind].append((dim, rows))
    perm = []
    cone = {}
    for kind, key in (("zero", "z"), ("nonneg", "l"), ("psd", "s"), ("exp", "ep")):
        items = groups[kind]
        for _, rows in items:
            perm.extend(rows)
        if kind in ("zero", "nonneg"):
            cone[key] = sum(d for d, _ in items)
        elif kind == "psd":
            cone[key] = [d for d, _ in items]
        else:
            cone[key] = len(items)
    return np.array(perm, dtype=int), cone


def _solve_scs(prog: ConicProgram, opts: SolverOptions) -> ConicSolution:
    try:
        import scs
    except ImportError as exc:  # pragma: no cover
        raise SolverUnavailable("scs is not installed") from exc
    perm, cone = _scs_layout(prog)
    A = sp.csc_matrix(prog.A.tocsr()[perm])
    b = prog.b[perm]
    data = {"A": A, "b": b, "c": prog.c}
    t0 = time.perf_counter()
    solver = scs.SCS(data, cone, verbose=opts.verbose, eps_abs=opts.tol_feas,
                     eps_rel=opts.tol_gap, max_iters=int(opts.max_iter))
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    info = sol["info"]
    st = info["status"]
    if st in ("solved", "solved_inaccurate"):
        status = "optimal"
    elif st.startswith("infeasible"):
        status = "infeasible"
    elif st.startswith("unbounded"):
        status = "unbounded"
    elif info.get("iter", 0) >= opts.max_iter:
        status = "max-iter"
    else:
        status = "numerical-failure"
    diag = {
        "solver": "scs",
        "raw_status": st,
        "iterations": int(info["iter"]),
        "solve_time": elapsed,
        "primal_residual": float(info["res_pri"]),
        "dual_residual": float(info["res_dual"]),
    }
    return ConicSolution(status, np.asarray(sol["x"], dtype=float),
                         float(info["pobj"]), [], diag)


def _solve_cvxopt(prog: ConicProgram, opts: SolverOptions) -> ConicSolution:
    try:
        import cvxopt
        from cvxopt import solvers
    except ImportError as exc:  # pragma: no cover
        raise SolverUnavailable("cvxopt is not installed") from exc
    if prog.count("exp"):
        raise SolverError("cvxopt backend does not support exponential cones")
    A = prog.A.tocsr()
    eq_rows, l_rows, s_blocks = [], [], []
    for kind, dim, sl in prog.cone_slices():
        if kind == "zero":
            eq_rows.extend(range(sl.start, sl.stop))
        elif kind == "nonneg":
            l_rows.extend(range(sl.start, sl.stop))
        else:
            s_blocks.append((dim, sl))

    def spm(M):
        M = sp.coo_matrix(M)
        return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

    G_parts, h_parts = [A[l_rows]], [prog.b[l_rows]]
    for dim, sl in s_blocks:
        # dense column-major n*n layout: entry (i,j) = (b - A x)_{ij} unscaled
        pairs = triu_pairs(dim)
        idx = np.zeros((dim, dim), dtype=int)
        scale = np.zeros((dim, dim))
        for k, (i, j) in enumerate(pairs):
            idx[i, j] = idx[j, i] = sl.start + k
            scale[i, j] = scale[j, i] = 1.0 / svec_scale(i, j)
        order = [(i, j) for j in range(dim) for i in range(dim)]
        rows = [idx[i, j] for i, j in order]
        sc = np.array([scale[i, j] for i, j in order])
        G_parts.append(sp.diags(sc) @ A[rows])
        h_parts.append(sc * prog.b[rows])
    G = sp.vstack(G_parts).tocsr()
    h = np.concatenate(h_parts)
    dims = {"l": len(l_rows), "q": [], "s": [d for d, _ in s_blocks]}
    solvers.options.update({"show_progress": opts.verbose, "abstol": opts.tol_gap,
                            "reltol": opts.tol_gap, "feastol": opts.tol_feas,
                            "maxiters": int(min(opts.max_iter, 500))})
    t0 = time.perf_counter()
    kw = {}
    if eq_rows:
        kw = {"A": spm(A[eq_rows]), "b": cvxopt.matrix(prog.b[eq_rows])}
    res = solvers.conelp(cvxopt.matrix(prog.c), spm(G), cvxopt.matrix(h), dims, **kw)
    elapsed = time.perf_counter() - t0
    st = res["status"]
    status = {"optimal": "optimal", "primal infeasible": "infeasible",
              "dual infeasible": "unbounded"}.get(st, "numerical-failure")
    x = np.array(res["x"]).ravel() if res["x"] is not None else None
    diag = {"solver": "cvxopt", "raw_status": st, "iterations": int(res["iterations"]),
            "solve_time": elapsed,
            "primal_residual": float(res.get("primal infeasibility") or 0.0),
            "dual_residual": float(res.get("dual infeasibility") or 0.0)}
    obj = float(res["primal objective"]) if res["primal objective"] is not None else math.nan
    return ConicSolution(status, x, obj, [], diag)


BACKENDS = {
    "clarabel": _solve_clarabel,
    "scs": _solve_scs,
    "cvxopt": _solve_cvxopt,
}

EXP_CONE_SUPPORT = {"clarabel": True, "scs": True, "cvxopt": False}


def supports_exp(solver: str) -> bool:
    return EXP_CONE_SUPPORT.get(solver, False)


def solve(prog: ConicProgram, solver: str = "clarabel",
          opts: SolverOptions | None = None) -> ConicSolution:
    """Solve ``prog`` with the named backend and reconstruct the PSD blocks."""
    opts = opts or SolverOptions()
    try:
        backend = BACKENDS[solver]
    except KeyError:
        raise SolverUnavailable(f"unknown solver {solver!r}; choose from {sorted(BACKENDS)}") from None
    if prog.num_rows == 0 and prog.n == 0:
        return ConicSolution("optimal", np.zeros(0), 0.0, [], {"solver": solver})
    sol = backend(prog, opts)
    if sol.x is not None and sol.x.shape != (prog.n,):
        raise SolverError(f"solver returned {sol.x.shape}, expected ({prog.n},)")
    if sol.status == "optimal" and sol.x is not None:
        sol.psd_blocks = extract_psd_blocks(prog, sol.x)
        sol.diagnostics["equality_residual"] = equality_residual(prog, sol.x)
        sol.diagnostics["min_psd_eig"] = min(
            (float(np.linalg.eigvalsh(M)[0]) for M in sol.psd_blocks), default=0.0)
    log.debug("solve %s -> %s (%s)", solver, sol.status, sol.diagnostics)
    return sol


def build_program(n: int, c: Sequence[float], blocks, labels=()) -> ConicProgram:
    """Assemble a program from ``(kind, dim, rows)`` blocks.

    ``rows`` is a list of ``(coef_dict, const)`` pairs describing the affine
    expressions ``s_k = const + sum coef * x``; they land in ``b - A x`` form.
    """
    data, ri, ci, b, cones = [], [], [], [], []
    r = 0
    for kind, dim, rows in blocks:
        if len(rows) != cone_rows(kind, dim):
            raise ValueError(f"{kind} cone of dim {dim} needs {cone_rows(kind, dim)} rows")
        for coefs, const in rows:
            for j, v in coefs.items():
                if v != 0.0:
                    ri.append(r)
                    ci.append(j)
                    data.append(-v)
            b.append(const)
            r += 1
        cones.append((kind, dim))
    A = sp.csc_matrix((data, (ri, ci)), shape=(r, n))
    A.sum_duplicates()
    A.sort_indices()
    return ConicProgram(n, np.asarray(c, dtype=float), A, np.asarray(b, dtype=float),
                        tuple(cones), tuple(labels))
