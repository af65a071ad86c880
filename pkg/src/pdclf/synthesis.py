"""Joint synthesis of a parameter-dependent CLF ``V = x^T X^{-1} x`` and ``u = Y X^{-1} x``.

Constraint families, each a matrix SOS condition:

* ``X-lower``      ``X - e1 I >= 0`` on local set x parameter set
* ``X-upper``      ``e2 I - X >= 0`` on the same domain, ``e2`` free
* ``decrease``     ``-(F1 + e3 I) >= 0`` additionally over the rate box
* ``local-set-j``  ``[[I, C_j X], [X C_j^T, X]] >= 0`` on the parameter set
* ``X0-inner``     ``X - X0 >= 0`` on the domain; ``log det X0`` is maximized
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .conic import ConicSolution, SolverError, SolverOptions, solve, supports_exp
from .npv import NpvSystem
from .polynomial import MatrixEvaluator, PolyMatrix, Polynomial, VarSpace
from .sos import AffinePoly, Localizer, SosProgram

log = logging.getLogger(__name__)

MODES = ("pd", "robust")


class SynthesisError(ValueError):
    pass


@dataclasses.dataclass
class SynthesisSpec:
    system: NpvSystem
    X_degree: int = 2
    Y_degree: int = 2
    multiplier_degree: int = 2
    eps1: float = 1e-3
    eps3: float = 1e-3
    mode: str = "pd"
    X_states: tuple[str, ...] | None = None
    Y_states: tuple[str, ...] | None = None
    # restricts every multiplier to these variables plus its region's variables
    multiplier_vars: tuple[str, ...] | None = None
    strict: bool = False
    eps2_upper: float | None = None
    # box bound on every coefficient of Y; keeps controller gains finite
    Y_bound: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise SynthesisError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.eps1 <= 0 or self.eps3 <= 0:
            raise SynthesisError("eps1 and eps3 must be positive")
        xt = set(self.system.structure.x_tilde)
        xs = self.X_states if self.X_states is not None else self.system.structure.x_tilde
        bad = set(xs) - xt
        if bad:
            raise SynthesisError(f"X may only depend on input-free states; got {sorted(bad)}")

    @property
    def X_vars(self) -> tuple[str, ...]:
        xs = self.X_states if self.X_states is not None else self.system.structure.x_tilde
        return tuple(xs) + (self.system.params if self.mode == "pd" else ())

    @property
    def Y_vars(self) -> tuple[str, ...]:
        ys = self.Y_states if self.Y_states is not None else self.system.states
        return tuple(ys) + (self.system.params if self.mode == "pd" else ())

    @classmethod
    def from_config(cls, system: NpvSystem, system_cfg: Mapping, synth_cfg: Mapping | None = None,
                    mode: str | None = None) -> "SynthesisSpec":
        synth_cfg = dict(synth_cfg or {})
        deg = dict(system_cfg.get("degrees", {}))
        deg.update(synth_cfg.get("degrees", {}))
        eps = dict(system_cfg.get("epsilons", {}))
        eps.update(synth_cfg.get("epsilons", {}))

        def tup(v):
            return tuple(v) if v is not None else None

        return cls(system,
                   X_degree=int(deg.get("X", 2)), Y_degree=int(deg.get("Y", 2)),
                   multiplier_degree=int(deg.get("multipliers", 2)),
                   eps1=float(eps.get("e1", 1e-3)), eps3=float(eps.get("e3", 1e-3)),
                   mode=mode or synth_cfg.get("mode", "pd"),
                   X_states=tup(synth_cfg.get("X_states")), Y_states=tup(synth_cfg.get("Y_states")),
                   multiplier_vars=tup(synth_cfg.get("multiplier_vars")),
                   strict=bool(synth_cfg.get("strict", False)),
                   eps2_upper=synth_cfg.get("eps2_upper"),
                   Y_bound=synth_cfg.get("Y_bound"))


def build_f1(system: NpvSystem, X: PolyMatrix, Y: PolyMatrix) -> PolyMatrix:
    """``sym(A X + B Y) - sum_j dX/dx_j (A_j x) - sum_k dX/dth_k thdot_k``."""
    J = system.structure.J
    free = set(X.variables) - set(system.structure.x_tilde) - set(system.params)
    if free:
        raise SynthesisError(f"X depends on states outside the input-free set: {sorted(free)}")
    F = (system.A @ X + system.B @ Y).sym()
    Ax = system.A @ system.state_vector()
    for j in J:
        s = system.states[j]
        if s in X.variables:
            F = F - X.diff(s) * Ax[j, 0]
    for p, r in zip(system.params, system.rates):
        if p in X.variables:
            F = F - X.diff(p) * system.space.var(r)
    return F


def _identity(space: VarSpace, n: int) -> PolyMatrix:
    return PolyMatrix.identity(space, n)


@dataclasses.dataclass
class Assembly:
    program: SosProgram
    X: PolyMatrix
    Y: PolyMatrix
    X0: PolyMatrix
    eps2: AffinePoly
    families: list[str]
    slack: AffinePoly | None = None


def family_names(system: NpvSystem) -> list[str]:
    return (["X-lower", "X-upper", "decrease"]
            + [f"local-set-{j}" for j in range(len(system.X_set))] + ["X0-inner"])


def assemble(spec: SynthesisSpec, families: Sequence[str] | None = None,
             slack_family: str | None = None) -> Assembly:
    """Build the SOS program; ``families`` limits it, ``slack_family`` gets ``+ t I``.

    With a slack family the objective becomes ``min t`` (feasibility diagnosis).
    """
    sysm = spec.system
    space = sysm.space
    n, m = sysm.n, sysm.m
    P = SosProgram(space)
    X = P.new_decision_matrix(n, n, spec.X_vars, spec.X_degree, "X", symmetric=True)
    Y = P.new_decision_matrix(m, n, spec.Y_vars, spec.Y_degree, "Y")
    eps2 = P.new_scalar("eps2")
    X0 = P.new_decision_matrix(n, n, (), 0, "X0", symmetric=True)
    if spec.eps2_upper is not None:
        P.add_le(eps2, float(spec.eps2_upper))
    if spec.Y_bound is not None:
        for dp in P.decisions:
            if dp.name.startswith("Y["):
                for k in dp.indices:
                    v = AffinePoly.decision(space, k)
                    P.add_le(v, float(spec.Y_bound))
                    P.add_ge(v, -float(spec.Y_bound))
    d = spec.multiplier_degree

    def loc(polys, tag):
        out = []
        for k, r in enumerate(polys):
            mv = None
            if spec.multiplier_vars is not None:
                mv = tuple(v for v in space.names
                           if v in set(spec.multiplier_vars) | set(r.variables))
            out.append(Localizer(r, d, mv, f"{tag}{k}"))
        return out

    L_x = loc(sysm.local_polys, "c")
    L_th = loc(sysm.theta_set, "h")
    rate_polys = [(space.var(r) - lo) * (hi - space.var(r))
                  for r, (lo, hi) in zip(sysm.rates, sysm.rate_box)]
    L_v = loc(rate_polys, "xi")
    I = _identity(space, n)
    wanted = list(families) if families is not None else family_names(sysm)
    slack = None
    if slack_family is not None:
        slack = P.new_scalar("slack")
        P.add_ge(slack, 0.0)
        P.minimize(slack)

    def add(name: str, F: PolyMatrix, locs):
        if name not in wanted:
            return
        if name == slack_family:
            F = F + PolyMatrix.identity(space, F.shape[0]) * slack
        P.assert_matrix_sos(F, locs, name)

    add("X-lower", X - I * spec.eps1, L_x + L_th)
    add("X-upper", I * eps2 - X, L_x + L_th)
    if "decrease" in wanted:
        F1 = build_f1(sysm, X, Y)
        add("decrease", -(F1 + I * spec.eps3), L_x + L_th + L_v)
    for j, C in enumerate(sysm.X_set):
        k = C.shape[0]
        CX = C @ X
        bordered = PolyMatrix.block([[_identity(space, k), CX], [CX.T, X]])
        add(f"local-set-{j}", bordered, L_th + (L_x if spec.strict else []))
    add("X0-inner", X - X0, L_x + L_th)
    if slack_family is None and "X0-inner" in wanted:
        P.set_logdet_objective(X0)
    return Assembly(P, X, Y, X0, eps2, wanted, slack)


# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Certificate:
    space: VarSpace
    states: tuple[str, ...]
    params: tuple[str, ...]
    rates: tuple[str, ...]
    mode: str
    X: PolyMatrix
    Y: PolyMatrix
    X0: np.ndarray
    eps1: float
    eps2: float
    eps3: float
    objective: float
    multipliers: dict = dataclasses.field(default_factory=dict)
    diagnostics: dict = dataclasses.field(default_factory=dict)
    scenario_hash: str | None = None

    @property
    def logdet_X0(self) -> float:
        sign, ld = np.linalg.slogdet(self.X0)
        return float(ld) if sign > 0 else -math.inf

    def to_dict(self) -> dict:
        return {
            "format": "pdclf-certificate/1",
            "mode": self.mode,
            "space": {"names": list(self.space.names), "classes": list(self.space.classes)},
            "states": list(self.states), "params": list(self.params), "rates": list(self.rates),
            "X": self.X.to_strings(), "Y": self.Y.to_strings(),
            "X0": self.X0.tolist(),
            "eps1": self.eps1, "eps2": self.eps2, "eps3": self.eps3,
            "objective": self.objective,
            "multipliers": self.multipliers,
            "diagnostics": self.diagnostics,
            "scenario_hash": self.scenario_hash,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Certificate":
        space = VarSpace(d["space"]["names"], d["space"]["classes"])
        return cls(space, tuple(d["states"]), tuple(d["params"]), tuple(d["rates"]), d["mode"],
                   PolyMatrix.from_strings(space, d["X"]), PolyMatrix.from_strings(space, d["Y"]),
                   np.array(d["X0"], dtype=float), float(d["eps1"]), float(d["eps2"]),
                   float(d["eps3"]), float(d["objective"]), dict(d.get("multipliers", {})),
                   dict(d.get("diagnostics", {})), d.get("scenario_hash"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_X0(self, X0: np.ndarray) -> "Certificate":
        return dataclasses.replace(self, X0=np.asarray(X0, dtype=float))

    def evaluator(self, system: NpvSystem) -> MatrixEvaluator:
        """Shared numeric evaluator of X, Y, A, B and the derivatives of X."""
        if self.space != system.space:
            raise SynthesisError("certificate and system use different variables")
        mats = {"X": self.X, "Y": self.Y, "A": system.A, "B": system.B}
        for s in system.states:
            mats[f"dX/{s}"] = self.X.diff(s)
        for p in system.params:
            mats[f"dX/{p}"] = self.X.diff(p)
        for k, C in enumerate(system.X_set):
            mats[f"C{k}"] = C
        return MatrixEvaluator(mats)


@dataclasses.dataclass
class SynthesisResult:
    status: str  # "optimal" | "infeasible" | "solver-failure"
    certificate: Certificate | None
    diagnostics: dict
    failure: dict | None = None

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _program_stats(prog) -> dict:
    return {"variables": prog.n, "rows": prog.num_rows,
            "psd_sides": sorted(prog.psd_sides(), reverse=True)[:10],
            "psd_blocks": len(prog.psd_sides())}


def synthesize(spec: SynthesisSpec, solver: str = "clarabel", opts: SolverOptions | None = None,
               diagnose: bool = True, scenario_hash: str | None = None) -> SynthesisResult:
    t0 = time.perf_counter()
    asm = assemble(spec)
    exp_ok = supports_exp(solver)
    prog = asm.program.compile(exp_cones=exp_ok)
    t1 = time.perf_counter()
    diag: dict[str, Any] = {"solver": solver, "mode": spec.mode, "program": _program_stats(prog),
                            "assembly_seconds": t1 - t0}
    if prog.meta.get("logdet_fallback"):
        diag["warning"] = "solver lacks exponential cones; maximized trace(X0) instead of log det"
    try:
        sol = solve(prog, solver, opts)
    except SolverError as e:
        diag["error"] = str(e)
        return SynthesisResult("solver-failure", None, diag)
    diag["solve_seconds"] = time.perf_counter() - t1
    diag.update({k: v for k, v in sol.diagnostics.items() if _jsonable(v)})
    if sol.status == "infeasible":
        failure = diagnose_infeasibility(spec, solver, opts) if diagnose else None
        return SynthesisResult("infeasible", None, diag, failure)
    if sol.status != "optimal":
        if not diagnose:
            return SynthesisResult("solver-failure", None, diag)
        # the slack programs always have an interior, so they often succeed
        # where the full program stalls; an optimal positive slack proves infeasibility
        failure = diagnose_infeasibility(spec, solver, opts)
        if failure.get("family") is not None and failure.get("status") == "optimal":
            diag["infeasibility_proof"] = "slack"
            return SynthesisResult("infeasible", None, diag, failure)
        return SynthesisResult("solver-failure", None, diag, failure)
    cert = extract_certificate(spec, asm, sol, diag, scenario_hash)
    return SynthesisResult("optimal", cert, diag)


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool)) or v is None


def extract_certificate(spec: SynthesisSpec, asm: Assembly, sol: ConicSolution, diag: dict,
                        scenario_hash: str | None = None) -> Certificate:
    P, x = asm.program, sol.x
    sysm = spec.system
    X = P.value(asm.X, x)
    Y = P.value(asm.Y, x)
    X0 = P.value(asm.X0, x).eval({})
    X0 = 0.5 * (X0 + X0.T)
    mults = {}
    residuals = {}
    for con in P.constraints:
        mults[con.name] = [{"region": mm.localizer.region.to_string(),
                            "matrix": P.value(mm.matrix, x).to_strings()}
                           for mm in con.multipliers]
        residuals[con.name] = P.residual(con, x)
    # wall-clock fields stay out so identical inputs give byte-identical files
    diag = {k: v for k, v in diag.items() if not (k.endswith("seconds") or k.endswith("_time"))}
    diag["gram_residuals"] = residuals
    sign, ld = np.linalg.slogdet(X0)
    return Certificate(sysm.space, sysm.states, sysm.params, sysm.rates, spec.mode, X, Y, X0,
                       spec.eps1, P.scalar_value(asm.eps2, x), spec.eps3,
                       float(ld) if sign > 0 else -math.inf, mults, diag, scenario_hash)


def diagnose_infeasibility(spec: SynthesisSpec, solver: str = "clarabel",
                           opts: SolverOptions | None = None, tol: float = 1e-6) -> dict:
    """Name the first family that cannot be met given the ones before it.

    Families are added one at a time; the newest is relaxed by ``t I`` and
    ``t`` is minimized.  A positive optimum localizes the conflict.
    """
    names = family_names(spec.system)
    trail = []
    for k, name in enumerate(names):
        asm = assemble(spec, names[:k + 1], slack_family=name)
        prog = asm.program.compile()
        try:
            sol = solve(prog, solver, opts)
        except SolverError as e:
            return {"family": name, "reason": f"solver error: {e}", "trail": trail}
        t = asm.program.scalar_value(asm.slack, sol.x) if sol.x is not None else None
        trail.append({"family": name, "status": sol.status, "slack": t})
        if sol.status != "optimal" or t is None or t > tol:
            return {"family": name, "slack": t, "status": sol.status, "trail": trail}
    return {"family": None, "reason": "each family is satisfiable in sequence", "trail": trail}


# ---------------------------------------------------------------------------
# verification by sampling

@dataclasses.dataclass
class VerificationReport:
    samples: int
    tol: float
    families: dict
    warnings: list = dataclasses.field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(f["violations"] == 0 for f in self.families.values())

    def to_dict(self) -> dict:
        return {"samples": self.samples, "tol": self.tol, "passed": self.passed,
                "families": self.families, "warnings": self.warnings}

    def summary(self) -> str:
        lines = [f"samples: {self.samples}  tol: {self.tol:g}"]
        for name, f in self.families.items():
            tag = "ok" if f["violations"] == 0 else "FAIL"
            lines.append(f"  {name:<14} {tag:<4} violations={f['violations']:<6} "
                         f"worst margin={f['worst']:.3e}")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def _points(system: NpvSystem, x: np.ndarray, th: np.ndarray, thd: np.ndarray | None = None):
    pts = np.zeros((len(x), len(system.space)))
    idx = system.space.index
    for k, s in enumerate(system.states):
        pts[:, idx(s)] = x[:, k]
    for k, s in enumerate(system.params):
        pts[:, idx(s)] = th[:, k]
    if thd is not None:
        for k, s in enumerate(system.rates):
            pts[:, idx(s)] = thd[:, k]
    return pts


def f1_numeric(cert: Certificate, system: NpvSystem, vals: Mapping[str, np.ndarray],
               x: np.ndarray, thd: np.ndarray) -> np.ndarray:
    """Batched ``F1`` from pre-evaluated matrices; ``thd`` rows are rate values."""
    A, B, X, Y = vals["A"], vals["B"], vals["X"], vals["Y"]
    M = A @ X + B @ Y
    F = M + np.swapaxes(M, 1, 2)
    for j in system.structure.J:
        Ajx = np.einsum("nk,nk->n", A[:, j, :], x)
        F = F - vals[f"dX/{system.states[j]}"] * Ajx[:, None, None]
    for k, p in enumerate(system.params):
        F = F - vals[f"dX/{p}"] * thd[:, k][:, None, None]
    return F


def verify_certificate(cert: Certificate, system: NpvSystem, samples: int | tuple = 10_000,
                       tol: float = 1e-6, seed: int = 0) -> VerificationReport:
    """Eigenvalue checks of every family on sampled points; lists violations."""
    if isinstance(samples, tuple):
        x, th = (np.atleast_2d(np.asarray(a, dtype=float)) for a in samples)
    else:
        x, th = system.sample(int(samples), seed)
    N = len(x)
    families: dict = {}
    report = VerificationReport(N, tol, families)
    if N == 0:
        report.warnings.append("no samples; the check is vacuous")
        return report
    ev = cert.evaluator(system)
    vals = ev(_points(system, x, th))
    X = vals["X"]
    n = system.n
    I = np.eye(n)

    def record(name, margins):
        margins = np.asarray(margins)
        bad = margins < -tol
        families[name] = {"checked": int(margins.size), "violations": int(bad.sum()),
                          "worst": float(margins.min()) if margins.size else 0.0}

    record("X-lower", np.linalg.eigvalsh(X - cert.eps1 * I)[:, 0])
    record("X-upper", np.linalg.eigvalsh(cert.eps2 * I - X)[:, 0])
    worst = np.full(N, np.inf)
    for v in system.vertices():
        thd = np.broadcast_to(v, (N, system.n_theta))
        F = f1_numeric(cert, system, vals, x, thd)
        worst = np.minimum(worst, -np.linalg.eigvalsh(F + cert.eps3 * I)[:, -1])
    record("decrease", worst)
    for j, C in enumerate(system.X_set):
        Cm = vals[f"C{j}"]
        k = Cm.shape[1]
        CX = Cm @ X
        top = np.concatenate([np.broadcast_to(np.eye(k), (N, k, k)), CX], axis=2)
        bot = np.concatenate([np.swapaxes(CX, 1, 2), X], axis=2)
        M = np.concatenate([top, bot], axis=1)
        record(f"local-set-{j}", np.linalg.eigvalsh(M)[:, 0])
    record("X0-inner", np.linalg.eigvalsh(X - cert.X0[None])[:, 0])
    return report
