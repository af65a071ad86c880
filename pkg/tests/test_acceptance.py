"""Acceptance checks.  Each test prints one ``criterion N: PASS|FAIL`` line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they are
produced; the same lines are repeated in the terminal summary.
"""

import sys
import time

import numpy as np
import pytest

from pdclf.cli import build_spec, build_system, read_scenario, scenario_hash
from pdclf.conic import solve
from pdclf.npv import gravity_offset_transform
from pdclf.polynomial import VarSpace
from pdclf.runtime import PdClf, qp_oracle, solve_min_norm_qp
from pdclf.sim import ThetaTrajectory, integrate
from pdclf.sos import Localizer, SosProgram
from pdclf.synthesis import synthesize, verify_certificate

LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)


def _synth(name, mode=None):
    cfg = read_scenario(name)
    system = build_system(cfg)
    t = time.perf_counter()
    res = synthesize(build_spec(cfg, system, mode), scenario_hash=scenario_hash(cfg))
    return cfg, system, res, time.perf_counter() - t


@pytest.fixture(scope="module")
def toy():
    cfg, system, res, _ = _synth("toy")
    assert res.optimal
    clf = PdClf(res.certificate, system)
    traj = ThetaTrajectory.from_config(cfg["simulation"]["theta"])
    runs = {}

    def rollout(controller, k, gain=1.0):
        key = (controller, k, gain)
        if key not in runs:
            c = cfg["simulation"]["controllers"][controller]
            runs[key] = integrate(system, controller, traj, cfg["simulation"]["initial_states"][k],
                                  10.0, c["dt"], gain, clf, c["per_stage"])
        return runs[key]

    return cfg, system, res.certificate, clf, traj, rollout


def test_criterion_1_sos_compiler():
    t = time.perf_counter()
    S = VarSpace(["x", "y"], ["state", "state"])
    x, y = S.vars("x", "y")
    P = SosProgram(S)
    quartic = P.assert_sos((x ** 2 + y ** 2) ** 2)
    # a second program with free coefficients, a localized and a matrix constraint
    Q = SosProgram(S)
    a = Q.new_decision_poly(["x"], 2).poly
    M = Q.new_decision_matrix(2, 2, ["x"], 2, symmetric=True)
    Q.assert_sos(a - x ** 2)
    Q.assert_sos(1 - x ** 2, [Localizer(1 - x ** 2, 0)])
    Q.assert_matrix_sos(M)
    Q.assert_sos(M[0, 0] - x ** 2 - 1)
    Q.minimize(a + M[1, 1])
    sol_p = solve(P.compile(), "clarabel")
    sol_q = solve(Q.compile(), "clarabel")
    R = SosProgram(S)
    R.assert_sos(x ** 4 * y ** 2 + x ** 2 * y ** 4 - 3 * x ** 2 * y ** 2 + 1)
    motzkin = solve(R.compile(), "clarabel").status

    resid = P.residual(quartic, sol_p.x) if sol_p.optimal else np.inf
    pts = np.random.default_rng(0).uniform(-3, 3, (100, 2))
    worst = np.inf
    for prog, sol in ((P, sol_p), (Q, sol_q)):
        for con in prog.constraints:
            G = prog.value(con.localized, sol.x)
            for z in pts:
                worst = min(worst, float(np.linalg.eigvalsh(G.eval(dict(zip(S.names, z)))).min()))
    elapsed = time.perf_counter() - t
    ok = (sol_p.optimal and sol_q.optimal and resid <= 1e-7 and motzkin == "infeasible"
          and worst >= -1e-6 and elapsed < 5)
    report(1, ok, f"gram residual {resid:.1e}, motzkin {motzkin}, min sampled value "
                  f"{worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_toy_synthesis(toy):
    cfg, system, res, elapsed = _synth("toy", "pd")
    t = time.perf_counter()
    rep = verify_certificate(res.certificate, system, 10_000, 1e-6) if res.optimal else None
    elapsed += time.perf_counter() - t
    bounds = system.theta_bounds()[0]
    ok = (res.optimal and rep.passed and rep.samples == 10_000 and elapsed < 300
          and np.allclose(bounds, (0.05, 1.0)) and tuple(system.rate_box) == ((-0.1, 0.1),)
          and res.certificate.X.degree <= 2 and res.certificate.Y.degree <= 2)
    report(2, ok, f"status {res.status}, violations "
                  f"{sum(f['violations'] for f in rep.families.values()) if rep else 'n/a'}"
                  f" over {rep.samples if rep else 0} samples, {elapsed:.1f}s")
    assert ok


def test_criterion_3_pd_contains_robust():
    _, _, pd, t1 = _synth("toy", "pd")
    _, _, rb, t2 = _synth("toy", "robust")
    ok = (pd.optimal and rb.optimal and t1 + t2 < 600
          and pd.certificate.logdet_X0 >= rb.certificate.logdet_X0 - 1e-6)
    report(3, ok, f"logdet X0 pd {pd.certificate.logdet_X0:.4f} >= robust "
                  f"{rb.certificate.logdet_X0:.4f}, {t1 + t2:.1f}s")
    assert ok


def _monotone(trace, tol=1e-6):
    return bool(np.all(np.diff(trace.V) <= tol))


def test_criterion_4_closed_loop(toy):
    cfg, system, cert, clf, traj, rollout = toy
    th0 = traj.value(0.0)
    starts = cfg["simulation"]["initial_states"]
    inside = all(clf.eval_V(np.array(x0), th0) <= 1.0 for x0 in starts)
    parts, ok = [], inside
    for ctl in ("explicit", "minnorm"):
        norms = []
        for k in range(len(starts)):
            tr = rollout(ctl, k)
            nrm = float(np.linalg.norm(tr.final_state))
            norms.append(nrm)
            ok &= nrm <= 1e-2 and _monotone(tr)
            if ctl == "minnorm":
                ok &= tr.c_zeta[0] >= 0 and tr.zero_input_prefix() > 0
        parts.append(f"{ctl} |x(10)| " + ", ".join(f"{v:.3g}" for v in norms))
    prefixes = [rollout("minnorm", k).zero_input_prefix() for k in range(len(starts))]
    report(4, ok, "; ".join(parts) + "; u=0 prefixes " + ", ".join(f"{p:.3g}s" for p in prefixes))
    assert ok


def test_criterion_5_gain_margin(toy):
    cfg, system, cert, clf, traj, rollout = toy
    ok, parts = True, []
    for lam in (1.0, 2.0, 5.0):
        norms = [float(np.linalg.norm(rollout("minnorm", k, lam).final_state))
                 for k in range(len(cfg["simulation"]["initial_states"]))]
        ok &= max(norms) <= 1e-2
        parts.append(f"gain {lam:g}: " + ", ".join(f"{v:.3g}" for v in norms))
    report(5, ok, "min-norm |x(10)| " + "; ".join(parts))
    assert ok


def test_criterion_6_qp_oracle():
    rng = np.random.default_rng(6)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        m = int(rng.integers(1, 4))
        a = rng.standard_normal(m)
        b = rng.standard_normal(int(rng.integers(1, 5)))
        G = rng.standard_normal((m, m))
        H = G @ G.T + 0.1 * np.eye(m)
        u = solve_min_norm_qp(a, float(b.min()), H)
        ref = qp_oracle(np.tile(a, (len(b), 1)), b, H)
        worst = max(worst, float(np.max(np.abs(u - ref))))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-8 and elapsed < 30
    report(6, ok, f"max |u - u_oracle| {worst:.2e} over 10000 instances, {elapsed:.1f}s")
    assert ok


def test_criterion_7_gradients(toy):
    _, system, _, clf, _, _ = toy
    xs, ths = system.sample(500, seed=7)
    h = 1e-6
    worst = 0.0
    for x, th in zip(xs, ths):
        gx, gth = clf.grad_V(x, th)
        fx = [(clf.eval_V(x + h * e, th) - clf.eval_V(x - h * e, th)) / (2 * h)
              for e in np.eye(len(x))]
        ft = [(clf.eval_V(x, th + h * e) - clf.eval_V(x, th - h * e)) / (2 * h)
              for e in np.eye(len(th))]
        g, fd = np.concatenate([gx, gth]), np.concatenate([fx, ft])
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(g)))
    ok = worst <= 1e-5
    report(7, ok, f"max relative gradient error {worst:.2e} at 500 points")
    assert ok


def test_criterion_8_rocket():
    t = time.perf_counter()
    equilibrium = all(
        not gravity_offset_transform().dynamics(np.zeros(6), [th], np.zeros(2)).any()
        for th in (1.0, 3.0, 5.0))
    cfg, system, res, _ = _synth("rocket")
    ok = equilibrium and res.optimal
    cert = res.certificate
    structure = set(cert.X.variables) <= {"phi", "theta"} and cert.X.degree <= 2
    ok &= structure
    parts = []
    if res.optimal:
        clf = PdClf(cert, system)
        traj = ThetaTrajectory.from_config(cfg["simulation"]["theta"])
        ctls = cfg["simulation"]["controllers"]
        for k, x0 in enumerate(cfg["simulation"]["initial_states"]):
            out = {}
            for ctl in ("explicit", "minnorm"):
                tr = integrate(system, ctl, traj, x0, 20.0, ctls[ctl]["dt"], 1.0, clf,
                               ctls[ctl]["per_stage"])
                out[ctl] = (float(np.linalg.norm(tr.final_state)), float(np.abs(tr.inputs).max()))
            ok &= max(out["explicit"][0], out["minnorm"][0]) <= 0.1
            ok &= out["minnorm"][1] <= out["explicit"][1]
            parts.append(f"x0#{k} |x(20)| explicit {out['explicit'][0]:.3g} minnorm "
                         f"{out['minnorm'][0]:.3g}, max|u| {out['explicit'][1]:.3g} vs "
                         f"{out['minnorm'][1]:.3g}")
    elapsed = time.perf_counter() - t
    ok &= elapsed < 1200
    report(8, ok, f"equilibrium {equilibrium}, synthesis {res.status}; " + "; ".join(parts)
           + f"; {elapsed:.0f}s")
    assert ok


def test_criterion_9_integrator_order(toy):
    cfg, system, _, clf, traj, _ = toy
    # the explicit law is smooth, the min-norm law has a kink where the constraint activates;
    # per-stage evaluation keeps the input from being held across a step.
    # the closed loop is stiff, so dt must sit well inside the RK4 stability region
    ratios = []
    for x0 in cfg["simulation"]["initial_states"]:
        finals = [integrate(system, "explicit", traj, x0, 0.2, dt, 1.0, clf, True).final_state
                  for dt in (1e-4, 5e-5, 2.5e-5)]
        d1 = float(np.linalg.norm(finals[0] - finals[1]))
        d2 = float(np.linalg.norm(finals[1] - finals[2]))
        ratios.append(d1 / d2)
    ok = min(ratios) >= 8
    report(9, ok, "difference ratios " + ", ".join(f"{r:.1f}" for r in ratios))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
