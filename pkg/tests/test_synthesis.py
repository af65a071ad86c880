import numpy as np
import pytest

from pdclf.npv import load_system
from pdclf.polynomial import PolyMatrix
from pdclf.runtime import PdClf
from pdclf.synthesis import (
    Certificate, SynthesisError, SynthesisSpec, assemble, build_f1, family_names, synthesize,
    verify_certificate,
)

from test_npv import TOY

LTI = {
    "dimensions": {"n": 2, "m": 1, "n_theta": 1},
    "A": [["0", "1"], ["-2", "-3"]],
    "B": [["0"], ["0"]],
    "theta_set": ["(theta - 0.5)*(1 - theta)"],
    "rate_box": [[-0.1, 0.1]],
    "X_set": [],
}


def test_f1_reduces_to_lyapunov_form():
    s = load_system(LTI)
    X = PolyMatrix.from_numpy(s.space, [[2.0, 0.5], [0.5, 1.0]])
    Y = PolyMatrix.from_numpy(s.space, [[0.0, 0.0]])
    F = build_f1(s, X, Y)
    A = np.array([[0, 1], [-2, -3]], dtype=float)
    Xn = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.allclose(F.eval({}), A @ Xn + Xn @ A.T)


def test_f1_toy_terms():
    s = load_system(TOY)
    sp = s.space
    x1, th = sp.vars("x1", "theta")
    X = PolyMatrix(sp, [[1 + x1 ** 2 + th, sp.zero()], [sp.zero(), 1 + th ** 2]])
    F = build_f1(s, X, PolyMatrix(sp, [[sp.zero(), sp.zero()]]))
    # (A X)[0, 0] = theta * X[1, 0] = 0, so F[0, 0] is only the two derivative terms:
    # -(2 x1)(theta x2) - theta_dot
    want = -2 * x1 * th * sp.var("x2") - sp.var("theta_dot")
    assert F[0, 0] == want
    dF = F.diff("theta_dot")
    assert dF[0, 0] == -X[0, 0].diff("theta")
    assert dF[1, 1] == -X[1, 1].diff("theta")
    assert max(F[i, j].degree_in(["theta_dot"]) for i in range(2) for j in range(2)) == 1
    assert F.is_symmetric()


def test_f1_rejects_input_driven_state():
    s = load_system(TOY)
    sp = s.space
    X = PolyMatrix(sp, [[1 + sp.var("x2") ** 2, sp.zero()], [sp.zero(), sp.const(1.0)]])
    with pytest.raises(SynthesisError):
        build_f1(s, X, PolyMatrix(sp, [[sp.zero(), sp.zero()]]))


def test_spec_rejects_bad_inputs():
    s = load_system(TOY)
    with pytest.raises(SynthesisError):
        SynthesisSpec(s, mode="lpv")
    with pytest.raises(SynthesisError):
        SynthesisSpec(s, eps3=0.0)
    with pytest.raises(SynthesisError):
        SynthesisSpec(s, X_states=("x2",))


def test_assembly_structure():
    s = load_system(TOY)
    asm = assemble(SynthesisSpec(s, strict=True))
    assert asm.families == family_names(s)
    assert len(asm.families) == 4 + len(s.X_set)
    assert asm.program.logdet is not None
    decrease = next(c for c in asm.program.constraints if c.name == "decrease")
    regions = [m.localizer.name for m in decrease.multipliers]
    assert sum(r.startswith("xi") for r in regions) == 1


def test_robust_mode_drops_parameter():
    s = load_system(TOY)
    spec = SynthesisSpec(s, mode="robust")
    assert "theta" not in spec.X_vars and "theta" not in spec.Y_vars
    asm = assemble(spec)
    assert "theta" not in asm.X.variables
    assert "theta" not in asm.Y.variables
    assert asm.families == family_names(s)


def test_toy_certificate_scale_and_structure(toy_cert):
    assert toy_cert.mode == "pd"
    assert set(toy_cert.X.variables) <= {"x1", "theta"}
    assert toy_cert.X.degree <= 2 and toy_cert.Y.degree <= 2
    X0 = toy_cert.X0
    assert np.all(np.linalg.eigvalsh(X0) > 0)
    # same order of magnitude as a box-limited certificate on [-5, 5]^2
    assert 0.05 < X0[0, 0] < 25 and 0.05 < X0[1, 1] < 25
    assert toy_cert.eps2 >= toy_cert.eps1


def test_toy_certificate_verifies(toy_cert, toy_system):
    rep = verify_certificate(toy_cert, toy_system, 10_000, 1e-6)
    assert rep.passed, rep.summary()
    assert set(rep.families) == set(family_names(toy_system))


def test_scaled_x0_fails(toy_cert, toy_system):
    bad = toy_cert.with_X0(1.5 * toy_cert.X0)
    rep = verify_certificate(bad, toy_system, 2000)
    assert not rep.passed
    assert rep.families["X0-inner"]["violations"] > 0
    assert rep.families["decrease"]["violations"] == 0


def test_empty_sample_set(toy_cert, toy_system):
    rep = verify_certificate(toy_cert, toy_system, 0)
    assert rep.samples == 0 and rep.families == {} and rep.warnings
    assert "vacuous" in rep.summary()


def test_certificate_json_round_trip(toy_cert, tmp_path):
    p = tmp_path / "c.json"
    toy_cert.save(p)
    back = Certificate.load(p)
    assert back.dumps() == toy_cert.dumps()
    assert np.array_equal(back.X0, toy_cert.X0)


def test_sampled_closed_loop_decrease(toy_cert, toy_system):
    clf = PdClf(toy_cert, toy_system)
    rng = np.random.default_rng(7)
    x, th = toy_system.sample(4000, seed=11)
    checked = 0
    for xi, ti in zip(x, th):
        if clf.eval_V(xi, ti) > 1.0:
            continue
        snap = clf.at(xi, ti)
        thd = rng.uniform(-0.1, 0.1, 1)
        u = snap.explicit_u()
        assert snap.vdot(thd, u) <= -toy_cert.eps3 * float(snap.z @ snap.z) + 1e-6
        checked += 1
        if checked == 1000:
            break
    assert checked == 1000


def test_infeasible_when_eps2_forced_below_eps1():
    s = load_system(TOY)
    spec = SynthesisSpec(s, eps1=1.0, eps3=0.2, eps2_upper=0.5, strict=True, Y_bound=300)
    res = synthesize(spec)
    assert res.status == "infeasible"
    assert res.certificate is None
    assert res.failure["family"] == "X-upper"


def test_theta_set_scaling_keeps_feasibility(toy_cfg):
    cfg = dict(toy_cfg["system"])
    cfg["theta_set"] = ["7*(theta - 0.05)*(1 - theta)"]
    s = load_system(cfg)
    spec = SynthesisSpec.from_config(s, cfg, toy_cfg["synthesis"])
    assert synthesize(spec).optimal


def test_robust_not_better_than_pd(toy_cert, toy_robust_cert):
    assert toy_cert.logdet_X0 >= toy_robust_cert.logdet_X0 - 1e-6
    assert "theta" not in toy_robust_cert.X.variables


def test_gram_residuals_recorded(toy_cert, toy_system):
    res = toy_cert.diagnostics["gram_residuals"]
    assert set(res) == set(family_names(toy_system))
    assert max(res.values()) <= 1e-6


def test_certificate_has_no_wall_clock(toy_cert):
    assert not any(k.endswith("seconds") or k.endswith("_time") for k in toy_cert.diagnostics)
