"""Command-line front end: ``pdclf synthesize | check | simulate | ros``.

Scenario files are JSON with four blocks (``system``, ``synthesis``,
``simulation``, ``output``).  They are schema-validated before any work is
done; unknown keys are rejected.  A bare name such as ``toy`` resolves to a
scenario bundled with the package.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import svg
from .conic import SolverError, SolverOptions
from .npv import NpvSystem, SystemError_, load_system
from .polynomial import MatrixEvaluator, PolynomialError
from .runtime import PdClf
from .sim import CONTROLLERS, Rollout, SimulationError, ThetaTrajectory, batch
from .synthesis import Certificate, SynthesisError, SynthesisSpec, synthesize, verify_certificate

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_FAILED_CHECK = 4

_poly = {"type": "string", "minLength": 1}
_poly_row = {"type": "array", "items": _poly, "minItems": 1}
_interval = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_num_or_vec = {"oneOf": [{"type": "number"},
                         {"type": "array", "items": {"type": "number"}, "minItems": 1}]}
_names = {"type": "array", "items": {"type": "string", "pattern": "^[A-Za-z_][A-Za-z0-9_]*$"}}


def _obj(props: dict, required: Sequence[str] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_degrees = _obj({k: {"type": "integer", "minimum": 0} for k in ("X", "Y", "multipliers")})
_epsilons = _obj({k: {"type": "number", "exclusiveMinimum": 0} for k in ("e1", "e3")})

SYSTEM_SCHEMA = {
    **_obj({
        "dimensions": _obj({k: {"type": "integer", "minimum": 1} for k in ("n", "m", "n_theta")},
                           ["n", "m", "n_theta"]),
        "state_names": _names,
        "parameter_names": _names,
        "A": {"type": "array", "items": _poly_row, "minItems": 1},
        "B": {"type": "array", "items": _poly_row, "minItems": 1},
        "f": _poly_row,
        "theta_set": {"type": "array", "items": _poly, "minItems": 1},
        "rate_box": {"type": "array", "items": _interval, "minItems": 1},
        "X_set": {"type": "array", "items": {"oneOf": [
            _poly_row, {"type": "array", "items": _poly_row, "minItems": 1}]}},
        "theta_box": {"type": "array", "items": _interval},
        "sample_box": {"type": "array", "items": _interval},
        "degrees": _degrees,
        "epsilons": _epsilons,
        "rocket": _obj({
            "m": {"type": "number", "exclusiveMinimum": 0},
            "l": {"type": "number", "exclusiveMinimum": 0},
            "J": {"type": "number", "exclusiveMinimum": 0},
            "g": {"type": "number"},
            "taylor_sin_deg": {"type": "integer", "minimum": 1},
            "taylor_cos_deg": {"type": "integer", "minimum": 0},
        }),
    }, ["dimensions", "theta_set", "rate_box"]),
    "anyOf": [{"required": ["B"]}, {"required": ["rocket"]}],
}

SCENARIO_SCHEMA = _obj({
    "name": {"type": "string"},
    "description": {"type": "string"},
    "system": SYSTEM_SCHEMA,
    "synthesis": _obj({
        "mode": {"enum": ["pd", "robust"]},
        "strict": {"type": "boolean"},
        "X_states": _names,
        "Y_states": _names,
        "multiplier_vars": _names,
        "eps2_upper": {"type": ["number", "null"]},
        "Y_bound": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "degrees": _degrees,
        "epsilons": _epsilons,
    }),
    "simulation": _obj({
        "theta": _obj({
            "kind": {"enum": ["sinusoid", "linear-ramp", "piecewise", "constant"]},
            "offset": _num_or_vec, "amplitude": _num_or_vec, "frequency": _num_or_vec,
            "phase": _num_or_vec, "slope": _num_or_vec,
            "knots": {"type": "array", "items": {
                "type": "array", "minItems": 2, "maxItems": 2,
                "prefixItems": [{"type": "number"}, _num_or_vec]}},
        }, ["kind"]),
        "initial_states": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "gain": {"type": "number", "exclusiveMinimum": 0},
        "controller": {"enum": list(CONTROLLERS)},
        "per_stage": {"type": "boolean"},
        "H": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "controllers": _obj({c: _obj({"dt": {"type": "number", "exclusiveMinimum": 0},
                                      "per_stage": {"type": "boolean"}})
                             for c in CONTROLLERS}),
    }, ["theta", "initial_states"]),
    "output": _obj({
        "directory": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["csv", "svg", "json"]}},
    }),
}, ["system"])


class ScenarioError(ValueError):
    pass


def _schema_path(err: jsonschema.ValidationError) -> str:
    return "/" + "/".join(str(p) for p in err.absolute_path)


def validate_scenario(cfg) -> None:
    """Raise :class:`ScenarioError` naming the JSON path of the first problem."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        e = jsonschema.exceptions.best_match(errors)
        raise ScenarioError(f"scenario invalid at {_schema_path(e)}: {e.message}")


def bundled_scenarios() -> list[str]:
    root = resources.files("pdclf") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_scenario(ref: str) -> dict:
    """Load a scenario from a path, or by bundled name."""
    path = Path(ref)
    if path.exists():
        text = path.read_text()
    elif ref in bundled_scenarios():
        text = (resources.files("pdclf") / "scenarios" / f"{ref}.json").read_text()
    else:
        raise ScenarioError(f"no scenario file or bundled scenario named {ref!r}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario is not valid JSON: {e}") from None
    validate_scenario(cfg)
    return cfg


def scenario_hash(cfg: dict) -> str:
    """Digest of the canonical JSON of the ``system`` block."""
    canon = json.dumps(cfg["system"], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def build_system(cfg: dict) -> NpvSystem:
    try:
        return load_system(cfg["system"], name=cfg.get("name", ""))
    except (SystemError_, PolynomialError) as e:
        raise ScenarioError(f"scenario invalid at /system: {e}") from None


def build_spec(cfg: dict, system: NpvSystem, mode: str | None = None) -> SynthesisSpec:
    try:
        return SynthesisSpec.from_config(system, cfg["system"], cfg.get("synthesis"), mode)
    except SynthesisError as e:
        raise ScenarioError(f"scenario invalid at /synthesis: {e}") from None


def load_certificate(path: str) -> Certificate:
    try:
        return Certificate.load(path)
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise ScenarioError(f"cannot read certificate {path}: {e}") from None


def _check_hash(cert: Certificate, cfg: dict) -> None:
    h = scenario_hash(cfg)
    if cert.scenario_hash != h:
        raise ScenarioError(f"certificate was made for scenario {cert.scenario_hash}, "
                            f"this scenario hashes to {h}")


def _out_dir(args, cfg: dict) -> Path:
    d = args.out or cfg.get("output", {}).get("directory") or "pdclf-out"
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _formats(cfg: dict) -> set:
    return set(cfg.get("output", {}).get("formats", ["csv", "svg"]))


def _solver_opts(args) -> SolverOptions:
    opts = SolverOptions(threads=args.threads)
    if args.tol is not None:
        opts.tol_gap = opts.tol_feas = args.tol
    return opts


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands

def cmd_synthesize(args) -> int:
    cfg = read_scenario(args.scenario)
    system = build_system(cfg)
    spec = build_spec(cfg, system, args.mode)
    try:
        res = synthesize(spec, args.solver, _solver_opts(args), scenario_hash=scenario_hash(cfg))
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    summary = {"status": res.status, "mode": spec.mode,
               "raw_status": res.diagnostics.get("raw_status"),
               "program": res.diagnostics.get("program")}
    if res.diagnostics.get("warning"):
        summary["warning"] = res.diagnostics["warning"]
    if res.optimal:
        out = args.out or f"{cfg.get('name', 'scenario')}-{spec.mode}.cert.json"
        res.certificate.save(out)
        summary.update(certificate=out, logdet_X0=res.certificate.logdet_X0,
                       eps2=res.certificate.eps2)
        _emit(summary)
        return EXIT_OK
    if res.failure is not None:
        summary["failure"] = res.failure
    _emit(summary)
    return EXIT_INFEASIBLE if res.status == "infeasible" else EXIT_SOLVER


def cmd_check(args) -> int:
    cfg = read_scenario(args.scenario)
    cert = load_certificate(args.certificate)
    _check_hash(cert, cfg)
    system = build_system(cfg)
    tol = 1e-6 if args.tol is None else args.tol
    report = verify_certificate(cert, system, args.samples, tol, args.seed)
    print(report.summary())
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_FAILED_CHECK


def _rollouts(cfg: dict, args) -> list[Rollout]:
    sim = cfg["simulation"]
    kind = args.controller or sim.get("controller", "explicit")
    over = sim.get("controllers", {}).get(kind, {})
    dt = args.dt or over.get("dt", sim.get("dt", 1e-3))
    per_stage = over.get("per_stage", sim.get("per_stage", False))
    gain = args.gain if args.gain is not None else sim.get("gain", 1.0)
    T = args.T or sim.get("T", 10.0)
    return [Rollout(tuple(x0), kind, gain, T, dt, per_stage, f"rollout-{k}")
            for k, x0 in enumerate(sim["initial_states"])]


def cmd_simulate(args) -> int:
    cfg = read_scenario(args.scenario)
    if "simulation" not in cfg:
        raise ScenarioError("scenario invalid at /: 'simulation' is required for simulate")
    cert = load_certificate(args.certificate)
    _check_hash(cert, cfg)
    system = build_system(cfg)
    sim = cfg["simulation"]
    H = np.asarray(sim["H"], dtype=float) if "H" in sim else None
    clf = PdClf(cert, system, H)
    traj = ThetaTrajectory.from_config(sim["theta"])
    runs = _rollouts(cfg, args)
    for r in runs:
        if len(r.x0) != system.n:
            raise ScenarioError("scenario invalid at /simulation/initial_states: "
                                f"expected {system.n} entries per state")
    out = _out_dir(args, cfg)
    fmts = _formats(cfg)
    results = batch(system, clf, traj, runs, args.threads)
    manifest, failed = [], False
    for r, res in zip(runs, results):
        trace = res.trace if isinstance(res, SimulationError) else res
        entry = {"label": r.label, "x0": list(r.x0), "controller": r.controller, "gain": r.gain,
                 "T": r.T, "dt": r.dt, "per_stage": r.per_stage,
                 "status": "ok" if not isinstance(res, SimulationError) else "failed"}
        if isinstance(res, SimulationError):
            failed = True
            entry["error"] = str(res)
        if trace is not None:
            entry["events"] = trace.events
            entry["final_state"] = trace.final_state.tolist()
            entry["final_norm"] = float(np.linalg.norm(trace.final_state))
            if "csv" in fmts:
                trace.save_csv(out / f"{r.label}.csv")
                entry["csv"] = f"{r.label}.csv"
            if "svg" in fmts:
                (out / f"{r.label}.svg").write_text(svg.trace_figure(trace))
                entry["svg"] = f"{r.label}.svg"
        manifest.append(entry)
    (out / "manifest.json").write_text(json.dumps({"scenario_hash": scenario_hash(cfg),
                                                   "rollouts": manifest}, indent=1,
                                                  sort_keys=True))
    for e in manifest:
        print(f"{e['label']}: {e['status']} |x(T)|={e.get('final_norm', math.nan):.3e} "
              f"events={[ev['event'] for ev in e.get('events', [])]}")
    return EXIT_FAILED_CHECK if failed else EXIT_OK


class LevelSet:
    """``V = x^T X^-1 x`` evaluated straight from a certificate."""

    def __init__(self, cert: Certificate):
        self.cert = cert
        self._ev = MatrixEvaluator({"X": cert.X})
        self._names = list(cert.space.names)

    def values(self, x: np.ndarray, theta: Sequence[float]) -> np.ndarray:
        """V at each row of ``x``; ``inf`` where X is not positive definite."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pts = np.zeros((len(x), len(self._names)))
        for i, s in enumerate(self.cert.states):
            pts[:, self._names.index(s)] = x[:, i]
        for k, p in enumerate(self.cert.params):
            pts[:, self._names.index(p)] = theta[k]
        Xs = self._ev(pts)["X"]
        out = np.full(len(x), np.inf)
        for i, (X, xi) in enumerate(zip(Xs, x)):
            try:
                L = np.linalg.cholesky(X)
            except np.linalg.LinAlgError:
                continue
            z = np.linalg.solve(L, xi)
            out[i] = float(z @ z)
        return out

    def boundary(self, theta, rays: int, plane=(0, 1), r_max: float = 50.0,
                 steps: int = 400) -> np.ndarray:
        """First crossing of ``V = 1`` along rays in a coordinate plane, bisected."""
        n = len(self.cert.states)
        pts = []
        radii = np.linspace(0.0, r_max, steps + 1)[1:]
        for ang in np.linspace(0.0, 2 * math.pi, rays, endpoint=False):
            d = np.zeros(n)
            d[plane[0]], d[plane[1]] = math.cos(ang), math.sin(ang)
            V = self.values(radii[:, None] * d, theta)
            hit = np.flatnonzero(V >= 1.0)
            if hit.size == 0:
                continue
            hi = radii[hit[0]]
            lo = radii[hit[0] - 1] if hit[0] > 0 else 0.0
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                if self.values(mid * d, theta)[0] >= 1.0:
                    hi = mid
                else:
                    lo = mid
            pts.append((lo * d[plane[0]], lo * d[plane[1]]))
        return np.array(pts).reshape(-1, 2)


def _parse_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def cmd_ros(args) -> int:
    cert = load_certificate(args.certificate)
    system = None
    if args.scenario:
        cfg = read_scenario(args.scenario)
        _check_hash(cert, cfg)
        system = build_system(cfg)
    n = len(cert.states)
    plane = tuple(int(t) for t in args.plane.split(","))
    if len(plane) != 2 or not all(0 <= p < n for p in plane) or plane[0] == plane[1]:
        raise ScenarioError(f"--plane needs two distinct state indices below {n}")
    if args.grid < 1:
        raise ScenarioError("--grid must be at least 1")
    if args.grid == 1:
        print("warning: grid of 1 gives a single degenerate cell", file=sys.stderr)
    slices = _parse_floats(args.slices)
    level = LevelSet(cert)
    out = Path(args.out or "ros-out")
    out.mkdir(parents=True, exist_ok=True)
    sampling = n > 3
    if sampling and system is None:
        raise ScenarioError("sampling mode (more than 3 states) needs --scenario for the sample box")
    panel = svg.Panel("region of stabilization slices", cert.states[plane[0]],
                      cert.states[plane[1]], equal_aspect=True)
    summary = []

    def region(c: Certificate, lv: LevelSet, th: float) -> np.ndarray:
        if not sampling:
            return lv.boundary([th] * len(c.params), args.grid, plane)
        count = args.grid * args.grid
        x, _ = system.sample(count, args.seed)
        keep = lv.values(x, [th] * len(c.params)) <= 1.0
        return x[keep][:, list(plane)]

    for k, th in enumerate(slices):
        pts = region(cert, level, th)
        np.savetxt(out / f"slice-{k}.csv", pts, delimiter=",",
                   header=f"{cert.states[plane[0]]},{cert.states[plane[1]]}", comments="",
                   fmt="%.12g")
        summary.append({"theta": th, "points": int(len(pts)), "csv": f"slice-{k}.csv"})
        label = f"theta={th:g}"
        if sampling:
            panel.points(pts[:, 0], pts[:, 1], label)
        else:
            panel.line(pts[:, 0], pts[:, 1], label, closed=True)
    if args.robust:
        rc = load_certificate(args.robust)
        pts = region(rc, LevelSet(rc), slices[0] if slices else 0.0)
        np.savetxt(out / "robust.csv", pts, delimiter=",",
                   header=f"{cert.states[plane[0]]},{cert.states[plane[1]]}", comments="",
                   fmt="%.12g")
        summary.append({"robust": True, "points": int(len(pts)), "csv": "robust.csv"})
        if sampling:
            panel.points(pts[:, 0], pts[:, 1], "robust", color="#000000")
        else:
            panel.line(pts[:, 0], pts[:, 1], "robust", color="#000000", closed=True)
    (out / "ros.svg").write_text(svg.figure([panel], panel_size=(520, 480)))
    (out / "ros.json").write_text(json.dumps({"mode": "sampling" if sampling else "contour",
                                              "plane": list(plane), "slices": summary},
                                             indent=1, sort_keys=True))
    _emit({"mode": "sampling" if sampling else "contour", "slices": summary})
    return EXIT_OK


# ---------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--solver", choices=["clarabel", "scs", "cvxopt"], default=d("clarabel"))
    parser.add_argument("--tol", type=float, default=d(None),
                        help="solver tolerance for synthesize, check tolerance for check")
    parser.add_argument("--threads", type=int, default=d(1))
    parser.add_argument("--seed", type=int, default=d(0))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdclf", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", parents=[common], help="solve the SOS program")
    s.add_argument("scenario")
    s.add_argument("--mode", choices=["pd", "robust"])
    s.add_argument("--out", help="certificate path")
    s.set_defaults(func=cmd_synthesize)

    c = sub.add_parser("check", parents=[common], help="sample-verify a certificate")
    c.add_argument("certificate")
    c.add_argument("scenario")
    c.add_argument("--samples", type=int, default=10_000)
    c.add_argument("--report", help="write the JSON report here")
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("simulate", parents=[common], help="closed-loop rollouts")
    m.add_argument("certificate")
    m.add_argument("scenario")
    m.add_argument("--controller", choices=list(CONTROLLERS))
    m.add_argument("--gain", type=float)
    m.add_argument("--dt", type=float)
    m.add_argument("--T", type=float)
    m.add_argument("--out", help="output directory")
    m.set_defaults(func=cmd_simulate)

    r = sub.add_parser("ros", parents=[common], help="export region-of-stabilization slices")
    r.add_argument("certificate")
    r.add_argument("--scenario")
    r.add_argument("--slices", default="0.05,0.3,0.6,1.0")
    r.add_argument("--grid", type=int, default=180,
                   help="rays per slice, or sqrt of the sample count in sampling mode")
    r.add_argument("--plane", default="0,1")
    r.add_argument("--robust", help="robust-mode certificate to overlay")
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_ros)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
