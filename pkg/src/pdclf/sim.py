"""Fixed-step closed-loop simulation with diagnostic traces."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .npv import NpvSystem
from .runtime import PdClf, RuntimeFailure

TRAJECTORY_KINDS = ("sinusoid", "linear-ramp", "piecewise", "constant")
CONTROLLERS = ("explicit", "minnorm")


class SimulationError(RuntimeError):
    def __init__(self, msg: str, trace: "SimulationTrace | None" = None):
        super().__init__(msg)
        self.trace = trace


class AdmissibilityError(SimulationError):
    pass


class DivergenceError(SimulationError):
    pass


@dataclasses.dataclass(frozen=True)
class ThetaTrajectory:
    """Parameter trajectory; every field is broadcast over the parameter vector.

    sinusoid: ``offset + amplitude * cos(frequency * t + phase)``
    linear-ramp: ``offset + slope * t``
    piecewise: linear interpolation through ``knots`` = [(t, value), ...]
    constant: ``offset``
    """

    kind: str
    offset: tuple = (0.0,)
    amplitude: tuple = (0.0,)
    frequency: tuple = (0.0,)
    phase: tuple = (0.0,)
    slope: tuple = (0.0,)
    knots: tuple = ()

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.kind == "piecewise":
            ts = [k[0] for k in self.knots]
            if len(ts) < 2 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("piecewise trajectories need increasing knot times")

    @classmethod
    def from_config(cls, cfg: dict) -> "ThetaTrajectory":
        def vec(key, default=0.0):
            return tuple(np.atleast_1d(np.asarray(cfg.get(key, default), dtype=float)).tolist())
        knots = tuple((float(k[0]), tuple(np.atleast_1d(k[1]).tolist())) for k in cfg.get("knots", ()))
        return cls(cfg["kind"], vec("offset"), vec("amplitude"), vec("frequency"), vec("phase"),
                   vec("slope"), knots)

    def _arr(self, v):
        return np.asarray(v, dtype=float)

    def value(self, t: float) -> np.ndarray:
        if self.kind == "sinusoid":
            return self._arr(self.offset) + self._arr(self.amplitude) * np.cos(
                self._arr(self.frequency) * t + self._arr(self.phase))
        if self.kind == "linear-ramp":
            return self._arr(self.offset) + self._arr(self.slope) * t
        if self.kind == "piecewise":
            ts = np.array([k[0] for k in self.knots])
            vs = np.array([k[1] for k in self.knots], dtype=float)
            return np.array([np.interp(t, ts, vs[:, i]) for i in range(vs.shape[1])])
        return self._arr(self.offset).copy()

    def rate(self, t: float) -> np.ndarray:
        if self.kind == "sinusoid":
            w = self._arr(self.frequency)
            return -self._arr(self.amplitude) * w * np.sin(w * t + self._arr(self.phase))
        if self.kind == "linear-ramp":
            return self._arr(self.slope).copy()
        if self.kind == "piecewise":
            ts = np.array([k[0] for k in self.knots])
            vs = np.array([k[1] for k in self.knots], dtype=float)
            if t < ts[0] or t >= ts[-1]:
                return np.zeros(vs.shape[1])
            i = int(np.searchsorted(ts, t, side="right")) - 1
            return (vs[i + 1] - vs[i]) / (ts[i + 1] - ts[i])
        return np.zeros_like(self._arr(self.offset))


@dataclasses.dataclass
class SimulationTrace:
    controller: str
    gain: float
    state_names: tuple[str, ...]
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    theta: np.ndarray
    thetadot: np.ndarray
    V: np.ndarray
    Vdot_analytic: np.ndarray
    Vdot_fd: np.ndarray
    c_zeta: np.ndarray
    events: list = dataclasses.field(default_factory=list)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def zero_input_prefix(self, tol: float = 0.0) -> float:
        """Length of the initial time span with ``u = 0``."""
        nz = np.flatnonzero(np.abs(self.inputs).max(axis=1) > tol)
        if nz.size == 0:
            return float(self.times[-1])
        return float(self.times[nz[0]])

    def header(self) -> list[str]:
        n, m = self.states.shape[1], self.inputs.shape[1]
        nt = self.theta.shape[1]
        th = ["theta"] if nt == 1 else [f"theta{k + 1}" for k in range(nt)]
        thd = ["thetadot"] if nt == 1 else [f"thetadot{k + 1}" for k in range(nt)]
        return (["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
                + th + thd + ["V", "Vdot_analytic", "Vdot_fd", "c_zeta"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        cols = np.column_stack([self.times, self.states, self.inputs, self.theta, self.thetadot,
                                self.V, self.Vdot_analytic, self.Vdot_fd, self.c_zeta])
        for row in cols:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def _named_control(kind: str):
    if kind == "explicit":
        return lambda snap: (snap.explicit_u(), math.nan)
    if kind == "minnorm":
        def ctrl(snap):
            u, q = snap.min_norm()
            return u, q.c
        return ctrl
    raise ValueError(f"unknown controller {kind!r}; choose from {CONTROLLERS}")


def integrate(system: NpvSystem, controller, traj: ThetaTrajectory, x0, T: float,
              dt: float = 1e-3, gain: float = 1.0, clf: PdClf | None = None,
              per_stage: bool = False, adm_tol: float = 1e-9) -> SimulationTrace:
    """RK4 on ``xdot = A x + B gain u`` with the parameter following ``traj``.

    ``controller`` is a name (needs ``clf``) or a callable ``(x, theta) -> u``.
    The input is held over each step unless ``per_stage`` is set.
    Admissibility of the parameter trajectory is checked at every step time.
    """
    if dt <= 0 or gain <= 0:
        raise ValueError("dt and gain must be positive")
    x = np.array(x0, dtype=float)
    if x.shape != (system.n,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite vector of the state dimension")
    if isinstance(controller, str):
        if clf is None:
            raise ValueError("named controllers need a PdClf")
        name = controller
        named = _named_control(controller)

        def control(xx, th, snap):
            return named(snap if snap is not None else clf.at(xx, th))
    else:
        name = getattr(controller, "__name__", "custom")

        def control(xx, th, snap, _f=controller):
            return np.atleast_1d(np.asarray(_f(xx, th), dtype=float)), math.nan

    steps = int(round(T / dt))
    n, m, nt = system.n, system.m, system.n_theta
    times = np.arange(steps + 1) * dt
    X = np.full((steps + 1, n), np.nan)
    U = np.full((steps + 1, m), np.nan)
    TH = np.full((steps + 1, nt), np.nan)
    THD = np.full((steps + 1, nt), np.nan)
    V = np.full(steps + 1, np.nan)
    VD = np.full(steps + 1, np.nan)
    C = np.full(steps + 1, np.nan)
    events: list = []
    lo = np.array([b[0] for b in system.rate_box])
    hi = np.array([b[1] for b in system.rate_box])

    def build(k):
        fd = np.gradient(V[:k], times[:k]) if k > 1 else np.zeros(k)
        return SimulationTrace(name, gain, system.states, times[:k], X[:k], U[:k], TH[:k],
                               THD[:k], V[:k], VD[:k], fd, C[:k], events)

    def rhs(xx, th, u):
        return system.dynamics(xx, th, gain * u)

    def stage_u(xx, th, u_held):
        if not per_stage:
            return u_held
        snap = clf.at(xx, th) if clf is not None else None
        return control(xx, th, snap)[0]

    inside_omega = True
    inside_x = True
    for k in range(steps + 1):
        t = times[k]
        th, thd = traj.value(t), traj.rate(t)
        if not system.in_theta(th, adm_tol) or np.any(thd < lo - adm_tol) or np.any(thd > hi + adm_tol):
            raise AdmissibilityError(f"parameter trajectory leaves the admissible set at t={t:.6g}",
                                     build(k))
        snap = None
        try:
            if clf is not None:
                snap = clf.at(x, th)
            u, c = control(x, th, snap)
        except RuntimeFailure as e:
            events.append({"t": float(t), "event": "controller-failure", "detail": str(e)})
            raise SimulationError(str(e), build(k)) from e
        X[k], U[k], TH[k], THD[k], C[k] = x, u, th, thd, c
        if snap is not None:
            V[k] = snap.V
            VD[k] = snap.vdot(thd, gain * u)
            if inside_omega and snap.V > 1.0:
                events.append({"t": float(t), "event": "omega-exit"})
                inside_omega = False
        if inside_x and system.X_set and not system.in_local_set(x):
            events.append({"t": float(t), "event": "local-set-exit"})
            inside_x = False
        if k == steps:
            break
        h = dt
        th2, th4 = traj.value(t + h / 2), traj.value(t + h)
        k1 = snap.xdot(gain * u) if snap is not None else rhs(x, th, u)
        xa = x + h / 2 * k1
        k2 = rhs(xa, th2, stage_u(xa, th2, u))
        xb = x + h / 2 * k2
        k3 = rhs(xb, th2, stage_u(xb, th2, u))
        xc = x + h * k3
        k4 = rhs(xc, th4, stage_u(xc, th4, u))
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > 1e12:
            X[k + 1] = x
            events.append({"t": float(t + h), "event": "divergence"})
            raise DivergenceError(f"state diverged at t={t + h:.6g}", build(k + 2))
    return build(steps + 1)


@dataclasses.dataclass
class Rollout:
    x0: Sequence[float]
    controller: str = "explicit"
    gain: float = 1.0
    T: float = 10.0
    dt: float = 1e-3
    per_stage: bool = False
    label: str = ""


def batch(system: NpvSystem, clf: PdClf, traj: ThetaTrajectory, rollouts: Sequence[Rollout],
          threads: int = 1) -> list:
    """Independent rollouts; failures are returned in place as ``SimulationError``."""
    def one(r: Rollout):
        try:
            return integrate(system, r.controller, traj, r.x0, r.T, r.dt, r.gain, clf, r.per_stage)
        except SimulationError as e:
            return e

    if threads <= 1 or len(rollouts) <= 1:
        return [one(r) for r in rollouts]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(one, rollouts))
