"""Runtime evaluation of a synthesized CLF and its two controllers."""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .npv import NpvSystem
from .synthesis import Certificate

COND_LIMIT = 1e12


class RuntimeFailure(RuntimeError):
    pass


class IllConditioned(RuntimeFailure):
    def __init__(self, cond: float):
        super().__init__(f"X is ill-conditioned (condition estimate {cond:.3e})")
        self.cond = cond


class QpIntegrityError(RuntimeFailure):
    """``L_g V = 0`` while the decrease condition needs input."""


@dataclasses.dataclass
class QpData:
    a: np.ndarray  # (L_g V)^T, shared by all vertex constraints
    b: np.ndarray  # one right-hand side per rate vertex
    c: float
    H: np.ndarray


def solve_min_norm_qp(a: np.ndarray, c: float, H: np.ndarray | None = None) -> np.ndarray:
    """Minimizer of ``u^T H u`` subject to ``a^T u <= c``."""
    a = np.asarray(a, dtype=float)
    if c >= 0.0:
        return np.zeros_like(a)
    Hia = a if H is None else np.linalg.solve(H, a)
    denom = float(a @ Hia)
    if denom <= 0.0:
        raise QpIntegrityError(f"no input direction decreases V (c = {c:.3e})")
    return (c / denom) * Hia


def qp_oracle(A: np.ndarray, b: np.ndarray, H: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Brute-force ``min u^T H u  s.t.  A u <= b`` by enumerating active sets."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    k, m = A.shape
    best, best_val = None, math.inf
    for size in range(0, min(k, m) + 1):
        for S in itertools.combinations(range(k), size):
            S = list(S)
            K = np.zeros((m + size, m + size))
            K[:m, :m] = 2 * H
            K[:m, m:] = A[S].T
            K[m:, :m] = A[S]
            rhs = np.concatenate([np.zeros(m), b[S]])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            if np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-9 * (1 + np.abs(rhs).max(initial=0)):
                continue
            # stationarity 2 H u + A_S^T lam = 0 with lam >= 0
            u, lam = sol[:m], sol[m:]
            if size and lam.min() < -1e-9:
                continue
            if np.any(A @ u > b + 1e-9 * (1 + np.abs(b))):
                continue
            val = float(u @ H @ u)
            if val < best_val - tol:
                best, best_val = u, val
    if best is None:
        raise QpIntegrityError("oracle found no feasible active set")
    return best


class PdClf:
    """``V(x, th) = x^T X(x, th)^{-1} x`` with its controllers.

    ``relaxed`` switches the decrease right-hand side from
    ``e3 x^T X^-2 x`` to ``(e3 / e2^2) |x|^2``.
    """

    def __init__(self, cert: Certificate, system: NpvSystem, H=None, relaxed: bool = False,
                 cond_limit: float = COND_LIMIT):
        self.cert = cert
        self.system = system
        self._ev = cert.evaluator(system)
        self.H = np.eye(system.m) if H is None else np.asarray(H, dtype=float)
        self.relaxed = relaxed
        self.cond_limit = cond_limit
        self.vertices = system.vertices()
        self._dx = [f"dX/{s}" for s in system.states]
        self._dth = [f"dX/{p}" for p in system.params]

    # numeric core ----------------------------------------------------------
    def matrices(self, x, theta) -> dict:
        return self._ev(self.system.point(x, theta))

    def _factor(self, X: np.ndarray):
        try:
            f = cho_factor(X, lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            raise IllConditioned(math.inf) from None
        d = np.diag(f[0])
        est = (d.max() / d.min()) ** 2
        if est > self.cond_limit:
            raise IllConditioned(est)
        return f

    def at(self, x, theta) -> "Snapshot":
        """Evaluate everything the controllers need at one point."""
        x = np.asarray(x, dtype=float)
        vals = self.matrices(x, theta)
        z = cho_solve(self._factor(vals["X"]), x)
        gx = 2.0 * z
        for j, key in enumerate(self._dx):
            D = vals[key]
            if D.any():
                gx[j] -= z @ D @ z
        gth = np.array([-(z @ vals[key] @ z) for key in self._dth])
        return Snapshot(self, x, vals, z, float(x @ z), gx, gth)

    def eval_V(self, x, theta) -> float:
        return self.at(x, theta).V

    def grad_V(self, x, theta) -> tuple[np.ndarray, np.ndarray]:
        s = self.at(x, theta)
        return s.gx, s.gth

    def explicit_u(self, x, theta) -> np.ndarray:
        return self.at(x, theta).explicit_u()

    def decrease_rhs(self, x, z) -> float:
        if self.relaxed:
            return self.cert.eps3 / self.cert.eps2 ** 2 * float(x @ x)
        return self.cert.eps3 * float(z @ z)

    def qp_data(self, x, theta) -> QpData:
        return self.at(x, theta).qp_data()

    def min_norm_u(self, x, theta) -> np.ndarray:
        return self.at(x, theta).min_norm()[0]

    def min_norm_with_data(self, x, theta) -> tuple[np.ndarray, QpData]:
        return self.at(x, theta).min_norm()

    def vdot(self, x, theta, thetadot, u) -> float:
        """Analytic ``dV/dt`` along ``xdot = A x + B u`` at the given rate."""
        return self.at(x, theta).vdot(thetadot, u)

    def in_omega(self, x, theta, rho: float = 1.0) -> bool:
        if not self.system.in_theta(theta):
            return False
        return self.eval_V(x, theta) <= rho

    # regions ---------------------------------------------------------------
    def boundary(self, theta, rays: int = 180, plane: tuple[int, int] = (0, 1),
                 rho: float = 1.0, r_max: float | None = None) -> np.ndarray:
        """Points of ``{V = rho}`` along rays in a coordinate plane (other states zero)."""
        if rays <= 0:
            return np.zeros((0, 2))
        if r_max is None:
            r_max = 10.0 * math.sqrt(max(np.linalg.eigvalsh(self.cert.X0)[-1], 1e-12)) + 10.0
        out = []
        n = self.system.n
        for ang in np.linspace(0.0, 2 * math.pi, rays, endpoint=False):
            d = np.zeros(n)
            d[plane[0]], d[plane[1]] = math.cos(ang), math.sin(ang)

            def g(r):
                return self.eval_V(r * d, theta) - rho

            grid = np.linspace(0.0, r_max, 200)[1:]
            prev = 1e-9
            hit = None
            for r in grid:
                try:
                    if g(r) >= 0.0:
                        hit = brentq(g, prev, r, xtol=1e-10)
                        break
                except IllConditioned:
                    break
                prev = r
            if hit is not None:
                out.append((hit * d[plane[0]], hit * d[plane[1]]))
        return np.array(out).reshape(-1, 2)

    def x0_ellipse(self, points: int = 180, plane: tuple[int, int] = (0, 1)) -> np.ndarray:
        """Outline of ``{x : x^T X0^-1 x = 1}`` projected on a coordinate plane."""
        if points <= 0:
            return np.zeros((0, 2))
        S = self.cert.X0[np.ix_(plane, plane)]
        L = np.linalg.cholesky(S)
        t = np.linspace(0.0, 2 * math.pi, points, endpoint=False)
        return (L @ np.vstack([np.cos(t), np.sin(t)])).T

    def sample_ros(self, thetas: Sequence[float], rays: int = 180,
                   plane: tuple[int, int] = (0, 1)) -> dict:
        return {"slices": [(float(th), self.boundary(th, rays, plane)) for th in thetas],
                "X0": self.x0_ellipse(rays, plane)}


@dataclasses.dataclass
class Snapshot:
    clf: PdClf
    x: np.ndarray
    vals: dict
    z: np.ndarray  # X^-1 x
    V: float
    gx: np.ndarray
    gth: np.ndarray

    def explicit_u(self) -> np.ndarray:
        return self.vals["Y"] @ self.z

    def qp_data(self) -> QpData:
        a = self.vals["B"].T @ self.gx
        lfv = float(self.gx @ (self.vals["A"] @ self.x))
        alpha = self.clf.decrease_rhs(self.x, self.z)
        b = np.array([-lfv - float(self.gth @ v) - alpha for v in self.clf.vertices])
        return QpData(a, b, float(b.min()), self.clf.H)

    def min_norm(self) -> tuple[np.ndarray, QpData]:
        q = self.qp_data()
        return solve_min_norm_qp(q.a, q.c, self.clf.H), q

    def xdot(self, u) -> np.ndarray:
        return self.vals["A"] @ self.x + self.vals["B"] @ np.atleast_1d(u)

    def vdot(self, thetadot, u) -> float:
        return float(self.gx @ self.xdot(u) + self.gth @ np.atleast_1d(thetadot))


def lipschitz_estimate(fn, box: Sequence[tuple[float, float]], pairs: int = 2000,
                       radius: float = 1e-3, seed: int = 0) -> float:
    """Largest ``|fn(a) - fn(b)| / |a - b|`` over random close pairs in ``box``."""
    rng = np.random.default_rng(seed)
    box = np.asarray(box, dtype=float)
    worst = 0.0
    for _ in range(pairs):
        a = box[:, 0] + rng.random(len(box)) * (box[:, 1] - box[:, 0])
        b = np.clip(a + radius * rng.standard_normal(len(box)), box[:, 0], box[:, 1])
        d = np.linalg.norm(a - b)
        if d == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(np.asarray(fn(a)) - np.asarray(fn(b)))) / d)
    return worst
