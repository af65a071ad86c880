"""Polynomial NPV systems in linear-like form ``xdot = A(x,th) x + B(x,th) u``."""

from __future__ import annotations

import dataclasses
import functools
import itertools
import math
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.stats import qmc

from .polynomial import (
    MatrixEvaluator,
    Polynomial,
    PolyMatrix,
    PolynomialError,
    VarSpace,
    poly_equal,
)


class SystemError_(ValueError):
    """Invalid system description."""


class EquilibriumError(SystemError_):
    pass


class FactorizationError(SystemError_):
    pass


@dataclasses.dataclass(frozen=True)
class StructureInfo:
    J: tuple[int, ...]
    x_tilde: tuple[str, ...]


def zero_rows(B: PolyMatrix, state_names: Sequence[str]) -> StructureInfo:
    """Rows of ``B`` that are identically zero and the states they index."""
    J = tuple(i for i in range(B.shape[0]) if B.is_zero_row(i))
    return StructureInfo(J, tuple(state_names[i] for i in J))


def rate_vertices(box: Sequence[tuple[float, float]]) -> list[np.ndarray]:
    """Corners of the rate box, lower bound first in each coordinate."""
    return [np.array(c, dtype=float) for c in itertools.product(*[(lo, hi) for lo, hi in box])]


def linear_like_form(f: PolyMatrix, state_names: Sequence[str]) -> PolyMatrix:
    """Split ``f`` as ``A(x) x`` by assigning each monomial to its first state factor."""
    space = f.space
    idx = [space.index(s) for s in state_names]
    n = len(state_names)
    rows = []
    for r in range(f.shape[0]):
        acc = [dict() for _ in range(n)]
        for m, c in f[r, 0].items():
            col = next((k for k, i in enumerate(idx) if m[i] > 0), None)
            if col is None:
                raise EquilibriumError(
                    f"row {r} has a term free of states; the origin is not an equilibrium")
            mm = list(m)
            mm[idx[col]] -= 1
            acc[col][tuple(mm)] = acc[col].get(tuple(mm), 0.0) + c
        rows.append([Polynomial(space, a) for a in acc])
    return PolyMatrix(space, rows)


def taylor_sin(p: Polynomial, degree: int) -> Polynomial:
    out = p.space.zero()
    for k in range(1, degree + 1, 2):
        out = out + ((-1) ** (k // 2) / math.factorial(k)) * p ** k
    return out


def taylor_cos(p: Polynomial, degree: int) -> Polynomial:
    out = p.space.zero()
    for k in range(0, degree + 1, 2):
        out = out + ((-1) ** (k // 2) / math.factorial(k)) * p ** k
    return out


def _interval_from_roots(h: Polynomial, name: str) -> tuple[float, float] | None:
    """Bounded interval containing ``{t : h(t) >= 0}``, or None if unbounded."""
    deg = h.degree
    coefs = np.zeros(deg + 1)
    i = h.space.index(name)
    for m, c in h.items():
        coefs[deg - m[i]] += c
    roots = np.roots(coefs) if deg > 0 else np.array([])
    real = sorted(r.real for r in roots if abs(r.imag) < 1e-9)
    cuts = [-math.inf] + real + [math.inf]
    lo, hi = math.inf, -math.inf
    for a, b in zip(cuts[:-1], cuts[1:]):
        if math.isinf(a) and math.isinf(b):
            mid = 0.0
        elif math.isinf(a):
            mid = b - 1.0
        elif math.isinf(b):
            mid = a + 1.0
        else:
            mid = 0.5 * (a + b)
        if h.eval({name: mid}) >= 0:
            lo, hi = min(lo, a), max(hi, b)
    if lo == math.inf:
        return (0.0, 0.0) if not real else (min(real), max(real))
    if math.isinf(lo) or math.isinf(hi):
        return None
    return (lo, hi)


@dataclasses.dataclass(frozen=True, eq=False)
class NpvSystem:
    space: VarSpace
    states: tuple[str, ...]
    params: tuple[str, ...]
    rates: tuple[str, ...]
    A: PolyMatrix
    B: PolyMatrix
    theta_set: tuple[Polynomial, ...]
    rate_box: tuple[tuple[float, float], ...]
    X_set: tuple[PolyMatrix, ...]
    f: PolyMatrix | None = None
    theta_box: tuple[tuple[float, float], ...] | None = None
    sample_box: tuple[tuple[float, float], ...] | None = None
    name: str = ""

    def __post_init__(self):
        n, m = self.n, self.m
        if self.A.shape != (n, n):
            raise SystemError_(f"A must be {n}x{n}, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise SystemError_(f"B must have {n} rows, got {self.B.shape}")
        if len(self.rate_box) != len(self.params):
            raise SystemError_("one rate interval per parameter required")
        for lo, hi in self.rate_box:
            if lo > hi:
                raise SystemError_(f"rate bounds out of order: [{lo}, {hi}]")
        allowed = set(self.states) | set(self.params)
        for name, M in (("A", self.A), ("B", self.B)):
            extra = set(M.variables) - allowed
            if extra:
                raise SystemError_(f"{name} depends on {sorted(extra)}")
        for h in self.theta_set:
            if set(h.variables) - set(self.params):
                raise SystemError_(f"parameter set polynomial {h} depends on states")
        for C in self.X_set:
            if C.shape[1] != n:
                raise SystemError_(f"local set matrix must have {n} columns, got {C.shape}")
            if set(C.variables) - set(self.states):
                raise SystemError_("local set matrices may depend on states only")
        if self.f is not None:
            self._check_f()

    @property
    def n(self) -> int:
        return len(self.states)

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_theta(self) -> int:
        return len(self.params)

    def _check_f(self) -> None:
        if self.f.shape != (self.n, 1):
            raise SystemError_(f"f must be a column of length {self.n}")
        at_origin = {s: 0.0 for s in self.states}
        for i in range(self.n):
            if not self.f[i, 0].substitute(at_origin).is_zero():
                raise EquilibriumError(f"f[{i}] does not vanish at the origin")
        Ax = self.A @ self.state_vector()
        for i in range(self.n):
            if not poly_equal(Ax[i, 0], self.f[i, 0], tol=1e-10):
                raise FactorizationError(f"row {i}: A x differs from f")

    def state_vector(self) -> PolyMatrix:
        return PolyMatrix(self.space, [[self.space.var(s)] for s in self.states])

    @functools.cached_property
    def structure(self) -> StructureInfo:
        return zero_rows(self.B, self.states)

    def vertices(self) -> list[np.ndarray]:
        return rate_vertices(self.rate_box)

    @functools.cached_property
    def local_polys(self) -> tuple[Polynomial, ...]:
        """``c_i(x) = 1 - x^T C_i^T C_i x``."""
        xv = self.state_vector()
        out = []
        for C in self.X_set:
            Cx = C @ xv
            s = self.space.const(1.0)
            for k in range(Cx.shape[0]):
                s = s - Cx[k, 0] * Cx[k, 0]
            out.append(s)
        return tuple(out)

    @functools.cached_property
    def _evaluator(self) -> MatrixEvaluator:
        mats = {"A": self.A, "B": self.B}
        for k, C in enumerate(self.X_set):
            mats[f"C{k}"] = C
        for k, h in enumerate(self.theta_set):
            mats[f"h{k}"] = PolyMatrix(self.space, [[h]])
        return MatrixEvaluator(mats)

    def point(self, x, theta, thetadot=None) -> np.ndarray:
        p = np.zeros(len(self.space))
        for name, v in zip(self.states, np.atleast_1d(x)):
            p[self.space.index(name)] = v
        for name, v in zip(self.params, np.atleast_1d(theta)):
            p[self.space.index(name)] = v
        if thetadot is not None:
            for name, v in zip(self.rates, np.atleast_1d(thetadot)):
                p[self.space.index(name)] = v
        return p

    def matrices(self, x, theta) -> tuple[np.ndarray, np.ndarray]:
        out = self._evaluator(self.point(x, theta))
        return out["A"], out["B"]

    def dynamics(self, x, theta, u) -> np.ndarray:
        A, B = self.matrices(x, theta)
        return A @ np.asarray(x, dtype=float) + B @ np.atleast_1d(np.asarray(u, dtype=float))

    def in_theta(self, theta, tol: float = 0.0) -> bool:
        out = self._evaluator(self.point(np.zeros(self.n), theta))
        return all(out[f"h{k}"][0, 0] >= -tol for k in range(len(self.theta_set)))

    def in_local_set(self, x, tol: float = 0.0) -> bool:
        """``|C_i(x) x| <= 1`` for every defining matrix."""
        x = np.asarray(x, dtype=float)
        out = self._evaluator(self.point(x, np.zeros(self.n_theta)))
        return all(np.linalg.norm(out[f"C{k}"] @ x) <= 1.0 + tol for k in range(len(self.X_set)))

    def sample(self, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Scrambled Sobol points of the local set times the parameter set.

        Points are drawn in the bounding boxes and rejected outside the sets,
        so the result is deterministic for a given seed.
        """
        if count <= 0:
            return np.zeros((0, self.n)), np.zeros((0, self.n_theta))
        box = np.array(self.state_bounds() + self.theta_bounds(), dtype=float)
        engine = qmc.Sobol(len(box), scramble=True, seed=seed)
        xs, ths = [], []
        got = 0
        batch = 1 << max(6, int(np.ceil(np.log2(count))))
        for _ in range(64):
            u = engine.random(batch)
            pts = box[:, 0] + u * (box[:, 1] - box[:, 0])
            x, th = pts[:, :self.n], pts[:, self.n:]
            keep = self.contains(x, th)
            xs.append(x[keep])
            ths.append(th[keep])
            got += int(keep.sum())
            if got >= count:
                break
        x, th = np.vstack(xs)[:count], np.vstack(ths)[:count]
        if len(x) < count:
            raise SystemError_("rejection sampling could not fill the request; check the sets")
        return x, th

    def contains(self, x: np.ndarray, theta: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Vectorised membership of ``(x, theta)`` rows in the local and parameter sets."""
        x = np.atleast_2d(x)
        theta = np.atleast_2d(theta)
        pts = np.zeros((len(x), len(self.space)))
        for k, s in enumerate(self.states):
            pts[:, self.space.index(s)] = x[:, k]
        for k, s in enumerate(self.params):
            pts[:, self.space.index(s)] = theta[:, k]
        out = self._evaluator(pts)
        ok = np.ones(len(x), dtype=bool)
        for k in range(len(self.X_set)):
            Cx = np.einsum("nij,nj->ni", out[f"C{k}"], x)
            ok &= np.linalg.norm(Cx, axis=1) <= 1.0 + tol
        for k in range(len(self.theta_set)):
            ok &= out[f"h{k}"][:, 0, 0] >= -tol
        return ok

    def theta_bounds(self) -> list[tuple[float, float]]:
        """Axis-aligned box containing the parameter set."""
        if self.theta_box is not None:
            return list(self.theta_box)
        out = []
        for name in self.params:
            lo, hi = -math.inf, math.inf
            for h in self.theta_set:
                if set(h.variables) == {name}:
                    iv = _interval_from_roots(h, name)
                    if iv is not None:
                        lo, hi = max(lo, iv[0]), min(hi, iv[1])
            if math.isinf(lo) or math.isinf(hi):
                raise SystemError_(f"cannot bound parameter {name}; supply theta_box")
            out.append((float(lo), float(hi)))
        return out

    def state_bounds(self) -> list[tuple[float, float]]:
        """Axis-aligned box containing the local set.

        Uses ``|C_i(0) x|_inf <= 1``, a superset of ``|C_i(0) x|_2 <= 1``;
        state-dependent ``C_i`` require an explicit sample box.
        """
        if self.sample_box is not None:
            return list(self.sample_box)
        if any(C.degree > 0 for C in self.X_set):
            raise SystemError_("state-dependent local set; supply sample_box")
        if not self.X_set:
            raise SystemError_("empty local set; supply sample_box")
        zero = {s: 0.0 for s in self.space.names}
        G = np.vstack([C.eval(zero) for C in self.X_set])
        A_ub = np.vstack([G, -G])
        b_ub = np.ones(2 * G.shape[0])
        out = []
        for k in range(self.n):
            ext = []
            for sign in (1.0, -1.0):
                c = np.zeros(self.n)
                c[k] = -sign
                res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * self.n,
                              method="highs")
                if res.status != 0:
                    raise SystemError_(f"local set unbounded along {self.states[k]}; supply sample_box")
                ext.append(sign * -res.fun)
            out.append((ext[1], ext[0]))
        return out


# ---------------------------------------------------------------------------
# construction

def make_space(states: Sequence[str], params: Sequence[str],
               rates: Sequence[str] | None = None) -> VarSpace:
    rates = list(rates) if rates is not None else [f"{p}_dot" for p in params]
    names = list(states) + list(params) + rates
    classes = ["state"] * len(states) + ["parameter"] * len(params) + ["parameter-rate"] * len(rates)
    return VarSpace(names, classes)


def _names(cfg: Mapping, n: int, n_theta: int):
    states = cfg.get("state_names") or [f"x{i + 1}" for i in range(n)]
    if cfg.get("parameter_names"):
        params = cfg["parameter_names"]
    else:
        params = ["theta"] if n_theta == 1 else [f"theta{k + 1}" for k in range(n_theta)]
    if len(states) != n or len(params) != n_theta:
        raise SystemError_("name lists do not match dimensions")
    return list(states), list(params)


def _local_set(space: VarSpace, spec) -> tuple[PolyMatrix, ...]:
    out = []
    for C in spec:
        rows = [C] if C and isinstance(C[0], (str, int, float)) else C
        out.append(PolyMatrix.from_strings(space, [[str(e) for e in r] for r in rows]))
    return tuple(out)


def load_system(cfg: Mapping, name: str = "") -> NpvSystem:
    """Build a validated system from a scenario ``system`` block."""
    dims = cfg["dimensions"]
    n, m, nt = dims["n"], dims["m"], dims["n_theta"]
    if "rocket" in cfg:
        return gravity_offset_transform(cfg["rocket"], theta_set=cfg.get("theta_set"),
                                        rate_box=cfg.get("rate_box"), X_set=cfg.get("X_set"),
                                        sample_box=cfg.get("sample_box"),
                                        theta_box=cfg.get("theta_box"), name=name)
    states, params = _names(cfg, n, nt)
    space = make_space(states, params)
    try:
        f = None
        if cfg.get("f") is not None:
            f = PolyMatrix.from_strings(space, [[s] for s in cfg["f"]])
        if cfg.get("A") is not None:
            A = PolyMatrix.from_strings(space, cfg["A"])
        elif f is not None:
            A = linear_like_form(f, states)
        else:
            raise SystemError_("either A or f is required")
        B = PolyMatrix.from_strings(space, cfg["B"])
        theta_set = tuple(space.parse(h) for h in cfg["theta_set"])
        X_set = _local_set(space, cfg.get("X_set", []))
    except PolynomialError as e:
        raise SystemError_(f"malformed polynomial: {e}") from e
    if B.shape != (n, m):
        raise SystemError_(f"B must be {n}x{m}, got {B.shape}")
    return NpvSystem(space, tuple(states), tuple(params), tuple(space.of_class("parameter-rate")),
                     A, B, theta_set, tuple(tuple(map(float, r)) for r in cfg["rate_box"]),
                     X_set, f=f, theta_box=_box(cfg.get("theta_box")),
                     sample_box=_box(cfg.get("sample_box")), name=name)


def _box(b):
    return None if b is None else tuple(tuple(map(float, r)) for r in b)


ROCKET_DEFAULTS = {"m": 1.0, "l": 1.0, "J": None, "g": 9.81,
                   "taylor_sin_deg": 3, "taylor_cos_deg": 2}


def gravity_offset_transform(params: Mapping | None = None, *, theta_set=None, rate_box=None,
                             X_set=None, sample_box=None, theta_box=None, name: str = "rocket"
                             ) -> NpvSystem:
    """Planar rocket with the hover thrust ``m g / theta`` folded into the input.

    State ``(y, z, phi, vy, vz, phidot)``, input ``(F_y, F_z - m g / theta)``;
    trigonometric terms are replaced by Taylor polynomials in ``phi``.
    """
    p = dict(ROCKET_DEFAULTS)
    p.update({k: v for k, v in (params or {}).items() if v is not None})
    m, l, g = float(p["m"]), float(p["l"]), float(p["g"])
    J = float(p["J"]) if p["J"] is not None else m * (2 * l) ** 2 / 12.0
    states = ["y", "z", "phi", "vy", "vz", "phidot"]
    space = make_space(states, ["theta"])
    phi, th = space.var("phi"), space.var("theta")
    sin_t = taylor_sin(phi, int(p["taylor_sin_deg"]))
    cos_t = taylor_cos(phi, int(p["taylor_cos_deg"]))
    # sin_t / phi: sin_t has no constant term, so division is exact
    sin_over_phi = Polynomial(space, {tuple(e - (i == 2) for i, e in enumerate(mono)): c
                                      for mono, c in sin_t.items()})
    Z, one = space.zero(), space.const(1.0)
    A = [[Z] * 6 for _ in range(6)]
    A[0][3] = A[1][4] = A[2][5] = one
    A[5][2] = (l * m * g / J) * sin_over_phi
    B = [[Z, Z] for _ in range(6)]
    B[3][0] = th * (1.0 / m)
    B[4][1] = th * (1.0 / m)
    B[5][0] = -(l / J) * cos_t * th
    B[5][1] = (l / J) * sin_t * th
    A, B = PolyMatrix(space, A), PolyMatrix(space, B)
    f = A @ PolyMatrix(space, [[space.var(s)] for s in states])
    if theta_set is None:
        theta_set = ["(theta - 1)*(5 - theta)"]
    if rate_box is None:
        rate_box = [[0.0, 0.1]]
    if X_set is None:
        X_set = ROCKET_LOCAL_SET
    return NpvSystem(space, tuple(states), ("theta",), ("theta_dot",), A, B,
                     tuple(space.parse(h) for h in theta_set),
                     tuple(tuple(map(float, r)) for r in rate_box),
                     _local_set(space, X_set), f=f, theta_box=_box(theta_box),
                     sample_box=_box(sample_box), name=name)


def _scaled_rows(idx: Sequence[int], scale: float) -> list[list[str]]:
    return [[repr(scale) if j == i else "0" for j in range(6)] for i in idx]


# y^2 + z^2 <= 36, phi^2 + phidot^2 <= (pi/3)^2, vy^2 + vz^2 <= 4
ROCKET_LOCAL_SET = [
    _scaled_rows([0, 1], 1.0 / 6.0),
    _scaled_rows([2, 5], 3.0 / math.pi),
    _scaled_rows([3, 4], 0.5),
]
