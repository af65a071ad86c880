"""Sparse multivariate polynomials and polynomial matrices.

Monomials are dense exponent tuples over a fixed :class:`VarSpace`; a
polynomial maps monomials to float coefficients.  Terms whose coefficient
magnitude falls below :data:`ZERO_TOL` are dropped on construction.
"""

from __future__ import annotations

import ast
import math
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence

import numpy as np

ZERO_TOL = 1e-14

VAR_CLASSES = ("state", "parameter", "parameter-rate", "auxiliary")

Monomial = tuple


class PolynomialError(ValueError):
    pass


class VarSpaceMismatch(PolynomialError):
    pass


class UnknownVariable(PolynomialError, KeyError):
    pass


class MissingAssignment(PolynomialError, KeyError):
    pass


class PolynomialParseError(PolynomialError):
    pass


class DimensionMismatch(PolynomialError):
    pass


class VarSpace:
    """Ordered, immutable set of variable names with a class tag per variable."""

    __slots__ = ("names", "classes", "_index")

    def __init__(self, names: Sequence[str], classes: Sequence[str] | None = None):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise PolynomialError(f"duplicate variable names in {names}")
        if classes is None:
            classes = ("state",) * len(names)
        classes = tuple(classes)
        if len(classes) != len(names):
            raise PolynomialError("one class tag per variable required")
        for c in classes:
            if c not in VAR_CLASSES:
                raise PolynomialError(f"unknown variable class {c!r}")
        self.names = names
        self.classes = classes
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        return (isinstance(other, VarSpace) and self.names == other.names
                and self.classes == other.classes)

    def __hash__(self) -> int:
        return hash((self.names, self.classes))

    def __repr__(self) -> str:
        return f"VarSpace({list(self.names)})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVariable(f"unknown variable {name!r}") from None

    def of_class(self, cls: str) -> tuple[str, ...]:
        return tuple(n for n, c in zip(self.names, self.classes) if c == cls)

    def unit(self, name: str) -> Monomial:
        e = [0] * len(self.names)
        e[self.index(name)] = 1
        return tuple(e)

    @property
    def one(self) -> Monomial:
        return (0,) * len(self.names)

    def var(self, name: str) -> "Polynomial":
        return Polynomial(self, {self.unit(name): 1.0})

    def vars(self, *names: str) -> list["Polynomial"]:
        return [self.var(n) for n in names]

    def const(self, value: float) -> "Polynomial":
        return Polynomial(self, {self.one: float(value)})

    def zero(self) -> "Polynomial":
        return Polynomial(self, {})

    def parse(self, text: str) -> "Polynomial":
        return parse_polynomial(text, self)


# ---------------------------------------------------------------------------
# monomial helpers

def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x + y for x, y in zip(a, b))


def mono_degree(a: Monomial) -> int:
    return sum(a)


def mono_divides(a: Monomial, b: Monomial) -> bool:
    return all(x <= y for x, y in zip(a, b))


def mono_div(b: Monomial, a: Monomial) -> Monomial:
    return tuple(y - x for x, y in zip(a, b))


def grlex_key(m: Monomial):
    """Ascending graded order; within a degree, earlier variables come first."""
    return (sum(m), tuple(-e for e in m))


def monomials_upto(space: VarSpace, names: Iterable[str], degree: int,
                   mindegree: int = 0) -> list[Monomial]:
    """All monomials in ``names`` with ``mindegree <= deg <= degree``, grlex sorted."""
    idx = sorted(space.index(n) for n in set(names))
    out = []
    for d in range(mindegree, degree + 1):
        for combo in combinations_with_replacement(idx, d):
            e = [0] * len(space)
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    out.sort(key=grlex_key)
    return out


def mono_str(space: VarSpace, m: Monomial) -> str:
    parts = []
    for name, e in zip(space.names, m):
        if e == 1:
            parts.append(name)
        elif e > 1:
            parts.append(f"{name}^{e}")
    return "*".join(parts)


# ---------------------------------------------------------------------------

def _fmt(c: float) -> str:
    if c == int(c) and abs(c) < 1e15:
        return repr(float(c)).rstrip("0").rstrip(".") if c != 0 else "0"
    return repr(float(c))


class Polynomial:
    """Immutable sparse polynomial with float coefficients."""

    __slots__ = ("space", "_terms")

    def __init__(self, space: VarSpace, terms: Mapping[Monomial, float] | None = None,
                 *, tol: float | None = None):
        self.space = space
        tol = ZERO_TOL if tol is None else tol
        clean = {}
        if terms:
            n = len(space)
            for m, c in terms.items():
                if len(m) != n:
                    raise VarSpaceMismatch(f"monomial {m} has wrong length for {space}")
                c = float(c)
                if abs(c) >= tol:
                    clean[tuple(m)] = c
        self._terms = clean

    # -- basic accessors ---------------------------------------------------
    @property
    def terms(self) -> Mapping[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def coeff(self, m: Monomial) -> float:
        return self._terms.get(tuple(m), 0.0)

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(m) for m in self._terms), default=-1)

    def degree_in(self, names: Iterable[str]) -> int:
        idx = [self.space.index(n) for n in names]
        return max((sum(m[i] for i in idx) for m in self._terms), default=-1)

    @property
    def variables(self) -> tuple[str, ...]:
        used = [False] * len(self.space)
        for m in self._terms:
            for i, e in enumerate(m):
                if e:
                    used[i] = True
        return tuple(n for n, u in zip(self.space.names, used) if u)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        return sorted(self._terms.items(), key=lambda kv: grlex_key(kv[0]))

    def normalize(self, tol: float | None = None) -> "Polynomial":
        return Polynomial(self.space, self._terms, tol=tol)

    # -- arithmetic --------------------------------------------------------
    def _check(self, other: "Polynomial"):
        if other.space != self.space:
            raise VarSpaceMismatch(f"{self.space} vs {other.space}")

    def _coerce(self, other):
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.space.const(float(other))
        return None

    def __add__(self, other):
        q = self._coerce(other)
        if q is None:
            return NotImplemented
        out = dict(self._terms)
        for m, c in q._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.space, {m: -c for m, c in self._terms.items()})

    def __pos__(self):
        return self

    def __sub__(self, other):
        q = self._coerce(other)
        if q is None:
            return NotImplemented
        return self + (-q)

    def __rsub__(self, other):
        q = self._coerce(other)
        if q is None:
            return NotImplemented
        return q + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            return Polynomial(self.space, {m: c * s for m, c in self._terms.items()})
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check(other)
        out: dict = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(self.space, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self * (1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise PolynomialError("only nonnegative integer powers are supported")
        out = self.space.const(1.0)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = self.space.const(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space == other.space and self._terms == other._terms

    __hash__ = None

    # -- calculus / evaluation --------------------------------------------
    def diff(self, var: str) -> "Polynomial":
        i = self.space.index(var)
        out = {}
        for m, c in self._terms.items():
            e = m[i]
            if e:
                mm = list(m)
                mm[i] = e - 1
                out[tuple(mm)] = c * e
        return Polynomial(self.space, out)

    def eval(self, point: Mapping[str, float]) -> float:
        vals = []
        for name in self.space.names:
            vals.append(point.get(name))
        total = 0.0
        for m, c in self._terms.items():
            t = c
            for v, e in zip(vals, m):
                if e:
                    if v is None:
                        missing = [n for n, mm in zip(self.space.names, m) if mm and point.get(n) is None]
                        raise MissingAssignment(f"no value for {missing}")
                    t *= v ** e
            total += t
        return float(total)

    __call__ = eval

    def eval_array(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at rows of ``points`` (shape ``(N, len(space))``)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not self._terms:
            return np.zeros(points.shape[0])
        E = np.array(list(self._terms.keys()), dtype=int)
        c = np.array(list(self._terms.values()))
        return _monomial_values(points, E) @ c

    def substitute(self, values: Mapping[str, "Polynomial | float"]) -> "Polynomial":
        """Replace variables by numbers or polynomials over the same space."""
        subs = {}
        for name, v in values.items():
            i = self.space.index(name)
            subs[i] = v if isinstance(v, Polynomial) else self.space.const(v)
        out = self.space.zero()
        powers: dict = {}
        for m, c in self._terms.items():
            keep = list(m)
            term = self.space.const(c)
            for i, p in subs.items():
                if m[i]:
                    key = (i, m[i])
                    if key not in powers:
                        powers[key] = subs[i] ** m[i]
                    term = term * powers[key]
                    keep[i] = 0
            out = out + term * Polynomial(self.space, {tuple(keep): 1.0})
        return out

    def to_space(self, space: VarSpace) -> "Polynomial":
        """Re-express over another space containing every used variable."""
        idx = [space.index(n) for n in self.space.names]
        out = {}
        for m, c in self._terms.items():
            e = [0] * len(space)
            for i, k in zip(idx, m):
                e[i] += k
            out[tuple(e)] = c
        return Polynomial(space, out)

    # -- text --------------------------------------------------------------
    def to_string(self) -> str:
        if not self._terms:
            return "0"
        out = []
        for k, (m, c) in enumerate(self.sorted_terms()):
            mono = mono_str(self.space, m)
            mag = abs(c) if k else c
            if mono:
                body = mono if mag == 1.0 else f"{_fmt(mag)}*{mono}"
                if k == 0 and c == -1.0:
                    body = f"-{mono}"
            else:
                body = _fmt(mag)
            if k == 0:
                out.append(body)
            else:
                out.append((" - " if c < 0 else " + ") + body)
        return "".join(out)

    __str__ = to_string

    def __repr__(self) -> str:
        return f"Polynomial({self.to_string()!r})"


def _monomial_values(points: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Matrix of monomial values, shape (N, K), for exponent rows ``E``."""
    N = points.shape[0]
    out = np.ones((N, E.shape[0]))
    for j in range(E.shape[1]):
        col = E[:, j]
        if not col.any():
            continue
        maxe = int(col.max())
        pw = np.ones((N, maxe + 1))
        for k in range(1, maxe + 1):
            pw[:, k] = pw[:, k - 1] * points[:, j]
        out *= pw[:, col]
    return out


def poly_equal(p: Polynomial, q: Polynomial, tol: float = 1e-12) -> bool:
    """True iff every coefficient of ``p - q`` is at most ``tol`` in magnitude."""
    p._check(q)
    diff = {}
    for m, c in p.items():
        diff[m] = diff.get(m, 0.0) + c
    for m, c in q.items():
        diff[m] = diff.get(m, 0.0) - c
    return all(abs(c) <= tol for c in diff.values())


# ---------------------------------------------------------------------------
# parsing

_CONSTS = {"pi": math.pi}


def parse_polynomial(text: str, space: VarSpace) -> Polynomial:
    """Parse strings like ``19.62*(x1 - x1^3/6)`` into a polynomial."""
    if not isinstance(text, str):
        if isinstance(text, (int, float)):
            return space.const(float(text))
        raise PolynomialParseError(f"expected a string, got {type(text).__name__}")
    src = text.replace("^", "**").strip()
    if not src:
        raise PolynomialParseError("empty polynomial string")
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise PolynomialParseError(f"cannot parse {text!r}: {exc.msg}") from None
    return _walk(tree.body, space, text)


def _const_value(node, space, text) -> float | None:
    p = _walk(node, space, text)
    if p.degree <= 0:
        return p.coeff(space.one)
    return None


def _walk(node, space: VarSpace, text: str) -> Polynomial:
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return space.const(float(node.value))
    if isinstance(node, ast.Name):
        if node.id in space.names:
            return space.var(node.id)
        if node.id in _CONSTS:
            return space.const(_CONSTS[node.id])
        raise PolynomialParseError(f"unknown variable {node.id!r} in {text!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        p = _walk(node.operand, space, text)
        return -p if isinstance(node.op, ast.USub) else p
    if isinstance(node, ast.BinOp):
        if isinstance(node.op, ast.Pow):
            base = _walk(node.left, space, text)
            k = _const_value(node.right, space, text)
            if k is None or k != int(k) or k < 0:
                raise PolynomialParseError(f"exponent must be a nonnegative integer in {text!r}")
            return base ** int(k)
        left = _walk(node.left, space, text)
        right = _walk(node.right, space, text)
        if isinstance(node.op, ast.Add):
            return left + right
        if isinstance(node.op, ast.Sub):
            return left - right
        if isinstance(node.op, ast.Mult):
            return left * right
        if isinstance(node.op, ast.Div):
            if right.degree > 0:
                raise PolynomialParseError(f"division by a non-constant in {text!r}")
            d = right.coeff(space.one)
            if d == 0.0:
                raise PolynomialParseError(f"division by zero in {text!r}")
            return left / d
    raise PolynomialParseError(f"unsupported syntax in {text!r}")


# ---------------------------------------------------------------------------

class PolyMatrix:
    """Dense grid of polynomial entries.

    Entries only need ring operations, so the same class also carries
    matrices whose entries are affine in decision variables.
    """

    __slots__ = ("space", "entries", "shape")

    def __init__(self, space: VarSpace, entries):
        rows = [list(r) for r in entries]
        if not rows or not rows[0]:
            raise DimensionMismatch("empty matrix")
        ncol = len(rows[0])
        if any(len(r) != ncol for r in rows):
            raise DimensionMismatch("ragged matrix rows")
        conv = []
        for r in rows:
            out = []
            for e in r:
                if isinstance(e, (int, float, np.floating, np.integer)):
                    e = space.const(float(e))
                if e.space != space:
                    raise VarSpaceMismatch(f"entry over {e.space}, matrix over {space}")
                out.append(e)
            conv.append(tuple(out))
        self.space = space
        self.entries = tuple(conv)
        self.shape = (len(conv), ncol)

    @classmethod
    def from_strings(cls, space: VarSpace, rows) -> "PolyMatrix":
        return cls(space, [[parse_polynomial(s, space) for s in r] for r in rows])

    @classmethod
    def identity(cls, space: VarSpace, n: int) -> "PolyMatrix":
        return cls(space, [[1.0 if i == j else 0.0 for j in range(n)] for i in range(n)])

    @classmethod
    def zeros(cls, space: VarSpace, r: int, c: int) -> "PolyMatrix":
        return cls(space, [[0.0] * c for _ in range(r)])

    @classmethod
    def from_numpy(cls, space: VarSpace, M) -> "PolyMatrix":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(space, M.tolist())

    @classmethod
    def block(cls, blocks) -> "PolyMatrix":
        rows = []
        space = blocks[0][0].space
        for brow in blocks:
            h = brow[0].shape[0]
            if any(b.shape[0] != h for b in brow):
                raise DimensionMismatch("block row heights differ")
            for i in range(h):
                rows.append([e for b in brow for e in b.entries[i]])
        return cls(space, rows)

    def __getitem__(self, ij):
        i, j = ij
        return self.entries[i][j]

    def row(self, i: int) -> "PolyMatrix":
        return PolyMatrix(self.space, [self.entries[i]])

    def col(self, j: int) -> "PolyMatrix":
        return PolyMatrix(self.space, [[r[j]] for r in self.entries])

    def map(self, fn) -> "PolyMatrix":
        return PolyMatrix(self.space, [[fn(e) for e in r] for r in self.entries])

    @property
    def T(self) -> "PolyMatrix":
        r, c = self.shape
        return PolyMatrix(self.space, [[self.entries[i][j] for i in range(r)] for j in range(c)])

    transpose = T

    def __add__(self, other):
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        if other.shape != self.shape:
            raise DimensionMismatch(f"{self.shape} + {other.shape}")
        return PolyMatrix(self.space, [[a + b for a, b in zip(ra, rb)]
                                       for ra, rb in zip(self.entries, other.entries)])

    def __sub__(self, other):
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        return self + (-other)

    def __neg__(self):
        return self.map(lambda e: -e)

    def __mul__(self, s):
        """Entry-wise scaling by a number or scalar polynomial."""
        return self.map(lambda e: e * s)

    def __rmul__(self, s):
        return self.map(lambda e: s * e)

    def __matmul__(self, other):
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        r, k = self.shape
        k2, c = other.shape
        if k != k2:
            raise DimensionMismatch(f"{self.shape} @ {other.shape}")
        out = []
        for i in range(r):
            row = []
            for j in range(c):
                acc = None
                for t in range(k):
                    a = self.entries[i][t]
                    b = other.entries[t][j]
                    if _is_zero(a) or _is_zero(b):
                        continue
                    p = a * b
                    acc = p if acc is None else acc + p
                row.append(acc if acc is not None else self.space.zero())
            out.append(row)
        return PolyMatrix(self.space, out)

    def sym(self) -> "PolyMatrix":
        """``M + M^T``."""
        if self.shape[0] != self.shape[1]:
            raise DimensionMismatch("sym() needs a square matrix")
        n = self.shape[0]
        E = self.entries
        out = [[None] * n for _ in range(n)]
        # mirror one triangle so (i, j) and (j, i) are the same object, not just equal
        for i in range(n):
            for j in range(i, n):
                out[i][j] = out[j][i] = E[i][j] + E[j][i]
        return PolyMatrix(self.space, out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolyMatrix):
            return NotImplemented
        return (self.space == other.space and self.shape == other.shape
                and all(a == b for ra, rb in zip(self.entries, other.entries)
                        for a, b in zip(ra, rb)))

    __hash__ = None

    def diff(self, var: str) -> "PolyMatrix":
        return self.map(lambda e: e.diff(var))

    def is_symmetric(self) -> bool:
        r, c = self.shape
        if r != c:
            return False
        return all(self.entries[i][j] == self.entries[j][i]
                   for i in range(r) for j in range(i + 1, r))

    @property
    def degree(self) -> int:
        return max(e.degree for r in self.entries for e in r)

    @property
    def variables(self) -> tuple[str, ...]:
        used = set()
        for r in self.entries:
            for e in r:
                used.update(e.variables)
        return tuple(n for n in self.space.names if n in used)

    def is_zero_row(self, i: int) -> bool:
        return all(e.is_zero() for e in self.entries[i])

    def eval(self, point: Mapping[str, float]) -> np.ndarray:
        return np.array([[e.eval(point) for e in r] for r in self.entries])

    __call__ = eval

    def to_strings(self) -> list[list[str]]:
        return [[e.to_string() for e in r] for r in self.entries]

    def __repr__(self) -> str:
        return f"PolyMatrix({self.to_strings()})"


def _is_zero(e) -> bool:
    try:
        return e.is_zero()
    except AttributeError:
        return False


def poly_vector(space: VarSpace, names: Sequence[str]) -> PolyMatrix:
    """Column vector of variables."""
    return PolyMatrix(space, [[space.var(n)] for n in names])


class MatrixEvaluator:
    """Vectorised numeric evaluation of several polynomial matrices at once.

    All matrices share one monomial table, so a single pass of monomial
    evaluation serves every matrix requested.
    """

    def __init__(self, mats: Mapping[str, PolyMatrix]):
        self.names = tuple(mats)
        monos: dict = {}
        for M in mats.values():
            for r in M.entries:
                for e in r:
                    for m in e._terms:
                        monos.setdefault(m, len(monos))
        space = next(iter(mats.values())).space
        self.space = space
        self.E = (np.array(list(monos), dtype=int) if monos
                  else np.zeros((0, len(space)), dtype=int))
        self.shapes = {}
        self.coef = {}
        blocks, self._slices, off = [], {}, 0
        for name, M in mats.items():
            C = np.zeros((len(monos),) + M.shape)
            for i, r in enumerate(M.entries):
                for j, e in enumerate(r):
                    for m, c in e._terms.items():
                        C[monos[m], i, j] = c
            self.shapes[name] = M.shape
            self.coef[name] = C
            size = M.shape[0] * M.shape[1]
            blocks.append(C.reshape(len(monos), size))
            self._slices[name] = (off, off + size)
            off += size
        self._flat = np.hstack(blocks) if blocks else np.zeros((len(monos), 0))
        self._maxe = self.E.max(axis=0) if len(monos) else np.zeros(len(space), dtype=int)
        # per-variable power lookup for single points
        self._cols = [(j, self.E[:, j]) for j in range(self.E.shape[1]) if self.E[:, j].any()]

    def monomials(self, point: np.ndarray) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if point.ndim == 1:
            out = np.ones(self.E.shape[0])
            for j, col in self._cols:
                pw = point[j] ** np.arange(self._maxe[j] + 1)
                out *= pw[col]
            return out
        return _monomial_values(point, self.E)

    def __call__(self, point: np.ndarray) -> dict[str, np.ndarray]:
        """Evaluate every matrix at one point (1-D) or many points (2-D)."""
        point = np.asarray(point, dtype=float)
        flat = self.monomials(point) @ self._flat
        lead = flat.shape[:-1]
        return {name: flat[..., a:b].reshape(lead + self.shapes[name])
                for name, (a, b) in self._slices.items()}
