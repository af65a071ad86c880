"""Declarative SOS programs compiled to a conic program.

Decision variables enter polynomials affinely through :class:`AffinePoly`.
A matrix SOS constraint ``F(w) - sum_i L_i(w) r_i(w)`` is certified by a
Gram matrix ``Q >= 0`` in the basis ``{v_i * b : (i, b) in basis}``; the
auxiliary vector ``v`` never appears explicitly, its role is played by the
row index of each basis element.  Each localizer multiplier ``L_i`` is itself
an SOS matrix with its own Gram block.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from .conic import SQRT2, ConicProgram, build_program, triu_pairs
from .polynomial import (
    ZERO_TOL,
    DimensionMismatch,
    Monomial,
    Polynomial,
    PolyMatrix,
    VarSpace,
    VarSpaceMismatch,
    grlex_key,
    mono_mul,
    monomials_upto,
)

log = logging.getLogger(__name__)

CONST = -1


class SosError(ValueError):
    pass


class OddDegreeError(SosError):
    pass


class NonConvexError(SosError):
    pass


class NotSymmetricError(SosError):
    pass


def _vec_add(dst: dict, src: Mapping, s: float = 1.0) -> None:
    for k, v in src.items():
        dst[k] = dst.get(k, 0.0) + s * v


def _clean(vec: dict) -> dict:
    return {k: v for k, v in vec.items() if abs(v) >= ZERO_TOL}


class AffinePoly:
    """Polynomial whose coefficients are affine in the decision vector.

    ``terms`` maps a monomial to a sparse vector ``{var_index: coef}``; the
    key ``-1`` holds the constant part of the coefficient.
    """

    __slots__ = ("space", "_terms")

    def __init__(self, space: VarSpace, terms: Mapping[Monomial, Mapping[int, float]] | None = None):
        self.space = space
        out = {}
        for m, vec in (terms or {}).items():
            v = _clean(dict(vec))
            if v:
                out[tuple(m)] = v
        self._terms = out

    @classmethod
    def lift(cls, p) -> "AffinePoly":
        if isinstance(p, AffinePoly):
            return p
        if isinstance(p, Polynomial):
            return cls(p.space, {m: {CONST: c} for m, c in p.items()})
        raise TypeError(f"cannot lift {type(p).__name__}")

    @classmethod
    def decision(cls, space: VarSpace, index: int, mono: Monomial | None = None,
                 coef: float = 1.0) -> "AffinePoly":
        return cls(space, {mono if mono is not None else space.one: {index: coef}})

    def items(self):
        return self._terms.items()

    def is_zero(self) -> bool:
        return not self._terms

    def is_numeric(self) -> bool:
        return all(set(v) <= {CONST} for v in self._terms.values())

    @property
    def degree(self) -> int:
        return max((sum(m) for m in self._terms), default=-1)

    @property
    def variables(self) -> tuple[str, ...]:
        used = set()
        for m in self._terms:
            used.update(i for i, e in enumerate(m) if e)
        return tuple(self.space.names[i] for i in sorted(used))

    @property
    def support(self) -> set:
        return set(self._terms)

    def decision_vars(self) -> set:
        out = set()
        for v in self._terms.values():
            out.update(k for k in v if k != CONST)
        return out

    def to_poly(self) -> Polynomial:
        if not self.is_numeric():
            raise NonConvexError("expression still depends on decision variables")
        return Polynomial(self.space, {m: v.get(CONST, 0.0) for m, v in self._terms.items()})

    def value(self, x: np.ndarray) -> Polynomial:
        out = {}
        for m, vec in self._terms.items():
            s = 0.0
            for k, c in vec.items():
                s += c if k == CONST else c * x[k]
            out[m] = s
        return Polynomial(self.space, out)

    # arithmetic -------------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, AffinePoly):
            if other.space != self.space:
                raise VarSpaceMismatch(f"{self.space} vs {other.space}")
            return other
        if isinstance(other, Polynomial):
            if other.space != self.space:
                raise VarSpaceMismatch(f"{self.space} vs {other.space}")
            return AffinePoly.lift(other)
        if isinstance(other, (int, float, np.floating, np.integer)):
            return AffinePoly(self.space, {self.space.one: {CONST: float(other)}})
        return None

    def __add__(self, other):
        q = self._coerce(other)
        if q is None:
            return NotImplemented
        out = {m: dict(v) for m, v in self._terms.items()}
        for m, v in q._terms.items():
            _vec_add(out.setdefault(m, {}), v)
        return AffinePoly(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return AffinePoly(self.space, {m: {k: -c for k, c in v.items()} for m, v in self._terms.items()})

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
            return AffinePoly(self.space, {m: {k: c * s for k, c in v.items()}
                                           for m, v in self._terms.items()})
        if isinstance(other, AffinePoly):
            if other.is_numeric():
                other = other.to_poly()
            elif self.is_numeric():
                return other * self.to_poly()
            else:
                raise NonConvexError("product of two decision-dependent expressions")
        if not isinstance(other, Polynomial):
            return NotImplemented
        if other.space != self.space:
            raise VarSpaceMismatch(f"{self.space} vs {other.space}")
        out: dict = {}
        for m1, c1 in other.items():
            for m2, v in self._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                _vec_add(out.setdefault(m, {}), v, c1)
        return AffinePoly(self.space, out)

    __rmul__ = __mul__

    def diff(self, var: str) -> "AffinePoly":
        i = self.space.index(var)
        out = {}
        for m, v in self._terms.items():
            e = m[i]
            if e:
                mm = list(m)
                mm[i] = e - 1
                out[tuple(mm)] = {k: c * e for k, c in v.items()}
        return AffinePoly(self.space, out)

    def __eq__(self, other) -> bool:
        if isinstance(other, Polynomial):
            other = AffinePoly.lift(other)
        if not isinstance(other, AffinePoly):
            return NotImplemented
        return self.space == other.space and self._terms == other._terms

    __hash__ = None

    def __repr__(self) -> str:
        return f"AffinePoly({len(self._terms)} terms, vars={self.variables})"


def affine_matrix(M) -> list[list[AffinePoly]]:
    return [[AffinePoly.lift(e) for e in row] for row in M.entries]


def matrix_value(M: PolyMatrix, x: np.ndarray) -> PolyMatrix:
    """Substitute a decision vector into a matrix of affine entries."""
    def val(e):
        return e.value(x) if isinstance(e, AffinePoly) else e
    return PolyMatrix(M.space, [[val(e) for e in r] for r in M.entries])


# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Localizer:
    """Region polynomial ``r >= 0`` together with its multiplier settings.

    ``degree`` is the multiplier's degree in the non-auxiliary variables;
    ``variables`` defaults to those of the constrained expression and region.
    """

    region: Polynomial
    degree: int = 2
    variables: tuple[str, ...] | None = None
    name: str = ""


@dataclasses.dataclass
class GramBlock:
    name: str
    basis: list[tuple[int, Monomial]]
    index: dict[tuple[int, int], int]  # (p, q) with p <= q -> decision var

    @property
    def side(self) -> int:
        return len(self.basis)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        n = self.side
        Q = np.zeros((n, n))
        for (p, q), k in self.index.items():
            Q[p, q] = Q[q, p] = x[k]
        return Q


@dataclasses.dataclass
class DecisionPoly:
    name: str
    variables: tuple[str, ...]
    degree: int
    monomials: list[Monomial]
    indices: list[int]
    poly: AffinePoly


@dataclasses.dataclass
class Multiplier:
    localizer: Localizer
    gram: GramBlock
    matrix: PolyMatrix  # N x N affine entries


@dataclasses.dataclass
class SosConstraint:
    name: str
    kind: str  # "scalar-sos" | "matrix-sos"
    size: int
    expression: PolyMatrix
    localized: PolyMatrix
    gram: GramBlock
    multipliers: list[Multiplier]
    dropped: list[Localizer]
    rows: tuple[int, int]


def _gram_as_matrix(space: VarSpace, block: GramBlock, N: int) -> PolyMatrix:
    """``(I (x) b)^T Q (I (x) b)`` as an N x N matrix of affine polynomials."""
    acc: list[list[dict]] = [[{} for _ in range(N)] for _ in range(N)]
    for (p, q), k in block.index.items():
        ip, bp = block.basis[p]
        iq, bq = block.basis[q]
        m = mono_mul(bp, bq)
        w = 2.0 if (p != q and ip == iq) else 1.0
        _vec_add(acc[ip][iq].setdefault(m, {}), {k: w})
        if ip != iq:
            _vec_add(acc[iq][ip].setdefault(m, {}), {k: w})
    return PolyMatrix(space, [[AffinePoly(space, acc[i][j]) for j in range(N)] for i in range(N)])


def gram_basis(G: list[list[AffinePoly]], space: VarSpace, prune: bool = True
               ) -> list[tuple[int, Monomial]]:
    """Basis ``(row, monomial)`` for a matrix SOS certificate of ``G``.

    Candidates are every monomial up to half the maximum degree over the
    variables present.  With ``prune`` a candidate is dropped when its square
    can neither match a term of the diagonal entry nor arise as a product of
    two other surviving candidates; such rows of any feasible Gram matrix are
    forced to zero, so pruning does not change feasibility.
    """
    N = len(G)
    D = max((e.degree for row in G for e in row), default=-1)
    if D < 0:
        return []
    if D % 2:
        raise OddDegreeError(f"maximum degree {D} is odd; the expression cannot be SOS")
    names = set()
    for row in G:
        for e in row:
            names.update(e.variables)
    cands = monomials_upto(space, names, D // 2)
    sets = [set(cands) for _ in range(N)]
    if prune:
        supp = [G[i][i].support for i in range(N)]
        changed = True
        while changed:
            changed = False
            for i in range(N):
                S = sets[i]
                drop = []
                for a in S:
                    sq = tuple(2 * e for e in a)
                    if sq in supp[i]:
                        continue
                    ok = False
                    for b in S:
                        if b == a:
                            continue
                        c = tuple(s - e for s, e in zip(sq, b))
                        if min(c) >= 0 and c in S:
                            ok = True
                            break
                    if not ok:
                        drop.append(a)
                if drop:
                    changed = True
                    S.difference_update(drop)
    out = []
    for i in range(N):
        for m in sorted(sets[i], key=grlex_key):
            out.append((i, m))
    return out


class SosProgram:
    """Builder for SOS programs; single owner, mutated during construction."""

    def __init__(self, space: VarSpace, *, prune_basis: bool = True,
                 prune_localizers: bool = True):
        self.space = space
        self.prune_basis = prune_basis
        self.prune_localizers = prune_localizers
        self.n = 0
        self.labels: list[str] = []
        self.decisions: list[DecisionPoly] = []
        self.grams: list[GramBlock] = []
        self.constraints: list[SosConstraint] = []
        self._eq: list[tuple[dict, float]] = []
        self._nonneg: list[tuple[dict, float]] = []
        self._extra_psd: list[tuple[str, int, list]] = []
        self._exp: list[list[tuple[dict, float]]] = []
        self._objective: dict[int, float] = {}
        self.logdet: dict | None = None

    # variables ---------------------------------------------------------------
    def _new_var(self, label: str) -> int:
        self.labels.append(label)
        self.n += 1
        return self.n - 1

    def new_scalar(self, label: str = "s") -> AffinePoly:
        return AffinePoly.decision(self.space, self._new_var(label))

    def new_decision_poly(self, variables: Iterable[str], degree: int,
                          name: str = "p", mindegree: int = 0) -> DecisionPoly:
        if degree < 0:
            raise SosError("degree must be nonnegative")
        variables = tuple(v for v in self.space.names if v in set(variables))
        monos = monomials_upto(self.space, variables, degree, mindegree)
        idx = [self._new_var(f"{name}[{k}]") for k in range(len(monos))]
        poly = AffinePoly(self.space, {m: {k: 1.0} for m, k in zip(monos, idx)})
        dp = DecisionPoly(name, variables, degree, monos, idx, poly)
        self.decisions.append(dp)
        return dp

    def new_decision_matrix(self, rows: int, cols: int, variables: Iterable[str],
                            degree: int, name: str = "M", symmetric: bool = False) -> PolyMatrix:
        variables = tuple(variables)
        grid: list[list] = [[None] * cols for _ in range(rows)]
        for i in range(rows):
            for j in range(cols):
                if symmetric and j < i:
                    grid[i][j] = grid[j][i]
                    continue
                grid[i][j] = self.new_decision_poly(variables, degree, f"{name}[{i},{j}]").poly
        return PolyMatrix(self.space, grid)

    def _new_gram(self, name: str, basis: list[tuple[int, Monomial]]) -> GramBlock:
        index = {}
        for p, q in triu_pairs(len(basis)):
            index[(p, q)] = self._new_var(f"{name}.Q[{p},{q}]")
        block = GramBlock(name, basis, index)
        self.grams.append(block)
        return block

    # constraints ---------------------------------------------------------------
    def _prune_localizers(self, F_vars: set, localizers: Sequence[Localizer]):
        if not self.prune_localizers:
            return list(localizers), []
        keep_vars = set(F_vars)
        kept_idx: set = set()
        changed = True
        while changed:
            changed = False
            for k, loc in enumerate(localizers):
                if k in kept_idx:
                    continue
                lv = set(loc.region.variables)
                if not lv or lv & keep_vars:
                    kept_idx.add(k)
                    keep_vars |= lv
                    changed = True
        kept, dropped = [], []
        for k, loc in enumerate(localizers):
            if k in kept_idx:
                kept.append(loc)
            elif loc.region.eval({n: 0.0 for n in self.space.names}) >= 0.0:
                dropped.append(loc)
            else:
                kept.append(loc)
        return kept, dropped

    def assert_sos(self, expr, localizers: Sequence[Localizer] = (), name: str | None = None
                   ) -> SosConstraint:
        """Require ``expr - sum_i lambda_i r_i`` to be SOS with SOS ``lambda_i``."""
        F = PolyMatrix(self.space, [[expr]])
        return self._assert(F, localizers, name or f"sos{len(self.constraints)}", "scalar-sos")

    def assert_matrix_sos(self, F: PolyMatrix, localizers: Sequence[Localizer] = (),
                          name: str | None = None) -> SosConstraint:
        """Require ``v^T F v - sum_i lambda_i(w, v) r_i`` SOS in ``(w, v)``."""
        if F.shape[0] != F.shape[1]:
            raise DimensionMismatch(f"matrix SOS needs a square matrix, got {F.shape}")
        return self._assert(F, localizers, name or f"msos{len(self.constraints)}", "matrix-sos")

    def _assert(self, F: PolyMatrix, localizers, name: str, kind: str) -> SosConstraint:
        if F.space != self.space:
            raise VarSpaceMismatch("constraint over a different variable space")
        N = F.shape[0]
        G = affine_matrix(F)
        for i in range(N):
            for j in range(i + 1, N):
                if not _affine_close(G[i][j], G[j][i]):
                    raise NotSymmetricError(f"{name}: entry ({i},{j}) differs from ({j},{i})")
        F_vars = set()
        for row in G:
            for e in row:
                F_vars.update(e.variables)
        kept, dropped = self._prune_localizers(F_vars, localizers)
        mults = []
        for k, loc in enumerate(kept):
            if loc.degree % 2:
                raise OddDegreeError(f"{name}: multiplier degree {loc.degree} is odd")
            mvars = loc.variables
            if mvars is None:
                mvars = tuple(sorted(F_vars | set(loc.region.variables),
                                     key=self.space.index))
            monos = monomials_upto(self.space, mvars, loc.degree // 2)
            basis = [(i, m) for i in range(N) for m in monos]
            block = self._new_gram(f"{name}.mult{k}", basis)
            L = _gram_as_matrix(self.space, block, N)
            mults.append(Multiplier(loc, block, L))
            for i in range(N):
                for j in range(N):
                    G[i][j] = G[i][j] - L.entries[i][j] * loc.region
        basis = gram_basis(G, self.space, prune=self.prune_basis)
        block = self._new_gram(name, basis)
        start = len(self._eq)
        self._eq.extend(_matching_rows(G, block))
        con = SosConstraint(name, kind, N, F, PolyMatrix(self.space, G), block, mults,
                            dropped, (start, len(self._eq)))
        self.constraints.append(con)
        return con

    def add_nonneg(self, expr) -> None:
        """Linear inequality ``expr >= 0`` for a constant-in-w affine expression."""
        e = AffinePoly.lift(expr) if not isinstance(expr, AffinePoly) else expr
        if e.degree > 0:
            raise SosError("linear inequalities must not depend on polynomial variables")
        vec = dict(e._terms.get(self.space.one, {}))
        const = vec.pop(CONST, 0.0)
        self._nonneg.append((vec, const))

    def add_le(self, expr, bound: float) -> None:
        self.add_nonneg(bound - _lift(self.space, expr))

    def add_ge(self, expr, bound: float) -> None:
        self.add_nonneg(_lift(self.space, expr) - bound)

    def add_equal(self, expr, value: float = 0.0) -> None:
        e = _lift(self.space, expr) - value
        if e.degree > 0:
            raise SosError("equalities must not depend on polynomial variables")
        vec = dict(e._terms.get(self.space.one, {}))
        const = vec.pop(CONST, 0.0)
        self._eq.append((vec, const))

    # objectives ---------------------------------------------------------------
    def minimize(self, expr) -> None:
        e = _lift(self.space, expr)
        vec = dict(e._terms.get(self.space.one, {}))
        vec.pop(CONST, None)
        self._objective = vec
        self.logdet = None

    def maximize(self, expr) -> None:
        self.minimize(-_lift(self.space, expr))

    def set_logdet_objective(self, M) -> None:
        """Maximize ``log det M`` through the triangular-factor epigraph.

        ``[[M, Z], [Z^T, diag(Z)]] >= 0`` with ``Z`` lower triangular and
        ``t_i <= log Z_ii`` (exponential cones); the objective is ``sum t_i``.
        """
        if isinstance(M, np.ndarray):
            M = PolyMatrix.from_numpy(self.space, M)
        if M.shape[0] != M.shape[1]:
            raise DimensionMismatch(f"logdet needs a square matrix, got {M.shape}")
        n = M.shape[0]
        ent = affine_matrix(M)
        for row in ent:
            for e in row:
                if e.degree > 0:
                    raise SosError("logdet argument must be constant in the polynomial variables")
        Z = {}
        for i in range(n):
            for j in range(i + 1):
                Z[(i, j)] = self._new_var(f"logdet.Z[{i},{j}]")
        t = [self._new_var(f"logdet.t[{i}]") for i in range(n)]
        self.logdet = {"n": n, "M": M, "Z": Z, "t": t}
        self._objective = {k: -1.0 for k in t}

    def _logdet_blocks(self, exp_cones: bool):
        ld = self.logdet
        n = ld["n"]
        one = self.space.one

        def vec_of(e):
            d = dict(AffinePoly.lift(e)._terms.get(one, {}))
            c = d.pop(CONST, 0.0)
            return d, c

        Mv = [[vec_of(ld["M"][i, j]) for j in range(n)] for i in range(n)]
        if not exp_cones:
            rows = []
            for i, j in triu_pairs(n):
                d, c = Mv[i][j]
                s = 1.0 if i == j else SQRT2
                rows.append(({k: s * v for k, v in d.items()}, s * c))
            # epigraph variables are unused here; pin them so the system stays full rank
            pins = [({k: 1.0}, 0.0) for k in list(ld["Z"].values()) + ld["t"]]
            return [("zero", len(pins), pins), ("psd", n, rows)], [], {}
        N2 = 2 * n
        rows = []
        for i, j in triu_pairs(N2):
            s = 1.0 if i == j else SQRT2
            if j < n:
                d, c = Mv[i][j]
            elif i < n:
                # (i, j) sits in the upper-right block Z; entry Z[i, j-n]
                jj = j - n
                d, c = ({ld["Z"][(i, jj)]: 1.0}, 0.0) if jj <= i else ({}, 0.0)
            else:
                ii, jj = i - n, j - n
                d, c = ({ld["Z"][(ii, ii)]: 1.0}, 0.0) if ii == jj else ({}, 0.0)
            rows.append(({k: s * v for k, v in d.items()}, s * c))
        exp = []
        for i in range(n):
            exp.append([({ld["t"][i]: 1.0}, 0.0), ({}, 1.0), ({ld["Z"][(i, i)]: 1.0}, 0.0)])
        return [("psd", N2, rows)], exp, {}

    # compile --------------------------------------------------------------------
    def compile(self, exp_cones: bool = True) -> ConicProgram:
        """Assemble the conic program.

        Without exponential cones a logdet objective degrades to maximizing
        ``trace(M)`` subject to ``M >= 0``; ``meta['logdet_fallback']`` is set.
        """
        c = np.zeros(self.n)
        for k, v in self._objective.items():
            c[k] = v
        blocks = []
        if self._eq:
            blocks.append(("zero", len(self._eq), self._eq))
        if self._nonneg:
            blocks.append(("nonneg", len(self._nonneg), self._nonneg))
        for g in self.grams:
            rows = [({g.index[(p, q)]: (1.0 if p == q else SQRT2)}, 0.0)
                    for p, q in triu_pairs(g.side)]
            blocks.append(("psd", g.side, rows))
        meta = {"gram_blocks": [g.name for g in self.grams], "logdet_fallback": False}
        if self.logdet is not None:
            extra, exp, _ = self._logdet_blocks(exp_cones)
            blocks.extend(extra)
            for e in exp:
                blocks.append(("exp", 1, e))
            if not exp_cones:
                c = np.zeros(self.n)
                n = self.logdet["n"]
                for i in range(n):
                    d = dict(AffinePoly.lift(self.logdet["M"][i, i])._terms.get(self.space.one, {}))
                    d.pop(CONST, None)
                    for k, v in d.items():
                        c[k] -= v
                meta["logdet_fallback"] = True
        prog = build_program(self.n, c, blocks, self.labels)
        prog.meta.update(meta)
        return prog

    # solution access ------------------------------------------------------------
    def value(self, expr, x: np.ndarray):
        if isinstance(expr, PolyMatrix):
            return matrix_value(expr, x)
        if isinstance(expr, AffinePoly):
            return expr.value(x)
        if isinstance(expr, DecisionPoly):
            return expr.poly.value(x)
        return expr

    def scalar_value(self, expr, x: np.ndarray) -> float:
        return self.value(_lift(self.space, expr), x).coeff(self.space.one)

    def logdet_value(self, x: np.ndarray) -> float:
        M = matrix_value(self.logdet["M"], x).eval({})
        sign, ld = np.linalg.slogdet(M)
        return float(ld) if sign > 0 else -math.inf

    def gram_reconstruction(self, con: SosConstraint, x: np.ndarray) -> PolyMatrix:
        return matrix_value(_gram_as_matrix(self.space, con.gram, con.size), x)

    def residual(self, con: SosConstraint, x: np.ndarray) -> float:
        """Max coefficient gap between the localized expression and its Gram form."""
        G = matrix_value(con.localized, x)
        R = self.gram_reconstruction(con, x)
        worst = 0.0
        for ra, rb in zip(G.entries, R.entries):
            for a, b in zip(ra, rb):
                d = a - b
                worst = max([worst] + [abs(v) for _, v in d.items()])
        return worst


def _lift(space: VarSpace, e) -> AffinePoly:
    if isinstance(e, AffinePoly):
        return e
    if isinstance(e, Polynomial):
        return AffinePoly.lift(e)
    return AffinePoly(space, {space.one: {CONST: float(e)}})


def _affine_close(a: AffinePoly, b: AffinePoly, rtol: float = 1e-12) -> bool:
    keys = set(a._terms) | set(b._terms)
    for m in keys:
        va, vb = a._terms.get(m, {}), b._terms.get(m, {})
        for k in set(va) | set(vb):
            x, y = va.get(k, 0.0), vb.get(k, 0.0)
            if abs(x - y) > rtol * max(1.0, abs(x), abs(y)):
                return False
    return True


def _matching_rows(G: list[list[AffinePoly]], block: GramBlock) -> list[tuple[dict, float]]:
    """One equality per (i <= j, monomial): Gram contribution minus target."""
    acc: dict = {}
    for (p, q), k in block.index.items():
        ip, bp = block.basis[p]
        iq, bq = block.basis[q]
        i, j = (ip, iq) if ip <= iq else (iq, ip)
        m = mono_mul(bp, bq)
        w = 2.0 if (p != q and ip == iq) else 1.0
        row = acc.setdefault((i, j, m), {})
        row[k] = row.get(k, 0.0) + w
    N = len(G)
    for i in range(N):
        for j in range(i, N):
            for m, vec in G[i][j].items():
                _vec_add(acc.setdefault((i, j, m), {}), vec, -1.0)
    rows = []
    for key in sorted(acc, key=lambda t: (t[0], t[1], grlex_key(t[2]))):
        vec = acc[key]
        const = vec.pop(CONST, 0.0)
        vec = {k: v for k, v in sorted(vec.items()) if v != 0.0}
        if not vec and const == 0.0:
            continue
        rows.append((vec, const))
    return rows
