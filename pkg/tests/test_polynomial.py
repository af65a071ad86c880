import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdclf.polynomial import (
    DimensionMismatch, MissingAssignment, PolyMatrix, Polynomial, PolynomialParseError,
    UnknownVariable, VarSpace, VarSpaceMismatch, monomials_upto, poly_equal,
)

S = VarSpace(["x", "y", "theta"], ["state", "state", "parameter"])
x, y, th = S.vars("x", "y", "theta")


def test_add_examples():
    assert (x + 1) + (x - 1) == 2 * x
    p = x ** 2 * y - 3
    assert p + S.zero() == p
    assert (x ** 2 + y) + (-(x ** 2)) == y


def test_mul_examples():
    assert (x + 1) * (x - 1) == x ** 2 - 1
    p = 2 * x * th + y
    assert p * S.const(1.0) == p
    assert (x + y) ** 2 == x ** 2 + 2 * x * y + y ** 2


def test_diff_examples():
    T = VarSpace(["x1", "x2", "theta"])
    x1, x2, t = T.vars("x1", "x2", "theta")
    assert (x1 ** 3).diff("x1") == 3 * x1 ** 2
    assert (t * x2).diff("theta") == x2
    assert T.const(7.0).diff("x1").is_zero()
    with pytest.raises(UnknownVariable):
        x1.diff("z")


def test_eval_examples():
    assert (x ** 2 - 1).eval({"x": 2}) == 3
    T = VarSpace(["x1"])
    p = T.parse("19.62*(x1 - x1^3/6)")
    assert p.eval({"x1": 0.0}) == 0.0
    assert (th * y).eval({"theta": 0.5, "y": 4}) == 2
    with pytest.raises(MissingAssignment):
        (x * y).eval({"x": 1.0})


def test_eval_ignores_unused_variables():
    assert (x + 1).eval({"x": 1.0}) == 2.0


def test_space_mismatch():
    other = VarSpace(["x"])
    with pytest.raises(VarSpaceMismatch):
        x + other.var("x")


def test_matrix_examples():
    M = PolyMatrix(S, [[x]])
    assert M.sym()[0, 0] == 2 * x
    A = PolyMatrix(S, [[x, y], [th, x * y]])
    assert (PolyMatrix.identity(S, 2) @ A) == A
    N = PolyMatrix.from_numpy(S, [[0, 1], [0, 0]])
    v = PolyMatrix(S, [[x], [y]])
    out = N @ v
    assert out[0, 0] == y and out[1, 0].is_zero()
    with pytest.raises(DimensionMismatch):
        v @ v


def test_poly_equal_examples():
    assert poly_equal(x ** 2 - 1, (x + 1) * (x - 1))
    assert not poly_equal(x, x + 1e-3, tol=1e-6)
    assert poly_equal(S.zero(), S.zero())


def test_zero_pruning_threshold():
    p = Polynomial(S, {(1, 0, 0): 1e-15, (0, 1, 0): 1.0})
    assert p == y
    assert len(Polynomial(S, {(1, 0, 0): 1e-15}, tol=1e-16)) == 1


def test_serialization_round_trip():
    p = -1.79 + 12.12 * th ** 2 + 0.5 * x * y
    text = p.to_string()
    assert S.parse(text) == p


def test_to_string_canonical_order():
    T = VarSpace(["theta"])
    t = T.var("theta")
    assert (12.12 * t ** 2 - 1.79).to_string() == "-1.79 + 12.12*theta^2"


@pytest.mark.parametrize("bad", ["x +", "sin(x)", "x**-1", "z + 1", "x / y"])
def test_parse_errors(bad):
    with pytest.raises(PolynomialParseError):
        S.parse(bad)


def test_monomial_count():
    assert len(monomials_upto(S, ["x", "theta"], 2)) == 6
    assert len(monomials_upto(S, [], 2)) == 1


# property tests ---------------------------------------------------------------

coeff = st.integers(-5, 5)
mono = st.tuples(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2))
polys = st.dictionaries(mono, coeff, max_size=6).map(lambda d: Polynomial(S, d))
points = st.tuples(*[st.floats(-2, 2, allow_nan=False) for _ in range(3)])


def _at(p, z):
    return p.eval(dict(zip(S.names, z)))


@settings(max_examples=150, deadline=None)
@given(polys, polys, points)
def test_eval_is_a_ring_homomorphism(p, q, z):
    for got, want in ((_at(p + q, z), _at(p, z) + _at(q, z)),
                      (_at(p * q, z), _at(p, z) * _at(q, z))):
        assert got == pytest.approx(want, rel=1e-12, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(polys, polys, st.sampled_from(S.names))
def test_product_rule(p, q, v):
    assert poly_equal((p * q).diff(v), p.diff(v) * q + p * q.diff(v), tol=0.0)


@settings(max_examples=100, deadline=None)
@given(polys)
def test_normalize_idempotent(p):
    once = (p * 1e-7).normalize(1e-6)
    assert once.normalize(1e-6) == once


@settings(max_examples=100, deadline=None)
@given(st.lists(polys, min_size=4, max_size=4), points)
def test_sym_is_symmetric(entries, z):
    M = PolyMatrix(S, [entries[:2], entries[2:]]).sym()
    val = M.eval(dict(zip(S.names, z)))
    assert np.array_equal(val, val.T)


@settings(max_examples=100, deadline=None)
@given(polys, polys)
def test_add_mul_commute(p, q):
    assert p + q == q + p
    assert p * q == q * p
