import numpy as np

from pdclf.polynomial import PolyMatrix
from pdclf.synthesis import Certificate

# coefficients of a known-good toy certificate: constant, theta, x1^2 and theta^2 parts
REFERENCE_X_PARTS = (
    np.array([[0.81, -1.79], [-1.79, 24.82]]),
    np.array([[-1.16, -3.32], [-3.32, -0.34]]),
    1e-4 * np.array([[7.0, -114.0], [-114.0, 172.0]]),
    np.array([[12.12, -0.50], [-0.50, 0.18]]),
)


def reference_X_numeric(x1: float, theta: float) -> np.ndarray:
    c, t, q, t2 = REFERENCE_X_PARTS
    return c + t * theta + q * x1 ** 2 + t2 * theta ** 2


def reference_X_strings() -> list[list[str]]:
    c, t, q, t2 = REFERENCE_X_PARTS
    def entry(i, j):
        a, b, d, e = (float(M[i, j]) for M in (c, t, q, t2))
        return f"{a!r} + {b!r}*theta + {d!r}*x1^2 + {e!r}*theta^2"

    return [[entry(i, j) for j in range(2)] for i in range(2)]


def make_cert(system, X, Y, eps3=1e-3, eps2=100.0, X0=None, eps1=1e-3) -> Certificate:
    """Certificate around hand-written X and Y (strings or numeric arrays)."""
    sp = system.space

    def mat(M):
        if isinstance(M, PolyMatrix):
            return M
        if isinstance(M, np.ndarray):
            return PolyMatrix.from_numpy(sp, M)
        return PolyMatrix.from_strings(sp, M)

    X0 = np.eye(system.n) * 1e-3 if X0 is None else np.asarray(X0, dtype=float)
    return Certificate(sp, system.states, system.params, system.rates, "pd", mat(X), mat(Y), X0,
                       eps1, eps2, eps3, 0.0)
