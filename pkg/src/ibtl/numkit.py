"""Dense linear algebra helpers, finite-difference checkers and seeded RNG streams.

Everything is float64. Solvers take plain callables or arrays so they can be
driven by matrix-free Hessian-vector products as well as explicit matrices.
"""

from __future__ import annotations

import zlib
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

__all__ = [
    "NumericalBreakdownError",
    "NotPositiveDefiniteError",
    "CGResult",
    "RngStream",
    "cg_solve",
    "cholesky_solve",
    "finite_diff_grad",
    "finite_diff_hvp",
    "rel_err",
]


class NumericalBreakdownError(ArithmeticError):
    """A solver produced or was fed non-finite values."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, msg: str, pivot: int | None = None):
        super().__init__(msg)
        self.pivot = pivot


class CGResult(NamedTuple):
    x: np.ndarray
    converged: bool
    n_iter: int
    rel_residual: float


def rel_err(a, b) -> float:
    """‖a − b‖ / max(‖b‖, tiny)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.linalg.norm(b)), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(a - b)) / denom


class RngStream:
    """Counter-based (Philox) random stream with named, reproducible children.

    A stream is single-owner. Hand independent work its own stream via
    :meth:`child` instead of sharing one between threads.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be nonnegative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str | int) -> "RngStream":
        key = name if isinstance(name, int) else zlib.crc32(name.encode("utf-8"))
        return RngStream(self.seed, self.path + (int(key),))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"

    # thin pass-throughs for the draws used across the package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def random(self, size=None):
        return self.generator.random(size)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalBreakdownError(f"non-finite values in {name}")


def cg_solve(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> CGResult:
    """Conjugate gradients for a symmetric positive definite operator.

    Stops when ‖Ax − b‖/‖b‖ ≤ tol. If ``max_iter`` (default ``10 * len(b)``)
    runs out, the iterate with the smallest residual seen so far is returned
    with ``converged=False``.
    """
    b = np.asarray(b, dtype=np.float64)
    _check_finite("right-hand side", b)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, True, 0, 0.0)

    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    best_x, best_res = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        Ap = np.asarray(apply_A(p), dtype=np.float64)
        _check_finite("operator output", Ap)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise NotPositiveDefiniteError(
                f"operator is not positive definite (pᵀAp = {pAp:.3e} at CG iteration {it}); "
                "increase damping"
            )
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        res = np.sqrt(rs_new) / bnorm
        if not np.isfinite(res):
            raise NumericalBreakdownError(f"CG residual became non-finite at iteration {it}")
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return CGResult(x, True, it, res)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(best_x, False, max_iter, best_res)


def cholesky_factor(A) -> np.ndarray:
    """Lower Cholesky factor; raises NotPositiveDefiniteError naming the failing pivot."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    _check_finite("matrix", A)
    c, info = dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite: nonpositive pivot at index {info - 1}",
            pivot=info - 1,
        )
    if info < 0:
        raise ValueError(f"dpotrf: illegal value in argument {-info}")
    return c


def cholesky_solve(A, b) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, b has length {b.shape[0]}")
    L = cholesky_factor(A)
    return cho_solve((L, True), b)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalBreakdownError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_hvp(grad_f: Callable[[np.ndarray], np.ndarray], x, v, h: float = 1e-5) -> np.ndarray:
    """(∇f(x + h v) − ∇f(x − h v)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    gp = np.asarray(grad_f(x + h * v))
    gm = np.asarray(grad_f(x - h * v))
    out = (gp - gm) / (2.0 * h)
    _check_finite("finite-difference HVP", out)
    return out
