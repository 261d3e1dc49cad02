"""Exact leave-one-out retraining for regularized softmax-linear models.

The retrained optimum uses the full-set normalization, i.e. it minimizes
``(1/n) sum_{i != x} L_i + (lambda/2) ||W||^2`` with the original ``n``, which
is the objective whose first-order expansion gives the influence score.

Loss, gradient and Hessian are written out here from the closed form of
multinomial logistic regression, independently of :mod:`ibtl.model`, so this
module can serve as an oracle for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .influence import ValidationReference
from .model import ArchitectureSpec

__all__ = ["NonConvexModelError", "NewtonConvergenceError", "LooResult", "newton_fit", "loo_deltas"]


class NonConvexModelError(ValueError):
    pass


class NewtonConvergenceError(ArithmeticError):
    def __init__(self, msg, grad_norm):
        super().__init__(msg)
        self.grad_norm = grad_norm


def _require_convex(spec: ArchitectureSpec) -> None:
    if not spec.is_convex:
        raise NonConvexModelError(
            "the leave-one-out oracle needs a softmax-linear model with l2_lambda > 0; "
            "an MLP has no unique minimizer to retrain to"
        )


def _augment(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _sample_losses(Theta, Xa, y):
    Z = Xa @ Theta
    return logsumexp(Z, axis=1) - Z[np.arange(len(y)), y]


def _objective(Theta, Xa, y, n_norm, lam, d):
    return _sample_losses(Theta, Xa, y).sum() / n_norm + 0.5 * lam * np.sum(Theta[:d] ** 2)


def _grad_hess(Theta, Xa, y, n_norm, lam, d):
    n, K = Xa.shape[0], Theta.shape[1]
    Z = Xa @ Theta
    P = np.exp(Z - logsumexp(Z, axis=1, keepdims=True))
    D = P.copy()
    D[np.arange(n), y] -= 1.0
    G = Xa.T @ D / n_norm
    G[:d] += lam * Theta[:d]
    A = -P[:, :, None] * P[:, None, :]
    A[:, np.arange(K), np.arange(K)] += P
    H = np.einsum("ij,il,ikm->jklm", Xa, Xa, A).reshape(Theta.size, Theta.size) / n_norm
    H[np.arange(d * K), np.arange(d * K)] += lam
    return G.ravel(), H


def newton_fit(
    spec: ArchitectureSpec,
    X,
    y,
    n_norm: int | None = None,
    theta0=None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> np.ndarray:
    """Minimize the regularized objective to gradient norm <= tol.

    Steps are minimum-norm solutions of the Newton system (the bias block has
    a flat direction) with backtracking on the objective.
    """
    _require_convex(spec)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    d, K, lam = spec.input_dim, spec.num_classes, spec.l2_lambda
    n_norm = len(y) if n_norm is None else n_norm
    Xa = _augment(X)
    Theta = np.zeros((d + 1, K)) if theta0 is None else np.array(theta0, dtype=np.float64).reshape(d + 1, K)
    f = _objective(Theta, Xa, y, n_norm, lam, d)
    gnorm = np.inf
    for _ in range(max_iter):
        g, H = _grad_hess(Theta, Xa, y, n_norm, lam, d)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return Theta.ravel()
        step = np.linalg.lstsq(H, -g, rcond=None)[0].reshape(d + 1, K)
        slope = float(g @ step.ravel())
        t = 1.0
        while t >= 1e-10:
            cand = Theta + t * step
            f_new = _objective(cand, Xa, y, n_norm, lam, d)
            if f_new <= f + 1e-4 * t * slope:
                break
            # near the optimum f only moves at rounding level; judge by the gradient
            if f_new - f <= 1e-13 * max(1.0, abs(f)):
                g_new, _ = _grad_hess(cand, Xa, y, n_norm, lam, d)
                if np.linalg.norm(g_new) < gnorm:
                    break
            t *= 0.5
        else:
            break
        Theta, f = cand, f_new
    g, _ = _grad_hess(Theta, Xa, y, n_norm, lam, d)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return Theta.ravel()
    raise NewtonConvergenceError(f"Newton did not reach gradient norm {tol:g}; final norm {gnorm:.3e}", gnorm)


@dataclass
class LooResult:
    ids: np.ndarray
    deltas: np.ndarray  # sum_j L(theta) - L(theta'), positive = removal helps


def loo_deltas(
    spec: ArchitectureSpec,
    theta,
    train: Dataset,
    val: Dataset,
    ref: ValidationReference,
    sample_ids=None,
    tol: float = 1e-10,
) -> LooResult:
    """Retrain without each requested sample and report the change in referenced validation loss.

    ``theta`` must be the optimum on the full training set. Ids that are not
    in ``train`` remove nothing and give exactly 0.
    """
    _require_convex(spec)
    theta = np.asarray(theta, dtype=np.float64)
    d, K = spec.input_dim, spec.num_classes
    rows = np.asarray(ref.indices)
    Xv, yv = _augment(val.features[rows]), val.labels[rows]
    base = _sample_losses(theta.reshape(d + 1, K), Xv, yv).sum()
    ids = train.ids if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    n = len(train)
    out = np.empty(len(ids))
    for a, sid in enumerate(ids):
        keep = train.ids != sid
        if keep.all():
            out[a] = 0.0
            continue
        th = newton_fit(spec, train.features[keep], train.labels[keep], n_norm=n, theta0=theta, tol=tol)
        out[a] = base - _sample_losses(th.reshape(d + 1, K), Xv, yv).sum()
    return LooResult(ids.copy(), out)
