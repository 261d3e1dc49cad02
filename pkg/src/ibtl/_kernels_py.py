"""Pure-numpy kernels. Reference twin of ``_kernels_c.pyx``; same signatures.

The softmax-linear parameter layout is ``[W (d x K, row-major), b (K)]``.
"""

import numpy as np


def _probs(theta, X, K):
    n, d = X.shape
    W = theta[: d * K].reshape(d, K)
    Z = X @ W + theta[d * K :]
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    S = E.sum(axis=1)
    return Z, S, E / S[:, None]


def softmax_linear_loss_grad(theta, X, y, K):
    """Per-sample cross-entropy losses (n,) and gradients (n, p)."""
    n, d = X.shape
    Z, S, P = _probs(theta, X, K)
    rows = np.arange(n)
    losses = np.log(S) - Z[rows, y]
    D = P
    D[rows, y] -= 1.0
    G = np.empty((n, (d + 1) * K))
    G[:, : d * K] = (X[:, :, None] * D[:, None, :]).reshape(n, d * K)
    G[:, d * K :] = D
    return losses, G


def softmax_linear_mean_grad(theta, X, y, K):
    """Mean loss and mean gradient over the rows of X."""
    n, d = X.shape
    Z, S, P = _probs(theta, X, K)
    rows = np.arange(n)
    loss = float(np.mean(np.log(S) - Z[rows, y]))
    D = P
    D[rows, y] -= 1.0
    g = np.empty((d + 1) * K)
    g[: d * K] = (X.T @ D).ravel() / n
    g[d * K :] = D.sum(axis=0) / n
    return loss, g


def _hvp_from_probs(P, X, v, K):
    n, d = X.shape
    R = X @ v[: d * K].reshape(d, K) + v[d * K :]
    RP = P * (R - (P * R).sum(axis=1, keepdims=True))
    out = np.empty_like(v)
    out[: d * K] = (X.T @ RP).ravel() / n
    out[d * K :] = RP.sum(axis=0) / n
    return out


def softmax_linear_hvp(theta, X, v, K):
    """Mean data-term Hessian-vector product over the rows of X."""
    _, _, P = _probs(theta, X, K)
    return _hvp_from_probs(P, X, np.asarray(v, dtype=np.float64), K)


def lissa_softmax_linear(theta, X, b, batches, reg, damping, scale, blowup):
    """One LiSSA recursion s <- b + s - ((H_batch + diag(reg) + damping) s) / scale.

    ``batches`` is a (T, B) array of row indices. Returns ``(s_T, t_fail)``
    where ``t_fail`` is the step at which ‖s‖ exceeded ``blowup`` (or -1).
    """
    K = b.shape[0] // (X.shape[1] + 1)
    _, _, P = _probs(theta, X, K)
    s = b.copy()
    for t in range(batches.shape[0]):
        idx = batches[t]
        hv = _hvp_from_probs(P[idx], X[idx], s, K) + (reg + damping) * s
        s = b + s - hv / scale
        if not np.isfinite(s).all() or np.dot(s, s) > blowup * blowup:
            return s, t
    return s, -1


def adam_step(theta, g, m, v, lr, beta1, beta2, eps, t, mask):
    """In-place Adam update of the coordinates where ``mask`` is nonzero."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    theta -= np.where(mask != 0, lr * mhat / (np.sqrt(vhat) + eps), 0.0)
