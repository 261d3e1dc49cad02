"""Softmax classifiers with a flat, layered parameter vector.

Two families share one layout: softmax-linear regression (no hidden layers)
and a small MLP with smooth activations. Layer ``k`` stores its weights as a
``fan_in x fan_out`` row-major block followed by ``fan_out`` biases.

Losses are mean cross-entropy; the optional regularizer is
``(l2_lambda / 2) * ||weights||^2`` and never touches biases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import kernels
from .numkit import RngStream

__all__ = [
    "ArchitectureSpec",
    "ParameterVector",
    "GradEngine",
    "HessianTooLargeError",
    "InvalidLabelError",
    "init_xavier",
    "EXPLICIT_HESSIAN_LIMIT",
]

EXPLICIT_HESSIAN_LIMIT = 4096
ACTIVATIONS = ("tanh", "softplus")


class HessianTooLargeError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "tanh"
    l2_lambda: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer dimensions must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.l2_lambda >= 0:
            raise ValueError("l2_lambda must be nonnegative")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    @property
    def layer_offsets(self) -> tuple[tuple[int, int], ...]:
        out, start = [], 0
        for fan_in, fan_out in self.layer_shapes:
            end = start + (fan_in + 1) * fan_out
            out.append((start, end))
            start = end
        return tuple(out)

    @property
    def num_params(self) -> int:
        return self.layer_offsets[-1][1]

    @property
    def is_linear(self) -> bool:
        return not self.hidden_dims

    @property
    def is_convex(self) -> bool:
        """Regularized softmax-linear regression: strictly convex in the weights."""
        return self.is_linear and self.l2_lambda > 0

    def weight_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_params)
        for (start, _), (fan_in, fan_out) in zip(self.layer_offsets, self.layer_shapes):
            mask[start : start + fan_in * fan_out] = 1.0
        return mask

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "l2_lambda": self.l2_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            hidden_dims=tuple(d.get("hidden_dims", ())),
            activation=d.get("activation", "tanh"),
            l2_lambda=float(d.get("l2_lambda", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Read-only flat parameters plus per-layer ``(start, end)`` offsets."""

    values: np.ndarray
    layer_offsets: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).ravel()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        offs = tuple((int(a), int(b)) for a, b in self.layer_offsets)
        if not offs:
            offs = ((0, vals.size),)
        pos = 0
        for a, b in offs:
            if a != pos or b < a:
                raise ValueError(f"layer offsets do not partition [0, {vals.size}): {offs}")
            pos = b
        if pos != vals.size:
            raise ValueError(f"layer offsets cover {pos} entries but vector has {vals.size}")
        object.__setattr__(self, "layer_offsets", offs)

    @classmethod
    def for_spec(cls, spec: ArchitectureSpec, values) -> "ParameterVector":
        values = np.asarray(values, dtype=np.float64)
        if values.size != spec.num_params:
            raise ValueError(f"expected {spec.num_params} parameters, got {values.size}")
        return cls(values, spec.layer_offsets)

    @classmethod
    def zeros(cls, spec: ArchitectureSpec) -> "ParameterVector":
        return cls.for_spec(spec, np.zeros(spec.num_params))

    def __len__(self) -> int:
        return self.values.size

    def layer(self, k: int) -> np.ndarray:
        a, b = self.layer_offsets[k]
        return self.values[a:b]

    def copy_values(self) -> np.ndarray:
        return self.values.copy()


def init_xavier(spec: ArchitectureSpec, rng: RngStream) -> ParameterVector:
    """Uniform Glorot init, weights in ±sqrt(6/(fan_in+fan_out)); biases zero."""
    theta = np.zeros(spec.num_params)
    for (start, _), (fan_in, fan_out) in zip(spec.layer_offsets, spec.layer_shapes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        theta[start : start + fan_in * fan_out] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return ParameterVector.for_spec(spec, theta)


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    return np.logaddexp(0.0, a)


def _act_d1_d2(name, a, h):
    if name == "tanh":
        d1 = 1.0 - h * h
        return d1, -2.0 * h * d1
    s = expit(a)
    return s, s * (1.0 - s)


class GradEngine:
    """Loss, gradient and Hessian-vector products at fixed parameters.

    The engine never mutates its parameters, so one instance may be shared by
    concurrent readers.
    """

    def __init__(self, spec: ArchitectureSpec, params: ParameterVector | np.ndarray):
        if not isinstance(params, ParameterVector):
            params = ParameterVector.for_spec(spec, params)
        if len(params) != spec.num_params or params.layer_offsets != spec.layer_offsets:
            raise ValueError("parameter vector does not match the architecture")
        self.spec = spec
        self.params = params
        self._theta = params.values
        self._mask = spec.weight_mask()
        self._layers = []
        for (start, end), (fan_in, fan_out) in zip(spec.layer_offsets, spec.layer_shapes):
            W = self._theta[start : start + fan_in * fan_out].reshape(fan_in, fan_out)
            self._layers.append((W, self._theta[start + fan_in * fan_out : end]))
        self.use_kernels = spec.is_linear

    # ---- input checks -------------------------------------------------
    def _rows(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"dimension mismatch: expected input_dim={self.spec.input_dim}, got shape {X.shape}"
            )
        return X

    def _labels(self, y, n) -> np.ndarray:
        y = np.ascontiguousarray(np.atleast_1d(y), dtype=np.int64)
        if y.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {y.shape}")
        if n and (y.min() < 0 or y.max() >= self.spec.num_classes):
            raise InvalidLabelError(f"labels must lie in [0, {self.spec.num_classes})")
        return y

    def reg_value(self) -> float:
        return 0.5 * self.spec.l2_lambda * float(np.sum(self._mask * self._theta**2))

    # ---- generic numpy path (any depth) -------------------------------
    def _forward(self, X):
        hs, pre = [X], []
        last = len(self._layers) - 1
        for k, (W, b) in enumerate(self._layers):
            a = hs[-1] @ W + b
            pre.append(a)
            if k < last:
                hs.append(_act(self.spec.activation, a))
        return hs, pre

    def _generic_losses(self, X, y):
        _, pre = self._forward(X)
        z = pre[-1]
        return logsumexp(z, axis=1) - z[np.arange(len(y)), y]

    def _generic_per_sample(self, X, y):
        n = X.shape[0]
        hs, pre = self._forward(X)
        z = pre[-1]
        P = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        delta = P
        delta[np.arange(n), y] -= 1.0
        G = np.empty((n, self.spec.num_params))
        for k in range(len(self._layers) - 1, -1, -1):
            (start, end), (fan_in, fan_out) = self.spec.layer_offsets[k], self.spec.layer_shapes[k]
            G[:, start : start + fan_in * fan_out] = np.einsum("ni,nj->nij", hs[k], delta).reshape(n, -1)
            G[:, start + fan_in * fan_out : end] = delta
            if k:
                d1, _ = _act_d1_d2(self.spec.activation, pre[k - 1], hs[k])
                delta = (delta @ self._layers[k][0].T) * d1
        return G

    def _generic_hvp(self, X, y, v):
        """Forward-over-reverse (R-operator) product for the mean data loss."""
        n = X.shape[0]
        act = self.spec.activation
        vl = []
        for (start, end), (fan_in, fan_out) in zip(self.spec.layer_offsets, self.spec.layer_shapes):
            vl.append((v[start : start + fan_in * fan_out].reshape(fan_in, fan_out), v[start + fan_in * fan_out : end]))
        hs, pre = self._forward(X)
        L = len(self._layers)
        derivs = [_act_d1_d2(act, pre[k], hs[k + 1]) for k in range(L - 1)]
        Rh = [np.zeros_like(X)]
        Ra = []
        for k in range(L):
            W, _ = self._layers[k]
            V, vb = vl[k]
            ra = Rh[k] @ W + hs[k] @ V + vb
            Ra.append(ra)
            if k < L - 1:
                Rh.append(derivs[k][0] * ra)
        z = pre[-1]
        P = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        Rz = Ra[-1]
        Rdelta = P * (Rz - np.sum(P * Rz, axis=1, keepdims=True))
        delta = P.copy()
        delta[np.arange(n), y] -= 1.0
        out = np.empty_like(v)
        for k in range(L - 1, -1, -1):
            (start, end), (fan_in, fan_out) = self.spec.layer_offsets[k], self.spec.layer_shapes[k]
            RgW = (Rh[k].T @ delta + hs[k].T @ Rdelta) / n
            out[start : start + fan_in * fan_out] = RgW.ravel()
            out[start + fan_in * fan_out : end] = Rdelta.sum(axis=0) / n
            if k:
                W, _ = self._layers[k]
                V, _ = vl[k]
                e = delta @ W.T
                Re = Rdelta @ W.T + delta @ V.T
                d1, d2 = derivs[k - 1]
                delta = e * d1
                Rdelta = Re * d1 + e * d2 * Ra[k - 1]
        return out

    # ---- public API ---------------------------------------------------
    def forward(self, x) -> np.ndarray:
        """Class probabilities; a 1-D input gives a 1-D output."""
        single = np.ndim(x) == 1
        X = self._rows(x)
        _, pre = self._forward(X)
        z = pre[-1]
        P = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        return P[0] if single else P

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.forward(self._rows(X)), axis=1)

    def per_sample_losses(self, X, y) -> np.ndarray:
        X = self._rows(X)
        y = self._labels(y, X.shape[0])
        if self.use_kernels:
            return kernels.softmax_linear_loss_grad(self._theta, X, y, self.spec.num_classes)[0]
        return self._generic_losses(X, y)

    def loss(self, x, y, include_reg: bool = False) -> float:
        val = float(self.per_sample_losses(x, y)[0])
        return val + self.reg_value() if include_reg else val

    def per_sample_grads(self, X, y) -> np.ndarray:
        """(n, p) matrix of data-term gradients, one row per sample."""
        X = self._rows(X)
        y = self._labels(y, X.shape[0])
        if self.use_kernels:
            return kernels.softmax_linear_loss_grad(self._theta, X, y, self.spec.num_classes)[1]
        return self._generic_per_sample(X, y)

    def grad(self, x, y, include_reg: bool = False) -> np.ndarray:
        g = self.per_sample_grads(x, y)[0]
        if include_reg:
            g = g + self.spec.l2_lambda * self._mask * self._theta
        return g

    def mean_loss_grad(self, X, y, include_reg: bool = True) -> tuple[float, np.ndarray]:
        """Mean loss and gradient of the (optionally regularized) batch objective."""
        X = self._rows(X)
        y = self._labels(y, X.shape[0])
        if X.shape[0] == 0:
            raise ValueError("empty batch")
        if self.use_kernels:
            loss, g = kernels.softmax_linear_mean_grad(self._theta, X, y, self.spec.num_classes)
        else:
            loss = float(np.mean(self._generic_losses(X, y)))
            g = self._generic_per_sample(X, y).mean(axis=0)
        if include_reg:
            loss += self.reg_value()
            g = g + self.spec.l2_lambda * self._mask * self._theta
        return loss, g

    def mean_loss(self, X, y, include_reg: bool = True) -> float:
        val = float(np.mean(self.per_sample_losses(X, y)))
        return val + self.reg_value() if include_reg else val

    def hvp(self, X, y, v, include_reg: bool = False) -> np.ndarray:
        """Hessian of the mean batch loss applied to ``v``."""
        X = self._rows(X)
        y = self._labels(y, X.shape[0])
        if X.shape[0] == 0:
            raise ValueError("hvp needs a non-empty batch")
        v = np.ascontiguousarray(v, dtype=np.float64)
        if v.shape != (self.spec.num_params,):
            raise ValueError(f"vector length {v.shape} != number of parameters {self.spec.num_params}")
        if self.use_kernels:
            out = kernels.softmax_linear_hvp(self._theta, X, v, self.spec.num_classes)
        else:
            out = self._generic_hvp(X, y, v)
        if include_reg:
            out = out + self.spec.l2_lambda * self._mask * v
        return out

    def objective_hvp(self, X, y, v) -> np.ndarray:
        """HVP of the regularized training objective; an empty set leaves only the regularizer."""
        if np.shape(X)[0] == 0:
            return self.spec.l2_lambda * self._mask * np.asarray(v, dtype=np.float64)
        return self.hvp(X, y, v, include_reg=True)

    def build_hessian(self, X, y, damping: float = 0.0) -> np.ndarray:
        """Explicit mean Hessian of the regularized objective plus ``damping * I``."""
        p = self.spec.num_params
        if p > EXPLICIT_HESSIAN_LIMIT:
            raise HessianTooLargeError(
                f"{p} parameters exceeds the explicit-Hessian limit of {EXPLICIT_HESSIAN_LIMIT}; "
                "use the 'cg' or 'lissa' inverse-HVP strategy"
            )
        H = np.empty((p, p))
        e = np.zeros(p)
        for j in range(p):
            e[j] = 1.0
            H[:, j] = self.objective_hvp(X, y, e)
            e[j] = 0.0
        H = 0.5 * (H + H.T)
        H[np.diag_indices(p)] += damping
        return H
