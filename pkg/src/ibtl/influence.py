"""Influence of removing a training sample on validation loss.

For a training sample ``x`` and validation sample ``x_j`` the first-order
influence is ``I(x, x_j) = -g_j^T (H + damping I)^{-1} g_x`` where ``g`` are
data-loss gradients and ``H`` is the mean Hessian of the regularized training
objective. A positive total over the validation reference predicts that
removing ``x`` lowers validation loss. Values are left unscaled (no 1/n).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import kernels
from .data import Dataset
from .model import EXPLICIT_HESSIAN_LIMIT, GradEngine
from .numkit import NotPositiveDefiniteError, RngStream, cg_solve, cholesky_factor, cholesky_solve

__all__ = [
    "IhvpStrategy",
    "ValidationReference",
    "EmptyReferenceError",
    "LissaDivergenceError",
    "default_damping",
    "ihvp",
    "influence_pair",
    "influence_total",
    "influence_scores",
    "influence_scores_naive",
    "resolve_reference",
    "parse_ref_mode",
    "estimate_spectral_norm",
]

logger = logging.getLogger(__name__)

LISSA_BLOWUP = 1e6


class EmptyReferenceError(ValueError):
    pass


class LissaDivergenceError(ArithmeticError):
    pass


def default_damping(spec) -> float:
    # softmax-linear has an exact null direction (a common shift of all biases)
    return 1e-6 if spec.is_convex else 1e-3


@dataclass(frozen=True)
class IhvpStrategy:
    kind: str = "explicit"
    damping: float = 0.0
    cg_tol: float = 1e-10
    cg_max_iter: int | None = None
    lissa_depth: int = 5000
    lissa_scale: float = 10.0
    lissa_batch_size: int = 50
    lissa_repeats: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("explicit", "cg", "lissa"):
            raise ValueError(f"unknown IHVP strategy {self.kind!r}")
        if not self.damping >= 0:
            raise ValueError("damping must be nonnegative")
        if self.kind == "lissa" and (self.lissa_scale <= 0 or self.lissa_depth < 1 or self.lissa_repeats < 1):
            raise ValueError("lissa needs scale > 0, depth >= 1 and repeats >= 1")

    def check(self, engine: GradEngine) -> None:
        if self.kind == "explicit" and engine.spec.num_params > EXPLICIT_HESSIAN_LIMIT:
            raise ValueError(
                f"explicit strategy needs p <= {EXPLICIT_HESSIAN_LIMIT}, model has {engine.spec.num_params}"
            )
        if not engine.spec.is_convex and self.damping <= 0:
            raise ValueError("non-convex models need damping > 0")

    def describe(self) -> dict:
        d = asdict(self)
        if self.kind != "cg":
            d.pop("cg_tol"), d.pop("cg_max_iter")
        if self.kind != "lissa":
            for k in [k for k in d if k.startswith("lissa_")] + ["seed"]:
                d.pop(k)
        return d


@dataclass(frozen=True)
class ValidationReference:
    mode: str
    indices: tuple[int, ...]
    target_class: int | None = None

    def describe(self) -> str:
        return "all" if self.mode == "all" else f"class:{self.target_class}"


def parse_ref_mode(mode) -> str | int:
    """``"all"`` stays ``"all"``; ``"class:3"`` or ``3`` becomes ``3``."""
    if isinstance(mode, (int, np.integer)):
        return int(mode)
    if mode == "all":
        return "all"
    if isinstance(mode, str) and mode.startswith("class:"):
        return int(mode.split(":", 1)[1])
    raise ValueError(f"reference mode must be 'all' or 'class:<k>', got {mode!r}")


def resolve_reference(val: Dataset, mode="all") -> ValidationReference:
    if len(val) == 0:
        raise EmptyReferenceError("validation set is empty")
    mode = parse_ref_mode(mode)
    if mode == "all":
        return ValidationReference("all", tuple(range(len(val))))
    idx = tuple(int(i) for i in np.flatnonzero(val.labels == mode))
    if not idx:
        raise EmptyReferenceError(f"no validation samples of class {mode}")
    return ValidationReference("class_restricted", idx, mode)


def estimate_spectral_norm(engine: GradEngine, train: Dataset, damping: float = 0.0, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of ‖H + damping I‖, handy for picking a LiSSA scale."""
    v = RngStream(seed).normal(size=engine.spec.num_params)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = engine.objective_hvp(train.features, train.labels, v) + damping * v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return damping
        v = w / lam
    return lam


def _lissa(engine: GradEngine, train: Dataset, b: np.ndarray, st: IhvpStrategy) -> np.ndarray:
    n, p = len(train), b.size
    reg = engine.spec.l2_lambda * engine.spec.weight_mask()
    root = RngStream(st.seed).child("lissa")
    bnorm = float(np.linalg.norm(b))
    blowup = LISSA_BLOWUP * max(bnorm, np.finfo(float).tiny)
    X, y = train.features, train.labels
    acc = np.zeros(p)
    for r in range(st.lissa_repeats):
        rng = root.child(r)
        if n == 0:
            batches = None
        else:
            batches = np.ascontiguousarray(rng.integers(0, n, size=(st.lissa_depth, st.lissa_batch_size)), dtype=np.int64)
        if engine.use_kernels and batches is not None:
            s, fail = kernels.lissa_softmax_linear(
                engine.params.values, X, b, batches, reg, st.damping, st.lissa_scale, blowup
            )
        else:
            s, fail = b.copy(), -1
            for t in range(st.lissa_depth):
                if batches is None:
                    hv = reg * s
                else:
                    hv = engine.hvp(X[batches[t]], y[batches[t]], s) + reg * s
                s = b + s - (hv + st.damping * s) / st.lissa_scale
                if not np.isfinite(s).all() or np.linalg.norm(s) > blowup:
                    fail = t
                    break
        if fail >= 0:
            raise LissaDivergenceError(
                f"LiSSA diverged at step {fail} of repeat {r} (norm grew past {LISSA_BLOWUP:g} x ‖b‖); "
                f"increase lissa_scale above the Hessian's spectral norm (currently {st.lissa_scale})"
            )
        acc += s
    return acc / (st.lissa_repeats * st.lissa_scale)


def ihvp(engine: GradEngine, train: Dataset, b, strategy: IhvpStrategy) -> np.ndarray:
    """Solve (H + damping I) s = b with the requested strategy."""
    strategy.check(engine)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.shape != (engine.spec.num_params,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({engine.spec.num_params},)")
    X, y = train.features, train.labels
    if strategy.kind == "explicit":
        H = engine.build_hessian(X, y, strategy.damping)
        try:
            return cholesky_solve(H, b)
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"{exc}; increase damping (currently {strategy.damping})", exc.pivot) from None
    if strategy.kind == "cg":
        res = cg_solve(
            lambda v: engine.objective_hvp(X, y, v) + strategy.damping * v,
            b,
            tol=strategy.cg_tol,
            max_iter=strategy.cg_max_iter,
        )
        if not res.converged:
            logger.warning("CG stopped after %d iterations at relative residual %.3e", res.n_iter, res.rel_residual)
        return res.x
    return _lissa(engine, train, b, strategy)


def _sample_grad(engine, sample):
    x, label = sample
    return engine.grad(x, label)


def influence_pair(engine: GradEngine, train: Dataset, sample, val_sample, strategy: IhvpStrategy) -> float:
    """I(x, x_j) for one training sample and one validation sample, each given as ``(x, y)``."""
    s = ihvp(engine, train, _sample_grad(engine, sample), strategy)
    return -float(_sample_grad(engine, val_sample) @ s)


def _reference_gradient(engine: GradEngine, val: Dataset, ref: ValidationReference) -> np.ndarray:
    if not ref.indices:
        raise EmptyReferenceError("validation reference is empty")
    rows = np.asarray(ref.indices)
    return engine.per_sample_grads(val.features[rows], val.labels[rows]).sum(axis=0)


def influence_total(engine: GradEngine, train: Dataset, sample, val: Dataset, ref: ValidationReference, strategy: IhvpStrategy) -> float:
    """Sum of I(x, x_j) over the referenced validation samples, via one shared solve."""
    s = ihvp(engine, train, _reference_gradient(engine, val, ref), strategy)
    return -float(_sample_grad(engine, sample) @ s)


def influence_scores(engine: GradEngine, train: Dataset, val: Dataset, ref: ValidationReference, strategy: IhvpStrategy) -> np.ndarray:
    """Total influence of every training sample, in training-set order.

    The sum over the reference is linear in the validation gradients, so a
    single inverse-HVP of their sum serves every training sample.
    """
    s = ihvp(engine, train, _reference_gradient(engine, val, ref), strategy)
    G = engine.per_sample_grads(train.features, train.labels)
    return -(G @ s)


def influence_scores_naive(engine: GradEngine, train: Dataset, val: Dataset, ref: ValidationReference, damping: float) -> np.ndarray:
    """Pair-by-pair reference: one solve per training sample, then a sum over pairs."""
    if not ref.indices:
        raise EmptyReferenceError("validation reference is empty")
    L = cholesky_factor(engine.build_hessian(train.features, train.labels, damping))
    G = engine.per_sample_grads(train.features, train.labels)
    rows = np.asarray(ref.indices)
    Gv = engine.per_sample_grads(val.features[rows], val.labels[rows])
    out = np.empty(len(train))
    for i in range(len(train)):
        s_i = cho_solve((L, True), G[i])
        out[i] = sum(-float(Gv[j] @ s_i) for j in range(len(rows)))
    return out
