"""Parameter transfer, layer freezing, fine-tuning and evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data import Dataset
from .model import ArchitectureSpec, GradEngine, ParameterVector, init_xavier
from .numkit import RngStream

__all__ = [
    "TransferPlan",
    "FineTuneConfig",
    "TrainingHistory",
    "EvalResult",
    "IncompatibleArchitectureError",
    "DivergenceError",
    "transfer_parameters",
    "fine_tune",
    "evaluate",
    "lr_at_epoch",
]


class IncompatibleArchitectureError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TransferPlan:
    """``mode`` is ``"full_load"`` or ``"hybrid"``; hybrid loads the first ``shallow_layers`` layers."""

    mode: str = "full_load"
    shallow_layers: int = 1
    frozen_layers: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full_load", "hybrid"):
            raise ValueError(f"unknown transfer mode {self.mode!r}")
        object.__setattr__(self, "frozen_layers", frozenset(int(k) for k in self.frozen_layers))
        if self.shallow_layers < 0:
            raise ValueError("shallow_layers must be >= 0")

    def loaded_layers(self, spec: ArchitectureSpec) -> range:
        return range(spec.num_layers) if self.mode == "full_load" else range(self.shallow_layers)

    def check(self, spec: ArchitectureSpec) -> None:
        if self.mode == "hybrid" and self.shallow_layers > spec.num_layers:
            raise ValueError(f"shallow_layers={self.shallow_layers} exceeds the {spec.num_layers} layers of the target")
        bad = [k for k in self.frozen_layers if not 0 <= k < spec.num_layers]
        if bad:
            raise ValueError(f"frozen layer indices out of range: {sorted(bad)}")
        if self.mode == "hybrid" and not self.frozen_layers <= set(self.loaded_layers(spec)):
            raise ValueError("in hybrid mode only loaded layers may be frozen")


@dataclass(frozen=True)
class FineTuneConfig:
    optimizer: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 128
    lr_schedule: str = "step"
    lr_drop_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")
        if self.lr_schedule not in ("step", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(config: FineTuneConfig, epoch: int) -> float:
    """Step schedule: base rate until ceil(epochs/2), then base * drop factor."""
    if config.lr_schedule == "step" and epoch >= math.ceil(config.epochs / 2):
        return config.lr * config.lr_drop_factor
    return config.lr


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_error: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lr)

    def to_records(self) -> list[dict]:
        return [
            {"epoch": e, "train_loss": tl, "val_loss": vl, "val_error": ve, "lr": lr}
            for e, (tl, vl, ve, lr) in enumerate(zip(self.train_loss, self.val_loss, self.val_error, self.lr))
        ]


@dataclass
class EvalResult:
    error_rate: float
    confusion: np.ndarray  # rows: true class, columns: predicted class

    def per_class_error(self) -> list[float | None]:
        out = []
        for k, row in enumerate(self.confusion):
            total = int(row.sum())
            out.append(None if total == 0 else 1.0 - row[k] / total)
        return out

    def to_dict(self) -> dict:
        return {
            "error_rate": self.error_rate,
            "n": int(self.confusion.sum()),
            "confusion": self.confusion.astype(int).tolist(),
            "per_class_error": self.per_class_error(),
        }


def _shapes_match(a: ArchitectureSpec, b: ArchitectureSpec, k: int) -> bool:
    return a.layer_shapes[k] == b.layer_shapes[k]


def transfer_parameters(
    source: ParameterVector,
    source_spec: ArchitectureSpec,
    target_spec: ArchitectureSpec,
    plan: TransferPlan,
) -> ParameterVector:
    """Initialize ``target_spec`` from a pre-trained vector.

    Loaded layers are copied bit-for-bit; every other layer comes from a fresh
    Xavier draw seeded by ``plan.seed``.
    """
    plan.check(target_spec)
    if plan.mode == "full_load" and source_spec.layer_shapes != target_spec.layer_shapes:
        raise IncompatibleArchitectureError(
            f"full_load needs identical architectures: {source_spec.layer_shapes} vs {target_spec.layer_shapes}"
        )
    theta = init_xavier(target_spec, RngStream(plan.seed)).copy_values()
    for k in plan.loaded_layers(target_spec):
        if k >= source_spec.num_layers or not _shapes_match(source_spec, target_spec, k):
            src = source_spec.layer_shapes[k] if k < source_spec.num_layers else None
            raise IncompatibleArchitectureError(
                f"layer {k}: source shape {src} does not match target shape {target_spec.layer_shapes[k]}"
            )
        a, b = target_spec.layer_offsets[k]
        theta[a:b] = source.layer(k)
    return ParameterVector.for_spec(target_spec, theta)


def _trainable_mask(spec: ArchitectureSpec, frozen) -> np.ndarray:
    mask = np.ones(spec.num_params)
    for k in frozen:
        a, b = spec.layer_offsets[k]
        mask[a:b] = 0.0
    return mask


def fine_tune(
    spec: ArchitectureSpec,
    params0: ParameterVector,
    train: Dataset,
    val: Dataset | None,
    config: FineTuneConfig,
    plan: TransferPlan | None = None,
) -> tuple[ParameterVector, TrainingHistory]:
    """Mini-batch training of the regularized softmax loss.

    Batches follow a per-epoch shuffle drawn from ``config.seed``; the final
    short batch is kept. Frozen layers in ``plan`` are never updated.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.dim != spec.input_dim:
        raise ValueError(f"training features have dim {train.dim}, model expects {spec.input_dim}")
    frozen = plan.frozen_layers if plan is not None else frozenset()
    if plan is not None:
        plan.check(spec)
    mask = _trainable_mask(spec, frozen)
    theta = params0.copy_values()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    X, y = train.features, train.labels
    shuffle_rng = RngStream(config.seed).child("shuffle")
    history = TrainingHistory()

    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(len(train))
        for bi, start in enumerate(range(0, len(train), config.batch_size)):
            rows = order[start : start + config.batch_size]
            # overflow is caught below as divergence, not reported as a warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss, g = GradEngine(spec, theta).mean_loss_grad(X[rows], y[rows], include_reg=True)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            step += 1
            if config.optimizer == "adam":
                kernels.adam_step(theta, g, m, v, lr, config.beta1, config.beta2, config.eps, step, mask)
            else:
                m *= config.momentum
                m += g * mask
                theta -= lr * m
        engine = GradEngine(spec, theta)
        with np.errstate(over="ignore", invalid="ignore"):
            train_loss = engine.mean_loss(X, y, include_reg=True)
        if not np.isfinite(train_loss):
            raise DivergenceError(f"non-finite training loss after epoch {epoch}")
        history.train_loss.append(train_loss)
        history.lr.append(lr)
        if val is not None and len(val):
            history.val_loss.append(engine.mean_loss(val.features, val.labels, include_reg=False))
            history.val_error.append(evaluate(spec, engine.params, val).error_rate)
        else:
            history.val_loss.append(float("nan"))
            history.val_error.append(float("nan"))
    return ParameterVector.for_spec(spec, theta), history


def evaluate(spec: ArchitectureSpec, params: ParameterVector, test: Dataset) -> EvalResult:
    """Argmax error rate (ties to the lowest class) and the confusion matrix."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    pred = GradEngine(spec, params).predict(test.features)
    K = spec.num_classes
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (test.labels, pred), 1)
    return EvalResult(float(np.mean(pred != test.labels)), confusion)
