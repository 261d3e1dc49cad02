"""Configuration and in-memory stages of the end-to-end workflow.

A run pre-trains on the source domain, optionally optimizes the target
training set by influence, and fine-tunes. :func:`run_arms` trains the three
comparison arms (from scratch, model-based, instance-based) on one shared
test set.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, build_skewed_test, corrupt_labels, gen_domain_pair, split_validation
from .dropout import InfluenceReport, data_dropout
from .influence import IhvpStrategy, default_damping
from .model import ArchitectureSpec, GradEngine, ParameterVector, init_xavier
from .numkit import RngStream
from .transfer import FineTuneConfig, TrainingHistory, TransferPlan, evaluate, fine_tune, transfer_parameters

__all__ = [
    "DEFAULT_CONFIG",
    "ConfigError",
    "load_config",
    "merge_config",
    "GeneratedData",
    "generate_data",
    "architecture",
    "strategy_from_config",
    "plan_from_config",
    "finetune_config",
    "target_split",
    "pretrain",
    "run_arms",
]


class ConfigError(ValueError):
    pass


# Presets fit the synthetic generator below: a small corrupted target set, a
# clean validation draw, and training from scratch run twice as long as fine-tuning.
# Damping must exceed the most negative Hessian eigenvalue at the pre-trained point.
DEFAULT_CONFIG: dict = {
    "seed": 0,
    "model": {"hidden_dims": [16], "activation": "tanh", "l2_lambda": 0.001},
    "data": {
        "source": None,
        "target_train": None,
        "target_val": None,
        "target_test": None,
        "val_fraction": 0.1,
        "num_classes": None,
    },
    "generator": {
        "num_classes": 4,
        "dim": 20,
        "n_source": 3000,
        "n_target": 100,
        "n_val": 40,
        "n_test": 1000,
        "spread": 1.0,
        "noise": 1.0,
        "mean_offset": 1.0,
        "rotation": 0.3,
        "noise_scale": 1.0,
        "corrupt_fraction": 0.1,
        "skewed_test": None,
    },
    "pretrain": {"epochs": 10, "batch_size": 64, "lr": 0.001},
    "finetune": {"epochs": 100, "batch_size": 32, "lr": 0.003},
    "scratch": {"epochs": 200, "batch_size": 32, "lr": 0.01},
    "transfer": {"mode": "full_load", "shallow_layers": 1, "frozen_layers": []},
    "influence": {
        "ihvp": "cg",
        "damping": 1.0,
        "cg_tol": 1e-10,
        "cg_max_iter": None,
        "lissa_depth": 5000,
        "lissa_scale": 10.0,
        "lissa_batch_size": 50,
        "lissa_repeats": 10,
    },
    "ref_mode": "all",
    "max_drop_fraction": 0.5,
    "out_dir": "out",
}


def merge_config(base: dict, override: dict) -> dict:
    """Recursive dict merge; keys unknown to ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = merge_config(out[key], val)
        elif isinstance(out[key], dict) and val is not None:
            raise ConfigError(f"config key {key!r} must be an object")
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(DEFAULT_CONFIG, raw)


def architecture(cfg: dict, input_dim: int, num_classes: int) -> ArchitectureSpec:
    m = cfg["model"]
    return ArchitectureSpec(
        input_dim=input_dim,
        num_classes=num_classes,
        hidden_dims=tuple(m["hidden_dims"]),
        activation=m["activation"],
        l2_lambda=float(m["l2_lambda"]),
    )


def strategy_from_config(cfg: dict, spec: ArchitectureSpec) -> IhvpStrategy:
    inf = cfg["influence"]
    damping = inf["damping"]
    return IhvpStrategy(
        kind=inf["ihvp"],
        damping=default_damping(spec) if damping is None else float(damping),
        cg_tol=float(inf["cg_tol"]),
        cg_max_iter=inf["cg_max_iter"],
        lissa_depth=int(inf["lissa_depth"]),
        lissa_scale=float(inf["lissa_scale"]),
        lissa_batch_size=int(inf["lissa_batch_size"]),
        lissa_repeats=int(inf["lissa_repeats"]),
        seed=int(cfg["seed"]),
    )


def plan_from_config(cfg: dict) -> TransferPlan:
    t = cfg["transfer"]
    return TransferPlan(
        mode=t["mode"],
        shallow_layers=int(t["shallow_layers"]),
        frozen_layers=frozenset(t["frozen_layers"]),
        seed=int(cfg["seed"]),
    )


def finetune_config(cfg: dict, section: str) -> FineTuneConfig:
    fields = dict(cfg[section])
    fields.setdefault("seed", int(cfg["seed"]))
    try:
        return FineTuneConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass
class GeneratedData:
    source: Dataset
    target_train: Dataset
    target_val: Dataset | None
    target_test: Dataset
    flipped_ids: set[int]
    skewed_test: Dataset | None = None


def generate_data(gen: dict, seed: int) -> GeneratedData:
    """Synthetic source/target domains; only target training labels are corrupted."""
    rng = RngStream(seed).child("generate")
    n_target, n_val, n_test = int(gen["n_target"]), int(gen.get("n_val", 0)), int(gen["n_test"])
    pair = gen_domain_pair(
        K=int(gen["num_classes"]),
        d=int(gen["dim"]),
        n_source=int(gen["n_source"]),
        n_target=n_target + n_val + n_test,
        rng=rng,
        spread=float(gen["spread"]),
        noise=float(gen["noise"]),
        mean_offset=float(gen["mean_offset"]),
        rotation=float(gen["rotation"]),
        noise_scale=float(gen["noise_scale"]),
    )
    tgt = pair.target
    # target ids continue after the source ids so files never collide
    tgt = Dataset(tgt.features, tgt.labels, tgt.ids + len(pair.source), tgt.num_classes)
    train = tgt.subset(np.arange(n_target))
    val = tgt.subset(np.arange(n_target, n_target + n_val)) if n_val else None
    test = tgt.subset(np.arange(n_target + n_val, n_target + n_val + n_test))
    flipped: set[int] = set()
    if gen["corrupt_fraction"]:
        train, flipped = corrupt_labels(train, float(gen["corrupt_fraction"]), rng.child("corrupt"))
    skewed = None
    sk = gen.get("skewed_test")
    if sk:
        skewed = build_skewed_test(
            test, int(sk["majority_class"]), int(sk["repeats"]), int(sk["per_class"]), rng.child("skewed")
        )
    return GeneratedData(pair.source, train, val, test, flipped, skewed)


def target_split(cfg: dict, train: Dataset, val: Dataset | None = None) -> tuple[Dataset, Dataset]:
    """Use the given validation set, or hold out ``val_fraction`` of the target training set."""
    if val is not None:
        return train, val
    return split_validation(train, RngStream(int(cfg["seed"])).child("split"), float(cfg["data"]["val_fraction"]))


def pretrain(cfg: dict, spec: ArchitectureSpec, source: Dataset) -> tuple[ParameterVector, TrainingHistory]:
    """Xavier init, then train on the source domain with no frozen layers."""
    seed = int(cfg["seed"])
    tr, va = split_validation(source, RngStream(seed).child("source-split"), float(cfg["data"]["val_fraction"]))
    theta0 = init_xavier(spec, RngStream(seed).child("pretrain-init"))
    return fine_tune(spec, theta0, tr, va, finetune_config(cfg, "pretrain"))


def run_arms(
    cfg: dict,
    spec: ArchitectureSpec,
    pretrained: ParameterVector,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    arms=("from_scratch", "model_based", "instance_based"),
) -> tuple[dict, InfluenceReport | None]:
    """Train the requested comparison arms and evaluate each on ``test``."""
    seed = int(cfg["seed"])
    plan = plan_from_config(cfg)
    results: dict = {}
    report = None
    for arm in arms:
        if arm == "from_scratch":
            theta0 = init_xavier(spec, RngStream(seed).child("scratch-init"))
            params, hist = fine_tune(spec, theta0, train, val, finetune_config(cfg, "scratch"))
            n_train = len(train)
        elif arm == "model_based":
            theta0 = transfer_parameters(pretrained, spec, spec, plan)
            params, hist = fine_tune(spec, theta0, train, val, finetune_config(cfg, "finetune"), plan)
            n_train = len(train)
        elif arm == "instance_based":
            engine = GradEngine(spec, pretrained)
            optimized, report = data_dropout(
                engine,
                train,
                val,
                strategy_from_config(cfg, spec),
                cfg["ref_mode"],
                float(cfg["max_drop_fraction"]),
            )
            theta0 = transfer_parameters(pretrained, spec, spec, plan)
            params, hist = fine_tune(spec, theta0, optimized, val, finetune_config(cfg, "finetune"), plan)
            n_train = len(optimized)
        else:
            raise ConfigError(f"unknown arm {arm!r}")
        ev = evaluate(spec, params, test)
        results[arm] = {
            "error_rate": ev.error_rate,
            "per_class_error": ev.per_class_error(),
            "n_train": n_train,
            "params": params,
            "history": hist,
        }
    return results, report
