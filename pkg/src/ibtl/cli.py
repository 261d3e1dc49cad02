"""Command-line entry point: ``ibtl <command> [flags]``.

Every command reads one JSON config (``--config``) merged over the built-in
presets, then applies flag overrides. Files are exchanged through ``--out-dir``.
Exit codes: 0 success, 1 numerical or convergence failure, 2 I/O or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .checkpoint import Checkpoint, CheckpointError
from .data import DataFormatError, Dataset, load_csv, write_csv
from .dropout import AllDroppedError, DropFractionExceededError, data_dropout, write_report
from .influence import influence_scores, parse_ref_mode, resolve_reference
from .loo import loo_deltas, newton_fit
from .model import GradEngine, ParameterVector, init_xavier
from .numkit import RngStream
from .pipeline import (
    DEFAULT_CONFIG,
    ConfigError,
    architecture,
    finetune_config,
    generate_data,
    load_config,
    merge_config,
    plan_from_config,
    pretrain,
    run_arms,
    strategy_from_config,
    target_split,
)
from .transfer import evaluate, fine_tune, transfer_parameters

log = logging.getLogger("ibtl")

EXIT_OK, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2

# default file names inside --out-dir
FILES = {
    "source": "source.csv",
    "target_train": "target_train.csv",
    "target_val": "target_val.csv",
    "target_test": "target_test.csv",
    "skewed_test": "skewed_test.csv",
    "flipped": "flipped_ids.json",
    "pretrained": "pretrained.ibtl",
    "optimized": "target_train_optimized.csv",
    "report": "influence_report.jsonl",
    "finetuned": "finetuned.ibtl",
    "comparison": "comparison.json",
    "loo": "loo.json",
}


class UsageError(Exception):
    pass


def _dump_json(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is not None:
        path.write_text(text, encoding="utf-8")
    return text


def _out(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_path(cfg, key: str, required: bool = True) -> Path | None:
    given = cfg["data"].get(key)
    path = Path(given) if given else Path(cfg["out_dir"]) / FILES[key]
    if not path.exists():
        if required:
            raise FileNotFoundError(f"{key} data not found: {path}")
        return None
    return path


def _load(cfg, key: str, num_classes=None, required: bool = True) -> Dataset | None:
    path = _data_path(cfg, key, required)
    if path is None:
        return None
    return load_csv(path, num_classes or cfg["data"]["num_classes"])


def _checkpoint_path(cfg, arg, default_key: str) -> Path:
    path = Path(arg) if arg else Path(cfg["out_dir"]) / FILES[default_key]
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _target_sets(cfg, num_classes):
    train = _load(cfg, "target_train", num_classes)
    val = _load(cfg, "target_val", num_classes, required=False)
    return target_split(cfg, train, val)


# ---------------------------------------------------------------- commands


def cmd_generate(cfg, args) -> dict:
    out = _out(cfg)
    g = generate_data(cfg["generator"], int(cfg["seed"]))
    written = {}
    for key, ds in [
        ("source", g.source),
        ("target_train", g.target_train),
        ("target_val", g.target_val),
        ("target_test", g.target_test),
        ("skewed_test", g.skewed_test),
    ]:
        if ds is not None:
            write_csv(ds, out / FILES[key])
            written[key] = {"path": str(out / FILES[key]), "n": len(ds), "digest": ds.digest()}
    _dump_json(sorted(g.flipped_ids), out / FILES["flipped"])
    return {"command": "generate", "files": written, "n_flipped": len(g.flipped_ids)}


def cmd_pretrain(cfg, args) -> dict:
    source = _load(cfg, "source")
    out = _out(cfg)
    spec = architecture(cfg, source.dim, source.num_classes)
    params, hist = pretrain(cfg, spec, source)
    path = out / FILES["pretrained"]
    digest = checkpoint.save(Checkpoint(spec, params, {"stage": "pretrain", "seed": int(cfg["seed"])}), path)
    _dump_json(hist.to_records(), out / "pretrain_history.json")
    return {"command": "pretrain", "checkpoint": str(path), "digest": digest, "final_val_error": hist.val_error[-1]}


def cmd_dropout(cfg, args) -> dict:
    ck = checkpoint.load(_checkpoint_path(cfg, args.checkpoint, "pretrained"))
    train, val = _target_sets(cfg, ck.spec.num_classes)
    out = _out(cfg)
    optimized, report = data_dropout(
        GradEngine(ck.spec, ck.params),
        train,
        val,
        strategy_from_config(cfg, ck.spec),
        cfg["ref_mode"],
        float(cfg["max_drop_fraction"]),
        checkpoint_digest=ck.digest(),
    )
    write_csv(optimized, out / FILES["optimized"])
    write_report(report, out / FILES["report"])
    return {
        "command": "dropout",
        "n_in": len(train),
        "n_dropped": report.n_dropped,
        "optimized": str(out / FILES["optimized"]),
        "report": str(out / FILES["report"]),
    }


def cmd_finetune(cfg, args) -> dict:
    ck = checkpoint.load(_checkpoint_path(cfg, args.checkpoint, "pretrained"))
    spec = ck.spec
    if args.train:
        if not Path(args.train).exists():
            raise FileNotFoundError(f"training data not found: {args.train}")
        train = load_csv(args.train, spec.num_classes)
        _, val = _target_sets(cfg, spec.num_classes)
    else:
        train, val = _target_sets(cfg, spec.num_classes)
    plan = plan_from_config(cfg)
    if args.init == "scratch":
        theta0 = init_xavier(spec, RngStream(int(cfg["seed"])).child("scratch-init"))
        plan, section = None, "scratch"
    else:
        theta0 = transfer_parameters(ck.params, spec, spec, plan)
        section = "finetune"
    params, hist = fine_tune(spec, theta0, train, val, finetune_config(cfg, section), plan)
    out = _out(cfg)
    path = Path(args.output) if args.output else out / FILES["finetuned"]
    meta = {"stage": "finetune", "init": args.init, "seed": int(cfg["seed"]), "train_digest": train.digest()}
    digest = checkpoint.save(Checkpoint(spec, params, meta), path)
    _dump_json(hist.to_records(), path.with_suffix(".history.json"))
    return {"command": "finetune", "checkpoint": str(path), "digest": digest, "n_train": len(train)}


def cmd_eval(cfg, args) -> dict:
    ck = checkpoint.load(_checkpoint_path(cfg, args.checkpoint, "finetuned"))
    if args.test:
        if not Path(args.test).exists():
            raise FileNotFoundError(f"test data not found: {args.test}")
        test = load_csv(args.test, ck.spec.num_classes)
    else:
        test = _load(cfg, "target_test", ck.spec.num_classes)
    res = evaluate(ck.spec, ck.params, test)
    return {"command": "eval", "test_digest": test.digest(), **res.to_dict()}


def cmd_loo(cfg, args) -> dict:
    """Exact leave-one-out deltas next to the influence estimate for the same samples.

    The model is the configured architecture fit to its optimum by Newton's
    method, so the config must describe a softmax-linear model with l2_lambda > 0.
    """
    train = _load(cfg, "target_train")
    val = _load(cfg, "target_val", train.num_classes, required=False)
    train, val = target_split(cfg, train, val)
    spec = architecture(cfg, train.dim, train.num_classes)
    theta = newton_fit(spec, train.features, train.labels)
    ref = resolve_reference(val, cfg["ref_mode"])
    ids = None if args.all else [int(i) for i in args.sample_id]
    res = loo_deltas(spec, theta, train, val, ref, ids)
    engine = GradEngine(spec, ParameterVector.for_spec(spec, theta))
    strategy = strategy_from_config(cfg, spec)
    scores = influence_scores(engine, train, val, ref, strategy)
    by_id = dict(zip(train.ids.tolist(), scores.tolist()))
    rows = [
        {"id": int(i), "delta": float(d), "influence": by_id.get(int(i), 0.0)} for i, d in zip(res.ids, res.deltas)
    ]
    out = _out(cfg)
    payload = {"n_train": len(train), "reference": ref.describe(), "damping": strategy.damping, "samples": rows}
    _dump_json(payload, out / FILES["loo"])
    return {"command": "loo", "output": str(out / FILES["loo"]), "n_samples": len(rows)}


def cmd_pipeline(cfg, args) -> dict:
    out = _out(cfg)
    if not cfg["data"]["source"] and not (out / FILES["source"]).exists():
        cmd_generate(cfg, args)
    source = _load(cfg, "source")
    spec = architecture(cfg, source.dim, source.num_classes)
    pre, hist = pretrain(cfg, spec, source)
    pre_digest = checkpoint.save(Checkpoint(spec, pre, {"stage": "pretrain", "seed": int(cfg["seed"])}), out / FILES["pretrained"])
    _dump_json(hist.to_records(), out / "pretrain_history.json")

    train, val = _target_sets(cfg, spec.num_classes)
    test = _load(cfg, "target_test", spec.num_classes)
    results, report = run_arms(cfg, spec, pre, train, val, test)
    if report is not None:
        report.summary["checkpoint_digest"] = pre_digest
        write_report(report, out / FILES["report"])
    arms = {}
    for arm, r in results.items():
        path = out / f"{arm}.ibtl"
        checkpoint.save(Checkpoint(spec, r["params"], {"stage": arm, "seed": int(cfg["seed"])}), path)
        _dump_json(r["history"].to_records(), out / f"{arm}.history.json")
        arms[arm] = {"error_rate": r["error_rate"], "per_class_error": r["per_class_error"], "n_train": r["n_train"]}
    comparison = {
        "arms": arms,
        "test_digest": test.digest(),
        "n_test": len(test),
        "seed": int(cfg["seed"]),
        "pretrained_digest": pre_digest,
        "n_dropped": report.n_dropped if report is not None else None,
    }
    _dump_json(comparison, out / FILES["comparison"])
    return comparison


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "dropout": cmd_dropout,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------- argument handling


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config merged over the built-in presets")
    p.add_argument("--seed", type=int)
    p.add_argument("--ihvp", choices=["explicit", "cg", "lissa"])
    p.add_argument("--damping", type=float)
    p.add_argument("--ref-mode", help="'all' or 'class:<k>'")
    p.add_argument("--max-drop-fraction", type=float)
    p.add_argument("--out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibtl", description="Instance-based transfer learning by influence-guided data dropout.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "write synthetic source/target CSVs"),
        ("pretrain", "train on the source domain and save a checkpoint"),
        ("dropout", "score the target training set and drop positive-influence samples"),
        ("finetune", "fine-tune a checkpoint on target data"),
        ("eval", "print test metrics for a checkpoint as JSON"),
        ("loo", "exact leave-one-out deltas for a softmax-linear model"),
        ("pipeline", "pretrain, then compare scratch, model-based and instance-based arms"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name in ("dropout", "finetune", "eval"):
            p.add_argument("--checkpoint", help="input checkpoint (defaults to the one in --out-dir)")
        if name == "finetune":
            p.add_argument("--train", help="training CSV, e.g. the optimized set from 'dropout'")
            p.add_argument("--init", choices=["pretrained", "scratch"], default="pretrained")
            p.add_argument("--output", help="output checkpoint path")
        if name == "eval":
            p.add_argument("--test", help="test CSV")
        if name == "loo":
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--sample-id", type=int, action="append", help="may be repeated")
            g.add_argument("--all", action="store_true")
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else merge_config(DEFAULT_CONFIG, {})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.ihvp is not None:
        cfg["influence"]["ihvp"] = args.ihvp
    if args.damping is not None:
        cfg["influence"]["damping"] = args.damping
    if args.ref_mode is not None:
        try:
            parse_ref_mode(args.ref_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg["ref_mode"] = args.ref_mode
    if args.max_drop_fraction is not None:
        cfg["max_drop_fraction"] = args.max_drop_fraction
    if args.out_dir is not None:
        cfg["out_dir"] = args.out_dir
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg, args)
    except (ArithmeticError, np.linalg.LinAlgError, AllDroppedError, DropFractionExceededError) as exc:
        print(f"ibtl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ConfigError, CheckpointError, DataFormatError, ValueError, KeyError, TypeError) as exc:
        print(f"ibtl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(_dump_json(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
