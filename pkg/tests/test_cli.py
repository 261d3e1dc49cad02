import json
from pathlib import Path

import numpy as np
import pytest

import ibtl.dropout as dropout_mod
from ibtl import checkpoint
from ibtl.checkpoint import Checkpoint
from ibtl.cli import main
from ibtl.data import Dataset, load_csv, write_csv
from ibtl.dropout import read_report
from ibtl.model import ArchitectureSpec, ParameterVector

SMALL = {
    "generator": {"n_source": 600, "n_target": 60, "n_val": 24, "n_test": 200, "dim": 6},
    "pretrain": {"epochs": 10, "batch_size": 32},
    "finetune": {"epochs": 4},
    "scratch": {"epochs": 8},
}


def write_config(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    cfg["out_dir"] = str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture
def staged(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run(capsys, "generate", "--config", cfg)[0] == 0
    assert run(capsys, "pretrain", "--config", cfg)[0] == 0
    return cfg, tmp_path / "out"


def test_stagewise_flow(staged, capsys):
    cfg, out = staged
    code, res, _ = run(capsys, "dropout", "--config", cfg)
    assert code == 0
    lines = (out / "influence_report.jsonl").read_text().splitlines()
    assert len(lines) == res["n_in"] + 1 == 61

    train = load_csv(out / "target_train.csv", 4)
    opt = load_csv(out / "target_train_optimized.csv", 4)
    report = read_report(out / "influence_report.jsonl")
    kept = [r.sample_id for r in report.records if r.decision == "keep"]
    assert opt.ids.tolist() == kept
    rows = np.searchsorted(train.ids, opt.ids)
    assert np.array_equal(train.features[rows], opt.features) and np.array_equal(train.labels[rows], opt.labels)
    assert report.summary["checkpoint_digest"] == checkpoint.load(out / "pretrained.ibtl").digest()

    code, res, _ = run(capsys, "finetune", "--config", cfg, "--train", out / "target_train_optimized.csv")
    assert code == 0 and res["n_train"] == len(opt)
    assert json.loads((out / "finetuned.history.json").read_text())[0]["epoch"] == 0

    code, metrics, _ = run(capsys, "eval", "--config", cfg)
    assert code == 0
    assert 0.0 <= metrics["error_rate"] <= 1.0
    assert np.array(metrics["confusion"]).sum() == metrics["n"] == 200
    assert len(metrics["per_class_error"]) == 4


def test_pretrain_deterministic(staged, capsys, tmp_path):
    cfg, out = staged
    first = (out / "pretrained.ibtl").read_bytes()
    assert run(capsys, "pretrain", "--config", cfg)[0] == 0
    assert (out / "pretrained.ibtl").read_bytes() == first


def test_zero_shift_pretrain_generalizes(tmp_path, capsys):
    cfg = write_config(tmp_path, {"generator": {"mean_offset": 0.0, "rotation": 0.0, "spread": 0.5, "n_test": 600}, "pretrain": {"epochs": 10}})
    assert run(capsys, "generate", "--config", cfg)[0] == 0
    code, pre, _ = run(capsys, "pretrain", "--config", cfg)
    code, metrics, _ = run(capsys, "eval", "--config", cfg, "--checkpoint", tmp_path / "out" / "pretrained.ibtl")
    assert code == 0
    assert pre["final_val_error"] > 0
    assert metrics["error_rate"] <= 2 * pre["final_val_error"]


def test_missing_data_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--out-dir", tmp_path / "nowhere")
    assert code == 2
    assert str(tmp_path / "nowhere" / "source.csv") in err


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--out-dir", tmp_path, "--checkpoint", tmp_path / "x.ibtl")
    assert code == 2 and "x.ibtl" in err


@pytest.mark.parametrize("text, fragment", [("{not json", "invalid JSON"), ('{"bogus": 1}', "bogus"), ("[1]", "object")])
def test_bad_config_exit_2(tmp_path, capsys, text, fragment):
    p = tmp_path / "c.json"
    p.write_text(text)
    code, _, err = run(capsys, "generate", "--config", p)
    assert code == 2 and fragment in err


def test_bad_ref_mode_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "dropout", "--out-dir", tmp_path, "--ref-mode", "class:x")
    assert code == 2


def test_numerical_failure_exit_1(staged, capsys):
    cfg, _ = staged
    code, _, err = run(capsys, "dropout", "--config", cfg, "--max-drop-fraction", "0.0")
    assert code == 1 and "DropFractionExceeded" in err


def test_indefinite_hessian_exit_1(staged, capsys):
    cfg, _ = staged
    code, _, err = run(capsys, "dropout", "--config", cfg, "--ihvp", "explicit", "--damping", "1e-3")
    assert code == 1 and "increase damping" in err


def test_class_restricted_flag_routes_reference(staged, capsys, monkeypatch):
    cfg, out = staged
    seen = []
    original = dropout_mod.resolve_reference

    def spy(val, mode):
        seen.append(mode)
        return original(val, mode)

    monkeypatch.setattr(dropout_mod, "resolve_reference", spy)
    code, _, _ = run(capsys, "dropout", "--config", cfg, "--ref-mode", "class:2", "--max-drop-fraction", "1.0")
    assert code == 0 and seen == ["class:2"]
    assert read_report(out / "influence_report.jsonl").summary["reference"] == "class:2"


def test_eval_zero_checkpoint_balanced_binary(tmp_path, capsys):
    spec = ArchitectureSpec(3, 2)
    checkpoint.save(Checkpoint(spec, ParameterVector.zeros(spec)), tmp_path / "zero.ibtl")
    ds = Dataset(np.random.default_rng(0).normal(size=(10, 3)), [0, 1] * 5, np.arange(10), 2)
    write_csv(ds, tmp_path / "test.csv")
    code, metrics, _ = run(capsys, "eval", "--checkpoint", tmp_path / "zero.ibtl", "--test", tmp_path / "test.csv")
    assert code == 0 and metrics["error_rate"] == 0.5


def linear_config(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"hidden_dims": [], "l2_lambda": 0.01}, "influence": {"ihvp": "explicit", "damping": 1e-6}})
    assert run(capsys, "generate", "--config", cfg)[0] == 0
    return cfg


def test_loo_command(tmp_path, capsys):
    cfg = linear_config(tmp_path, capsys)
    train = load_csv(tmp_path / "out" / "target_train.csv")
    ids = train.ids[:3].tolist()
    argv = ["loo", "--config", cfg] + [a for i in ids for a in ("--sample-id", i)] + ["--sample-id", 99999]
    code, res, _ = run(capsys, *argv)
    assert code == 0
    data = json.loads(Path(res["output"]).read_text())
    assert [s["id"] for s in data["samples"]] == ids + [99999]
    assert data["samples"][-1]["delta"] == 0.0 and data["samples"][-1]["influence"] == 0.0
    assert all(np.isfinite(s["delta"]) for s in data["samples"])


def test_loo_all_sign_agreement(tmp_path, capsys):
    cfg = linear_config(tmp_path, capsys)
    code, res, _ = run(capsys, "loo", "--config", cfg, "--all")
    assert code == 0
    samples = json.loads(Path(res["output"]).read_text())["samples"]
    assert len(samples) == 60
    big = [s for s in samples if abs(s["delta"]) > 1e-7]
    assert np.mean([np.sign(s["delta"]) == np.sign(s["influence"]) for s in big]) >= 0.9


def test_loo_refuses_mlp(staged, capsys):
    cfg, _ = staged
    code, _, err = run(capsys, "loo", "--config", cfg, "--all")
    assert code == 2 and "softmax-linear" in err


def test_pipeline_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, comp, _ = run(capsys, "pipeline", "--config", cfg)
    assert code == 0
    assert set(comp["arms"]) == {"from_scratch", "model_based", "instance_based"}
    assert all(0.0 <= a["error_rate"] <= 1.0 for a in comp["arms"].values())
    test = load_csv(tmp_path / "out" / "target_test.csv", 4)
    assert comp["test_digest"] == test.digest()
    on_disk = json.loads((tmp_path / "out" / "comparison.json").read_text())
    assert on_disk == comp
    # every arm checkpoint evaluates to the reported error on the shared test set
    for arm, row in comp["arms"].items():
        code, metrics, _ = run(capsys, "eval", "--config", cfg, "--checkpoint", tmp_path / "out" / f"{arm}.ibtl")
        assert metrics["error_rate"] == row["error_rate"] and metrics["test_digest"] == comp["test_digest"]


def test_pipeline_rerun_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for d in (a, b):
        assert run(capsys, "pipeline", "--config", write_config(d), "--seed", 3)[0] == 0
    files_a = sorted(p.name for p in (a / "out").iterdir())
    assert files_a == sorted(p.name for p in (b / "out").iterdir())
    for name in files_a:
        assert (a / "out" / name).read_bytes() == (b / "out" / name).read_bytes(), name


def test_flag_overrides(tmp_path, capsys):
    from ibtl.cli import build_parser, resolve_config

    args = build_parser().parse_args(
        ["dropout", "--seed", "5", "--ihvp", "lissa", "--damping", "0.1", "--ref-mode", "class:1", "--max-drop-fraction", "0.3", "--out-dir", "x"]
    )
    cfg = resolve_config(args)
    assert cfg["seed"] == 5 and cfg["influence"]["ihvp"] == "lissa" and cfg["influence"]["damping"] == 0.1
    assert cfg["ref_mode"] == "class:1" and cfg["max_drop_fraction"] == 0.3 and cfg["out_dir"] == "x"
