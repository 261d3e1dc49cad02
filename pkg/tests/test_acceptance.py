"""Acceptance criteria, each run at its stated tolerance.

Run ``pytest tests/test_acceptance.py`` for one PASS/FAIL line per criterion
in the terminal summary.
"""

import copy
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

import ibtl.dropout as dropout_mod
from ibtl import checkpoint
from ibtl.checkpoint import Checkpoint
from ibtl.cli import main
from ibtl.dropout import data_dropout, read_report, write_report
from ibtl.influence import IhvpStrategy, ihvp, influence_scores, resolve_reference
from ibtl.loo import loo_deltas
from ibtl.model import ArchitectureSpec, GradEngine, ParameterVector
from ibtl.numkit import RngStream, finite_diff_grad, finite_diff_hvp, rel_err
from ibtl.pipeline import DEFAULT_CONFIG, architecture, generate_data, merge_config, pretrain, run_arms, target_split
from ibtl.transfer import FineTuneConfig, TransferPlan, evaluate, fine_tune, transfer_parameters

from conftest import blobs_problem, noisy_blobs_problem, record_criterion

pytestmark = pytest.mark.acceptance

EXPLICIT = IhvpStrategy("explicit", damping=1e-6)
SEEDS = range(10)


@pytest.fixture(scope="module")
def loo_instance():
    start = time.perf_counter()
    spec, eng, train, val = blobs_problem()
    ref = resolve_reference(val)
    scores = influence_scores(eng, train, val, ref, EXPLICIT)
    deltas = loo_deltas(spec, eng.params.values, train, val, ref).deltas
    return scores, deltas, time.perf_counter() - start


def test_criterion_1_rank_fidelity(loo_instance):
    scores, deltas, elapsed = loo_instance
    rho = spearmanr(scores, deltas)[0]
    ok = rho >= 0.9 and elapsed < 60.0
    record_criterion(1, "influence vs LOO Spearman >= 0.9 in < 60 s", ok, f"rho={rho:.4f}, {elapsed:.1f} s")
    assert ok


def test_criterion_2_sign_agreement(loo_instance):
    scores, deltas, _ = loo_instance
    mask = np.abs(deltas) > 1e-7
    agree = float(np.mean(np.sign(scores[mask]) == np.sign(deltas[mask])))
    ok = agree >= 0.9
    record_criterion(2, "sign agreement >= 90% where |delta| > 1e-7", ok, f"{agree:.3f} over {mask.sum()} samples")
    assert ok


def test_criterion_3_solver_consistency():
    spec, eng, train, val = blobs_problem()
    b = eng.per_sample_grads(val.features, val.labels).sum(axis=0)
    exact = ihvp(eng, train, b, EXPLICIT)
    cg_err = rel_err(ihvp(eng, train, b, IhvpStrategy("cg", damping=1e-6)), exact)
    lissa_errs = [
        rel_err(
            ihvp(
                eng,
                train,
                b,
                IhvpStrategy("lissa", damping=1e-6, lissa_depth=5000, lissa_repeats=10, lissa_scale=5.0, lissa_batch_size=50, seed=s),
            ),
            exact,
        )
        for s in range(20)
    ]
    med = float(np.median(lissa_errs))
    ok = spec.num_params <= 60 and cg_err <= 1e-6 and med <= 0.05
    record_criterion(3, "CG rel err <= 1e-6, LiSSA median rel err <= 5%", ok, f"cg={cg_err:.1e}, lissa median={med:.4f}")
    assert ok


def test_criterion_4_differentiation():
    families = {
        "softmax-linear": ArchitectureSpec(4, 3, l2_lambda=0.1),
        "mlp-tanh": ArchitectureSpec(4, 3, hidden_dims=(5,), activation="tanh", l2_lambda=0.05),
    }
    worst_g, worst_h = 0.0, 0.0
    for spec in families.values():
        for s in range(20):
            rng = RngStream(s).child("crit4")
            theta = rng.normal(scale=0.7, size=spec.num_params)
            X = rng.normal(size=(6, spec.input_dim))
            y = rng.integers(0, spec.num_classes, size=6)
            v = rng.normal(size=spec.num_params)
            eng = GradEngine(spec, theta)
            fd_g = finite_diff_grad(lambda t: GradEngine(spec, t).loss(X[0], y[0], include_reg=True), theta, h=1e-5)
            worst_g = max(worst_g, rel_err(eng.grad(X[0], y[0], include_reg=True), fd_g))
            fd_h = finite_diff_hvp(lambda t: GradEngine(spec, t).mean_loss_grad(X, y)[1], theta, v, h=1e-5)
            worst_h = max(worst_h, rel_err(eng.hvp(X, y, v, include_reg=True), fd_h))
    ok = worst_g <= 1e-6 and worst_h <= 1e-5
    record_criterion(4, "grad vs FD <= 1e-6, HVP vs FD <= 1e-5", ok, f"worst grad={worst_g:.1e}, worst hvp={worst_h:.1e}")
    assert ok


def test_criterion_5_noise_recovery():
    _, eng, train, val, flipped = noisy_blobs_problem(seed=0)
    _, report = data_dropout(eng, train, val, EXPLICIT)
    dropped = report.dropped_ids()
    clean = set(train.ids.tolist()) - flipped
    f_rate = len(dropped & flipped) / len(flipped)
    c_rate = len(dropped & clean) / len(clean)
    ok = f_rate >= 0.7 and c_rate <= 0.2
    record_criterion(5, ">= 70% of flipped dropped, <= 20% of clean dropped", ok, f"flipped {f_rate:.3f}, clean {c_rate:.3f}")
    assert ok


def _seed_setup(cfg, seed):
    cfg = copy.deepcopy(cfg)
    cfg["seed"] = seed
    g = generate_data(cfg["generator"], seed)
    spec = architecture(cfg, g.source.dim, g.source.num_classes)
    pre, _ = pretrain(cfg, spec, g.source)
    train, val = target_split(cfg, g.target_train, g.target_val)
    return cfg, g, spec, pre, train, val


def test_criterion_6_end_to_end():
    cfg = merge_config(DEFAULT_CONFIG, {})
    assert cfg["model"]["hidden_dims"] == [16] and cfg["generator"]["corrupt_fraction"] == 0.1
    inst_wins = both_win = 0
    rows = []
    for seed in SEEDS:
        c, g, spec, pre, train, val = _seed_setup(cfg, seed)
        res, _ = run_arms(c, spec, pre, train, val, g.target_test)
        e = {k: v["error_rate"] for k, v in res.items()}
        inst_wins += e["instance_based"] <= e["model_based"]
        both_win += max(e["instance_based"], e["model_based"]) <= e["from_scratch"]
        rows.append(e)
    mean = {k: np.mean([r[k] for r in rows]) for k in rows[0]}
    ok = inst_wins >= 8 and both_win >= 7
    detail = (
        f"instance <= model in {inst_wins}/10, both <= scratch in {both_win}/10; mean errors "
        f"scratch={mean['from_scratch']:.3f} model={mean['model_based']:.3f} instance={mean['instance_based']:.3f}"
    )
    record_criterion(6, "instance-based beats model-based, both beat scratch", ok, detail)
    assert ok


def test_criterion_7_class_restricted(monkeypatch):
    cfg = merge_config(
        DEFAULT_CONFIG,
        {"generator": {"skewed_test": {"majority_class": 0, "repeats": 20, "per_class": 10}}, "max_drop_fraction": 1.0},
    )
    seen = []
    original = dropout_mod.resolve_reference

    def spy(val, mode):
        ref = original(val, mode)
        seen.append((mode, val.labels[list(ref.indices)].copy()))
        return ref

    monkeypatch.setattr(dropout_mod, "resolve_reference", spy)
    wins = 0
    restricted_only_a = True
    for seed in SEEDS:
        c, g, spec, pre, train, val = _seed_setup(cfg, seed)
        err = {}
        for mode in ("all", "class:0"):
            c["ref_mode"] = mode
            res, _ = run_arms(c, spec, pre, train, val, g.skewed_test, arms=("instance_based",))
            err[mode] = res["instance_based"]["per_class_error"][0]
        restricted_only_a &= seen[-1][0] == "class:0" and bool((seen[-1][1] == 0).all())
        wins += err["class:0"] <= err["all"]
    ok = wins >= 7 and restricted_only_a
    record_criterion(
        7, "class-restricted majority-class error <= all-class", ok, f"{wins}/10 seeds; reference rows all class 0: {restricted_only_a}"
    )
    assert ok


def test_criterion_8_transfer_mechanics():
    spec = ArchitectureSpec(5, 3, hidden_dims=(6, 4), l2_lambda=0.01)
    src = ParameterVector.for_spec(spec, RngStream(1).normal(size=spec.num_params))
    copies_ok = True
    for k in range(spec.num_layers + 1):
        out = transfer_parameters(src, spec, spec, TransferPlan("hybrid", shallow_layers=k, seed=2))
        copies_ok &= all(out.layer(j).tobytes() == src.layer(j).tobytes() for j in range(k))

    cfg = merge_config(DEFAULT_CONFIG, {"generator": {"dim": 5, "num_classes": 3, "n_source": 10, "n_test": 10}})
    g = generate_data(cfg["generator"], 0)
    plan = TransferPlan(frozen_layers={0, 2})
    ft = FineTuneConfig(epochs=7, batch_size=16)
    trained, hist = fine_tune(spec, src, g.target_train, g.target_val, ft, plan)
    frozen_ok = all(trained.layer(j).tobytes() == src.layer(j).tobytes() for j in (0, 2))
    frozen_ok &= trained.layer(1).tobytes() != src.layer(1).tobytes()
    cut = math.ceil(7 / 2)
    lr_ok = hist.lr == [0.001] * cut + [0.001 * 0.1] * (7 - cut)
    ok = copies_ok and frozen_ok and lr_ok
    record_criterion(8, "hybrid copies bit-exact, frozen slices unchanged, lr x0.1 at ceil(E/2)", ok, f"copies={copies_ok}, frozen={frozen_ok}, lr={lr_ok}")
    assert ok


def test_criterion_9_persistence(tmp_path, capsys):
    spec = ArchitectureSpec(5, 3, hidden_dims=(4,), l2_lambda=0.01)
    ck = Checkpoint(spec, ParameterVector.for_spec(spec, RngStream(0).normal(size=spec.num_params)), {"seed": 0})
    checkpoint.save(ck, tmp_path / "a.ibtl")
    checkpoint.save(checkpoint.load(tmp_path / "a.ibtl"), tmp_path / "b.ibtl")
    ck_ok = (tmp_path / "a.ibtl").read_bytes() == (tmp_path / "b.ibtl").read_bytes()

    _, eng, train, val = blobs_problem()
    _, report = data_dropout(eng, train, val, EXPLICIT)
    write_report(report, tmp_path / "r1.jsonl")
    write_report(read_report(tmp_path / "r1.jsonl"), tmp_path / "r2.jsonl")
    rep_ok = (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()

    outs = []
    for run in ("x", "y"):
        out = tmp_path / run
        assert main(["pipeline", "--seed", "4", "--out-dir", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    capsys.readouterr()
    pipe_ok = outs[0] == outs[1] and len(outs[0]) >= 10
    ok = ck_ok and rep_ok and pipe_ok
    record_criterion(9, "checkpoint, report and pipeline reruns byte-identical", ok, f"checkpoint={ck_ok}, report={rep_ok}, pipeline={pipe_ok} ({len(outs[0])} files)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
