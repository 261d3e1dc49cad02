"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--n 2000] [--d 20] [--classes 10] [--repeats 5] [--json out.json]

Each kernel runs on identical inputs in both backends. The best of
``--repeats`` timings is reported along with the max relative difference
between the two outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from ibtl.kernels import backends
from ibtl.numkit import RngStream, rel_err


def best_time(fn, repeats):
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n, d, K, seed):
    rng = RngStream(seed)
    p = d * K + K
    theta = rng.normal(scale=0.3, size=p)
    X = np.ascontiguousarray(rng.normal(size=(n, d)))
    y = rng.integers(0, K, size=n).astype(np.int64)
    v = rng.normal(size=p)
    batches = rng.integers(0, n, size=(1000, 50)).astype(np.int64)
    reg = np.full(p, 0.01)
    g = rng.normal(size=p)
    mask = np.ones(p)

    def adam(mod):
        th, m, s = np.zeros(p), np.zeros(p), np.zeros(p)
        for t in range(1, 2001):
            mod.adam_step(th, g, m, s, 1e-3, 0.9, 0.999, 1e-8, t, mask)
        return th

    return {
        "loss_grad": lambda mod: mod.softmax_linear_loss_grad(theta, X, y, K)[1],
        "mean_grad": lambda mod: mod.softmax_linear_mean_grad(theta, X, y, K)[1],
        "hvp": lambda mod: mod.softmax_linear_hvp(theta, X, v, K),
        "lissa_T1000_B50": lambda mod: mod.lissa_softmax_linear(theta, X, v, batches, reg, 1e-3, 10.0, 1e12)[0],
        "adam_2000_steps": adam,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=20)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    mods = backends()
    if "cython" not in mods:
        print("compiled backend not available; build it with `pip install -e . --no-build-isolation`", file=sys.stderr)
    rows = []
    for name, fn in cases(args.n, args.d, args.classes, args.seed).items():
        row = {"kernel": name}
        outs = {}
        for bname, mod in mods.items():
            row[bname + "_s"], outs[bname] = best_time(lambda: fn(mod), args.repeats)
        if "cython" in outs:
            row["speedup"] = row["python_s"] / row["cython_s"]
            row["rel_diff"] = rel_err(outs["cython"], outs["python"])
        rows.append(row)

    print(f"n={args.n} d={args.d} K={args.classes} repeats={args.repeats}")
    print(f"{'kernel':<18}{'python [ms]':>13}{'cython [ms]':>13}{'speedup':>9}{'rel diff':>11}")
    for r in rows:
        cy = f"{1e3 * r['cython_s']:13.3f}" if "cython_s" in r else f"{'-':>13}"
        sp = f"{r['speedup']:9.1f}" if "speedup" in r else f"{'-':>9}"
        rd = f"{r['rel_diff']:11.1e}" if "rel_diff" in r else f"{'-':>11}"
        print(f"{r['kernel']:<18}{1e3 * r['python_s']:13.3f}{cy}{sp}{rd}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"params": vars(args), "results": rows}, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
