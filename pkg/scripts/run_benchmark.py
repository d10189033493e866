"""Sensor-network benchmark on the 10x10 grid.

Runs greedy selection for each (motion, range, budget) setting and prints the
final entropies: 3 of sensors 0-4 and 4 of sensors 0-6, under deterministic
and slip motion, small and large range; plus 5 of all 9 sensors with
deterministic motion and small range. Full-length runs (1000 inner
iterations) take hours on one core; ``--iters`` shortens them.

    python scripts/run_benchmark.py --iters 200 --out-dir runs/benchmark
"""

import argparse
import json
import sys
from pathlib import Path

from imas2.cli import main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = {("det", "small"): "benchmark_grid.toml", ("slip", "small"): "benchmark_grid_slip.toml",
           ("det", "large"): "benchmark_grid_large.toml"}
SETTINGS = [(3, "0,1,2,3,4"), (4, "0,1,2,3,4,5,6")]


def cases():
    for (motion, rng), cfg in CONFIGS.items():
        for k, cands in SETTINGS:
            yield f"{motion}-{rng}-k{k}", cfg, k, cands
    yield "det-small-k5-all", "benchmark_grid.toml", 5, "0,1,2,3,4,5,6,7,8"


def run(args) -> int:
    out = Path(args.out_dir)
    rows = []
    for name, cfg, k, cands in cases():
        if args.only and name not in args.only:
            continue
        d = out / name
        code = main(["greedy", "--config", str(ROOT / "configs" / cfg), "-k", str(k), "--candidates", cands,
                     "--seed", str(args.seed), "--iters", str(args.iters), "--jobs", str(args.jobs),
                     "--out-dir", str(d)])
        if code:
            return code
        sel = json.loads((d / "selection.json").read_text())
        rows.append((name, sel["agents"], sel["entropies"][-1]))
    print("\nsetting               agents           H(Z|Y)")
    for name, agents, h in rows:
        print(f"{name:<21} {str(agents):<16} {h:.4f}")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=1000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--only", nargs="*", help="run only these setting names")
    ap.add_argument("--out-dir", default="runs/benchmark")
    sys.exit(run(ap.parse_args()))
