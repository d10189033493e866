"""Greedy selection versus independent policy gradient on a random subset of the same size.

For each seed: run greedy selection of k sensors, run IPG on a random
k-subset drawn from that seed, and compare final entropy, classification
accuracy and time per iteration on a fresh evaluation batch.

    python scripts/compare_ipg.py --seeds 0 1 2 3 4 --out-dir runs/ipg
"""

import argparse
import json
import sys
from pathlib import Path

from imas2.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(args) -> int:
    cfg = str(ROOT / "configs" / args.config)
    out = Path(args.out_dir)
    wins = 0
    for seed in args.seeds:
        common = ["--config", cfg, "--seed", str(seed), "--iters", str(args.iters)]
        g = out / f"seed{seed}" / "greedy"
        b = out / f"seed{seed}" / "baseline"
        code = main(["greedy", *common, "-k", str(args.k), "--out-dir", str(g)])
        code = code or main(["baseline", *common, "--random-size", str(args.k),
                             "--selection", str(g / "selection.json"), "--out-dir", str(b)])
        if code:
            return code
        rows = {r["method"]: r for r in json.loads((b / "comparison.json").read_text())["rows"]}
        wins += rows["IMAS2"]["final_entropy"] <= rows["IPG"]["final_entropy"]
    print(f"\ngreedy entropy <= IPG entropy in {wins}/{len(args.seeds)} seeds")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="desk_grid.toml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("-k", type=int, default=3)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--out-dir", default="runs/ipg")
    sys.exit(run(ap.parse_args()))
