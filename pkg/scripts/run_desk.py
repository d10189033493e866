"""Desk-scale experiment: greedy selection of 3 sensors on the 5x5 grid, then classification.

    python scripts/run_desk.py --seed 0 --out-dir runs/desk
"""

import argparse
import sys
from pathlib import Path

from imas2.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(seed: int, out: Path, iters: int, k: int) -> int:
    cfg = str(ROOT / "configs" / "desk_grid.toml")
    code = main(["greedy", "--config", cfg, "-k", str(k), "--seed", str(seed), "--iters", str(iters),
                 "--out-dir", str(out / "greedy")])
    if code:
        return code
    return main(["eval", "--config", cfg, "--selection", str(out / "greedy" / "selection.json"),
                 "--seed", str(seed), "--episodes", "1000", "--out-dir", str(out / "eval")])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("-k", type=int, default=3)
    ap.add_argument("--out-dir", default="runs/desk")
    a = ap.parse_args()
    sys.exit(run(a.seed, Path(a.out_dir), a.iters, a.k))
