"""Structural checks on random factored instances plus the premise-violating counterexamples.

Exits non-zero when any check fails; see the README for the known failing check.

    python scripts/conformance.py --instances 200 --out-dir runs/conformance
"""

import argparse
import sys

from imas2.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs/conformance")
    a = ap.parse_args()
    sys.exit(main(["oracle-check", "--instances", str(a.instances), "--seed", str(a.seed),
                   "--counterexamples", "--out-dir", a.out_dir]))
