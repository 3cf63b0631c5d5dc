#!/usr/bin/env python3
"""Run the standard ablation grid over the fusion/decomposition trade-off
and the latent prior, at desk scale.

Equivalent to:

    invfuse ablate --config configs/desk.cfg --out <dir> \
        --alpha 0.5,1.0 --latent normal,ones,uniform

One model is trained per grid cell (6 cells x ~10 min on one core), so
plan for an hour; pass --k/--lambda/--alpha/--latent to reshape the grid.
"""

import argparse
import sys
from pathlib import Path

from invfuse.cli import main as invfuse

REPO = Path(__file__).resolve().parent.parent
DESK_CFG = REPO / "configs" / "desk.cfg"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="ablation",
                        help="output directory (default: ./ablation)")
    parser.add_argument("--k")
    parser.add_argument("--lambda", dest="lam")
    parser.add_argument("--alpha", default="0.5,1.0")
    parser.add_argument("--latent", default="normal,ones,uniform")
    args = parser.parse_args()

    argv = ["ablate", "--config", str(DESK_CFG), "--out", args.out]
    for flag, value in (("--k", args.k), ("--lambda", args.lam),
                        ("--alpha", args.alpha), ("--latent", args.latent)):
        if value:
            argv += [flag, value]
    return invfuse(argv)


if __name__ == "__main__":
    sys.exit(main())
