#!/usr/bin/env python3
"""Train the desk-scale preset and print its validation metric table.

Equivalent to:

    invfuse train --config configs/desk.cfg --out <out> [--seed N]
    invfuse eval  --config configs/desk.cfg --checkpoint <out> [--seed N]

Takes ~10 minutes on one CPU core.
"""

import argparse
import sys
from pathlib import Path

from invfuse.cli import main as invfuse

REPO = Path(__file__).resolve().parent.parent
DESK_CFG = REPO / "configs" / "desk.cfg"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="desk.finn1",
                        help="checkpoint path (default: ./desk.finn1)")
    parser.add_argument("--seed", type=int,
                        help="override every config seed")
    args = parser.parse_args()

    seed = [] if args.seed is None else ["--seed", str(args.seed)]
    rc = invfuse(["train", "--config", str(DESK_CFG),
                  "--out", args.out] + seed)
    if rc != 0:
        return rc
    return invfuse(["eval", "--config", str(DESK_CFG),
                    "--checkpoint", args.out] + seed)


if __name__ == "__main__":
    sys.exit(main())
