"""Desk-scale learning run: train on lesion scenes, report held-out mIoU vs an untrained net.

    python3 scripts/train_lesion.py --out runs/lesion [--epochs 30] [--n-train 200] [--n-test 50]
"""
from __future__ import annotations

import argparse
import json
import logging

from ccvim.experiments import lesion_learning_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/lesion")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=50)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    summary = lesion_learning_run(args.out, args.epochs, args.n_train, args.n_test, args.size, args.seed)
    print(json.dumps({k: v for k, v in summary.items() if k != "losses"}, indent=1))


if __name__ == "__main__":
    main()
