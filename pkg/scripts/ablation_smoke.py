"""Build every scan/cluster ablation preset and train it for one epoch on a few scenes.

    python3 scripts/ablation_smoke.py [--n 4] [--size 32]
"""
from __future__ import annotations

import argparse
import tempfile
import time

from ccvim.config import parse_config
from ccvim.data import synth_dataset
from ccvim.plan import ABLATION_PRESETS
from ccvim.train import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()
    scenes = synth_dataset(args.n, args.size, 0, "lesion")
    for preset in ABLATION_PRESETS:
        cfg = parse_config(f"[train]\nepochs = 1\nbatch_size = 2\n[branches]\npreset = {preset}\n")
        t0 = time.perf_counter()
        with tempfile.TemporaryDirectory() as tmp:
            loss = train(cfg, scenes, tmp).losses[0]
        print(f"{preset:22s} loss {loss:.4f}  {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
