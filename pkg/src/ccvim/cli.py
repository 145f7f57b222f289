"""Command-line entry point: ``ccvim synth|train|eval|infer|gradcheck``.

Exit codes: 0 success, 1 contract/configuration/load error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import load_config
from .data import load_dataset, save_dataset, synth_dataset
from .errors import ContractError, ConfigError, NumericError
from .gradcheck import TOLERANCE, run_checks
from .imageio import read_ppm, write_pgm
from .train import evaluate, infer_image, load_checkpoint, train

log = logging.getLogger("ccvim")


def _cmd_synth(args) -> int:
    scenes = synth_dataset(args.n, args.size, args.seed, args.mode)
    save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} {args.mode} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, load_dataset(args.data), args.out)
    print(f"final loss {result.losses[-1]:.6f}; checkpoint {result.checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    net, cfg = load_checkpoint(args.checkpoint)
    report = evaluate(net, cfg, load_dataset(args.data))
    report.to_csv(args.out)
    means = report.mean()
    print(" ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return 0


def _cmd_infer(args) -> int:
    net, cfg = load_checkpoint(args.checkpoint)
    out = infer_image(net, cfg, read_ppm(args.image), tile=args.tile, overlap=args.overlap)
    if out.max(initial=0) > 65535:
        raise NumericError("more than 65535 instances; cannot store as 16-bit PGM")
    write_pgm(args.out, out.astype(np.uint16), maxval=65535 if cfg.network.instance_head else 255)
    print(f"wrote {args.out} ({int(out.max(initial=0))} max label)")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_checks(args.module, seed=args.seed, seeds=args.seeds)
    worst = 0.0
    for name, err in results.items():
        print(f"{'PASS' if err <= TOLERANCE else 'FAIL'} {name:32s} {err:.3e}")
        worst = max(worst, err)
    if worst > TOLERANCE:
        print(f"worst relative error {worst:.3e} exceeds {TOLERANCE:g}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccvim", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("nuclei", "lesion"), default="lesion")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train from a config file on an on-disk dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and write a CSV report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("infer", help="predict a class or instance map for one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=None, help="tile edge in pixels (multiple of 32)")
    p.add_argument("--overlap", type=int, default=0)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--module", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.set_defaults(fn=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ContractError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
