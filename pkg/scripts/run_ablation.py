"""Adversarial-mode x SWA ablation over several seeds.

    python scripts/run_ablation.py --config configs/desk.cfg --out runs/ablation
"""
import argparse
import logging

from adverseg.trainer import ablation, dump_config, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--seeds", default=None, help="comma separated, overrides ablation_seeds")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config, args.set)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    print(dump_config(cfg))
    print(ablation(cfg, args.out, seeds=seeds))


if __name__ == "__main__":
    main()
