"""Sweep the adversarial weight lambda (or n, th_swa) with everything else fixed.

    python scripts/lambda_sweep.py --config configs/desk.cfg --values 0,0.001,0.01,0.1,1 --out runs/lambda
"""
import argparse
import logging

from adverseg.trainer import dump_config, load_config, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--param", default="lambda", choices=["lambda", "n", "th_swa"])
    ap.add_argument("--values", default="0,0.001,0.01,0.1,1")
    ap.add_argument("--out", default="runs/lambda")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(args.config, args.set)
    cast = int if args.param == "n" else float
    print(dump_config(cfg))
    print(sweep(cfg, args.param, [cast(v) for v in args.values.split(",")], args.out))


if __name__ == "__main__":
    main()
