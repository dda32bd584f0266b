"""``adverseg`` command line: gen-data, train, eval, sweep, ablate, gradcheck, render."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import kvfile

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(title: str, text: str) -> None:
    print(f"# effective {title}")
    for line in text.splitlines():
        print(f"#   {line}")
    sys.stdout.flush()


def _train_config(args):
    from .trainer import dump_config, load_config

    try:
        cfg = load_config(args.config, args.set or ()).validate()
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    _echo("config", dump_config(cfg))
    return cfg


def cmd_gen_data(args) -> int:
    from .data import DatasetSpec, gen_synthetic, write_dataset

    try:
        values = kvfile.read(args.spec) if args.spec else {}
        values.update(kvfile.parse_overrides(args.set or ()))
        spec = kvfile.apply(DatasetSpec, values).validate()
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"bad dataset spec: {exc}") from exc
    _echo("dataset spec", kvfile.dump(spec))
    manifest = write_dataset(gen_synthetic(spec), args.out)
    print(f"wrote {spec.num_samples} samples, manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)
    res = train(cfg, args.out)
    print(res.log.to_csv(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate, resolve_checkpoint

    ckpt = resolve_checkpoint(args.ckpt, args.swa)
    _echo("evaluation", f"ckpt = {ckpt}\ndata = {args.data}\nswa = {args.swa}\n")
    _, report = evaluate(ckpt, args.data, use_swa=False)
    print(report, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.csv").write_text(report)
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values {text!r}") from exc


def cmd_sweep(args) -> int:
    from .trainer import SWEEP_PARAMS, sweep

    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"--param must be one of lambda, n, th_swa (got {args.param!r})")
    cfg = _train_config(args)
    values = _parse_values(args.values)
    if not values:
        raise UsageError("--values is empty")
    # keep integer-looking values compact in directory names and CSV rows
    values = [int(v) if args.param in ("n", "swa_n") else v for v in values]
    print(sweep(cfg, args.param, values, args.out), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablation

    cfg = _train_config(args)
    print(ablation(cfg, args.out), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_rows, run_suite

    _echo("gradcheck", f"eps = {args.eps}\nseed = {args.seed}\n")
    rows = run_suite(args.eps, args.seed)
    print(format_rows(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_RUNTIME


def palette(num_classes: int) -> np.ndarray:
    """Fixed class -> RGB table (bit-interleaved, as in common segmentation tooling); IGNORE is white."""
    pal = np.zeros((256, 3), dtype=np.float32)
    for c in range(256):
        r = g = b = 0
        v = c
        for shift in range(7, -1, -1):
            r |= (v & 1) << shift
            g |= ((v >> 1) & 1) << shift
            b |= ((v >> 2) & 1) << shift
            v >>= 3
        pal[c] = (r / 255, g / 255, b / 255)
    pal[255] = 1.0
    return pal


def cmd_render(args) -> int:
    from .data import load_manifest, write_image
    from .models import Network
    from .trainer import predict, resolve_checkpoint

    ckpt = resolve_checkpoint(args.ckpt, args.swa)
    _echo("render", f"ckpt = {ckpt}\ndata = {args.data}\nlimit = {args.limit}\n")
    net = Network.load(ckpt)
    samples = load_manifest(args.data, net.cfg.num_classes)[: args.limit]
    pal = palette(net.cfg.num_classes)
    preds = predict(net, np.stack([s.image for s in samples]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (s, p) in enumerate(zip(samples, preds)):
        gt = pal[s.labels.classes].transpose(2, 0, 1)
        pr = pal[p].transpose(2, 0, 1)
        write_image(out / f"render_{i:05d}.ppm", np.concatenate([s.image, gt, pr], axis=2))
    print(f"wrote {len(samples)} triptychs to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adverseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="key = value file; defaults apply when omitted")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    g = sub.add_parser("gen-data", help="write a synthetic dataset as PPM/PGM + manifest")
    g.add_argument("--spec")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="alternating adversarial training")
    with_config(t)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report for a generator checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="manifest file")
    e.add_argument("--swa", action="store_true", help="use the averaged weights (swa_<iter>.ckpt)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid over lambda, n or th_swa")
    with_config(s)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="{baseline, standard, pixelwise} x {swa off, on}")
    with_config(a)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and both loss pipelines")
    c.add_argument("--eps", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="image | ground truth | prediction triptychs")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--swa", action="store_true")
    r.add_argument("--limit", type=int, default=8)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
