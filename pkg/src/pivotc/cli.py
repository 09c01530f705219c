"""``pivotc`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O, 4 format or codec error, 5 model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace

from .config import CodecConfig, TrainConfig, configs_from_dict, load_config, parse_kv
from .errors import DecodeError, ModelMismatchError, PivotError
from .io import read_ply, write_ply
from .metrics import RdCurve, bd_metrics, format_psnr, psnr_d1, psnr_d2
from .svgplot import write_rd_svg

EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_MISMATCH = 2, 3, 4, 5

METRIC_FIELDS = ("cloud_id", "bpp", "d1_psnr", "d2_psnr")
BD_FIELDS = ("pair_id", "bd_rate_d1", "bd_rate_d2", "bd_psnr_d1", "bd_psnr_d2")


class UsageError(Exception):
    pass


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _emit(header, row, show_header: bool) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    if show_header:
        w.writerow(header)
    w.writerow(row)


def _load_model(path):
    from .codec import load_model

    if not os.path.exists(path):
        raise FileNotFoundError(2, "model file not found", path)
    return load_model(path)


def _codec_config(args) -> CodecConfig | None:
    """Interval from --config and/or --triple; None when neither is given."""
    cfg = None
    if args.config:
        cfg = load_config(args.config)[0]
    if getattr(args, "triple", None):
        c, m, f = _parse_triple(args.triple)
        cfg = cfg.with_triple(c, m, f) if cfg else CodecConfig.from_triple(c, m, f)
    return cfg


def _parse_triple(text: str) -> tuple:
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad triple {text!r}; expected c,m,f") from None
    if len(parts) != 3 or min(parts) < 0:
        raise UsageError(f"bad triple {text!r}; expected three non-negative integers")
    return parts


# ------------------------------------------------------------------ commands

def cmd_encode(args) -> int:
    from .pipeline import bits_per_point, encode

    model = _load_model(args.model) if args.model else None
    cfg = _codec_config(args)
    if cfg is None and model is not None:
        cfg = model.cfg
    bits = cfg.n if cfg is not None else args.bits
    pc = read_ply(args.input, bit_depth=bits)
    if cfg is None:
        cfg = CodecConfig(pc.bit_depth, pc.bit_depth, pc.bit_depth)
    if cfg.learned and model is None:
        raise UsageError(f"interval {list(cfg.triple)} has learned stages; pass --model")
    if model is not None and cfg.learned:
        # stage sizes and loss weights come from the checkpoint, the interval from the config
        cfg = replace(model.cfg, n=cfg.n, n1=cfg.n1, n2=cfg.n2, n1_prime=cfg.n1_prime)
    t0 = time.perf_counter()
    data = encode(pc, model if cfg.learned else None, cfg)
    elapsed = time.perf_counter() - t0
    with open(args.output, "wb") as f:
        f.write(data)
    _emit(("cloud", "bpp", "enc_seconds"),
          (_stem(args.input), f"{bits_per_point(data, len(pc)):.6f}", f"{elapsed:.4f}"), args.header)
    return 0


def cmd_decode(args) -> int:
    from .pipeline import decode

    model = _load_model(args.model) if args.model else None
    with open(args.input, "rb") as f:
        data = f.read()
    t0 = time.perf_counter()
    dec = decode(data, model)
    elapsed = time.perf_counter() - t0
    c = dec.container
    lossless = not (c.voxel_stage or c.point_stage)
    if lossless:
        write_ply(dec.x_part, args.output, format=args.format)
    elif args.round:
        write_ply(dec.to_point_cloud(), args.output, format=args.format)
    else:
        write_ply(dec.points, args.output, format=args.format)
    bpp = 8.0 * len(data) / c.num_points
    _emit(("cloud", "bpp", "dec_seconds"), (_stem(args.input), f"{bpp:.6f}", f"{elapsed:.4f}"),
          args.header)
    return 0


def cmd_eval(args) -> int:
    ref = read_ply(args.ref, bit_depth=args.bits)
    test = read_ply(args.test, bit_depth=args.bits)
    if args.bpp is not None:
        bpp = f"{args.bpp:.6f}"
    elif args.stream:
        bpp = f"{8.0 * os.path.getsize(args.stream) / len(ref):.6f}"
    else:
        bpp = ""
    d1 = psnr_d1(ref, test, args.bits)
    d2 = psnr_d2(ref, test, args.bits)
    _emit(METRIC_FIELDS, (args.cloud_id or _stem(args.test), bpp, format_psnr(d1), format_psnr(d2)),
          args.header)
    return 0


def _read_metric_csv(path) -> dict:
    """cloud_id -> list of (bpp, d1, d2)."""
    out: dict = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(METRIC_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise PivotError(f"{path}: missing columns {', '.join(sorted(missing))}")
        for lineno, row in enumerate(reader, 2):
            try:
                vals = tuple(float(row[k]) for k in METRIC_FIELDS[1:])
            except ValueError:
                raise PivotError(f"{path}:{lineno}: non-numeric value") from None
            out.setdefault(row["cloud_id"], []).append(vals)
    return out


def _fmt2(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def cmd_bdrate(args) -> int:
    anchor = _read_metric_csv(args.anchor)
    test = _read_metric_csv(args.test)
    common = [k for k in anchor if k in test]
    if not common:
        raise PivotError("anchor and test CSVs share no cloud_id")
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.header:
        w.writerow(BD_FIELDS)
    for cid in common:
        res = []
        for col in (1, 2):
            a = RdCurve.from_points([(r[0], r[col]) for r in anchor[cid]])
            t = RdCurve.from_points([(r[0], r[col]) for r in test[cid]])
            res.append(bd_metrics(a, t))
        (rate1, psnr1), (rate2, psnr2) = res
        w.writerow([cid, _fmt2(rate1), _fmt2(rate2), _fmt2(psnr1), _fmt2(psnr2)])
    return 0


def cmd_synth(args) -> int:
    from .trainer import synth_cloud

    pc = synth_cloud(args.shape, args.bits, args.points, args.seed)
    write_ply(pc, args.output, format=args.format)
    return 0


def _train_setup(args, default_n=None):
    kv = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            kv = parse_kv(f.read())
    if default_n is not None and "n" not in kv and "triple" not in kv:
        kv["n"] = str(default_n)
    for key in ("epochs", "lr", "batch_size", "steps_per_epoch", "seed", "shape", "points", "dataset"):
        val = getattr(args, key, None)
        if val is not None:
            kv[key] = str(val)
    if getattr(args, "triple", None):
        kv["triple"] = args.triple
        for k in ("n", "n1", "n2", "n1_prime"):
            kv.pop(k, None)
    if "n" not in kv and "triple" not in kv:
        raise UsageError("training needs a bit interval: give --config or --triple")
    return configs_from_dict(kv)


def _training_clouds(cfg: CodecConfig, tcfg: TrainConfig) -> list:
    from .trainer import synth_cloud

    if tcfg.dataset:
        names = sorted(n for n in os.listdir(tcfg.dataset) if n.lower().endswith(".ply"))
        if not names:
            raise FileNotFoundError(2, "no .ply files in dataset directory", tcfg.dataset)
        return [read_ply(os.path.join(tcfg.dataset, n), bit_depth=cfg.n) for n in names]
    return [synth_cloud(tcfg.shape, cfg.n, tcfg.points, tcfg.seed)]


def cmd_train(args) -> int:
    from .codec import PivotModel
    from .trainer import train

    cfg, tcfg = _train_setup(args)
    if not cfg.learned:
        raise UsageError("the pure-octree interval has nothing to train")
    clouds = _training_clouds(cfg, tcfg)
    model = PivotModel(cfg)
    res = train(model, tcfg, clouds, log_path=args.log, ckpt_path=args.checkpoint)
    f = res.final
    _emit(("epochs", "first_epoch_loss", "final_epoch_loss", "bpp", "d1_psnr"),
          (tcfg.epochs, repr(res.epoch_means[0]), repr(res.epoch_means[-1]), f"{f['bpp']:.6f}",
           format_psnr(f["d1_psnr"])), args.header)
    return 0


def cmd_sweep(args) -> int:
    from .trainer import rate_point_sweep

    triples = [_parse_triple(t.strip()) for t in args.triples.split(";") if t.strip()]
    if not triples:
        raise UsageError("--triples is empty")
    args.triple = None
    cfg, tcfg = _train_setup(args, default_n=sum(triples[0]))
    if args.input:
        cloud = read_ply(args.input, bit_depth=sum(triples[0]))
        name = _stem(args.input)
    else:
        from .trainer import synth_cloud

        cloud = synth_cloud(tcfg.shape, sum(triples[0]), tcfg.points, tcfg.seed)
        name = tcfg.shape
    curve, points = rate_point_sweep(cfg, triples, tcfg, cloud, ckpt_dir=args.model_dir)
    with open(args.output, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for p in points:
            w.writerow([name, f"{p.bpp:.6f}", format_psnr(p.d1_psnr), format_psnr(p.d2_psnr)])
    if args.svg:
        write_rd_svg(args.svg, {name: curve}, title=f"{name}, {cloud.bit_depth}-bit")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("triple", "lambda", "bpp", "d1_psnr", "d2_psnr"))
    for p in points:
        w.writerow(["[" + ",".join(map(str, p.triple)) + "]", repr(p.lam), f"{p.bpp:.6f}",
                    format_psnr(p.d1_psnr), format_psnr(p.d2_psnr)])
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pivotc", description="Tree + voxel + point geometry codec.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="compress a PLY cloud")
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--model")
    e.add_argument("--config")
    e.add_argument("--triple", help="bit interval c,m,f (overrides the config interval)")
    e.add_argument("--bits", type=int, help="bit depth of the input (default: smallest that fits)")
    e.add_argument("--header", action="store_true")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decompress a container to PLY")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.add_argument("--model")
    d.add_argument("--round", action="store_true", help="write the rounded, deduplicated integer cloud")
    d.add_argument("--format", choices=("binary", "ascii"), default="binary")
    d.add_argument("--header", action="store_true")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="D1/D2 PSNR of a test cloud against a reference")
    v.add_argument("--ref", required=True)
    v.add_argument("--test", required=True)
    v.add_argument("--bits", type=int, required=True)
    v.add_argument("--bpp", type=float)
    v.add_argument("--stream", help="container whose size gives the bpp column")
    v.add_argument("--cloud-id")
    v.add_argument("--header", action="store_true")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-Rate / BD-PSNR between two metric CSVs")
    b.add_argument("--anchor", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--header", action="store_true")
    b.set_defaults(func=cmd_bdrate)

    s = sub.add_parser("synth", help="write a synthetic cloud")
    s.add_argument("--shape", required=True, choices=("sphere", "torus", "plane", "lidar_rings"))
    s.add_argument("--bits", type=int, required=True)
    s.add_argument("--points", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.add_argument("--format", choices=("binary", "ascii"), default="binary")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("sweep", cmd_sweep, "train and evaluate several bit intervals")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config")
        t.add_argument("--epochs", type=int)
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", dest="batch_size", type=int)
        t.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
        t.add_argument("--seed", type=int)
        t.set_defaults(func=func)
        if name == "train":
            t.add_argument("--triple")
            t.add_argument("--shape", choices=("sphere", "torus", "plane", "lidar_rings"))
            t.add_argument("--points", type=int)
            t.add_argument("--dataset", help="directory of PLY files")
            t.add_argument("--checkpoint", required=True)
            t.add_argument("--log", required=True, help="CSV loss log")
            t.add_argument("--header", action="store_true")
        else:
            t.add_argument("--triples", required=True, help='e.g. "7,0,1;6,1,1;5,2,1"')
            t.add_argument("--input", help="evaluation PLY (default: synthetic cloud from the config)")
            t.add_argument("--output", required=True, help="metric CSV")
            t.add_argument("--svg")
            t.add_argument("--model-dir", help="directory for per-triple checkpoints")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, DecodeError):
        exc = exc.cause
    if isinstance(exc, ModelMismatchError):
        return EXIT_MISMATCH
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_FORMAT


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pivotc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pivotc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, PivotError) as exc:
        print(f"pivotc: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
