"""Command-line entry point: ``isonet <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error or failed check, 2 usage error.
"""
from __future__ import annotations

import argparse
import sys

from . import analyzer, data, equivalence, trainer
from .arch import (ArchError, ArchSpec, MultiplierTransform, apply_multiplier, atomic_write_text,
                   build_dense1x1, build_isometric, build_pyramid, block_correspondence)
from .tensor import DTYPE, Rng


class CommandFailed(Exception):
    """A check ran but did not pass; reported with exit code 1."""


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _emit(args, text: str, path: str | None = None) -> None:
    path = path if path is not None else args.out
    if path:
        atomic_write_text(path, text)
    else:
        sys.stdout.write(text)


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# -- build / analyze / transform ----------------------------------------------------

def _build(args) -> ArchSpec:
    if args.preset == "isometric":
        return build_isometric(args.input or args.res, args.res, args.mult, args.layers, args.classes,
                               se=not args.no_se, fc_width=args.fc_width)
    if args.preset == "pyramid":
        return build_pyramid(args.input or args.res, args.base_channels, _ints(args.blocks),
                             args.classes, layer=args.layer_type, se=not args.no_se)
    return build_dense1x1(args.res, args.width, args.layers, args.classes)


def cmd_build_arch(args) -> int:
    _emit(args, _build(args).to_json())
    return 0


def cmd_analyze(args) -> int:
    report = analyzer.analyze(ArchSpec.load(args.arch))
    if args.csv:
        atomic_write_text(args.csv, analyzer.report_csv(report))
    text = analyzer.report_table(report)
    if args.out:
        atomic_write_text(args.out, text)
    if not args.quiet:
        sys.stdout.write(text)
    return 0


def cmd_transform(args) -> int:
    a = ArchSpec.load(args.arch)
    chosen = [(k, v) for k, v in (("width", args.width_mult), ("resolution", args.res_mult),
                                  ("depth", args.depth_mult), ("dilate", args.dilate)) if v is not None]
    if len(chosen) != 1:
        raise ArchError("give exactly one of --width-mult, --res-mult, --depth-mult, --dilate")
    kind, factor = chosen[0]
    _emit(args, apply_multiplier(a, MultiplierTransform(kind, factor)).to_json())
    return 0


def cmd_compare_shapes(args) -> int:
    a = ArchSpec.load(args.arch)
    rep = block_correspondence(a, args.alpha)
    lines = ["variant,block,res,channels,layers"]
    for tag, blocks in (("resolution", rep.blocks_res), ("width", rep.blocks_width)):
        lines += [f"{tag},{i},{b.res},{b.channels},{b.layers}" for i, b in enumerate(blocks)]
    _emit(args, "\n".join(lines) + "\n")
    if rep.degenerate:
        _say(args, f"DEGENERATE {rep.note}")
    elif rep.exact:
        _say(args, f"EXACT {rep.shared_blocks} shared blocks "
                   f"(resolution block p == width block p+1)")
    else:
        _say(args, f"MISMATCH pairs {rep.mismatched}")
        return 1
    return 0


# -- data helpers -------------------------------------------------------------------------

def _load_data(args, a: ArchSpec, split: str, count: int) -> data.DatasetHandle:
    spec = args.data
    if spec == "synth":
        res = args.data_res or a.input_res
        seed = args.data_seed if args.data_seed is not None else args.seed
        return data.synth_shapes(seed, count, a.num_classes, res, split=split)
    kind, _, path = spec.partition(":")
    if kind == "idx":
        parts = path.split(",")
        d = data.load_idx(parts[0], parts[1] if len(parts) > 1 else None, split=split,
                          num_classes=a.num_classes)
    elif kind == "cifar":
        d = data.load_cifar_binary(path, split)
    else:
        raise ValueError(f"unknown --data {spec!r}; use synth, idx:IMAGES[,LABELS] or cifar:PATH")
    return d.subset(count) if count else d


def _train_config(args) -> trainer.TrainConfig:
    opt = trainer.OptimizerConfig(args.optimizer, lr=args.lr, momentum=args.momentum,
                                  weight_decay=args.weight_decay)
    return trainer.TrainConfig(seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
                               optimizer=opt, lr_schedule=args.schedule,
                               freeze=[f for f in args.freeze.split(",") if f],
                               input_adapter=args.adapter, label_smoothing=args.label_smoothing)


def cmd_train(args) -> int:
    a = ArchSpec.load(args.arch)
    cfg = _train_config(args)
    tr = _load_data(args, a, "train", args.samples)
    ev = _load_data(args, a, "eval", args.eval_samples)
    show = None if args.quiet else (lambda r: print(
        f"epoch {r.epoch}: loss={r.train_loss:.4f} train_acc={r.train_acc:.4f} "
        f"eval_acc={r.eval_acc:.4f} lr={r.lr:.5f}"))
    out = args.out or "checkpoint.ison"
    _, log = trainer.train(a, cfg, tr, ev, out=out, progress=show)
    _say(args, f"best epoch {log.best_epoch}, checkpoint {out}, log {out}.log.csv")
    return 0


def cmd_eval(args) -> int:
    a = ArchSpec.load(args.arch)
    ev = _load_data(args, a, "eval", args.eval_samples)
    acc = trainer.evaluate(data.read_checkpoint(args.ckpt), a, ev, args.adapter)
    _emit(args, f"accuracy={acc!r}\n")
    return 0


def cmd_gradcheck(args) -> int:
    a = ArchSpec.load(args.arch) if args.arch else trainer.toy_arch(se=not args.no_se)
    err, info = trainer.grad_check(a, args.seed, max_coords=args.max_coords, return_details=True)
    ok = err < args.tol
    _emit(args, f"{'PASS' if ok else 'FAIL'} max_rel_err={err:.3e} tol={args.tol:g} "
                f"checked={info['checked']} excluded={info['excluded']}\n")
    if not ok:
        raise CommandFailed("gradient check failed")
    return 0


# -- equivalence ------------------------------------------------------------------------------

def cmd_equiv_check(args) -> int:
    rng = Rng(args.seed).stream("equiv_check")
    if args.mode == "s2d-fold":
        k = args.k
        x = rng.stream("x").normal((2, 3, k * 4, k * 4)).astype(DTYPE)
        w = rng.stream("w").normal((8, 3 * k * k, 1, 1), 1.0 / k).astype(DTYPE)
        rep = equivalence.check_s2d_fold(x, w, k)
        line = rep.summary()
    elif args.mode == "dilation-batch":
        if args.arch:
            a = ArchSpec.load(args.arch)
        else:
            a = build_isometric(16, 8, 0.125, 4, 10, fc_width=16, se=False)
        x = rng.stream("x").normal((2, a.in_channels, a.input_res, a.input_res)).astype(DTYPE)
        rep = equivalence.check_dilation_batch_equiv(a, args.rate, x, seed=args.seed)
        line = rep.summary()
    else:
        ok, replicas = equivalence.pixel_cover_check(args.order, args.rate, args.k, args.res)
        line = f"{'PASS' if ok else 'FAIL'} order={args.order} replicas={replicas} exact_cover={ok}"
        rep = None
    _emit(args, line + "\n")
    if rep is not None and args.csv:
        data.write_csv(args.csv, ["index", "path_a", "path_b", "abs_diff"], rep.diff_rows())
    if not line.startswith("PASS"):
        raise CommandFailed(line)
    return 0


# -- sweep -----------------------------------------------------------------------------------

SWEEP_FIELDS = ["mult", "res", "input_res", "params", "trainable_params", "madds",
                "peak_activation", "accuracy", "error"]


def sweep(template: ArchSpec, mults: list[float], resolutions: list[int], train_args=None):
    """Rows for every (mult, res) grid point, mult-major."""
    rows, failures = [], 0
    for m in mults:
        for r in resolutions:
            try:
                a = apply_multiplier(template, MultiplierTransform("width", m))
                a = apply_multiplier(a, MultiplierTransform("resolution", r / template.internal_res))
                rep = analyzer.analyze(a)
                acc = ""
                if train_args is not None:
                    acc = repr(_sweep_train(a, train_args))
                rows.append([f"{m:g}", str(r), str(a.input_res), str(rep.total_params),
                             str(rep.trainable_params), str(rep.total_madds),
                             str(rep.peak_activation_elems), acc, ""])
            except (ArchError, ValueError) as exc:
                failures += 1
                rows.append([f"{m:g}", str(r), "", "", "", "", "", "", str(exc)])
    return rows, failures


def _sweep_train(a: ArchSpec, args) -> float:
    cfg = _train_config(args)
    tr = data.synth_shapes(args.seed, args.samples, a.num_classes, a.input_res, split="train")
    ev = data.synth_shapes(args.seed, args.eval_samples, a.num_classes, a.input_res, split="eval")
    _, log = trainer.train(a, cfg, tr, ev)
    return max(r.eval_acc for r in log.rows)


def cmd_sweep(args) -> int:
    template = ArchSpec.load(args.arch) if args.arch else _build(args)
    rows, failures = sweep(template, _floats(args.mults), _ints(args.res_list),
                           args if args.train else None)
    _emit(args, data.csv_text(SWEEP_FIELDS, rows))
    if failures:
        print(f"{failures} grid point(s) invalid; see the error column", file=sys.stderr)
        return 1
    return 0


def cmd_dump_filters(args) -> int:
    a = ArchSpec.load(args.arch)
    paths = trainer.dump_first_layer_filters(data.read_checkpoint(args.ckpt), a, args.out or "filters",
                                             with_montage=args.montage)
    _say(args, f"wrote {len(paths)} image(s) to {args.out or 'filters'}")
    return 0


# -- parser ------------------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    g.add_argument("--out", default=None, help="output path (default: stdout where applicable)")
    g.add_argument("--quiet", action="store_true", help="suppress progress output")
    return p


def _arch_flags(p) -> None:
    p.add_argument("--preset", choices=("isometric", "pyramid", "dense1x1"), default="isometric")
    p.add_argument("--res", type=int, default=14, help="internal resolution d")
    p.add_argument("--input", type=int, default=None, help="input resolution r (default: d)")
    p.add_argument("--mult", type=float, default=1.0, help="width multiplier")
    p.add_argument("--layers", type=int, default=16, help="number of body blocks")
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--fc-width", type=int, default=1280)
    p.add_argument("--no-se", action="store_true", help="build blocks without squeeze-excite")
    p.add_argument("--base-channels", type=int, default=16, help="pyramid: first block width")
    p.add_argument("--blocks", default="2,2,2", help="pyramid: layers per resolution block")
    p.add_argument("--layer-type", choices=("mv3", "conv"), default="mv3", help="pyramid layer type")
    p.add_argument("--width", type=int, default=32, help="dense1x1: channel width")


def _data_flags(p) -> None:
    p.add_argument("--data", default="synth", help="synth | idx:IMAGES[,LABELS] | cifar:PATH")
    p.add_argument("--data-res", type=int, default=None, help="synth render resolution")
    p.add_argument("--data-seed", type=int, default=None, help="synth scene seed (default: --seed)")
    p.add_argument("--samples", type=int, default=2000, help="training samples")
    p.add_argument("--eval-samples", type=int, default=500, help="evaluation samples")
    p.add_argument("--adapter", default="native",
                   help="native | upsample[:MODE]:F | s2d:K | skip_stride")


def _train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--optimizer", choices=("sgd_momentum", "rmsprop"), default="sgd_momentum")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--schedule", choices=("constant", "cosine"), default="cosine")
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--freeze", default="", help="comma-separated layer ids to keep fixed")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="isonet", description="Isometric network toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("build-arch", cmd_build_arch, "Build an architecture and write it as JSON.")
    _arch_flags(p)

    p = add("analyze", cmd_analyze, "Per-layer shapes, params, MAdds, activations, receptive fields.")
    p.add_argument("--arch", required=True)
    p.add_argument("--csv", default=None, help="also write the per-layer report as CSV")

    p = add("transform", cmd_transform, "Apply one multiplier or the dilation transform.")
    p.add_argument("--arch", required=True)
    p.add_argument("--width-mult", type=float)
    p.add_argument("--res-mult", type=float)
    p.add_argument("--depth-mult", type=float)
    p.add_argument("--dilate", type=int)

    p = add("compare-shapes", cmd_compare_shapes,
            "Compare resolution blocks of the resolution- and width-scaled variants.")
    p.add_argument("--arch", required=True)
    p.add_argument("--alpha", type=float, default=0.5)

    p = add("train", cmd_train, "Train an architecture; writes checkpoint and CSV log.")
    p.add_argument("--arch", required=True)
    _data_flags(p)
    _train_flags(p)

    p = add("eval", cmd_eval, "Top-1 accuracy of a checkpoint.")
    p.add_argument("--arch", required=True)
    p.add_argument("--ckpt", required=True)
    _data_flags(p)

    p = add("gradcheck", cmd_gradcheck, "Analytic vs central-difference gradients in float64.")
    p.add_argument("--arch", default=None, help="default: built-in toy MV3 net")
    p.add_argument("--no-se", action="store_true")
    p.add_argument("--max-coords", type=int, default=None, help="sample at most this many per tensor")
    p.add_argument("--tol", type=float, default=1e-4)

    p = add("equiv-check", cmd_equiv_check, "Run one of the exact equivalence checks.")
    p.add_argument("--mode", required=True, choices=("s2d-fold", "dilation-batch", "parallel-cover"))
    p.add_argument("--k", type=int, default=4, help="S2D block size")
    p.add_argument("--rate", type=int, default=2, help="dilation / space-to-batch rate")
    p.add_argument("--order", choices=equivalence.PIPELINE_ORDERS, default="s2d_then_s2b")
    p.add_argument("--res", type=int, default=224, help="parallel-cover: input resolution")
    p.add_argument("--arch", default=None, help="dilation-batch: SE-free isometric spec")
    p.add_argument("--csv", default=None, help="write per-element diffs as CSV")

    p = add("sweep", cmd_sweep, "Cost grid over width multipliers x internal resolutions (mult-major).")
    p.add_argument("--arch", default=None, help="template spec (default: built from preset flags)")
    _arch_flags(p)
    p.add_argument("--mults", default="0.5,1,2")
    p.add_argument("--res-list", default="7,14,28")
    p.add_argument("--train", action="store_true", help="also train each point on synth_shapes")
    _data_flags(p)
    _train_flags(p)

    p = add("dump-filters", cmd_dump_filters, "Write first-layer filters as PPM images.")
    p.add_argument("--arch", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--montage", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except CommandFailed as exc:
        print(f"isonet {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ArchError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"isonet {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
