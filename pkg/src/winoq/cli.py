"""The ``winoq`` command line: one subcommand per workflow, machine-readable outputs.

Every output artifact gets a sibling ``<name>.manifest.json`` recording the
subcommand, flags, seed, library versions, wall time and output paths; the
manifest is written atomically.  Exit codes: 0 success, 1 domain error,
2 usage error.  All randomized paths accept ``--seed``; analytic /
deterministic modes produce byte-identical artifacts for identical commands.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

DOMAIN_EXIT = 1


def _set_thread_cap(threads: int | None):
    # must happen before numpy is imported to cap BLAS pools
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(threads))


def write_manifest(artifact, subcommand: str, flags: dict, seed, wall_time_s: float,
                   outputs: list):
    import winoq

    doc = {
        "subcommand": subcommand,
        "flags": {k: v for k, v in sorted(flags.items()) if not callable(v)},
        "seed": seed,
        "versions": {
            "winoq": winoq.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_s": wall_time_s,
        "outputs": [str(p) for p in outputs],
    }
    import numpy

    doc["versions"]["numpy"] = numpy.__version__
    path = Path(str(artifact) + ".manifest.json")
    tmp = path.with_suffix(".json.tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    os.replace(tmp, path)


def _parse_points(spec: str):
    from .numerics import rational
    from .transforms import PolyPoints

    return PolyPoints(tuple(rational(p.strip()) for p in spec.split(",")))


def _load_dataset(args):
    from . import data_io

    kind = args.dataset
    if kind == "synthetic":
        return data_io.gen_synthetic(args.classes, args.per_class, args.size,
                                     args.data_seed)
    data_dir = Path(args.data_dir or os.environ.get("WINOQ_DATA_DIR", "."))
    if kind == "mnist":
        return data_io.load_mnist_idx(data_dir / "train-images-idx3-ubyte",
                                      data_dir / "train-labels-idx1-ubyte")
    if kind == "cifar10":
        return data_io.load_cifar10_bin(data_dir / "data_batch_1.bin")
    raise ValueError(f"unknown dataset {kind!r}")


def _add_dataset_flags(p):
    p.add_argument("--dataset", default="synthetic",
                   choices=["synthetic", "mnist", "cifar10"])
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=256)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--data-dir", default=None)


def cmd_gen_transforms(args) -> list:
    from .transforms import default_points, cook_toom_1d, save_transform

    points = _parse_points(args.points) if args.points else default_points(args.m, args.r)
    tf = cook_toom_1d(args.m, args.r, points)
    save_transform(tf, args.out)
    return [args.out]


def cmd_check_error(args) -> list:
    import csv

    from .transforms import load_transform, transform_error_trials

    tf = load_transform(args.config)
    means, maxes = transform_error_trials(tf, args.bits, args.trials, args.seed)
    outputs = []
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "mean_rel_err", "max_rel_err"])
            for i, (m, x) in enumerate(zip(means, maxes)):
                writer.writerow([i, repr(float(m)), repr(float(x))])
        outputs.append(args.csv)
    summary = {
        "m": tf.m, "r": tf.r, "bits": args.bits, "trials": args.trials,
        "mean_rel_err": float(means.mean()), "max_rel_err": float(maxes.max()),
    }
    print(json.dumps(summary, sort_keys=True))
    return outputs


def cmd_bench(args) -> list:
    from .latency_bench import (BenchConfig, LatencyTable, build_table,
                                halving_sizes)
    from .winograd_conv import ConvAlgo

    algos = tuple(ConvAlgo.parse(a) for a in args.algos.split(","))
    bits = tuple(int(b) for b in args.bits.split(","))
    existing = None
    if args.resume and Path(args.out).exists():
        existing = LatencyTable.from_csv(args.out)

    if args.preset in ("micro-resnet", "tiny-cnn", "lenet-q"):
        from .training.presets import build_preset

        model = build_preset(args.preset, algo="direct", bits=32)
        table = _table_for_model(model, algos, bits, args)
    else:
        sizes = halving_sizes() if args.preset == "paper-sweep" else (8, 4, 2)
        pairs = None
        if args.preset == "tiny":
            pairs = ((3, 8), (8, 8), (8, 16))
        cfg = BenchConfig(algos=algos, out_sizes=sizes,
                          channel_pairs=pairs or BenchConfig.channel_pairs,
                          bits=bits, reps=args.reps, cooldown_ms=args.cooldown_ms)
        table = build_table(cfg, mode=args.mode, existing=existing)
    table.to_csv(args.out)
    return [args.out]


def _table_for_model(model, algos, bits, args):
    from .latency_bench import LatencyTable, analytic_table_for_model, bench_point
    from .training.layers import DirectConvLayer, WaConvLayer
    from .winograd_conv import ConvShape

    if args.mode == "analytic":
        return analytic_table_for_model(model, algos, bits)
    table = LatencyTable()
    shape = (1,) + tuple(model.input_shape)
    for layer in model.layers:
        if isinstance(layer, (DirectConvLayer, WaConvLayer)):
            n, c, h, w = shape
            k = layer.k if isinstance(layer, DirectConvLayer) else layer.r
            cs = ConvShape(layer.in_ch, layer.out_ch, h, w, k, 1, layer.pad)
            for algo in algos:
                if algo.kind == "winograd" and k not in (3, 5):
                    continue
                for b in bits:
                    row = bench_point(algo, cs, b, args.reps, args.cooldown_ms)
                    if row.key not in table.rows:
                        table.add(row)
        shape = layer.out_shape(shape)
    return table


def _schedule_from_args(args):
    from .training.loop import TrainSchedule

    return TrainSchedule(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        lr_schedule=args.lr_schedule, optimizer=args.optimizer,
        weight_decay=args.weight_decay, seed=args.seed,
        transform_lr_scale=args.transform_lr_scale,
    )


def cmd_train(args) -> list:
    from .training import checkpoint
    from .training.loop import train
    from .training.presets import build_preset

    kwargs = dict(algo=args.algo, bits=args.bits, flex=args.flex, seed=args.seed)
    if args.model != "lenet-q":
        kwargs.update(width=args.width, in_ch=args.in_ch,
                      num_classes=args.classes, size=args.size)
    else:
        kwargs.update(num_classes=args.classes, size=args.size)
    model = build_preset(args.model, **kwargs)
    ds = _load_dataset(args)
    schedule = _schedule_from_args(args)
    report = train(model, ds, schedule)
    out = Path(args.out)
    checkpoint.save_checkpoint(model, out, extra_meta={"seed": args.seed})
    report.write_csv(out / "history.csv")
    print(json.dumps({"final_val_acc": report.final_val_acc,
                      "epochs": len(report.epochs)}, sort_keys=True))
    return [out, out / "history.csv"]


def cmd_adapt(args) -> list:
    from .training import checkpoint
    from .training.loop import adapt
    from .training.presets import parse_model_algo

    pretrained = checkpoint.load_checkpoint(args.ckpt)
    ds = _load_dataset(args)
    schedule = _schedule_from_args(args)
    result = adapt(pretrained, parse_model_algo(args.algo), args.flex,
                   args.epochs, dataset=ds, schedule=schedule)
    out = Path(args.out)
    checkpoint.save_checkpoint(result.model, out,
                               extra_meta={"adapted_from": str(args.ckpt)})
    with open(out / "trajectory.json", "w") as fh:
        json.dump({"val_acc": result.trajectory}, fh, indent=1)
        fh.write("\n")
    print(json.dumps({"trajectory": result.trajectory}, sort_keys=True))
    return [out, out / "trajectory.json"]


def cmd_search(args) -> list:
    from .latency_bench import LatencyTable
    from .nas import SearchSchedule, search
    from .training.loop import TrainSchedule
    from .training.presets import build_preset

    table = LatencyTable.from_csv(args.table)
    macro = build_preset(args.model, algo="direct", bits=args.bits,
                         in_ch=args.in_ch, num_classes=args.classes,
                         width=args.width, size=args.size, seed=args.seed) \
        if args.model != "lenet-q" else build_preset(args.model, algo="direct",
                                                     bits=args.bits, seed=args.seed)
    ds = _load_dataset(args)
    schedule = SearchSchedule(epochs=args.epochs, batch_size=args.batch_size,
                              seed=args.seed, lambda1=args.lambda1)
    final = None
    if args.final_epochs > 0:
        final = TrainSchedule(epochs=args.final_epochs, seed=args.seed)
    result = search(macro, args.space, table, args.lambda2, schedule,
                    dataset=ds, final_schedule=final)
    result.derived.save(args.out)
    summary = {"expected_latency_ms": result.derived.expected_latency_ms,
               "param_count": result.derived.param_count,
               "layers": result.derived.layers}
    if result.report is not None:
        summary["final_val_acc"] = result.report.final_val_acc
    print(json.dumps(summary, sort_keys=True))
    return [args.out]


def cmd_eval(args) -> list:
    from .training import checkpoint
    from .training.loop import adapt, evaluate, warmup
    from .training.presets import parse_model_algo

    model = checkpoint.load_checkpoint(args.ckpt)
    ds = _load_dataset(args)
    train_ds, val_ds = ds.split(0.1, args.seed)
    if args.swap_algo:
        result = adapt(model, parse_model_algo(args.swap_algo), False, 0,
                       dataset=(train_ds, val_ds))
        model = result.model
    elif args.warmup:
        warmup(model, train_ds)
    acc = evaluate(model, val_ds)
    out = {"val_acc": acc, "n_val": len(val_ds)}
    print(json.dumps(out, sort_keys=True))
    outputs = []
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=1, sort_keys=True)
            fh.write("\n")
        outputs.append(args.out)
    return outputs


def cmd_export_report(args) -> list:
    import csv

    from .latency_bench import LatencyTable
    from .training import checkpoint

    table = LatencyTable.from_csv(args.bench) if args.bench else None
    rows = []
    for run in args.runs:
        run = Path(run)
        with open(run / "manifest.json") as fh:
            manifest = json.load(fh)
        meta = manifest["meta"]
        final_acc = None
        hist = run / "history.csv"
        if hist.exists():
            with open(hist, newline="") as fh:
                rec = list(csv.DictReader(fh))
            if rec:
                final_acc = float(rec[-1]["val_acc"])
        row = {"run": str(run), "algo": meta.get("algo"), "bits": meta.get("bits"),
               "flex": meta.get("flex"), "accuracy": final_acc,
               "latency_ms": None, "speedup_vs_im2row": None}
        if table is not None:
            model = checkpoint.load_checkpoint(run)
            lat, base = _model_latency(model, table)
            row["latency_ms"] = lat
            if lat and base:
                row["speedup_vs_im2row"] = base / lat
        rows.append(row)
    report = {"rows": rows}
    if args.check_error:
        summaries = []
        for path in args.check_error:
            with open(path, newline="") as fh:
                recs = list(csv.DictReader(fh))
            vals = [float(r["mean_rel_err"]) for r in recs]
            summaries.append({"file": str(path),
                              "mean_rel_err": sum(vals) / max(len(vals), 1)})
        report["check_error"] = summaries
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"rows": len(rows)}, sort_keys=True))
    return [args.out]


def _model_latency(model, table):
    """(total latency of the model's conv choices, im2row baseline), or Nones."""
    from .latency_bench import TableLookupError
    from .training.layers import DirectConvLayer, WaConvLayer

    shape = (1,) + tuple(model.input_shape)
    total, base = 0.0, 0.0
    try:
        for layer in model.layers:
            out = layer.out_shape(shape)
            if isinstance(layer, (DirectConvLayer, WaConvLayer)):
                if isinstance(layer, WaConvLayer):
                    algo = f"wg{layer.m}"
                else:
                    algo = layer.algo if layer.algo != "direct" else "im2row"
                oh, ow = out[2], out[3]
                bits = 32 if layer.qspec.is_float else layer.qspec.bits
                total += table.lookup(algo, oh, ow, layer.in_ch, layer.out_ch, bits).median_ms
                base += table.lookup("im2row", oh, ow, layer.in_ch, layer.out_ch, bits).median_ms
            shape = out
    except TableLookupError:
        return None, None
    return total, base


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="winoq",
                                     description="Winograd-aware quantized convolution toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker/BLAS threads (default: library defaults)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-transforms", help="synthesize a transform triple")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--points", default=None,
                   help='comma-separated finite points, e.g. "0,1,-1,1/2"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_transforms, seed=None)

    p = sub.add_parser("check-error", help="quantized-pipeline error profile")
    p.add_argument("--config", required=True, help="transform JSON")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="write per-trial relative errors")
    p.set_defaults(func=cmd_check_error)

    p = sub.add_parser("bench", help="latency sweep (measured or analytic)")
    p.add_argument("--preset", default="paper-sweep",
                   choices=["paper-sweep", "tiny", "micro-resnet", "tiny-cnn", "lenet-q"])
    p.add_argument("--mode", default="analytic", choices=["measured", "analytic"])
    p.add_argument("--algos", default="im2row,im2col,wg2,wg4,wg6")
    p.add_argument("--bits", default="32,8")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--cooldown-ms", type=float, default=0.0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench, seed=None)

    for name in ("train", "adapt"):
        p = sub.add_parser(name)
        if name == "train":
            p.add_argument("--model", default="micro-resnet",
                           choices=["micro-resnet", "lenet-q", "tiny-cnn"])
            p.add_argument("--bits", type=int, default=32, choices=[32, 16, 10, 8])
            p.add_argument("--width", type=int, default=8)
            p.add_argument("--in-ch", type=int, default=1)
        else:
            p.add_argument("--ckpt", required=True)
        p.add_argument("--algo", default="direct")
        p.add_argument("--flex", action="store_true")
        p.add_argument("--epochs", type=int, required=True)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--lr-schedule", default="cosine", choices=["cosine", "constant"])
        p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
        p.add_argument("--weight-decay", type=float, default=0.0)
        p.add_argument("--transform-lr-scale", type=float, default=1.0)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        _add_dataset_flags(p)
        p.set_defaults(func=cmd_train if name == "train" else cmd_adapt)

    p = sub.add_parser("search", help="wiNAS per-layer algorithm search")
    p.add_argument("--space", default="wa", choices=["wa", "wa-q"])
    p.add_argument("--model", default="tiny-cnn",
                   choices=["micro-resnet", "tiny-cnn"])
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--in-ch", type=int, default=1)
    p.add_argument("--lambda2", type=float, required=True)
    p.add_argument("--lambda1", type=float, default=1e-4)
    p.add_argument("--table", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--final-epochs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate a checkpoint (optionally post-hoc swapped)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--swap-algo", default=None,
                   help="swap conv layers to this algorithm before eval (warmup only)")
    p.add_argument("--warmup", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_dataset_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-report", help="collate runs into a summary JSON")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--bench", default=None)
    p.add_argument("--check-error", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_report, seed=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_thread_cap(args.threads)

    from .data_io import FormatError
    from .numerics import ShapeError
    from .quantization import StateError
    from .latency_bench import TableLookupError
    from .transforms import ConfigurationError, ConstructionError
    from .winograd_conv import UnsupportedAlgoError

    t0 = time.perf_counter()
    try:
        outputs = args.func(args)
    except (ShapeError, ConfigurationError, ConstructionError, StateError,
            UnsupportedAlgoError, FormatError, TableLookupError, ValueError,
            FileNotFoundError) as exc:
        print(f"winoq: error: {exc}", file=sys.stderr)
        return DOMAIN_EXIT
    wall = time.perf_counter() - t0
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    for artifact in outputs:
        write_manifest(artifact, args.cmd, flags, getattr(args, "seed", None),
                       wall, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
