"""Command-line entry point: synth, train, eval, check, ablate.

Exit codes: 0 success, 1 check or ablation failure, 2 usage / config /
data error, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import checks as checks_mod
from .config import (
    MODEL_KEYS,
    REQUIRED_KEYS,
    TRAIN_KEYS,
    RunConfig,
    load_run_config,
    parse_pairs,
    run_config_from_pairs,
)
from .data import SynthSpec, load_dataset, save_dataset, synth_dataset
from .errors import ConfigError, ContractError, NumericError, PointFileError
from .plotting import figure_path, plot_ablation, plot_class_iou, plot_loss_curves
from .train import evaluate, load_model, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_COLUMNS = ("backbone", "depth", "width", "k", "dilation", "stochastic", "final_loss", "oa", "miou")
# grid axes and the model keys they map onto
GRID_AXES = {
    "backbone": "backbone",
    "depth": "depth",
    "width": "width",
    "k": "k",
    "dilation": "dilation",
    "stochastic": "epsilon",
    "aggregator": "aggregator",
    "seed": None,
}


class UsageError(Exception):
    pass


def _keys_help():
    model = ", ".join(k.replace("_", "-") for k in MODEL_KEYS)
    trainer = ", ".join(k.replace("_", "-") for k in TRAIN_KEYS)
    required = ", ".join(REQUIRED_KEYS)
    return (
        "config keys (key = value, one per line, # comments; '-' and '_' are interchangeable):\n"
        f"  model:   {model}\n  trainer: {trainer}\n  required: {required}\n"
        "  booleans accept on/off, true/false, yes/no, 1/0"
    )


def worker_count():
    raw = os.environ.get("DGCN_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DGCN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DGCN_THREADS must be a positive integer, got {raw!r}")
    return n


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create directory {parent}: {exc.strerror}") from None


def _fmt(v):
    return "nan" if v != v else f"{v:.6f}"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    pairs = {}
    if args.spec:
        with open(args.spec) as fh:
            pairs = parse_pairs(fh.read(), args.spec)
    allowed = {"blocks", "points", "classes", "noise", "seed", "shape_mix", "primitives", "split"}
    unknown = sorted(set(pairs) - allowed)
    if unknown:
        raise ConfigError(f"unknown synth key(s): {', '.join(unknown)}")

    def pick(flag, key, conv, default):
        if flag is not None:
            return flag
        return conv(pairs[key]) if key in pairs else default

    def floats(text):
        return tuple(float(x) for x in text.replace(",", " ").split())

    def words(text):
        return tuple(text.replace(",", " ").split())

    try:
        spec = SynthSpec(
            num_blocks=pick(args.blocks, "blocks", int, 8),
            points_per_block=pick(args.points, "points", int, 512),
            num_classes=pick(args.classes, "classes", int, 4),
            shape_mix=pick(args.shape_mix and floats(args.shape_mix), "shape_mix", floats, None),
            noise_sigma=pick(args.noise, "noise", float, 0.004),
            seed=pick(args.seed, "seed", int, 0),
            primitives=pick(args.primitives and words(args.primitives), "primitives", words, None),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    split = args.split or pairs.get("split", "train")
    dataset = synth_dataset(spec, split)
    try:
        manifest = save_dataset(dataset, args.out, stem=args.stem or split)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc.strerror}") from None
    print(f"wrote {len(dataset)} blocks x {spec.points_per_block} points, {spec.num_classes} classes")
    print(f"manifest: {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval


def _train_settings(run, args):
    s = run.train
    return dict(
        epochs=args.epochs if args.epochs is not None else s.epochs,
        seed=args.seed if args.seed is not None else s.seed,
        batch_size=args.batch_size if args.batch_size is not None else s.batch_size,
        lr=s.lr,
        decay_steps=s.decay_steps,
        decay_factor=s.decay_factor,
    )


def cmd_train(args):
    run = load_run_config(args.config)
    dataset = load_dataset(args.data)
    cfg = run.model_config(num_classes=dataset.num_classes, aux_dim=dataset.blocks[0].aux_dim)
    if dataset.points_per_block < cfg.k + 1:
        raise ContractError(
            f"insufficient points: k={cfg.k} needs at least {cfg.k + 1} points per block, "
            f"data has {dataset.points_per_block}"
        )
    settings = _train_settings(run, args)
    _ensure_parent(args.out)
    log_path = args.log or figure_path(args.out, ".log.csv")
    _ensure_parent(log_path)

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:4d}  step {rec.step:6d}  lr {rec.lr:.3g}  loss {rec.loss:.6f}  train_oa {rec.train_oa:.4f}",
                  flush=True)

    result = train(cfg, dataset, log_path=log_path, checkpoint_path=args.out,
                   checkpoint_each_epoch=args.checkpoint_every_epoch, on_epoch=progress, **settings)
    fig = plot_loss_curves({f"{cfg.backbone}-{cfg.depth}": result.losses}, figure_path(log_path))
    final = result.final_loss if result.log else float("nan")
    print(f"final train loss: {_fmt(final)}")
    print(f"checkpoint: {args.out}\nlog: {log_path}\nfigure: {fig}")
    return EXIT_OK


def write_report(metrics, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for i, v in enumerate(metrics.per_class_iou):
            w.writerow([f"iou_class_{i}", repr(float(v))])
        w.writerow(["oa", repr(metrics.overall_accuracy)])
        w.writerow(["miou", repr(metrics.mean_iou)])


def cmd_eval(args):
    if not os.path.exists(args.ckpt):
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    model = load_model(args.ckpt)
    dataset = load_dataset(args.data)
    metrics, _ = evaluate(model, dataset, workers=worker_count())
    print(f"OA: {_fmt(metrics.overall_accuracy)}")
    for i, v in enumerate(metrics.per_class_iou):
        print(f"IoU class {i}: {_fmt(float(v))}")
    print(f"mIoU: {_fmt(metrics.mean_iou)}")
    if args.report:
        _ensure_parent(args.report)
        write_report(metrics, args.report)
        fig = plot_class_iou(metrics, figure_path(args.report))
        print(f"report: {args.report}\nfigure: {fig}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check


def cmd_check(args):
    status = EXIT_OK
    for name in args.which:
        res = checks_mod.run_check(name, seed=args.seed or 0)
        print(res.summary())
        for line in res.offenders:
            print(f"  offender: {line}")
        if not res.passed:
            status = EXIT_FAIL
    return status


# ---------------------------------------------------------------------------
# ablate


def _parse_axis_value(axis, raw):
    if axis in ("backbone", "aggregator"):
        return raw
    if axis in ("dilation", "stochastic"):
        v = raw.lower()
        if v in ("on", "true", "yes", "1"):
            return True
        if v in ("off", "false", "no", "0"):
            return False
        raise ConfigError(f"grid axis {axis}: expected on/off, got {raw!r}")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"grid axis {axis}: expected an integer, got {raw!r}") from None


def parse_grid(text, source="<grid>"):
    """Grid file: ``key = v1, v2, ...`` per line.

    Keys named in GRID_AXES become axes of the cartesian product; any other
    model/trainer key is a fixed setting shared by every cell.
    """
    pairs = parse_pairs(text, source)
    axes, fixed = {}, {}
    for key, value in pairs.items():
        vals = [v for v in value.replace(",", " ").split() if v]
        if key in GRID_AXES:
            if not vals:
                raise ConfigError(f"{source}: grid axis {key} has no values")
            axes[key] = [_parse_axis_value(key, v) for v in vals]
        else:
            fixed[key] = value
    run = run_config_from_pairs(fixed, required=())
    return axes, run


def grid_cells(axes):
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def _run_cell(cell, run, train_data, test_data, epochs_override):
    model_vals = dict(run.model)
    for axis, value in cell.items():
        key = GRID_AXES[axis]
        if key is None:
            continue
        if axis == "stochastic":
            value = model_vals.get("epsilon", 0.2) if value else 0.0
        model_vals[key] = value
    if cell.get("stochastic") is None and "epsilon" not in model_vals:
        model_vals.setdefault("epsilon", 0.2)
    row = {
        "backbone": model_vals.get("backbone", "residual"),
        "depth": model_vals.get("depth", 28),
        "width": model_vals.get("width", 64),
        "k": model_vals.get("k", 16),
        "dilation": "on" if model_vals.get("dilation", True) else "off",
        "stochastic": "on" if model_vals.get("epsilon", 0.2) > 0 else "off",
    }
    try:
        cfg = RunConfig(model_vals, run.train).model_config(
            num_classes=train_data.num_classes, aux_dim=train_data.blocks[0].aux_dim
        )
        s = run.train
        seed = cell.get("seed", s.seed)
        res = train(cfg, train_data, epochs_override if epochs_override is not None else s.epochs,
                    batch_size=s.batch_size, seed=seed, lr=s.lr, decay_steps=s.decay_steps,
                    decay_factor=s.decay_factor)
        metrics, _ = evaluate(res.model, test_data)
        row.update(final_loss=repr(res.final_loss), oa=repr(metrics.overall_accuracy), miou=repr(metrics.mean_iou))
        return row, None, res.losses
    except (ContractError, ConfigError, NumericError, ValueError) as exc:
        row.update(final_loss="failed", oa="failed", miou="failed")
        return row, f"{type(exc).__name__}: {exc}", []


def run_ablation(axes, run, train_data, test_data, epochs=None, workers=1):
    cells = grid_cells(axes)
    jobs = [(c, run, train_data, test_data, epochs) for c in cells]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        results = [_run_cell(*j) for j in jobs]
    return cells, results


def cmd_ablate(args):
    with open(args.grid) as fh:
        axes, run = parse_grid(fh.read(), args.grid)
    train_data = load_dataset(args.data)
    test_data = load_dataset(args.test_data) if args.test_data else train_data
    if test_data.num_classes != train_data.num_classes:
        raise ContractError("train and test manifests disagree on the class count")
    _ensure_parent(args.out)
    cells, results = run_ablation(axes, run, train_data, test_data, args.epochs, worker_count())
    failed = 0
    extra = [a for a in ("aggregator", "seed") if a in axes]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(ABLATION_COLUMNS) + extra)
        for cell, (row, err, _) in zip(cells, results):
            w.writerow([row[c] for c in ABLATION_COLUMNS] + [cell[a] for a in extra])
            desc = " ".join(f"{k}={v}" for k, v in cell.items())
            if err:
                failed += 1
                print(f"FAILED {desc}: {err}")
            else:
                print(f"{desc}: final_loss {float(row['final_loss']):.6f} oa {float(row['oa']):.4f} miou {float(row['miou']):.4f}")
    rows = [r for r, _, _ in results]
    plot_ablation(rows, figure_path(args.out))
    curves = {" ".join(f"{k}={v}" for k, v in c.items()): losses for c, (_, _, losses) in zip(cells, results) if losses}
    plot_loss_curves(curves, figure_path(args.out, ".loss.png"), title="ablation training loss")
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="deepgcn", description="Deep GCNs for point-cloud segmentation.",
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_keys_help())
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{synth,train,eval,check,ablate}")
    sub.required = True
    fmt = argparse.RawDescriptionHelpFormatter

    s = sub.add_parser("synth", help="write a synthetic labelled dataset", formatter_class=fmt,
                       epilog="spec file keys: blocks, points, classes, noise, seed, shape-mix, primitives, split")
    s.add_argument("--spec", help="key = value file with synth settings (flags override it)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--blocks", type=int)
    s.add_argument("--points", type=int, help="points per block")
    s.add_argument("--classes", type=int)
    s.add_argument("--noise", type=float, help="Gaussian jitter sigma")
    s.add_argument("--shape-mix", help="comma-separated class proportions")
    s.add_argument("--primitives", help="comma-separated primitive per class")
    s.add_argument("--split", choices=("train", "test"))
    s.add_argument("--stem", help="file name stem (default: the split)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt, epilog=_keys_help())
    t.add_argument("--config", required=True, help="key = value run config")
    t.add_argument("--data", required=True, help="dataset manifest")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")
    t.add_argument("--checkpoint-every-epoch", action="store_true")
    t.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset manifest")
    e.add_argument("--report", help="CSV report path (a PNG is written next to it)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run oracle self-checks")
    c.add_argument("which", nargs="+", choices=sorted(checks_mod.CHECKS))
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    a = sub.add_parser("ablate", help="train and evaluate a grid of configs", formatter_class=fmt,
                       epilog="grid axes: " + ", ".join(GRID_AXES) + "\n" + _keys_help())
    a.add_argument("--grid", required=True, help="grid file: axis = v1, v2 ... plus fixed keys")
    a.add_argument("--data", required=True, help="training manifest")
    a.add_argument("--test-data", help="held-out manifest for oa/miou (default: the training data)")
    a.add_argument("--out", required=True, help="CSV output")
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, PointFileError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_USAGE
    except PermissionError as exc:
        print(f"error: {exc.filename}: permission denied", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
