"""Command-line entry point: ``depthfuse <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, but not for flags whose default means "not given"."""

    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS or isinstance(action.default, bool):
            return action.help
        return super()._get_help_string(action)


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _size(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    return dims


def _need(path, what: str = "file") -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _threads(value) -> int:
    from .refine.bench import logical_cores
    return logical_cores() if value is None else value


def _write_rows(rows: list, fieldnames, stream=None) -> None:
    writer = csv.DictWriter(stream or sys.stdout, fieldnames=fieldnames, lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)


def _fmt(value):
    return "" if value is None else (f"{value:.6g}" if isinstance(value, float) else value)


# -- subcommands -------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    from .data import generate_dataset
    from .data.dataset import read_splits
    h, w = args.size
    manifest = generate_dataset(args.count, args.out, seed=args.seed, split_ratios=args.split,
                                height=h, width=w)
    splits = read_splits(manifest)
    _write_rows([{"manifest": str(manifest), **{k: len(v) for k, v in splits.items()}}],
                ["manifest", "train", "val", "test"])
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import SceneDataset
    from .plotting import training_curves
    from .refine import PropagationEngine
    from .train import HISTORY_FIELDS, TrainConfig, build_state, train

    overrides = dict(epochs=args.epochs, lr=args.lr, batch=args.batch, weight_decay=args.weight_decay,
                     seed=args.seed, use_cmfm=False if args.no_cmfm else None,
                     use_refinement=False if args.no_refine else None,
                     kernels=args.kernels, total_steps=args.steps)
    if args.config is not None:
        config = TrainConfig.from_file(_need(args.config, "config file"), **overrides)
    else:
        config = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    data = _need(args.data, "dataset")
    train_set = SceneDataset.load(data, "train")
    val_set = SceneDataset.load(data, "val")
    state = build_state(config.model_config(train_set.image_size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(
        {k: list(v) if isinstance(v, tuple) else v for k, v in vars(config).items()}, indent=1, sort_keys=True)
        + "\n")
    with PropagationEngine(threads=_threads(args.threads)) as engine:
        train(state, train_set, val_set, config.epochs, lr=config.lr, batch=config.batch,
              weight_decay=config.weight_decay, out_dir=out, engine=engine)
    training_curves(out / "curves.png", state.history)
    _write_rows([{k: _fmt(row.get(k)) for k in HISTORY_FIELDS} for row in state.history], HISTORY_FIELDS)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .data.codecs import MAX_DEPTH_M, read_depth_png16, read_rgb_png, write_depth_png16
    from .metrics import compute_metrics, evaluation_mask
    from .plotting import comparison_figure
    from .refine import PropagationEngine, SparseDepth
    from .train import load_checkpoint

    state = load_checkpoint(_need(args.ckpt, "checkpoint"))
    rgb = read_rgb_png(_need(args.rgb, "rgb image"))
    raw = read_depth_png16(_need(args.depth, "depth image"))
    gt = read_depth_png16(_need(args.gt, "ground-truth image")) if args.gt else None
    if rgb.shape[:2] != raw.shape:
        raise ValueError(f"rgb {rgb.shape[:2]} and depth {raw.shape} sizes differ")
    if raw.shape != state.config.input_size:
        raise ValueError(f"images are {raw.shape}, checkpoint expects {state.config.input_size}")
    sparse = SparseDepth(raw[None, None])
    with PropagationEngine(threads=_threads(args.threads)) as engine:
        out = state.model.forward(rgb.transpose(2, 0, 1)[None], sparse, track=False, engine=engine)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    coarse = out.coarse.data[0, 0]
    refined = None if out.refined is None else out.refined.data[0, 0]
    rows = []
    for name, pred in (("coarse", coarse), ("refined", refined)):
        if pred is None:
            continue
        # non-positive predictions cannot be stored as depth; they become holes
        clipped = int(np.sum((pred <= 0) | (pred > MAX_DEPTH_M)))
        write_depth_png16(dest / f"{name}.png", np.clip(pred, 0.0, MAX_DEPTH_M))
        rows.append({"output": name, "path": str(dest / f"{name}.png"), "clipped_pixels": clipped})
    comparison_figure(dest / "comparison.png", rgb, raw, coarse, refined, gt)
    rows.append({"output": "comparison", "path": str(dest / "comparison.png")})
    if gt is not None:
        mask = evaluation_mask(gt)
        for row in rows[:len(rows) - 1]:
            pred = coarse if row["output"] == "coarse" else refined
            row["rmse"] = _fmt(compute_metrics(pred, gt, mask).rmse)
    _write_rows(rows, ["output", "path", "rmse", "clipped_pixels"])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import SceneDataset
    from .metrics import METRIC_KEYS
    from .plotting import frame_scatter
    from .refine import PropagationEngine
    from .train import evaluate, load_checkpoint

    state = load_checkpoint(_need(args.ckpt, "checkpoint"))
    dataset = SceneDataset.load(_need(args.data, "dataset"), args.split)
    with PropagationEngine(threads=_threads(args.threads)) as engine:
        result = evaluate(state.model, dataset, batch=args.batch, oracle=args.oracle, engine=engine)
    report = {"split": args.split, "frames": len(dataset), "oracle": bool(args.oracle),
              "checkpoint_epoch": state.epoch, "status": result.summary.status}
    report.update({k: getattr(result.summary, k) for k in METRIC_KEYS}, pixel_count=result.summary.pixel_count)
    report.update({f"coarse_{k}": getattr(result.coarse_summary, k) for k in METRIC_KEYS})
    if result.refined_summary is not None:
        report.update({f"refined_{k}": getattr(result.refined_summary, k) for k in METRIC_KEYS})
        report["refined_not_worse_fraction"] = result.improved_fraction()

    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    frame_fields = ["id", "coarse_rmse", "refined_rmse", "coarse_mae", "refined_mae", "pixel_count"]
    with path.with_suffix(".frames.csv").open("w", newline="") as fh:
        rows = []
        for i, fid in enumerate(result.ids):
            c, r = result.coarse[i], result.refined[i]
            rows.append({"id": fid, "coarse_rmse": _fmt(c.rmse), "coarse_mae": _fmt(c.mae),
                         "refined_rmse": _fmt(r.rmse) if r else "", "refined_mae": _fmt(r.mae) if r else "",
                         "pixel_count": c.pixel_count})
        _write_rows(rows, frame_fields, fh)
    refined_rmse = None if result.refined_summary is None else [r.rmse if r.valid else np.nan
                                                                for r in result.refined]
    frame_scatter(path.with_suffix(".png"), [c.rmse if c.valid else np.nan for c in result.coarse], refined_rmse)
    _write_rows([{"metric": k, "value": _fmt(v)} for k, v in sorted(report.items())], ["metric", "value"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .autodiff import set_check_finite
    from .gradsuite import run_suite
    set_check_finite(True)
    results = run_suite(seed=args.seed, only=args.only)
    if args.only and not results:
        raise UsageError(f"no gradient case named {args.only}")
    _write_rows([{"name": r.name, "kind": r.kind, "max_rel_error": f"{r.error:.3e}",
                  "tolerance": f"{r.tolerance:.0e}", "status": "PASS" if r.passed else "FAIL",
                  "seconds": f"{r.seconds:.2f}"} for r in results],
                ["name", "kind", "max_rel_error", "tolerance", "status", "seconds"])
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_bench(args) -> int:
    from .plotting import bar_summary
    from .refine import RefinementSchedule, bench_refine
    h, w = args.size
    schedule = RefinementSchedule(kernels=args.kernels, total_steps=args.steps)
    threads = args.threads or (1, _threads(None))
    reports = [bench_refine(h, w, schedule, threads=t, seed=args.seed, repeats=args.repeats)
               for t in dict.fromkeys(threads)]
    base = reports[0]
    rows = []
    for r in reports:
        drift = float(np.max(np.abs(r.output - base.output)))
        rows.append({"threads": r.threads, "seconds": f"{r.wall_seconds:.4f}",
                     "mpix_per_s": f"{r.pixels_per_second / 1e6:.4f}",
                     "speedup": f"{base.wall_seconds / r.wall_seconds:.3f}", "max_abs_diff": f"{drift:.3e}"})
    _write_rows(rows, ["threads", "seconds", "mpix_per_s", "speedup", "max_abs_diff"])
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"runs": [r.to_dict() for r in reports], "rows": rows},
                                   indent=1, sort_keys=True) + "\n")
        bar_summary(path.with_suffix(".png"), {f"{r.threads}t": r.wall_seconds for r in reports},
                    ylabel="wall time [s]")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthfuse", description="Depth completion toolkit for RGB-D scenes.",
                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity on stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        p.set_defaults(func=func)
        return p

    def threads_flag(p):
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for the propagation engine (default: logical cores)")

    p = add("synth-gen", cmd_synth_gen, "Generate a synthetic RGB-D dataset with manifest and splits.")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=400, help="number of scenes")
    p.add_argument("--seed", type=int, default=42, help="master seed")
    p.add_argument("--split", type=_float_list, default="0.8,0.1,0.1",
                   help="train,val,test ratios")
    p.add_argument("--size", type=_size, default="64x64", help="image size as N or HxW")

    p = add("train", cmd_train, "Train a model; writes best.ckpt, last.ckpt, history.csv and curves.png.")
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--config", default=None,
                   help="JSON file of training settings; explicit flags override it")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: 30)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: 1e-4)")
    p.add_argument("--batch", type=int, default=None, help="minibatch size (default: 4)")
    p.add_argument("--weight-decay", type=float, default=None, help="decoupled weight decay (default: 0)")
    p.add_argument("--seed", type=int, default=None, help="initialization and shuffling seed (default: 0)")
    p.add_argument("--kernels", type=_int_list, default=None,
                   help="propagation kernel sizes, comma-separated (default: 3,5,7)")
    p.add_argument("--steps", type=int, default=None, help="propagation steps (default: 6)")
    p.add_argument("--no-cmfm", action="store_true",
                   help="replace cross-modal fusion with concat + 1x1 conv (default: off)")
    p.add_argument("--no-refine", action="store_true",
                   help="drop the propagation refinement stage (default: off)")
    threads_flag(p)

    p = add("infer", cmd_infer, "Predict depth for one RGB + raw depth pair.")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--rgb", required=True, help="8-bit RGB PNG")
    p.add_argument("--depth", required=True, help="16-bit millimeter raw depth PNG (0 = hole)")
    p.add_argument("--gt", default=None, help="optional 16-bit ground-truth depth PNG (default: none)")
    p.add_argument("--out", required=True, help="output directory for depth PNGs and comparison.png")
    threads_flag(p)

    p = add("eval", cmd_eval, "Score a checkpoint on a dataset split.")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--data", required=True, help="dataset directory or manifest file")
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="split to score")
    p.add_argument("--report", required=True,
                   help="JSON report path; per-frame CSV and a figure are written next to it")
    p.add_argument("--batch", type=int, default=8, help="inference batch size")
    p.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself (default: off)")
    threads_flag(p)

    p = add("gradcheck", cmd_gradcheck, "Run the finite-difference gradient suite; exit 0 iff all pass.")
    p.add_argument("--seed", type=int, default=0, help="seed for suite inputs")
    p.add_argument("--only", nargs="+", default=None, metavar="NAME",
                   help="run only the named cases (default: all)")

    p = add("bench", cmd_bench, "Time the propagation engine across thread counts.")
    p.add_argument("--size", type=_size, default="224x224", help="image size as N or HxW")
    p.add_argument("--kernels", type=_int_list, default="3,5,7", help="kernel sizes, comma-separated")
    p.add_argument("--steps", type=int, default=6, help="propagation steps")
    p.add_argument("--threads", type=_int_list, default=None,
                   help="thread counts to compare; the first is the speedup baseline (default: 1,<logical cores>)")
    p.add_argument("--repeats", type=int, default=3, help="timed repeats; best is reported")
    p.add_argument("--seed", type=int, default=0, help="seed for random inputs")
    p.add_argument("--report", default=None, help="optional JSON report path; a PNG is written next to it")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version, usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"depthfuse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"depthfuse: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"depthfuse: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
