"""Seeded toy baseline: train the full model and its three ablations.

Writes ``baselines/toy_baseline.json`` with epoch-0 and trained held-out
RMSE, per-frame coarse/refined RMSE of the full model, the ablation grid,
checkpoint hashes and timings. The JSON is rewritten after every
configuration so partial runs remain inspectable.

    python3 scripts/run_baseline.py --runs /tmp/depthfuse-baseline
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from depthfuse import __version__
from depthfuse.data import SceneDataset, generate_dataset
from depthfuse.plotting import bar_summary, frame_scatter, training_curves
from depthfuse.refine import PropagationEngine
from depthfuse.train import TrainConfig, build_state, evaluate, train

CONFIGS = {
    "full": dict(use_cmfm=True, use_refinement=True),
    "no_cmfm": dict(use_cmfm=False, use_refinement=True),
    "no_refine": dict(use_cmfm=True, use_refinement=False),
    "no_both": dict(use_cmfm=False, use_refinement=False),
}
REPO = Path(__file__).resolve().parents[1]


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", default="/tmp/depthfuse-baseline", help="scratch directory for data and checkpoints")
    ap.add_argument("--out", default=str(REPO / "baselines" / "toy_baseline.json"), help="baseline JSON path")
    ap.add_argument("--count", type=int, default=400)
    ap.add_argument("--data-seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0, help="model/shuffle seed")
    ap.add_argument("--configs", nargs="+", default=list(CONFIGS), choices=list(CONFIGS))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    runs = Path(args.runs)
    data = runs / "data"
    t0 = time.perf_counter()
    manifest = generate_dataset(args.count, data, seed=args.data_seed, split_ratios=(0.8, 0.1, 0.1))
    gen_seconds = time.perf_counter() - t0
    train_set = SceneDataset.load(manifest, "train")
    val_set = SceneDataset.load(manifest, "val")
    test_set = SceneDataset.load(manifest, "test")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = {
        "package_version": __version__,
        "platform": {"python": sys.version.split()[0], "numpy": np.__version__, "machine": platform.machine()},
        "dataset": {"count": args.count, "seed": args.data_seed, "manifest_sha256": sha256(manifest),
                    "split_sizes": [len(train_set), len(val_set), len(test_set)],
                    "image_size": list(train_set.image_size), "generate_seconds": round(gen_seconds, 2)},
        "training": {"epochs": args.epochs, "lr": args.lr, "batch": args.batch, "seed": args.seed,
                     "threads": 1, "weight_decay": 0.0},
        "configs": {},
    }
    with PropagationEngine(threads=1) as engine:
        for name in args.configs:
            cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed, **CONFIGS[name])
            state = build_state(cfg.model_config(train_set.image_size))
            initial = evaluate(state.model, test_set, engine=engine)
            run_dir = runs / name
            t1 = time.perf_counter()
            train(state, train_set, val_set, cfg.epochs, lr=cfg.lr, batch=cfg.batch, out_dir=run_dir,
                  engine=engine)
            train_seconds = time.perf_counter() - t1
            state.model.load_arrays(state.best_arrays)
            final = evaluate(state.model, test_set, engine=engine)
            training_curves(run_dir / "curves.png", state.history)
            entry = {
                "parameters": state.model.parameter_count(),
                "epoch0_test_rmse": initial.summary.rmse,
                "epoch0_test_coarse_rmse": initial.coarse_summary.rmse,
                "test_rmse": final.summary.rmse,
                "test_coarse_rmse": final.coarse_summary.rmse,
                "test_metrics": {k: v for k, v in final.summary.to_dict().items() if k != "status"},
                "best_epoch": state.best_epoch,
                "best_val_rmse": state.best_val_rmse,
                "history": state.history,
                "train_seconds": round(train_seconds, 1),
                "best_ckpt_sha256": sha256(run_dir / "best.ckpt"),
                "last_ckpt_sha256": sha256(run_dir / "last.ckpt"),
            }
            if final.refined_summary is not None:
                entry["frame_ids"] = final.ids
                entry["frame_coarse_rmse"] = [r.rmse for r in final.coarse]
                entry["frame_refined_rmse"] = [r.rmse for r in final.refined]
                entry["refined_not_worse_fraction"] = final.improved_fraction()
                frame_scatter(run_dir / "frames.png", entry["frame_coarse_rmse"], entry["frame_refined_rmse"])
            result["configs"][name] = entry
            out.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
            logging.info("%s: test rmse %.4f (epoch 0: %.4f) in %.0fs", name, entry["test_rmse"],
                         entry["epoch0_test_rmse"], train_seconds)
    done = result["configs"]
    if len(done) > 1:
        bar_summary(runs / "ablation.png", {k: v["test_rmse"] for k, v in done.items()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
