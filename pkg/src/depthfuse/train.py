"""Training loop, evaluation and resumable checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import ShapeError, adam_step, backward, load_tensors, save_tensors, zero_grad
from .autodiff.checkpoint import CheckpointError
from .data.dataset import SceneDataset
from .losses import LossConfig, total_loss
from .metrics import MetricReport, compute_metrics, evaluation_mask, mean_report
from .model import DepthCompletionModel, ModelConfig, ModelOutputs, build_model
from .refine import PropagationEngine, RefinementSchedule

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "depthfuse-train-state"
HISTORY_FIELDS = ("epoch", "train_loss", "coarse_loss", "refined_loss", "val_rmse", "val_coarse_rmse",
                  "seconds")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    """Everything a training run needs besides the data; loadable from JSON."""

    epochs: int = 30
    lr: float = 1e-4
    batch: int = 4
    weight_decay: float = 0.0
    seed: int = 0
    stage_widths: tuple = (16, 32, 64, 128)
    use_cmfm: bool = True
    use_refinement: bool = True
    kernels: tuple = (3, 5, 7)
    total_steps: int = 6

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")

    def model_config(self, input_size) -> ModelConfig:
        return ModelConfig(stage_widths=self.stage_widths, input_size=tuple(input_size),
                           use_cmfm=self.use_cmfm, use_refinement=self.use_refinement,
                           schedule=RefinementSchedule(self.kernels, self.total_steps), seed=self.seed)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read a JSON object of field values; non-None ``overrides`` win."""
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ValueError(f"{path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainState:
    model: DepthCompletionModel
    epoch: int = 0
    seed: int = 0
    best_val_rmse: Optional[float] = None
    best_epoch: Optional[int] = None
    history: list = field(default_factory=list)
    best_arrays: Optional[dict] = None

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def build_state(config: ModelConfig) -> TrainState:
    return TrainState(model=build_model(config), seed=config.seed)


def forward(state: TrainState, rgb, sparse, engine=None) -> ModelOutputs:
    return state.model.forward(rgb, sparse, engine=engine)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    ids: list
    coarse: list            # MetricReport per frame
    refined: list           # MetricReport per frame, or None entries without refinement
    coarse_summary: MetricReport
    refined_summary: Optional[MetricReport]

    @property
    def summary(self) -> MetricReport:
        """Metrics of the model's final output."""
        return self.refined_summary if self.refined_summary is not None else self.coarse_summary

    def improved_fraction(self) -> Optional[float]:
        """Share of frames where refinement did not raise RMSE."""
        pairs = [(c.rmse, r.rmse) for c, r in zip(self.coarse, self.refined)
                 if r is not None and c.valid and r.valid]
        if not pairs:
            return None
        return float(np.mean([r <= c for c, r in pairs]))


def predict_batches(model: DepthCompletionModel, dataset: SceneDataset, batch: int = 8, engine=None):
    """Yield (index slice, coarse, refined|None) arrays over the dataset in order."""
    for start in range(0, len(dataset), batch):
        sl = slice(start, min(start + batch, len(dataset)))
        out = model.forward(dataset.rgb[sl], dataset.sparse(sl), track=False, engine=engine)
        yield sl, out.coarse.data, None if out.refined is None else out.refined.data


def evaluate(model: DepthCompletionModel, dataset: SceneDataset, batch: int = 8, oracle: bool = False,
             engine=None, valid_range=LossConfig().valid_range) -> EvalResult:
    """Per-frame and mean metrics. ``oracle`` scores the ground truth against itself."""
    coarse, refined = [], []
    has_refined = model.config.use_refinement
    if oracle:
        batches = ((slice(i, i + 1), dataset.gt[i:i + 1], dataset.gt[i:i + 1]) for i in range(len(dataset)))
    else:
        batches = predict_batches(model, dataset, batch, engine)
    for sl, c, r in batches:
        gt = dataset.gt[sl]
        for j in range(gt.shape[0]):
            mask = evaluation_mask(gt[j], valid_range)
            coarse.append(compute_metrics(c[j], gt[j], mask))
            refined.append(compute_metrics(r[j], gt[j], mask) if has_refined else None)
    return EvalResult(ids=list(dataset.ids), coarse=coarse, refined=refined,
                      coarse_summary=mean_report(coarse),
                      refined_summary=mean_report(refined) if has_refined else None)


# -- checkpoints -------------------------------------------------------------

def _meta(state: TrainState) -> dict:
    return {
        "kind": CHECKPOINT_KIND,
        "model_config": state.config.to_dict(),
        "epoch": state.epoch,
        "seed": state.seed,
        "best_val_rmse": state.best_val_rmse,
        "best_epoch": state.best_epoch,
        "steps": {name: p.step for name, p in state.model.params.items()},
    }


def save_checkpoint(state: TrainState, path, arrays: Optional[dict] = None) -> Path:
    """Write parameters and Adam moments. ``arrays`` overrides the parameter values."""
    params = state.model.params
    arrays = arrays if arrays is not None else state.model.state_arrays()
    tensors = dict(arrays)
    for name, p in params.items():
        tensors[f"adam.m/{name}"] = p.exp_avg
        tensors[f"adam.v/{name}"] = p.exp_avg_sq
    return save_tensors(path, tensors, _meta(state))


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> TrainState:
    """Rebuild a TrainState. Passing ``config`` checks the file against it."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    stored = ModelConfig.from_dict(meta["model_config"])
    model = build_model(config if config is not None else stored)
    model.load_arrays({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    steps = meta.get("steps", {})
    for name, p in model.params.items():
        m, v = tensors.get(f"adam.m/{name}"), tensors.get(f"adam.v/{name}")
        if m is None or v is None or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{path}: optimizer state for {name} missing or misshapen")
        p.exp_avg, p.exp_avg_sq = m.copy(), v.copy()
        p.step = int(steps.get(name, 0))
    return TrainState(model=model, epoch=int(meta["epoch"]), seed=int(meta["seed"]),
                      best_val_rmse=meta.get("best_val_rmse"), best_epoch=meta.get("best_epoch"))


# -- training ----------------------------------------------------------------

def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def _write_history(path: Path, history: list) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in HISTORY_FIELDS})


def _validate(state: TrainState, val_set: SceneDataset, engine) -> tuple[float, float]:
    result = evaluate(state.model, val_set, engine=engine)
    return result.summary.rmse, result.coarse_summary.rmse


def _track_best(state: TrainState, val_rmse: float, out: Optional[Path]) -> None:
    if state.best_val_rmse is None or val_rmse < state.best_val_rmse:
        state.best_val_rmse = float(val_rmse)
        state.best_epoch = state.epoch
        state.best_arrays = {k: v.copy() for k, v in state.model.state_arrays().items()}
        if out is not None:
            save_checkpoint(state, out / "best.ckpt")


def train(state: TrainState, train_set: SceneDataset, val_set: SceneDataset, epochs: int,
          lr: float = 1e-4, batch: int = 4, loss_config: LossConfig | None = None,
          weight_decay: float = 0.0, out_dir=None, engine: PropagationEngine | None = None,
          on_batch: Callable | None = None) -> TrainState:
    """Run ``epochs`` epochs of AdamW on shuffled minibatches.

    Validation RMSE is measured before the first epoch and after each one;
    the best parameters are kept in ``state.best_arrays`` and, when
    ``out_dir`` is given, in ``best.ckpt`` next to ``last.ckpt`` and
    ``history.csv``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    model = state.model
    if train_set.image_size != model.config.input_size:
        raise ShapeError(f"data is {train_set.image_size}, model expects {model.config.input_size}")
    loss_config = loss_config or LossConfig()
    intrinsics = train_set.intrinsics
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()

    if not state.history:
        t0 = time.perf_counter()
        val_rmse, val_coarse = _validate(state, val_set, engine)
        state.history.append({"epoch": state.epoch, "val_rmse": val_rmse, "val_coarse_rmse": val_coarse,
                              "seconds": round(time.perf_counter() - t0, 3)})
        _track_best(state, val_rmse, out)
        log.info("epoch %d  val rmse %.4f (coarse %.4f)", state.epoch, val_rmse, val_coarse)

    for _ in range(epochs):
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        order = epoch_order(state.seed, epoch, len(train_set))
        sums = np.zeros(3)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), batch)):
            idx = np.sort(order[start:start + batch])
            outputs = model.forward(train_set.rgb[idx], train_set.sparse(idx), engine=engine)
            losses = total_loss(outputs.coarse, outputs.refined, train_set.gt[idx], intrinsics, loss_config)
            value = float(losses.total.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            zero_grad(params)
            backward(losses.total)
            adam_step(params, lr, weight_decay=weight_decay)
            sums += (value, losses.coarse_total, losses.refined_total)
            n_batches += 1
            if on_batch is not None:
                on_batch(epoch, b, losses)
        zero_grad(params)
        state.epoch = epoch
        val_rmse, val_coarse = _validate(state, val_set, engine)
        means = sums / max(n_batches, 1)
        row = {"epoch": epoch, "train_loss": float(means[0]), "coarse_loss": float(means[1]),
               "refined_loss": float(means[2]), "val_rmse": val_rmse, "val_coarse_rmse": val_coarse,
               "seconds": round(time.perf_counter() - t0, 3)}
        state.history.append(row)
        _track_best(state, val_rmse, out)
        log.info("epoch %d  loss %.4f  val rmse %.4f (coarse %.4f)  %.1fs", epoch, means[0], val_rmse,
                 val_coarse, row["seconds"])
        if out is not None:
            _write_history(out / "history.csv", state.history)

    if out is not None:
        save_checkpoint(state, out / "last.ckpt")
        _write_history(out / "history.csv", state.history)
    return state
