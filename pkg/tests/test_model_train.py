import json

import numpy as np
import pytest

from depthfuse.autodiff import CheckpointError, ShapeError, Tensor
from depthfuse.autodiff.gradcheck import gradcheck
from depthfuse.data import SceneDataset, generate_dataset
from depthfuse.losses import total_loss
from depthfuse.model import ModelConfig, build_model
from depthfuse.refine import RefinementSchedule, SparseDepth
from depthfuse.train import (
    TrainConfig,
    build_state,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

TINY = dict(stage_widths=(4, 8), input_size=(32, 32), schedule=RefinementSchedule((3,), 2))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(6, root, seed=7, split_ratios=(4, 1, 1), height=32, width=32)
    return SceneDataset.load(root, "train"), SceneDataset.load(root, "val")


def _inputs(data, n=2):
    return data.rgb[:n], data.sparse(slice(0, n))


# -- architecture ---------------------------------------------------------------

def test_parameter_count_is_deterministic():
    a = build_model(ModelConfig(**TINY))
    b = build_model(ModelConfig(**TINY))
    assert a.parameter_count() == b.parameter_count() > 0
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    other = build_model(ModelConfig(**TINY, seed=1))
    assert not np.array_equal(other.params["head.coarse.weight"].data, a.params["head.coarse.weight"].data)


def test_ablation_swaps_fusion_block():
    full = build_model(ModelConfig(**TINY))
    plain = build_model(ModelConfig(**TINY, use_cmfm=False))
    assert any(k.startswith("cmfm.") for k in full.params)
    assert not any(k.startswith("cmfm.") for k in plain.params)
    assert plain.params["fuse.stage1.weight"].shape == (8, 16, 1, 1)
    no_refine = build_model(ModelConfig(**TINY, use_refinement=False))
    assert not any(k.startswith("head.affinity") for k in no_refine.params)


def test_full_size_shape_contract():
    model = build_model(ModelConfig())
    rgb = np.random.default_rng(0).random((1, 3, 224, 224)).astype(np.float32)
    sparse = SparseDepth(np.full((1, 1, 224, 224), 0.8))
    out = model.forward(rgb, sparse, track=False)
    assert out.coarse.shape == out.refined.shape == (1, 1, 224, 224)
    assert out.alpha.shape == (1, 3, 224, 224) and out.beta.shape == (1, 3, 224, 224)
    assert set(out.affinities) == {3, 5, 7}


def test_forward_rejects_wrong_shapes(tiny_data):
    model = build_model(ModelConfig(**TINY))
    rgb, sparse = _inputs(tiny_data[0])
    with pytest.raises(ShapeError):
        model.forward(rgb[:, :, :16, :16], sparse)
    with pytest.raises(ShapeError):
        model.forward(rgb[:1], sparse)
    with pytest.raises(ValueError):
        ModelConfig(stage_widths=(8, 8))
    with pytest.raises(ValueError):
        ModelConfig(stage_widths=(4, 8), input_size=(30, 30))


def test_without_refinement_coarse_is_positive(tiny_data):
    model = build_model(ModelConfig(**TINY, use_refinement=False))
    out = model.forward(*_inputs(tiny_data[0]), track=False)
    assert out.refined is None and np.all(out.coarse.data > 0)


def test_saturated_confidence_reproduces_sensor(tiny_data):
    model = build_model(ModelConfig(**TINY))
    model.params["head.confidence.weight"].data[:] = 0
    model.params["head.confidence.bias"].data[:] = 50.0
    rgb, sparse = _inputs(tiny_data[0])
    out = model.forward(rgb, sparse, track=False)
    assert np.all(out.confidence.data == 1.0)
    got, want = out.refined.data[sparse.mask], sparse.depth[sparse.mask]
    assert np.abs(got - want).max() <= 1e-6 * want.max()


def test_end_to_end_gradient_in_float64(tiny_data):
    data = tiny_data[0]
    model = build_model(ModelConfig(**TINY))
    rgb, sparse = _inputs(data, 1)
    names = ["head.coarse.bias", "head.alpha.bias", "head.confidence.bias", "dec.full.bias",
             "cmfm.stage0.proj_rgb.bias"]
    fixed = {k: Tensor(p.data, dtype=np.float64) for k, p in model.params.items()}

    def fn(*tensors):
        weights = dict(fixed, **dict(zip(names, tensors)))
        out = model.forward(rgb, sparse, weights=weights)
        return total_loss(out.coarse, out.refined, data.gt[:1], data.intrinsics).total

    assert gradcheck(fn, [model.params[n].data.astype(np.float64) for n in names], step=1e-3) < 1e-2


# -- training -------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters(tiny_data):
    state = build_state(ModelConfig(**TINY))
    before = {k: v.copy() for k, v in state.model.state_arrays().items()}
    train(state, *tiny_data, epochs=1, lr=0.0, batch=2)
    assert all(np.array_equal(before[k], v) for k, v in state.model.state_arrays().items())
    assert state.epoch == 1 and len(state.history) == 2


def test_identical_seeds_give_identical_loss_traces(tiny_data):
    traces = []
    for _ in range(2):
        trace = []
        state = build_state(ModelConfig(**TINY))
        train(state, *tiny_data, epochs=1, lr=1e-3, batch=2,
              on_batch=lambda e, b, losses: trace.append(float(losses.total.data)))
        traces.append((trace, state.model.state_arrays()))
    assert traces[0][0] == traces[1][0] and len(traces[0][0]) == 2
    assert all(np.array_equal(traces[0][1][k], traces[1][1][k]) for k in traces[0][1])


def test_training_reduces_loss_and_tracks_best(tiny_data, tmp_path):
    state = build_state(ModelConfig(**TINY))
    trace = []
    train(state, *tiny_data, epochs=3, lr=3e-3, batch=2, out_dir=tmp_path,
          on_batch=lambda e, b, losses: trace.append(float(losses.total.data)))
    assert trace[-1] < trace[0]
    assert state.best_val_rmse == min(row["val_rmse"] for row in state.history)
    assert {p.name for p in tmp_path.iterdir()} == {"best.ckpt", "last.ckpt", "history.csv"}
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,train_loss") and len(lines) == 5


def test_checkpoint_round_trip_is_byte_exact(tiny_data, tmp_path):
    state = build_state(ModelConfig(**TINY))
    train(state, *tiny_data, epochs=1, lr=1e-3, batch=2)
    save_checkpoint(state, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    rgb, sparse = _inputs(tiny_data[1], 1)
    a = state.model.forward(rgb, sparse, track=False)
    b = loaded.model.forward(rgb, sparse, track=False)
    assert np.array_equal(a.refined.data, b.refined.data) and np.array_equal(a.coarse.data, b.coarse.data)
    assert loaded.epoch == 1 and loaded.config.to_dict() == state.config.to_dict()


def test_tampered_checkpoints_are_rejected(tiny_data, tmp_path):
    state = build_state(ModelConfig(**TINY))
    path = save_checkpoint(state, tmp_path / "a.ckpt")
    payload = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(payload[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"X" + payload[1:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")
    with pytest.raises(ShapeError):
        load_checkpoint(path, ModelConfig(**dict(TINY, stage_widths=(4, 16))))


def test_evaluate_oracle_and_improved_fraction(tiny_data):
    model = build_model(ModelConfig(**TINY))
    oracle = evaluate(model, tiny_data[1], oracle=True)
    assert oracle.summary.rmse == 0.0 and oracle.summary.delta_105 == 100.0
    assert oracle.improved_fraction() == 1.0
    real = evaluate(model, tiny_data[1])
    assert real.summary.rmse > 0 and len(real.coarse) == len(tiny_data[1])


def test_train_config_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"epochs": 3, "kernels": [3, 5], "use_cmfm": False}))
    cfg = TrainConfig.from_file(path, lr=0.01, epochs=None)
    assert cfg.epochs == 3 and cfg.lr == 0.01 and cfg.kernels == (3, 5) and not cfg.use_cmfm
    assert cfg.model_config((32, 32)).schedule.snapshots == (0, 3, 6)
    path.write_text(json.dumps({"epoch": 3}))
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_file(path)
    path.write_text("{not json")
    with pytest.raises(ValueError):
        TrainConfig.from_file(path)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
