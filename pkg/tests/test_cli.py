import csv
import io
import json
import subprocess
import sys

import pytest

from depthfuse.cli import build_parser, main

SUBCOMMANDS = {
    "synth-gen": ["--out", "--count", "--seed", "--split", "--size"],
    "train": ["--data", "--out", "--config", "--epochs", "--lr", "--batch", "--weight-decay", "--seed",
              "--kernels", "--steps", "--no-cmfm", "--no-refine", "--threads"],
    "infer": ["--ckpt", "--rgb", "--depth", "--gt", "--out", "--threads"],
    "eval": ["--ckpt", "--data", "--split", "--report", "--batch", "--oracle", "--threads"],
    "gradcheck": ["--seed", "--only"],
    "bench": ["--size", "--kernels", "--steps", "--threads", "--repeats", "--seed", "--report"],
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus a one-epoch checkpoint, built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-gen", "--out", str(root / "data"), "--count", "6", "--size", "32",
                 "--split", "4,1,1", "--seed", "3"]) == 0
    (root / "cfg.json").write_text(json.dumps({"stage_widths": [4, 8], "kernels": [3], "total_steps": 2}))
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config",
                 str(root / "cfg.json"), "--epochs", "1", "--batch", "2", "--lr", "1e-3", "--threads", "1"]) == 0
    return root


@pytest.mark.parametrize("name", sorted(SUBCOMMANDS))
def test_help_lists_every_flag(capsys, name):
    code, out, _ = run(capsys, name, "--help")
    assert code == 0
    for flag in SUBCOMMANDS[name]:
        assert flag in out


def test_parser_has_exactly_the_documented_subcommands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == set(SUBCOMMANDS)


def test_usage_errors_exit_one(capsys):
    assert run(capsys, "no-such-command")[0] == 1
    assert run(capsys, "train", "--data", "x")[0] == 1  # missing --out
    assert run(capsys, "bench", "--size", "axb")[0] == 1
    assert run(capsys, "gradcheck", "--only", "no_such_op")[0] == 1


def test_runtime_errors_exit_two(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--ckpt", tmp_path / "missing.ckpt", "--data", tmp_path,
                       "--report", tmp_path / "r.json")
    assert code == 2 and "not found" in err
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    code, _, err = run(capsys, "infer", "--ckpt", tmp_path / "bad.ckpt", "--rgb", tmp_path / "bad.ckpt",
                       "--depth", tmp_path / "bad.ckpt", "--out", tmp_path / "o")
    assert code == 2 and "error" in err


def test_version_flag(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and out.startswith("depthfuse")


def test_synth_gen_prints_split_sizes(capsys, tmp_path):
    code, out, _ = run(capsys, "synth-gen", "--out", tmp_path / "d", "--count", "10", "--size", "16",
                       "--split", "0.6,0.2,0.2")
    assert code == 0
    (row,) = rows(out)
    assert (row["train"], row["val"], row["test"]) == ("6", "2", "2")


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "history.csv", "curves.png", "train_config.json"):
        assert (run_dir / name).exists()
    config = json.loads((run_dir / "train_config.json").read_text())
    assert config["stage_widths"] == [4, 8] and config["epochs"] == 1


def test_zero_epochs_checkpoint_matches_initialization(capsys, workspace, tmp_path):
    from depthfuse.train import TrainConfig, build_state, load_checkpoint
    code, out, _ = run(capsys, "train", "--data", workspace / "data", "--out", tmp_path / "r0",
                       "--config", workspace / "cfg.json", "--epochs", "0", "--threads", "1")
    assert code == 0 and len(rows(out)) == 1
    loaded = load_checkpoint(tmp_path / "r0" / "last.ckpt")
    fresh = build_state(TrainConfig.from_file(workspace / "cfg.json").model_config((32, 32)))
    assert all((loaded.model.params[k].data == p.data).all() for k, p in fresh.model.params.items())
    code, out, _ = run(capsys, "eval", "--ckpt", tmp_path / "r0" / "last.ckpt", "--data", workspace / "data",
                       "--report", tmp_path / "r0.json")
    assert code == 0 and json.loads((tmp_path / "r0.json").read_text())["checkpoint_epoch"] == 0


def test_oracle_eval_is_perfect(capsys, workspace, tmp_path):
    code, out, _ = run(capsys, "eval", "--ckpt", workspace / "run" / "best.ckpt", "--data", workspace / "data",
                       "--split", "val", "--report", tmp_path / "oracle.json", "--oracle")
    assert code == 0
    report = json.loads((tmp_path / "oracle.json").read_text())
    assert report["rmse"] == report["rel"] == report["mae"] == 0.0
    assert report["delta_105"] == report["delta_125"] == 100.0
    metrics = {r["metric"]: r["value"] for r in rows(out)}
    assert metrics["rmse"] == "0" and metrics["frames"] == "1"
    assert (tmp_path / "oracle.frames.csv").exists() and (tmp_path / "oracle.png").exists()


def test_identical_flags_give_identical_artifacts(capsys, workspace, tmp_path):
    data = workspace / "data"
    for tag in ("a", "b"):
        code, _, _ = run(capsys, "train", "--data", data, "--out", tmp_path / tag, "--config",
                         workspace / "cfg.json", "--epochs", "1", "--batch", "2", "--lr", "1e-3", "--threads", "1")
        assert code == 0
        code, _, _ = run(capsys, "eval", "--ckpt", tmp_path / tag / "last.ckpt", "--data", data,
                         "--report", tmp_path / f"{tag}.json", "--threads", "1")
        assert code == 0
    for name in ("a/best.ckpt", "a/last.ckpt", "a/train_config.json", "a.json", "a.frames.csv", "a.png"):
        other = name.replace("a", "b", 1)
        assert (tmp_path / name).read_bytes() == (tmp_path / other).read_bytes(), name
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (workspace / "run" / "last.ckpt").read_bytes()


def test_infer_writes_depth_and_figure(capsys, workspace, tmp_path):
    from depthfuse.data import read_depth_png16, read_manifest
    record = read_manifest(workspace / "data")[0]
    data = workspace / "data"
    code, out, _ = run(capsys, "infer", "--ckpt", workspace / "run" / "best.ckpt", "--rgb", data / record.rgb,
                       "--depth", data / record.raw_depth, "--gt", data / record.gt_depth, "--out", tmp_path)
    assert code == 0
    table = {r["output"]: r for r in rows(out)}
    assert set(table) == {"coarse", "refined", "comparison"}
    assert float(table["refined"]["rmse"]) >= 0
    assert read_depth_png16(tmp_path / "refined.png").shape == (32, 32)
    assert (tmp_path / "comparison.png").stat().st_size > 0


def test_infer_rejects_size_mismatch(capsys, workspace, tmp_path):
    from depthfuse.data import write_depth_png16, write_rgb_png
    import numpy as np
    write_rgb_png(tmp_path / "rgb.png", np.zeros((16, 16, 3)))
    write_depth_png16(tmp_path / "d.png", np.ones((16, 16)))
    code, _, err = run(capsys, "infer", "--ckpt", workspace / "run" / "best.ckpt", "--rgb", tmp_path / "rgb.png",
                       "--depth", tmp_path / "d.png", "--out", tmp_path / "o")
    assert code == 2 and "expects" in err


def test_gradcheck_subset_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--only", "add", "conv2d", "softmax_channel")
    assert code == 0
    assert [r["status"] for r in rows(out)] == ["PASS"] * 3


def test_bench_reports_speedup_and_drift(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--size", "24", "--threads", "1,2", "--repeats", "1",
                       "--report", tmp_path / "bench.json")
    assert code == 0
    table = rows(out)
    assert [r["threads"] for r in table] == ["1", "2"] and float(table[1]["max_abs_diff"]) <= 1e-6
    assert (tmp_path / "bench.png").exists()


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "depthfuse.cli", "gradcheck", "--help"],
                         capture_output=True, text=True, check=True)
    assert "--only" in out.stdout
