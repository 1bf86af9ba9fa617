"""Synthetic dataset generation, manifests, and in-memory loading.

A dataset directory holds ``manifest.jsonl`` (one JSON record per scene, file
paths relative to the manifest), ``splits.json`` and a ``scenes/`` folder of
PNGs. Moving the directory does not break it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..camera import CameraIntrinsics
from ..refine.structures import SparseDepth
from .codecs import (
    MAX_DEPTH_M,
    read_depth_png16,
    read_mask_png16,
    read_rgb_png,
    write_depth_png16,
    write_mask_png16,
    write_rgb_png,
)
from .corruption import CorruptionConfig, corrupt_depth
from .scene import random_scene, render_scene

MANIFEST_NAME = "manifest.jsonl"
SPLITS_NAME = "splits.json"
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class SceneRecord:
    id: str
    rgb: str
    raw_depth: str
    gt_depth: str
    mask: str
    fx: float
    fy: float
    cx: float
    cy: float
    seed: int

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    def to_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_line(cls, line: str) -> "SceneRecord":
        d = json.loads(line)
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def split_counts(count: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"split ratios must be three non-negative numbers, got {ratios}")
    total = float(sum(ratios))
    n_val = int(round(count * ratios[1] / total))
    n_test = int(round(count * ratios[2] / total))
    n_train = count - n_val - n_test
    if n_train < 0:
        raise ValueError(f"ratios {ratios} leave no room for training scenes")
    return n_train, n_val, n_test


def generate_scene(seed: int, height: int, width: int, corruption: CorruptionConfig | None = None):
    rng = np.random.default_rng(seed)
    spec = random_scene(rng, height, width)
    render = render_scene(spec)
    sparse = corrupt_depth(render.depth, render, seed=int(rng.integers(0, 2 ** 31)), config=corruption)
    return spec, render, sparse


def generate_dataset(count: int, out_dir, seed: int = 42, split_ratios=(0.8, 0.1, 0.1),
                     height: int = 64, width: int = 64,
                     corruption: CorruptionConfig | None = None) -> Path:
    """Write ``count`` scenes plus manifest and split files; returns the manifest path."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    try:
        (out / "scenes").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    records = []
    for i in range(count):
        s = scene_seed(seed, i)
        spec, render, sparse = generate_scene(s, height, width, corruption)
        sid = f"scene_{i:05d}"
        rel = {key: f"scenes/{sid}_{key}.png" for key in ("rgb", "raw", "gt", "mask")}
        write_rgb_png(out / rel["rgb"], render.rgb)
        write_depth_png16(out / rel["raw"], sparse.depth[0, 0])
        write_depth_png16(out / rel["gt"], np.minimum(render.depth, MAX_DEPTH_M))
        write_mask_png16(out / rel["mask"], render.material)
        k = spec.intrinsics
        records.append(SceneRecord(id=sid, rgb=rel["rgb"], raw_depth=rel["raw"], gt_depth=rel["gt"],
                                   mask=rel["mask"], fx=k.fx, fy=k.fy, cx=k.cx, cy=k.cy, seed=s))

    n_train, n_val, _ = split_counts(count, split_ratios)
    order = np.random.default_rng(seed).permutation(count)
    splits = {
        "train": sorted(records[i].id for i in order[:n_train]),
        "val": sorted(records[i].id for i in order[n_train:n_train + n_val]),
        "test": sorted(records[i].id for i in order[n_train + n_val:]),
    }
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(r.to_line() + "\n" for r in records))
    (out / SPLITS_NAME).write_text(json.dumps(splits, sort_keys=True, indent=1) + "\n")
    return manifest


def _manifest_path(path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def read_manifest(path) -> list[SceneRecord]:
    path = _manifest_path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return [SceneRecord.from_line(line) for line in path.read_text().splitlines() if line.strip()]


def read_splits(path) -> dict:
    split_file = _manifest_path(path).parent / SPLITS_NAME
    if not split_file.exists():
        raise FileNotFoundError(f"split file not found: {split_file}")
    return json.loads(split_file.read_text())


def validate_record(record: SceneRecord, root) -> None:
    """Raise if a record's files are missing, misshapen, or hold invalid depth."""
    root = Path(root)
    paths = [root / p for p in (record.rgb, record.raw_depth, record.gt_depth, record.mask)]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"{record.id}: missing {p}")
    rgb = read_rgb_png(paths[0])
    raw, gt = read_depth_png16(paths[1]), read_depth_png16(paths[2])
    mask = read_mask_png16(paths[3])
    shapes = {rgb.shape[:2], raw.shape, gt.shape, mask.shape}
    if len(shapes) != 1:
        raise ValueError(f"{record.id}: file dimensions differ {shapes}")
    for name, d in (("raw", raw), ("gt", gt)):
        if np.any(d < 0) or np.any(d > MAX_DEPTH_M) or not np.all(np.isfinite(d)):
            raise ValueError(f"{record.id}: {name} depth violates the (0, 65.535] m range")
    record.intrinsics.validate(*gt.shape)


@dataclass
class SceneDataset:
    """A split loaded into memory as (n, c, h, w) arrays."""

    ids: list
    rgb: np.ndarray        # (n, 3, h, w) float32 in [0, 1]
    raw: np.ndarray        # (n, 1, h, w) float32 meters, 0 = hole
    gt: np.ndarray         # (n, 1, h, w) float32 meters
    material: np.ndarray   # (n, 1, h, w) uint16 material codes
    intrinsics: CameraIntrinsics

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.gt.shape[2], self.gt.shape[3]

    def sparse(self, index=slice(None)) -> SparseDepth:
        raw = self.raw[index]
        return SparseDepth(raw, raw > 0)

    def subset(self, index) -> "SceneDataset":
        index = np.asarray(index)
        return SceneDataset([self.ids[i] for i in index], self.rgb[index], self.raw[index],
                            self.gt[index], self.material[index], self.intrinsics)

    @classmethod
    def load(cls, path, split: str | None = None) -> "SceneDataset":
        manifest = _manifest_path(path)
        root = manifest.parent
        records = read_manifest(manifest)
        if split is not None:
            if split not in SPLIT_NAMES:
                raise ValueError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
            wanted = set(read_splits(manifest)[split])
            records = [r for r in records if r.id in wanted]
        if not records:
            raise ValueError(f"no scenes in {manifest} for split {split!r}")
        intr = {(r.fx, r.fy, r.cx, r.cy) for r in records}
        if len(intr) != 1:
            raise ValueError("scenes in one split must share camera intrinsics")
        rgb, raw, gt, mat = [], [], [], []
        for r in records:
            rgb.append(read_rgb_png(root / r.rgb).transpose(2, 0, 1))
            raw.append(read_depth_png16(root / r.raw_depth)[None])
            gt.append(read_depth_png16(root / r.gt_depth)[None])
            mat.append(read_mask_png16(root / r.mask)[None])
        return cls([r.id for r in records], np.stack(rgb), np.stack(raw), np.stack(gt), np.stack(mat),
                   records[0].intrinsics)
