"""PNG codecs: 16-bit millimeter depth, 16-bit label masks, 8-bit RGB."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MAX_DEPTH_M = 65.535


class CodecError(ValueError):
    """A value cannot be encoded, or a file is not the expected image kind."""


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise CodecError(f"depth map must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise CodecError("depth map contains NaN or Inf")
    if depth.min(initial=0.0) < 0:
        raise CodecError("depth map contains negative values")
    mm = np.rint(depth * 1000.0)
    if mm.max(initial=0.0) > 65535:
        raise CodecError(f"depth {depth.max():.4f} m exceeds the 16-bit range ({MAX_DEPTH_M} m)")
    return mm.astype(np.uint16)


def _write_u16(path, values: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(values, dtype=np.uint16)).save(path, format="PNG")
    return path


def _read_u16(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
                raise CodecError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode}")
            values = np.array(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CodecError(f"{path}: malformed image ({exc})") from None
    if values.min(initial=0) < 0 or values.max(initial=0) > 65535:
        raise CodecError(f"{path}: values outside the 16-bit range")
    return values.astype(np.uint16)


def write_depth_png16(path, depth: np.ndarray) -> Path:
    """Store meters as round(m * 1000) in a 16-bit PNG; 0 marks invalid."""
    return _write_u16(path, depth_to_mm(depth))


def read_depth_png16(path) -> np.ndarray:
    return (_read_u16(path).astype(np.float64) / 1000.0).astype(np.float32)


def write_mask_png16(path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise CodecError("mask labels must fit in 16 bits")
    return _write_u16(path, labels)


def read_mask_png16(path) -> np.ndarray:
    return _read_u16(path)


def write_rgb_png(path, rgb: np.ndarray) -> Path:
    """``rgb`` is (h, w, 3) in [0, 1] or uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise CodecError(f"RGB image must be (h, w, 3), got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    return path


def read_rgb_png(path) -> np.ndarray:
    """(h, w, 3) float32 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = np.array(img.convert("RGB"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CodecError(f"{path}: malformed image ({exc})") from None
    return (rgb.astype(np.float32) / np.float32(255.0))
