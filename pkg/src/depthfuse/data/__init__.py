"""Synthetic RGB-D scenes, sensor corruption, image codecs and manifests."""

from .codecs import (
    CodecError,
    read_depth_png16,
    read_mask_png16,
    read_rgb_png,
    write_depth_png16,
    write_mask_png16,
    write_rgb_png,
)
from .corruption import CorruptionConfig, corrupt_depth
from .dataset import (
    SceneDataset,
    SceneRecord,
    generate_dataset,
    generate_scene,
    read_manifest,
    read_splits,
    split_counts,
    validate_record,
)
from .scene import (
    MATERIAL_CODE,
    Box,
    Cylinder,
    Plane,
    RenderResult,
    SceneSpec,
    Sphere,
    camera_rays,
    random_scene,
    render_scene,
)
