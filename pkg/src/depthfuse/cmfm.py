"""Cross-modal fusion of RGB and depth feature maps.

One :class:`CmfmParams` instance serves one encoder stage of width ``c``.
The block runs five steps:

1. project both modalities with 1x1 convs and sum them into global weights;
2. per modality, run 3x3 and 5x5 branches, concatenate, merge with a 1x1 conv;
3. softmax-combine each modality's weights with the global ones;
4. gate each modality with the *other* modality's weights;
5. sum the gated features and refine them with a depthwise bottleneck,
   a residual connection and channel layer norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, conv_params, ops

EXPANSION = 2


@dataclass
class FeaturePair:
    f_rgb: Tensor
    f_depth: Tensor

    def __post_init__(self):
        if self.f_rgb.shape != self.f_depth.shape:
            raise ShapeError(f"feature pair shapes differ: {self.f_rgb.shape} vs {self.f_depth.shape}")
        if self.f_rgb.ndim != 4:
            raise ShapeError(f"features must be (n, c, h, w), got {self.f_rgb.shape}")


@dataclass
class FusionWeights:
    w_fuse: Tensor
    w_rgb: Tensor
    w_depth: Tensor


@dataclass
class FusedFeature:
    f_fuse: Tensor
    f_temp: Tensor


class CmfmParams:
    """All learnable tensors of one fusion block, keyed by checkpoint name."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, prefix: str = "cmfm"):
        rng = np.random.default_rng(0) if rng is None else rng
        c, e = channels, EXPANSION * channels
        self.channels = c
        self.prefix = prefix
        p: dict[str, Parameter] = {}
        for name, out_c, in_c, k in (
            ("proj_rgb", c, c, 1), ("proj_depth", c, c, 1),
            ("rgb_k3", c, c, 3), ("rgb_k5", c, c, 5), ("rgb_merge", c, 2 * c, 1),
            ("depth_k3", c, c, 3), ("depth_k5", c, c, 5), ("depth_merge", c, 2 * c, 1),
            ("ffn_expand", e, c, 1),
        ):
            p.update(conv_params(rng, f"{prefix}.{name}", out_c, in_c, k))
        # depthwise kernels have a fan-in of 9
        p[f"{prefix}.ffn_dw.weight"] = Parameter(
            rng.uniform(-np.sqrt(6 / 9), np.sqrt(6 / 9), size=(e, 1, 3, 3)), f"{prefix}.ffn_dw.weight")
        p.update(conv_params(rng, f"{prefix}.ffn_project", c, e, 1))
        p[f"{prefix}.norm.gamma"] = Parameter(np.ones(c), f"{prefix}.norm.gamma")
        p[f"{prefix}.norm.beta"] = Parameter(np.zeros(c), f"{prefix}.norm.beta")
        self.params = p

    def __getitem__(self, short: str) -> Parameter:
        return self.params[f"{self.prefix}.{short}"]

    def named_parameters(self) -> dict:
        return dict(self.params)

    def zero_(self) -> None:
        """Zero every weight and bias, leaving the norm affine at (1, 0)."""
        for name, param in self.params.items():
            if name.endswith("norm.gamma"):
                param.data[...] = 1.0
            else:
                param.data[...] = 0.0


def _conv(x: Tensor, params: CmfmParams, name: str, padding: int = 0) -> Tensor:
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, padding=padding)


def _check_width(pair: FeaturePair, params: CmfmParams) -> None:
    if pair.f_rgb.shape[1] != params.channels:
        raise ShapeError(f"features have {pair.f_rgb.shape[1]} channels, block expects {params.channels}")


def fuse_global(pair: FeaturePair, params: CmfmParams) -> Tensor:
    _check_width(pair, params)
    return ops.add(_conv(pair.f_rgb, params, "proj_rgb"), _conv(pair.f_depth, params, "proj_depth"))


def _multiscale(x: Tensor, params: CmfmParams, modality: str) -> Tensor:
    small = _conv(x, params, f"{modality}_k3", padding=1)
    large = _conv(x, params, f"{modality}_k5", padding=2)
    return _conv(ops.concat_channel([small, large]), params, f"{modality}_merge")


def multiscale_weights(pair: FeaturePair, params: CmfmParams) -> tuple[Tensor, Tensor]:
    """Raw (pre-softmax) per-modality weight maps."""
    _check_width(pair, params)
    return _multiscale(pair.f_rgb, params, "rgb"), _multiscale(pair.f_depth, params, "depth")


def combine_weights(w_raw_rgb: Tensor, w_raw_depth: Tensor, w_fuse: Tensor) -> tuple[Tensor, Tensor]:
    if not (w_raw_rgb.shape == w_raw_depth.shape == w_fuse.shape):
        raise ShapeError(
            f"combine_weights: shapes {w_raw_rgb.shape}, {w_raw_depth.shape}, {w_fuse.shape} differ")
    shared = ops.softmax_channel(w_fuse)
    return (ops.softmax_channel(ops.add(w_raw_rgb, shared)),
            ops.softmax_channel(ops.add(w_raw_depth, shared)))


def modulate(pair: FeaturePair, weights: FusionWeights) -> FeaturePair:
    """Cross gating: RGB features take the depth weights and vice versa."""
    return FeaturePair(ops.multiply(pair.f_rgb, weights.w_depth),
                       ops.multiply(pair.f_depth, weights.w_rgb))


def ffn_refine(f_fuse_in: Tensor, params: CmfmParams) -> FusedFeature:
    if f_fuse_in.ndim != 4 or f_fuse_in.shape[1] != params.channels:
        raise ShapeError(f"ffn_refine: expected {params.channels} channels, got shape {f_fuse_in.shape}")
    hidden = _conv(f_fuse_in, params, "ffn_expand")
    hidden = ops.relu(ops.depthwise_conv2d(hidden, params["ffn_dw.weight"], padding=1))
    f_temp = _conv(hidden, params, "ffn_project")
    f_fuse = ops.layer_norm_channel(ops.add(f_temp, f_fuse_in), params["norm.gamma"], params["norm.beta"])
    return FusedFeature(f_fuse=f_fuse, f_temp=f_temp)


def cmfm_forward(pair: FeaturePair, params: CmfmParams) -> FusedFeature:
    w_fuse = fuse_global(pair, params)
    raw_rgb, raw_depth = multiscale_weights(pair, params)
    w_rgb, w_depth = combine_weights(raw_rgb, raw_depth, w_fuse)
    enhanced = modulate(pair, FusionWeights(w_fuse, w_rgb, w_depth))
    return ffn_refine(ops.add(enhanced.f_rgb, enhanced.f_depth), params)
