"""Dual-branch depth completion network at desk scale.

RGB and depth are encoded separately by small strided conv stacks. Their
features are fused at every stage, decoded with upsample + skip-sum, and
turned into a coarse depth map plus the heads that drive spatial
propagation refinement.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, conv_params, ops
from .cmfm import CmfmParams, FeaturePair, cmfm_forward
from .refine import AffinityField, PropagationEngine, RefinementSchedule, SparseDepth, normalize_affinities, refine

F64 = np.float64


@dataclass
class ModelConfig:
    stage_widths: tuple = (16, 32, 64, 128)
    input_size: tuple = (224, 224)
    use_cmfm: bool = True
    use_refinement: bool = True
    schedule: RefinementSchedule = field(default_factory=RefinementSchedule)
    seed: int = 0
    depth_scale: float = 2.0  # raw depth is divided by this before encoding

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.input_size = tuple(int(s) for s in self.input_size)
        if isinstance(self.schedule, dict):
            self.schedule = RefinementSchedule(**self.schedule)
        widths = self.stage_widths
        if len(widths) < 2:
            raise ValueError("need at least two encoder stages")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage widths must be strictly increasing, got {widths}")
        factor = 2 ** len(widths)
        if len(self.input_size) != 2 or any(s % factor for s in self.input_size):
            raise ValueError(f"input size {self.input_size} must be divisible by {factor}")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["input_size"] = list(self.input_size)
        d["schedule"] = {"kernels": list(self.schedule.kernels), "total_steps": self.schedule.total_steps,
                         "snapshots": list(self.schedule.snapshots)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["schedule"] = RefinementSchedule(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in d["schedule"].items()})
        return cls(**d)


@dataclass
class ModelOutputs:
    coarse: Tensor
    refined: Optional[Tensor]
    decoder_features: Tensor
    affinities: dict = field(default_factory=dict)
    confidence: Optional[Tensor] = None
    alpha: Optional[Tensor] = None
    beta: Optional[Tensor] = None


class DepthCompletionModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.stage_widths
        p: dict[str, Parameter] = {}
        for modality, in_c in (("rgb", 3), ("depth", 2)):
            prev = in_c
            for i, w in enumerate(widths):
                p.update(conv_params(rng, f"enc_{modality}.stage{i}.down", w, prev, 3))
                p.update(conv_params(rng, f"enc_{modality}.stage{i}.conv", w, w, 3))
                prev = w
        self.fusion: list = []
        for i, w in enumerate(widths):
            if config.use_cmfm:
                block = CmfmParams(w, rng, prefix=f"cmfm.stage{i}")
                p.update(block.named_parameters())
                self.fusion.append(block)
            else:
                p.update(conv_params(rng, f"fuse.stage{i}", w, 2 * w, 1))
                self.fusion.append(None)
        for i in range(len(widths) - 2, -1, -1):
            p.update(conv_params(rng, f"dec.stage{i}", widths[i], widths[i + 1], 3))
        w0 = widths[0]
        p.update(conv_params(rng, "dec.full", w0, w0, 3))
        p.update(conv_params(rng, "head.coarse", 1, w0, 3))
        if config.use_refinement:
            sched = config.schedule
            for k in sched.kernels:
                p.update(conv_params(rng, f"head.affinity_k{k}", k * k - 1, w0, 3))
            p.update(conv_params(rng, "head.confidence", len(sched.kernels), w0, 3))
            p.update(conv_params(rng, "head.alpha", len(sched.snapshots), w0, 3))
            p.update(conv_params(rng, "head.beta", len(sched.kernels), w0, 3))
        self.params = p

    def parameters(self) -> list:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward -------------------------------------------------------------
    def _weights(self, track: bool) -> dict:
        if track:
            return self.params
        return {name: Tensor(param.data) for name, param in self.params.items()}

    @staticmethod
    def _conv(p, x, name, stride=1, padding=1):
        return ops.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding)

    def _encode(self, p, x, modality):
        feats = []
        for i in range(len(self.config.stage_widths)):
            x = ops.relu(self._conv(p, x, f"enc_{modality}.stage{i}.down", stride=2))
            x = ops.relu(self._conv(p, x, f"enc_{modality}.stage{i}.conv"))
            feats.append(x)
        return feats

    def _fuse(self, p, i, f_rgb, f_depth):
        block = self.fusion[i]
        if block is None:
            return self._conv(p, ops.concat_channel([f_rgb, f_depth]), f"fuse.stage{i}", padding=0)
        if p is not self.params:
            block = _DetachedBlock(block, p)
        return cmfm_forward(FeaturePair(f_rgb, f_depth), block).f_fuse

    def forward(self, rgb, sparse: SparseDepth, track: bool = True,
                engine: PropagationEngine | None = None, weights: dict | None = None) -> ModelOutputs:
        """Run the full graph. ``track=False`` skips building the tape.

        ``weights`` substitutes a name -> Tensor mapping for the parameters;
        inputs and outputs then follow its dtype (used for 64-bit checks).
        """
        rgb = np.asarray(rgb.data if isinstance(rgb, Tensor) else rgb, dtype=np.float32)
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ShapeError(f"rgb must be (n, 3, h, w), got {rgb.shape}")
        n, _, h, w = rgb.shape
        if (h, w) != self.config.input_size:
            raise ShapeError(f"input is {h}x{w}, model expects {self.config.input_size}")
        if sparse.shape != (n, 1, h, w):
            raise ShapeError(f"sparse depth {sparse.shape} does not match rgb {rgb.shape}")
        p = self._weights(track) if weights is None else weights
        dtype = next(iter(p.values())).dtype
        depth_in = np.concatenate([sparse.depth / self.config.depth_scale, sparse.mask], axis=1)

        f_rgb = self._encode(p, Tensor(rgb - np.float32(0.5), dtype=dtype), "rgb")
        f_depth = self._encode(p, Tensor(depth_in, dtype=dtype), "depth")
        fused = [self._fuse(p, i, a, b) for i, (a, b) in enumerate(zip(f_rgb, f_depth))]

        x = fused[-1]
        for i in range(len(fused) - 2, -1, -1):
            x = ops.relu(self._conv(p, ops.bilinear_upsample_x2(x), f"dec.stage{i}"))
            x = ops.add(x, fused[i])
        feats = ops.relu(self._conv(p, ops.bilinear_upsample_x2(x), "dec.full"))
        coarse = ops.softplus(self._conv(p, feats, "head.coarse"))
        if not self.config.use_refinement:
            return ModelOutputs(coarse=coarse, refined=None, decoder_features=feats)

        sched = self.config.schedule
        affinities = {k: normalize_affinities(ops.cast(self._conv(p, feats, f"head.affinity_k{k}"), F64))
                      for k in sched.kernels}
        confidence = ops.sigmoid(ops.cast(self._conv(p, feats, "head.confidence"), F64))
        alpha = ops.softmax_channel(ops.cast(self._conv(p, feats, "head.alpha"), F64))
        beta = ops.softmax_channel(ops.cast(self._conv(p, feats, "head.beta"), F64))
        refined64 = refine(ops.cast(coarse, F64), sparse, affinities, confidence, alpha, beta, sched,
                           engine=engine)
        return ModelOutputs(coarse=coarse, refined=ops.cast(refined64, dtype), decoder_features=feats,
                            affinities=affinities, confidence=confidence, alpha=alpha, beta=beta)

    def predict(self, rgb, sparse: SparseDepth, engine=None) -> np.ndarray:
        """Best available depth estimate (refined when enabled), as an array."""
        out = self.forward(rgb, sparse, track=False, engine=engine)
        return (out.refined if out.refined is not None else out.coarse).data

    # -- state ---------------------------------------------------------------
    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, param in self.params.items():
            value = arrays[name]
            if value.shape != param.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {param.shape}")
            param.data = np.array(value, dtype=np.float32)


class _DetachedBlock:
    """Read-only view of a fusion block backed by detached weights."""

    def __init__(self, block: CmfmParams, weights: dict):
        self.channels = block.channels
        self.prefix = block.prefix
        self._weights = weights

    def __getitem__(self, short: str):
        return self._weights[f"{self.prefix}.{short}"]


def build_model(config: ModelConfig) -> DepthCompletionModel:
    return DepthCompletionModel(config)
