"""AMAM applied per pyramid level, plus the toy backbone and detection head.

``amam_forward`` is a shape-preserving pyramid transform, so it can sit
between any backbone and neck.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .aa import AABlockParams, FusionMode, aa_forward
from .io import load_bundle, save_bundle
from .layers import Activation, ConvBNActLayer, uniform_init
from .me import MEBlockParams, me_forward
from .tensor import ShapeError, Tensor, conv2d

BACKBONE_CHANNELS = (32, 64, 128)
HEAD_OUTPUTS = 5  # objectness logit + (cx, cy, w, h)


class PyramidError(ShapeError):
    """Adjacent pyramid levels do not halve/double as required."""


@dataclass
class AmamConfig:
    levels: tuple = BACKBONE_CHANNELS
    heads: int = 4
    fusion_mode: FusionMode = FusionMode.ADAPTIVE
    enabled_me: bool = True
    enabled_aa: bool = True
    seed: int = 0
    d_qk: Optional[int] = None
    branch_kernel: int = 1
    fuse_kernel: int = 3

    def __post_init__(self):
        self.levels = tuple(int(c) for c in self.levels)
        self.fusion_mode = FusionMode(self.fusion_mode)
        if not self.levels:
            raise ValueError("config needs at least one level")
        if self.heads < 1:
            raise ValueError(f"heads must be positive, got {self.heads}")
        for i, (a, b) in enumerate(zip(self.levels, self.levels[1:])):
            if b != 2 * a:
                raise ValueError(f"level {i + 1} has {b} channels, expected 2*{a}")
        for i, c in enumerate(self.levels):
            if c % self.heads:
                raise ValueError(f"heads={self.heads} does not divide level {i} channels ({c})")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        d["fusion_mode"] = self.fusion_mode.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AmamConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "AmamConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class FeaturePyramid:
    """Feature maps ordered shallowest (largest spatial size) first."""

    maps: List[Tensor]

    def __post_init__(self):
        self.maps = list(self.maps)
        self.validate()

    def validate(self) -> None:
        if not self.maps:
            raise PyramidError("pyramid has no levels")
        for i, m in enumerate(self.maps):
            if m.ndim != 4:
                raise PyramidError(f"level {i}: expected a 4-D map, got shape {m.shape}")
        for i in range(1, len(self.maps)):
            prev, cur = self.maps[i - 1].shape, self.maps[i].shape
            expected = (prev[0], 2 * prev[1], prev[2] / 2, prev[3] / 2)
            for axis, label in enumerate("NCHW"):
                if cur[axis] != expected[axis]:
                    raise PyramidError(f"level {i}: {label}={cur[axis]}, expected {expected[axis]:g} "
                                       f"relative to level {i - 1}")

    @property
    def shapes(self) -> List[tuple]:
        return [m.shape for m in self.maps]

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i: int) -> Tensor:
        return self.maps[i]


@dataclass
class AmamParams:
    cfg: AmamConfig
    me: List[Optional[MEBlockParams]] = field(default_factory=list)
    aa: List[Optional[AABlockParams]] = field(default_factory=list)

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.me):
            if block is not None:
                out.update({f"level{i}.me.{k}": t for k, t in block.parameters().items()})
        for i, block in enumerate(self.aa):
            if block is not None:
                out.update({f"level{i}.aa.{k}": t for k, t in block.parameters().items()})
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.me):
            if block is None:
                continue
            for ln, layer in block.layers().items():
                for bn, arr in layer.buffers().items():
                    out[f"level{i}.me.{ln}.{bn}"] = arr
        return out


def init_amam(cfg: AmamConfig) -> AmamParams:
    """Deterministic parameters for ``cfg``; only enabled blocks are built."""
    rng = np.random.default_rng(cfg.seed)
    n = len(cfg.levels)
    me, aa = [], []
    for i, c in enumerate(cfg.levels):
        me.append(MEBlockParams.create(c, has_shallow=i > 0, has_deep=i < n - 1, rng=rng,
                                       branch_kernel=cfg.branch_kernel,
                                       fuse_kernel=cfg.fuse_kernel) if cfg.enabled_me else None)
    for c in cfg.levels:
        aa.append(AABlockParams.create(c, cfg.heads, rng=rng, fusion_mode=cfg.fusion_mode,
                                       d_qk=cfg.d_qk) if cfg.enabled_aa else None)
    return AmamParams(cfg=cfg, me=me, aa=aa)


def amam_forward(pyr: FeaturePyramid, params: AmamParams, training: bool = False) -> FeaturePyramid:
    """Enhance every level with ME then AA; output shapes equal input shapes."""
    if not isinstance(pyr, FeaturePyramid):
        pyr = FeaturePyramid(pyr)
    else:
        pyr.validate()
    cfg = params.cfg
    if len(pyr) != len(cfg.levels):
        raise PyramidError(f"pyramid has {len(pyr)} levels, config has {len(cfg.levels)}")
    for i, (m, c) in enumerate(zip(pyr.maps, cfg.levels)):
        if m.shape[1] != c:
            raise PyramidError(f"level {i}: C={m.shape[1]}, config expects {c}")
        if i < len(pyr) - 1 and (m.shape[2] % 2 or m.shape[3] % 2):
            raise PyramidError(f"level {i}: H and W must be even, got {m.shape[2]}x{m.shape[3]}")

    out = []
    n = len(pyr)
    for i in range(n):
        x = pyr[i]
        if cfg.enabled_me:
            x = me_forward(pyr[i - 1] if i > 0 else None, x, pyr[i + 1] if i < n - 1 else None,
                           params.me[i], training=training)
        if cfg.enabled_aa:
            x = aa_forward(x, params.aa[i])
        out.append(x)
    return FeaturePyramid(out)


def save_amam(directory, params: AmamParams) -> Path:
    tensors = {k: t.data for k, t in params.parameters().items()}
    tensors.update(params.buffers())
    meta = {"config": params.cfg.to_dict(), "layers": {}, "attention": {}}
    for i, block in enumerate(params.me):
        if block is not None:
            meta["layers"][f"level{i}"] = {k: l.describe() for k, l in block.layers().items()}
    for i, block in enumerate(params.aa):
        if block is not None:
            meta["attention"][f"level{i}"] = {
                "heads": block.h,
                "d_qk": block.heads[0].d_qk,
                "fusion_mode": block.fusion_mode.value,
                "alpha_logits": [repr(float(v)) for v in block.alpha_logits.data],
            }
    return save_bundle(directory, tensors, meta)


def load_amam(directory) -> AmamParams:
    tensors, meta = load_bundle(directory)
    params = init_amam(AmamConfig.from_dict(meta["config"]))
    targets = {k: t for k, t in params.parameters().items()}
    buffers = params.buffers()
    for name, arr in tensors.items():
        if name in targets:
            if targets[name].shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {targets[name].shape}")
            targets[name].data = arr.astype(np.float64)
        elif name in buffers:
            buffers[name][...] = arr
        else:
            raise KeyError(f"unexpected tensor {name!r} in bundle")
    for level, info in meta.get("attention", {}).items():
        block = params.aa[int(level[len("level"):])]
        block.alpha_logits.data = np.array([float(s) for s in info["alpha_logits"]])
    return params


# -- toy backbone and head ------------------------------------------------
@dataclass
class ToyBackbone:
    stages: List[ConvBNActLayer]

    @classmethod
    def create(cls, seed: int, channels: Sequence[int] = BACKBONE_CHANNELS, in_channels: int = 1) -> "ToyBackbone":
        rng = np.random.default_rng([seed, 1])
        stages, c_in = [], in_channels
        for c in channels:
            stages.append(ConvBNActLayer.create(c_in, c, 3, rng=rng, activation=Activation.SILU,
                                                stride=2, padding=1))
            c_in = c
        return cls(stages)

    def parameters(self) -> Dict[str, Tensor]:
        return {f"stage{i}.{k}": t for i, s in enumerate(self.stages) for k, t in s.parameters().items()}


def toy_backbone(image: Tensor, params: ToyBackbone, training: bool = False) -> FeaturePyramid:
    """Three stride-2 CBS stages: strides 2, 4, 8 from the input."""
    stride = 2 ** len(params.stages)
    h, w = image.shape[2:]
    if h % stride or w % stride:
        raise ShapeError(f"image {h}x{w} is not divisible by {stride}")
    maps, x = [], image
    for stage in params.stages:
        x = stage(x, training)
        maps.append(x)
    return FeaturePyramid(maps)


@dataclass
class ToyHead:
    weights: List[Tensor]  # per level (5, C, 1, 1)
    biases: List[Tensor]

    @classmethod
    def create(cls, seed: int, channels: Sequence[int] = BACKBONE_CHANNELS) -> "ToyHead":
        rng = np.random.default_rng([seed, 2])
        weights = [Tensor(uniform_init(rng, (HEAD_OUTPUTS, c, 1, 1), c), requires_grad=True) for c in channels]
        biases = [Tensor(np.zeros(HEAD_OUTPUTS), requires_grad=True) for _ in channels]
        return cls(weights, biases)

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"level{i}.weight"] = w
            out[f"level{i}.bias"] = b
        return out


def toy_head(pyr: FeaturePyramid, params: ToyHead) -> List[Tensor]:
    """Per level a 1x1 conv to (objectness logit, cx, cy, w, h)."""
    if isinstance(pyr, FeaturePyramid):
        pyr.validate()
    return [conv2d(m, w, b) for m, w, b in zip(pyr.maps, params.weights, params.biases)]
