"""Multi-hierarchical enhanced (ME) block.

Brings the shallow (C/2, 2H, 2W) and deep (2C, H/2, W/2) neighbours of a
pyramid level to the current level's (C, H, W), concatenates
``[shallow, current, deep]`` along channels and fuses back to C channels.

The shallow branch is average-downsampled and the deep branch is
nearest-upsampled: those are the only resampling directions that produce the
(C, H, W) geometry from the neighbour shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .layers import ConvBNActLayer
from .tensor import ShapeError, Tensor, concat_channels, downsample_avg2x, upsample_nearest2x


@dataclass
class MEBlockParams:
    c: int
    cbr_cur: ConvBNActLayer
    cbr_fuse: ConvBNActLayer
    cbr_shallow: Optional[ConvBNActLayer] = None
    cbr_deep: Optional[ConvBNActLayer] = None

    def __post_init__(self):
        branches = 1 + (self.cbr_shallow is not None) + (self.cbr_deep is not None)
        if self.cbr_fuse.c_in != branches * self.c:
            raise ShapeError(f"cbr_fuse takes {self.cbr_fuse.c_in} channels, "
                             f"expected {branches}*{self.c} for {branches} branches")

    @classmethod
    def create(cls, c: int, *, has_shallow: bool = True, has_deep: bool = True,
               rng: np.random.Generator, branch_kernel: int = 1,
               fuse_kernel: int = 3) -> "MEBlockParams":
        if c % 2:
            raise ShapeError(f"ME block needs an even channel count, got C={c}")
        branches = 1 + has_shallow + has_deep
        shallow = ConvBNActLayer.create(c // 2, c, branch_kernel, rng=rng, name="cbr_shallow") if has_shallow else None
        cur = ConvBNActLayer.create(c, c, branch_kernel, rng=rng, name="cbr_cur")
        deep = ConvBNActLayer.create(2 * c, c, branch_kernel, rng=rng, name="cbr_deep") if has_deep else None
        fuse = ConvBNActLayer.create(branches * c, c, fuse_kernel, rng=rng, name="cbr_fuse")
        return cls(c=c, cbr_cur=cur, cbr_fuse=fuse, cbr_shallow=shallow, cbr_deep=deep)

    def layers(self) -> Dict[str, ConvBNActLayer]:
        out = {"cbr_cur": self.cbr_cur, "cbr_fuse": self.cbr_fuse}
        if self.cbr_shallow is not None:
            out["cbr_shallow"] = self.cbr_shallow
        if self.cbr_deep is not None:
            out["cbr_deep"] = self.cbr_deep
        return out

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{ln}.{pn}": t for ln, layer in self.layers().items()
                for pn, t in layer.parameters().items()}


def unify_current(f_cur: Tensor, p: MEBlockParams, training: bool = False) -> Tensor:
    if f_cur.shape[1] != p.c:
        raise ShapeError(f"current feature has C={f_cur.shape[1]}, block expects C={p.c}")
    return p.cbr_cur(f_cur, training)


def unify_shallow(f_shallow: Tensor, p: MEBlockParams, training: bool = False,
                  cur_hw: Optional[tuple] = None) -> Tensor:
    if p.cbr_shallow is None:
        raise ShapeError("block was built without a shallow branch")
    n, c, h2, w2 = f_shallow.shape
    if c != p.c // 2:
        raise ShapeError(f"shallow feature has C={c}, expected C/2={p.c // 2}")
    if cur_hw is not None and (h2, w2) != (2 * cur_hw[0], 2 * cur_hw[1]):
        raise ShapeError(f"shallow feature is {h2}x{w2}, expected 2H x 2W = "
                         f"{2 * cur_hw[0]}x{2 * cur_hw[1]}")
    return downsample_avg2x(p.cbr_shallow(f_shallow, training))


def unify_deep(f_deep: Tensor, p: MEBlockParams, training: bool = False,
               cur_hw: Optional[tuple] = None) -> Tensor:
    if p.cbr_deep is None:
        raise ShapeError("block was built without a deep branch")
    n, c, h, w = f_deep.shape
    if c != 2 * p.c:
        raise ShapeError(f"deep feature has C={c}, expected 2C={2 * p.c}")
    if cur_hw is not None and (2 * h, 2 * w) != tuple(cur_hw):
        raise ShapeError(f"deep feature is {h}x{w}, expected H/2 x W/2 = "
                         f"{cur_hw[0] // 2}x{cur_hw[1] // 2}")
    return upsample_nearest2x(p.cbr_deep(f_deep, training))


def me_forward(f_shallow: Optional[Tensor], f_cur: Tensor, f_deep: Optional[Tensor],
               p: MEBlockParams, training: bool = False) -> Tensor:
    """Fuse up to three adjacent scales into a map shaped like ``f_cur``."""
    if (f_shallow is None) != (p.cbr_shallow is None):
        raise ShapeError("shallow input presence does not match the block's parameters")
    if (f_deep is None) != (p.cbr_deep is None):
        raise ShapeError("deep input presence does not match the block's parameters")
    hw = f_cur.shape[2:]
    branches = []
    if f_shallow is not None:
        if f_shallow.shape[0] != f_cur.shape[0]:
            raise ShapeError("shallow and current features differ in batch size")
        branches.append(unify_shallow(f_shallow, p, training, cur_hw=hw))
    branches.append(unify_current(f_cur, p, training))
    if f_deep is not None:
        if f_deep.shape[0] != f_cur.shape[0]:
            raise ShapeError("deep and current features differ in batch size")
        branches.append(unify_deep(f_deep, p, training, cur_hw=hw))
    return p.cbr_fuse(concat_channels(branches), training)
