"""Adaptive attention (AA) block: cascaded per-head self-attention.

The fused map is split into ``h`` channel groups. Head 1 attends over its own
split; every later head attends over a blend of the previous head's output
and its own split. Head outputs are concatenated and mixed by a bias-free
per-position projection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .layers import uniform_init
from .tensor import (
    ShapeError,
    Tensor,
    _sigmoid,
    channel_linear,
    concat_channels,
    matmul,
    sigmoid,
    softmax_lastdim,
    split_channels,
)


class FusionMode(str, enum.Enum):
    ADAPTIVE = "adaptive"
    AVERAGE = "average"
    ADD = "add"
    CONCAT = "concat"


@dataclass
class HeadProjections:
    w_q: Tensor  # (d, d_qk)
    w_k: Tensor  # (d, d_qk)
    w_v: Tensor  # (d, d)

    @property
    def d(self) -> int:
        return self.w_v.shape[0]

    @property
    def d_qk(self) -> int:
        return self.w_q.shape[1]


def default_qk_dim(d: int) -> int:
    return max(1, d // 2)


@dataclass
class AABlockParams:
    h: int
    heads: List[HeadProjections]
    w_p: Tensor  # (C, C)
    alpha_logits: Tensor  # (h - 1,)
    fusion_mode: FusionMode = FusionMode.ADAPTIVE
    concat_fuse: Optional[List[Tensor]] = None  # per boundary, (2d, d)

    def __post_init__(self):
        self.fusion_mode = FusionMode(self.fusion_mode)
        if self.h < 1 or len(self.heads) != self.h:
            raise ShapeError(f"expected {self.h} head projections, got {len(self.heads)}")
        if self.alpha_logits.shape != (self.h - 1,):
            raise ShapeError(f"alpha_logits must have length h-1={self.h - 1}")
        if self.fusion_mode is FusionMode.CONCAT:
            if self.concat_fuse is None or len(self.concat_fuse) != self.h - 1:
                raise ShapeError("concat fusion needs one (2d, d) matrix per cascade boundary")

    @property
    def c(self) -> int:
        return self.w_p.shape[0]

    @property
    def d(self) -> int:
        return self.c // self.h

    @classmethod
    def create(cls, c: int, h: int, *, rng: np.random.Generator,
               fusion_mode: FusionMode = FusionMode.ADAPTIVE,
               d_qk: Optional[int] = None) -> "AABlockParams":
        if h < 1 or c % h:
            raise ShapeError(f"head count {h} does not divide C={c}")
        d = c // h
        d_qk = default_qk_dim(d) if d_qk is None else d_qk
        if d_qk < 1:
            raise ValueError("d_qk must be >= 1")
        heads = [
            HeadProjections(
                w_q=Tensor(uniform_init(rng, (d, d_qk), d), requires_grad=True),
                w_k=Tensor(uniform_init(rng, (d, d_qk), d), requires_grad=True),
                w_v=Tensor(uniform_init(rng, (d, d), d), requires_grad=True),
            )
            for _ in range(h)
        ]
        w_p = Tensor(uniform_init(rng, (c, c), c), requires_grad=True)
        concat = None
        fusion_mode = FusionMode(fusion_mode)
        if fusion_mode is FusionMode.CONCAT:
            concat = [Tensor(uniform_init(rng, (2 * d, d), 2 * d), requires_grad=True)
                      for _ in range(h - 1)]
        return cls(h=h, heads=heads, w_p=w_p, alpha_logits=Tensor(np.zeros(h - 1), requires_grad=True),
                   fusion_mode=fusion_mode, concat_fuse=concat)

    def alphas(self) -> np.ndarray:
        return _sigmoid(self.alpha_logits.data)

    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas()

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, hp in enumerate(self.heads):
            out[f"head{i}.w_q"] = hp.w_q
            out[f"head{i}.w_k"] = hp.w_k
            out[f"head{i}.w_v"] = hp.w_v
        out["w_p"] = self.w_p
        out["alpha_logits"] = self.alpha_logits
        for i, m in enumerate(self.concat_fuse or []):
            out[f"concat_fuse{i}"] = m
        return out


def _tokens(x: Tensor) -> Tensor:
    n, d, h, w = x.shape
    return x.reshape(n, d, h * w).transpose(0, 2, 1)


def _attention_logits(x: Tensor, head: HeadProjections):
    tokens = _tokens(x)
    q = matmul(tokens, head.w_q) * (1.0 / np.sqrt(head.d_qk))
    k = matmul(tokens, head.w_k)
    scores = matmul(q, k.transpose(0, 2, 1))
    return tokens, scores


def attention_map(ff_in: Tensor, head: HeadProjections) -> np.ndarray:
    """Attention weights (N, HW, HW) of one head; rows are distributions."""
    _, scores = _attention_logits(ff_in.detach(), head)
    return softmax_lastdim(scores.detach()).data


def head_attention(ff_in: Tensor, head: HeadProjections) -> Tensor:
    """Scaled dot-product self-attention over the spatial positions of ``ff_in``."""
    n, d, h, w = ff_in.shape
    if d != head.d:
        raise ShapeError(f"head expects d={head.d} channels, got {d}")
    tokens, scores = _attention_logits(ff_in, head)
    v = matmul(tokens, head.w_v)
    out = matmul(softmax_lastdim(scores), v)
    return out.transpose(0, 2, 1).reshape(n, d, h, w)


def cascade_fuse(tilde_prev: Tensor, ff_next: Tensor, mode: FusionMode,
                 logit: Optional[Tensor] = None, concat_fuse: Optional[Tensor] = None) -> Tensor:
    """Blend the previous head's output into the next head's input."""
    if tilde_prev.shape != ff_next.shape:
        raise ShapeError(f"cascade_fuse shapes differ: {tilde_prev.shape} vs {ff_next.shape}")
    mode = FusionMode(mode)
    if mode is FusionMode.ADAPTIVE:
        if logit is None:
            raise ValueError("adaptive fusion needs a logit")
        alpha = sigmoid(logit.reshape(1, 1, 1, 1))
        return alpha * tilde_prev + (1.0 - alpha) * ff_next
    if mode is FusionMode.AVERAGE:
        return (tilde_prev + ff_next) * 0.5
    if mode is FusionMode.ADD:
        return tilde_prev + ff_next
    if concat_fuse is None:
        raise ValueError("concat fusion needs a (2d, d) projection")
    return channel_linear(concat_channels([tilde_prev, ff_next]), concat_fuse)


def aa_heads(ff: Tensor, p: AABlockParams) -> List[Tensor]:
    """Per-head attention outputs, in cascade order."""
    if ff.shape[1] != p.c:
        raise ShapeError(f"AA block expects C={p.c}, got {ff.shape[1]}")
    splits = split_channels(ff, p.h)
    outs = []
    current = splits[0]
    for i in range(p.h):
        tilde = head_attention(current, p.heads[i])
        outs.append(tilde)
        if i + 1 < p.h:
            current = cascade_fuse(
                tilde, splits[i + 1], p.fusion_mode,
                logit=p.alpha_logits[i] if p.fusion_mode is FusionMode.ADAPTIVE else None,
                concat_fuse=p.concat_fuse[i] if p.concat_fuse else None,
            )
    return outs


def aa_forward(ff: Tensor, p: AABlockParams) -> Tensor:
    return channel_linear(concat_channels(aa_heads(ff, p)), p.w_p)
