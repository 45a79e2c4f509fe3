"""Learning-rate schedule, momentum SGD and a synthetic detection training loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pyramid import AmamConfig, AmamParams, ToyBackbone, ToyHead, amam_forward, init_amam, toy_backbone, toy_head
from .tensor import Tensor, abs_, bce_with_logits, mul, sum_all

IMAGE_SIZE = 64


@dataclass
class LrSchedule:
    total_iters: int
    warmup_iters: int = 0
    lr_init: float = 0.01
    lr_final: float = 0.002
    momentum: float = 0.937
    warmup_start: float = 0.1  # fraction of lr_init at iteration 0

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ValueError(f"warmup_iters={self.warmup_iters} must be in [0, total_iters)")
        if self.lr_init <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")

    @classmethod
    def from_epochs(cls, epochs: int = 500, iters_per_epoch: int = 1, warmup_epochs: int = 3,
                    **kw) -> "LrSchedule":
        total = epochs * iters_per_epoch
        return cls(total_iters=total, warmup_iters=min(warmup_epochs * iters_per_epoch, total - 1), **kw)


def lr_at(it: int, s: LrSchedule) -> float:
    """Linear warm-up to ``lr_init`` then cosine annealing to ``lr_final``."""
    if not 0 <= it <= s.total_iters:
        raise ValueError(f"iteration {it} outside [0, {s.total_iters}]")
    if it < s.warmup_iters:
        start = s.warmup_start * s.lr_init
        return start + (s.lr_init - start) * it / s.warmup_iters
    if it == s.warmup_iters:
        return s.lr_init
    if it == s.total_iters:
        return s.lr_final
    t = (it - s.warmup_iters) / (s.total_iters - s.warmup_iters)
    return s.lr_final + 0.5 * (s.lr_init - s.lr_final) * (1.0 + math.cos(math.pi * t))


def schedule_csv(s: LrSchedule) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "lr"])
    for it in range(s.total_iters + 1):
        writer.writerow([it, f"{lr_at(it, s):.9g}"])
    return buf.getvalue()


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], lr: float,
             momentum: float, velocity: List[Optional[np.ndarray]]) -> List[np.ndarray]:
    """Classical momentum: ``v <- m*v + g``; ``p <- p - lr*v``.

    ``velocity`` is updated in place; entries start as ``None``. A ``None``
    gradient leaves its parameter and velocity untouched.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must have the same length")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        v = g.copy() if velocity[i] is None else momentum * velocity[i] + g
        velocity[i] = v
        out.append(p - lr * v)
    return out


# -- synthetic data --------------------------------------------------------
def synthetic_batch(rng: np.random.Generator, batch_size: int,
                    size: int = IMAGE_SIZE) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Noise images with 1-3 bright rectangles; boxes as ``[x1, y1, x2, y2]`` rows."""
    images = rng.normal(0.0, 0.1, size=(batch_size, 1, size, size))
    boxes = []
    for b in range(batch_size):
        rows = []
        for _ in range(rng.integers(1, 4)):
            w, h = rng.integers(6, 21, size=2)
            x1 = rng.integers(0, size - w + 1)
            y1 = rng.integers(0, size - h + 1)
            images[b, 0, y1:y1 + h, x1:x1 + w] += 1.0
            rows.append([x1, y1, x1 + w, y1 + h])
        boxes.append(np.array(rows, dtype=np.float64))
    return images, boxes


def build_targets(boxes: List[np.ndarray], grid: int, size: int = IMAGE_SIZE):
    """Objectness map (B, G, G) and offset targets (B, 4, G, G)."""
    stride = size / grid
    obj = np.zeros((len(boxes), grid, grid))
    offsets = np.zeros((len(boxes), 4, grid, grid))
    for b, rows in enumerate(boxes):
        for x1, y1, x2, y2 in rows:
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            gx = min(int(cx // stride), grid - 1)
            gy = min(int(cy // stride), grid - 1)
            obj[b, gy, gx] = 1.0
            offsets[b, :, gy, gx] = (cx / stride - gx, cy / stride - gy, (x2 - x1) / size, (y2 - y1) / size)
    return obj, offsets


def detection_loss(outputs: List[Tensor], boxes: List[np.ndarray]) -> Tensor:
    """Mean objectness BCE per level plus L1 offset error at positive cells."""
    total = None
    n_pos = 0
    l1 = None
    for out in outputs:
        grid = out.shape[2]
        obj, offsets = build_targets(boxes, grid)
        logits = out[:, 0]
        bce = mul(sum_all(bce_with_logits(logits, obj)), 1.0 / obj.size)
        total = bce if total is None else total + bce
        mask = obj[:, None]
        err = sum_all(mul(abs_(out[:, 1:] - offsets), mask))
        l1 = err if l1 is None else l1 + err
        n_pos += int(obj.sum())
    total = total * (1.0 / len(outputs))
    return total + l1 * (1.0 / (4 * max(n_pos, 1)))


# -- toy training ----------------------------------------------------------
@dataclass
class ToyModel:
    backbone: ToyBackbone
    head: ToyHead
    amam: Optional[AmamParams]

    def parameters(self) -> Dict[str, Tensor]:
        out = {f"backbone.{k}": t for k, t in self.backbone.parameters().items()}
        if self.amam is not None:
            out.update({f"amam.{k}": t for k, t in self.amam.parameters().items()})
        out.update({f"head.{k}": t for k, t in self.head.parameters().items()})
        return out

    def forward(self, images: Tensor, training: bool = True) -> List[Tensor]:
        pyr = toy_backbone(images, self.backbone, training)
        if self.amam is not None:
            pyr = amam_forward(pyr, self.amam, training)
        return toy_head(pyr, self.head)


def build_model(cfg: Optional[AmamConfig], seed: int) -> ToyModel:
    channels = cfg.levels if cfg is not None else (32, 64, 128)
    return ToyModel(
        backbone=ToyBackbone.create(seed, channels),
        head=ToyHead.create(seed, channels),
        amam=init_amam(cfg) if cfg is not None else None,
    )


DEFAULT_BATCH = 2
DEFAULT_LR = 0.01


def toy_train(cfg: Optional[AmamConfig], steps: int, seed: int = 0, *, batch_size: int = DEFAULT_BATCH,
              schedule: Optional[LrSchedule] = None, lr_trace: Optional[list] = None) -> List[float]:
    """Train backbone -> AMAM -> head on synthetic boxes; return the per-step loss.

    ``cfg=None`` trains the bare backbone + head baseline. The schedule
    defaults to warm-up over the first 5% of steps then cosine decay from
    0.01 to 0.002.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if schedule is None:
        schedule = LrSchedule(total_iters=steps, warmup_iters=max(0, min(steps // 20, steps - 1)),
                              lr_init=DEFAULT_LR, lr_final=0.002)
    model = build_model(cfg, seed)
    named = model.parameters()
    tensors = list(named.values())
    velocity: List[Optional[np.ndarray]] = [None] * len(tensors)
    data_rng = np.random.default_rng([seed, 0])
    trace = []
    for step in range(steps):
        images, boxes = synthetic_batch(data_rng, batch_size)
        for t in tensors:
            t.grad = None
        loss = detection_loss(model.forward(Tensor(images)), boxes)
        loss.backward()
        lr = lr_at(min(step, schedule.total_iters), schedule)
        updated = sgd_step([t.data for t in tensors], [t.grad for t in tensors], lr, schedule.momentum, velocity)
        for t, p in zip(tensors, updated):
            t.data = p
        trace.append(loss.item())
        if lr_trace is not None:
            lr_trace.append(lr)
    return trace


def trace_csv(losses: Sequence[float], lrs: Sequence[float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "lr", "loss"])
    for i, (lr, loss) in enumerate(zip(lrs, losses)):
        writer.writerow([i, f"{lr:.9g}", f"{loss:.9g}"])
    return buf.getvalue()
