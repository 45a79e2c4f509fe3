"""Convolution + batch-norm + activation units (CBR / CBS)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .tensor import ShapeError, Tensor, activation, batchnorm2d, conv2d, conv_output_size


class Activation(str, enum.Enum):
    RELU = "relu"
    SILU = "silu"
    NONE = "none"


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ConvBNActLayer:
    kernel: Tensor
    bias: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_eps: float = 1e-5
    activation: Activation = Activation.RELU
    stride: int = 1
    padding: int = 0
    bn_momentum: float = 0.1
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if self.bn_eps <= 0:
            raise ValueError("bn_eps must be positive")
        if np.any(self.bn_var < 0):
            raise ValueError("bn_var entries must be non-negative")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int = 1, *, rng: np.random.Generator,
               activation: Activation = Activation.RELU, stride: int = 1,
               padding: Optional[int] = None, name: str = "") -> "ConvBNActLayer":
        """Fresh layer: kernel ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias, identity BN."""
        fan_in = c_in * k * k
        return cls(
            kernel=Tensor(uniform_init(rng, (c_out, c_in, k, k), fan_in), requires_grad=True),
            bias=Tensor(np.zeros(c_out), requires_grad=True),
            bn_gamma=Tensor(np.ones(c_out), requires_grad=True),
            bn_beta=Tensor(np.zeros(c_out), requires_grad=True),
            bn_mean=np.zeros(c_out),
            bn_var=np.ones(c_out),
            activation=activation,
            stride=stride,
            padding=k // 2 if padding is None else padding,
            name=name,
        )

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    def output_hw(self, h: int, w: int):
        return (conv_output_size(h, self.k, self.stride, self.padding),
                conv_output_size(w, self.k, self.stride, self.padding))

    def conv(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, stride=self.stride, padding=self.padding)

    def bn(self, x: Tensor, training: bool = False) -> Tensor:
        return batchnorm2d(x, self.bn_gamma, self.bn_beta, self.bn_mean, self.bn_var,
                           eps=self.bn_eps, training=training, momentum=self.bn_momentum)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.c_in:
            label = f" ({self.name})" if self.name else ""
            raise ShapeError(f"layer{label} expects C={self.c_in} input channels, got {x.shape[1]}")
        return activation(self.bn(self.conv(x), training), self.activation)

    def parameters(self) -> Dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias,
                "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"bn_mean": self.bn_mean, "bn_var": self.bn_var}

    def describe(self) -> dict:
        return {"c_in": self.c_in, "c_out": self.c_out, "k": self.k, "stride": self.stride,
                "padding": self.padding, "activation": self.activation.value, "bn_eps": self.bn_eps}
