"""Parameter containers and the conv blocks every network here is built from.

Blocks are Conv-Bias-ReLU: batch norm is replaced by a learned bias because
all training runs at batch size one or two.
"""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from . import checkpoint
from .tensor import DEFAULT_DTYPE, Tensor, conv2d, deconv2d, relu


class Module:
    """Minimal parameter tree: attributes that are Tensors or Modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:4]} unexpected={extra[:4]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype).copy()

    def to_bytes(self) -> bytes:
        return checkpoint.encode(self.state_dict())

    def load_bytes(self, buf: bytes, strict: bool = True) -> None:
        self.load_state_dict(checkpoint.decode(buf), strict=strict)


def param(arr: np.ndarray, name: str = "") -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class ConvBlock(Module):
    """conv (or deconv) + bias, optionally followed by relu.

    ``bias=False`` gives a zero-preserving, positively homogeneous block.
    """

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, *,
                 act: bool = True, transpose: bool = False, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE, init_scale: float = 1.0, bias_init: float = 0.0, bias: bool = True):
        self.stride = stride
        self.padding = padding
        self.act = act
        self.transpose = transpose
        if transpose:
            fan_in = cin * k * k / (stride * stride)
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cin, cout, k, k))
        else:
            fan_in = cin * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k))
        self.weight = param((w * init_scale).astype(dtype))
        self.bias = param(np.full(cout, bias_init, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        op = deconv2d if self.transpose else conv2d
        y = op(x, self.weight, self.bias, self.stride, self.padding)
        return relu(y) if self.act else y
