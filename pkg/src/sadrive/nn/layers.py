"""Parameter containers for the convolutional building blocks."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered by walking instance attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} != model shape {p.shape}")
            p.data[...] = state[n]


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        k: int = 3,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
        tag: str | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cout, cin, k, k)
        w = np.zeros(shape, np.float32) if zero_init else _he(rng, shape, cin * k * k)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.tag = tag
        self.pad_mode = "zero"

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode, self.tag)


class Deconv2d(Module):
    """Transposed convolution; with k=3, stride 2, padding 1 it doubles H and W."""

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int = 3,
        stride: int = 2,
        padding: int = 1,
        output_padding: int = 1,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
        tag: str | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (cin, cout, k, k)
        w = np.zeros(shape, np.float32) if zero_init else _he(rng, shape, cin * k * k // (stride * stride))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.tag = tag
        self.pad_mode = "zero"

    def __call__(self, x: Tensor) -> Tensor:
        return F.deconv2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding, self.pad_mode, self.tag
        )


def set_pad_mode(module: Module, mode: str) -> None:
    """Switch every conv/deconv below ``module`` to zero or circular padding."""
    for val in vars(module).values():
        if isinstance(val, (Conv2d, Deconv2d)):
            val.pad_mode = mode
        elif isinstance(val, Module):
            set_pad_mode(val, mode)
        elif isinstance(val, (list, tuple)):
            for item in val:
                if isinstance(item, Module):
                    set_pad_mode(item, mode)
