from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adam_step(param, grad, m, v, step: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``param``, ``m`` and ``v``."""
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**step)
    vhat = v / (1 - beta2**step)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray] | None = None) -> None:
        self.t += 1
        grads = grads if grads is not None else [p.grad for p in self.params]
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            adam_step(p.data, g, m, v, self.t, self.lr, *self.betas, self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m.{i}"]
            self.v[i][...] = state[f"v.{i}"]
