"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    n_excluded: int
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-3,
    tol: float = 1e-3,
    pattern: Callable[[np.ndarray], np.ndarray] | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Everything runs in float64. The relative error of coordinate i is
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor * max|a|)``, so coordinates far
    below the gradient's overall scale are judged on an absolute basis.

    ``pattern`` maps an input array to a discrete array (active ReLUs, hinge
    sets, ...). Coordinates whose ±eps perturbation changes the pattern sit
    next to a kink and are excluded.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        if out._node is None:
            analytic = np.zeros_like(x0)
        else:
            (analytic,) = tape.backward(out, [xt])
    analytic = np.asarray(analytic, dtype=np.float64)

    base = pattern(x0) if pattern is not None else None
    numeric = np.zeros_like(x0)
    keep = np.ones(x0.size, dtype=bool)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            xp = x0.copy()
            fp = float(f(Tensor(xp)).data)
            if base is not None and not np.array_equal(pattern(xp), base):
                keep[i] = False
            flat[i] = orig - eps
            xm = x0.copy()
            fm = float(f(Tensor(xm)).data)
            if base is not None and not np.array_equal(pattern(xm), base):
                keep[i] = False
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)

    a = analytic.reshape(-1)[keep]
    n = numeric.reshape(-1)[keep]
    if a.size:
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
        err = float(np.max(np.abs(a - n) / denom))
    else:
        err = 0.0
    return GradCheckReport(err, tol, int(keep.sum()), int((~keep).sum()), analytic, numeric)
