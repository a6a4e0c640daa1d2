"""Multi-task objective: max-margin planning, detection with attention
reweighting, the attention L1 term and weight decay."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .formats import write_csv
from .nn import Tensor
from .nn import functional as F
from .planner import _stack_waypoints, off_lane_steps, step_costs
from .scene import Bounds, Lane

LOG_COLUMNS = ["step", "L_plan", "L_cls", "L_reg", "L_attn", "sparsity"]


@dataclass
class LossWeights:
    """Loss coefficients.

    ``attn_scale`` multiplies ``attn`` (λ_A) so the default λ_A grid can be
    reused on the much smaller desk-scale grid; 1.0 means λ_A is used as is.
    """

    plan: float = 0.001
    cls: float = 1.0
    reg: float = 0.5
    attn: float = 1e-6
    decay: float = 0.0
    gamma0: float = 0.1
    gamma1: float = 0.9
    v_penalty: float = 1.5
    attn_scale: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and np.isfinite(v)):
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")

    @classmethod
    def with_ratio(cls, gamma1: float, **kw) -> "LossWeights":
        """Weights with γ0 = 1 - γ1."""
        return cls(gamma0=1.0 - gamma1, gamma1=gamma1, **kw)


# ---------------------------------------------------------------------------
# planning


def task_margin(gt, negatives, lanes: list[Lane] | None = None, v_penalty: float = 1.5,
                ego_size=None) -> np.ndarray:
    """Δ (N×T): waypoint distance to the ground truth plus ``v_penalty`` per violating step."""
    g = _stack_waypoints(gt)[0]
    neg = _stack_waypoints(negatives)
    delta = np.linalg.norm(neg[..., :2] - g[:, :2], axis=-1)
    if lanes is not None and v_penalty:
        kw = {} if ego_size is None else {"ego_size": ego_size}
        delta = delta + v_penalty * off_lane_steps(neg, lanes, **kw)
    return delta


def margin_terms(cost, gt, negatives, delta: np.ndarray, bounds: Bounds | None = None) -> Tensor:
    """Per negative and step: max{0, c_t - c_t^(i) + Δ_t^(i)} (N×T)."""
    c_gt = step_costs(gt, cost, bounds)
    c_neg = step_costs(negatives, cost, bounds)
    return F.relu(c_gt - c_neg + Tensor(delta.astype(c_neg.dtype)))


def planning_loss(cost, gt, negatives, lanes: list[Lane] | None = None, bounds: Bounds | None = None,
                  v_penalty: float = 1.5, delta: np.ndarray | None = None) -> Tensor:
    """Largest summed margin violation over the negatives, for one T×H×W cost volume."""
    neg = _stack_waypoints(negatives)
    if len(neg) == 0:
        raise ValueError("planning_loss needs at least one negative trajectory")
    g = _stack_waypoints(gt)
    if g.shape[1] != neg.shape[1]:
        raise ValueError(f"ground truth has {g.shape[1]} steps, negatives have {neg.shape[1]}")
    if delta is None:
        delta = task_margin(g, neg, lanes, v_penalty)
    per_neg = F.sum(margin_terms(cost, g, neg, delta, bounds), axis=1)
    return F.max(per_neg, axis=0)


# ---------------------------------------------------------------------------
# perception and prediction


def cls_loss_map(score: Tensor, label, eps: float = 1e-7) -> Tensor:
    """Per-cell BCE between predicted probabilities and binary labels."""
    return F.binary_cross_entropy(score, label, eps)


def reg_loss_map(regression: Tensor, targets, positive, beta: float = 1.0) -> Tensor:
    """Per-cell smooth-L1 summed over all box offsets, zero where no box is owned.

    ``regression`` and ``targets`` are N×6(T+1)×H×W; ``positive`` is N×H×W.
    Returns N×H×W.
    """
    pos = np.asarray(positive, dtype=regression.dtype)
    if pos.ndim == 2:
        pos = pos[None]
    per_channel = F.smooth_l1(regression, targets, beta) * pos[:, None]
    return F.sum(per_channel, axis=1)


def reweight(loss_map: Tensor, mask, gamma0: float = 0.1, gamma1: float = 0.9) -> Tensor:
    """γ1·Σ A·L + γ0·Σ L; ``mask`` may be the straight-through tensor."""
    L = loss_map
    A = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=L.dtype))
    if A.size != L.size:
        if A.shape[-2:] != L.shape[-2:]:
            raise ValueError(f"mask {A.shape} and loss map {L.shape} differ in resolution")
    A = F.reshape(A, L.shape) if A.size == L.size else A
    return F.sum(L * A) * gamma1 + F.sum(L) * gamma0


def total_loss(parts: dict, weights: LossWeights, params=()) -> Tensor:
    """λ_plan L_plan + λ_cls L_cls + λ_reg L_reg + λ_A L_attn + λ‖w‖²; missing parts count as zero."""
    coef = {"plan": weights.plan, "cls": weights.cls, "reg": weights.reg,
            "attn": weights.attn * weights.attn_scale}
    unknown = set(parts) - set(coef)
    if unknown:
        raise ValueError(f"unknown loss parts {sorted(unknown)}")
    total = Tensor(np.zeros((), dtype=np.float64))
    for k, v in parts.items():
        v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
        if v.size != 1:
            raise ValueError(f"loss part {k} must be scalar, got shape {v.shape}")
        total = total + F.reshape(F.cast(v, np.float64), ()) * coef[k]
    if weights.decay:
        for p in params:
            total = total + F.cast(F.square_norm(p), np.float64) * weights.decay
    return total


class LossLog:
    """Per-step loss breakdown written as CSV."""

    def __init__(self):
        self.rows: list[tuple] = []

    def append(self, step: int, parts: dict, sparsity: float) -> None:
        def val(k):
            v = parts.get(k)
            return 0.0 if v is None else float(v.item() if isinstance(v, Tensor) else v)

        self.rows.append((step, val("plan"), val("cls"), val("reg"), val("attn"), float(sparsity)))

    def save(self, path) -> None:
        write_csv(path, LOG_COLUMNS, self.rows)
