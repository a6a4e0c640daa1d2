"""Binary spatial attention: U-Net scorer, Gumbel binarisation, baseline masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize, special

from . import nn
from .formats import save_pgm, save_tensor
from .nn import functional as F
from .nn import Tensor
from .scene import LABEL_STRIDE, Scene, drivable, rasterize_labels


class UNetScorer(nn.Module):
    """Small U-Net mapping backbone features to one attention logit per cell.

    Encoder: full-res conv, then two stride-2 stages. Decoder: two nearest
    upsamples, each followed by skip concatenation and a conv. The final 1×1
    conv is zero-initialised so training starts at pi = 0.5.
    """

    def __init__(self, in_channels: int = 128, widths=(32, 64, 128), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c0, c1, c2 = widths
        self.in_channels = in_channels
        self.enc0 = nn.Conv2d(in_channels, c0, 3, rng=rng, tag="unet.enc0")
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, rng=rng, tag="unet.down1")
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, rng=rng, tag="unet.down2")
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, rng=rng, tag="unet.up1")
        self.up2 = nn.Conv2d(c1 + c0, c0, 3, rng=rng, tag="unet.up2")
        self.head = nn.Conv2d(c0, 1, 1, zero_init=True, rng=rng, tag="unet.head")

    def __call__(self, feats: Tensor) -> Tensor:
        if feats.ndim != 4 or feats.shape[1] != self.in_channels:
            raise nn.ShapeError(f"unet_score: expected N×{self.in_channels}×H×W features, got {feats.shape}")
        if feats.shape[2] % 4 or feats.shape[3] % 4:
            raise nn.ShapeError(f"unet_score: spatial dims {feats.shape[2:]} must be divisible by 4")
        e0 = F.relu(self.enc0(feats))
        e1 = F.relu(self.down1(e0))
        e2 = F.relu(self.down2(e1))
        d1 = F.relu(self.up1(F.concat([F.upsample_nearest(e2, 2), e1], axis=1)))
        d0 = F.relu(self.up2(F.concat([F.upsample_nearest(d1, 2), e0], axis=1)))
        return self.head(d0)


def unet_layer_shapes(in_channels: int, widths, H: int, W: int):
    """(tag, weight shape, output H, output W) of each scorer conv for an H×W input."""
    c0, c1, c2 = widths
    return [
        ("unet.enc0", (c0, in_channels, 3, 3), H, W),
        ("unet.down1", (c1, c0, 3, 3), H // 2, W // 2),
        ("unet.down2", (c2, c1, 3, 3), H // 4, W // 4),
        ("unet.up1", (c1, c2 + c1, 3, 3), H // 2, W // 2),
        ("unet.up2", (c0, c1 + c0, 3, 3), H, W),
        ("unet.head", (1, c0, 1, 1), H, W),
    ]


def gumbel_noise(u) -> np.ndarray:
    """g = -log(-log u) for u in the open unit interval."""
    u = np.asarray(u, dtype=np.float64)
    if not np.all((u > 0) & (u < 1)):
        raise ValueError("gumbel_noise: u must lie strictly inside (0, 1)")
    return -np.log(-np.log(u))


def sample_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u[u == 0.0] = np.finfo(np.float64).tiny
    return u


@dataclass
class AttentionLogits:
    """Pre-noise logit z, pi = sigmoid(z) and the noise-perturbed pair (alpha0, alpha1)."""

    z: Tensor
    pi: np.ndarray
    alpha0: Tensor
    alpha1: Tensor


def perturb(z: Tensor, g0=None, g1=None) -> AttentionLogits:
    """alpha0 = log pi + g0, alpha1 = log(1 - pi) + g1, computed in float64.

    Missing noise terms mean zero noise (inference).
    """
    z64 = F.cast(z, np.float64)
    a0 = F.log_sigmoid(z64)
    a1 = F.log_sigmoid(z64 * -1.0)
    if g0 is not None:
        a0 = a0 + np.asarray(g0, np.float64)
    if g1 is not None:
        a1 = a1 + np.asarray(g1, np.float64)
    pi = special.expit(z64.data)
    return AttentionLogits(z, pi, a0, a1)


@dataclass
class AttentionMask:
    """Hard mask A (numpy 0/1), soft relaxation, and the straight-through tensor.

    ``gated`` carries A forward and the gradient of the soft mask backward.
    """

    hard: np.ndarray
    soft: Tensor
    gated: Tensor
    K: float

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.hard.sum()) / self.hard.size

    def save_pgm(self, path) -> None:
        hard = self.hard.reshape(self.hard.shape[-2:]) if self.hard.ndim > 2 else self.hard
        save_pgm(path, (hard > 0).astype(np.uint8) * 255)

    def save(self, path) -> None:
        save_tensor(path, self.hard, {"kind": "attention-mask", "K": self.K})


def binarize(alpha0: Tensor, alpha1: Tensor, K: float = 1.0, dtype=np.float32) -> AttentionMask:
    """Hard A = 1[alpha0 >= alpha1]; soft = exp(alpha0/K) / (exp(alpha0/K) + exp(alpha1/K))."""
    if not K > 0:
        raise ValueError(f"temperature K must be positive, got {K}")
    hard = (alpha0.data >= alpha1.data).astype(np.float64)
    # two-way softmax written as a sigmoid of the scaled difference
    soft = F.sigmoid((alpha0 - alpha1) * (1.0 / K))
    gated = F.straight_through(hard, soft)
    if dtype is not None and gated.dtype != dtype:
        gated = F.cast(gated, dtype)
    return AttentionMask(hard.astype(np.float32), soft, gated, float(K))


def attend(z: Tensor, K: float = 1.0, rng: np.random.Generator | None = None) -> AttentionMask:
    """Perturb with fresh Gumbel noise when ``rng`` is given, otherwise zero noise, then binarise."""
    if rng is None:
        logits = perturb(z)
    else:
        g0 = gumbel_noise(sample_uniform(rng, z.shape))
        g1 = gumbel_noise(sample_uniform(rng, z.shape))
        logits = perturb(z, g0, g1)
    return binarize(logits.alpha0, logits.alpha1, K, dtype=z.dtype)


def temperature(progress: float, k_start: float = 1.0, k_end: float = 0.5, anneal: bool = False) -> float:
    """K for a training progress in [0, 1]; constant unless ``anneal``."""
    if not anneal:
        return k_start
    p = min(max(progress, 0.0), 1.0)
    return k_start + (k_end - k_start) * p


def sparsity_loss(mask: AttentionMask) -> Tensor:
    """L1 of the hard mask; gradient through the soft relaxation."""
    return mask.gated.sum()


# ---------------------------------------------------------------------------
# static baselines

BASELINES = ("road", "vehicle", "proximity", "dense")
PROXIMITY_SPARSITY = 0.94


def _fixed(hard: np.ndarray) -> AttentionMask:
    hard = hard.astype(np.float32)
    t = Tensor(hard)
    return AttentionMask(hard, t, t, 1.0)


def proximity_radius(scene_or_bounds, target_sparsity: float = PROXIMITY_SPARSITY,
                     stride: int = LABEL_STRIDE) -> float:
    """Disk radius around the ego whose covered-cell fraction first reaches 1 - target."""
    bounds = getattr(scene_or_bounds, "bounds", scene_or_bounds)
    d = np.linalg.norm(bounds.cell_centers(stride), axis=-1).ravel()
    want = 1.0 - target_sparsity

    def excess(r):
        return np.mean(d <= r) - want

    hi = float(d.max()) + 1.0
    return float(optimize.bisect(excess, 0.0, hi, xtol=1e-9))


def baseline_mask(kind: str, scene: Scene, stride: int = LABEL_STRIDE,
                  target_sparsity: float = PROXIMITY_SPARSITY) -> AttentionMask:
    """Static masks at backbone resolution: road, vehicle, proximity or dense."""
    b = scene.bounds
    shape = (b.H // stride, b.W // stride)
    centers = b.cell_centers(stride)
    if kind == "dense":
        return _fixed(np.ones(shape))
    if kind == "road":
        return _fixed(drivable(centers, scene.lanes))
    if kind == "vehicle":
        occupied = rasterize_labels(scene, stride).score > 0
        return _fixed(ndimage.binary_dilation(occupied, structure=np.ones((3, 3), bool)))
    if kind == "proximity":
        r = proximity_radius(b, target_sparsity, stride)
        return _fixed(np.linalg.norm(centers, axis=-1) <= r)
    raise ValueError(f"unknown baseline mask kind {kind!r}; expected one of {BASELINES}")
