"""Cross-scale BEV backbone with attention gating, plus detection and planning headers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import nn
from .attention import AttentionMask, UNetScorer, attend, unet_layer_shapes
from .nn import Tensor
from .nn import functional as F
from .scene import T_FUTURE, Bounds, anchor_at, n_input_channels
from .sparse import (
    LayerFlops,
    block_size_for,
    conv_flops,
    dense_conv_flops,
    dense_residual_block,
    dilate,
    pool_support,
    sparse_conv,
    sparse_residual_block,
    upsample_support,
)

CONFIG_MAGIC = "sadrive-model v1"
DOWNSAMPLE = 4


@dataclass
class BackboneConfig:
    """All dimensions of the model. ``tap`` is the number of cross-scale blocks
    run before the attention scorer (0 = scorer reads the stem output); blocks
    after the tap are gated."""

    in_channels: int = n_input_channels()
    stem_width: int = 32
    out_channels: int = 128
    depth: int = 3
    branch_widths: tuple[int, int, int] = (64, 96, 128)
    branch_scales: tuple[int, int, int] = (1, 2, 4)
    unet_widths: tuple[int, int, int] = (32, 64, 128)
    header_width: int = 128
    plan_width: int = 64
    horizon: int = T_FUTURE
    block_size: int = 4
    tap: int = 0
    downsample: int = DOWNSAMPLE

    def __post_init__(self):
        self.branch_widths = tuple(self.branch_widths)
        self.branch_scales = tuple(self.branch_scales)
        self.unet_widths = tuple(self.unet_widths)

    def validate(self) -> None:
        if self.downsample != DOWNSAMPLE:
            raise ValueError(f"downsample must be {DOWNSAMPLE}, got {self.downsample}")
        if len(self.branch_widths) != 3 or len(self.branch_scales) != 3:
            raise ValueError("a cross-scale block has exactly 3 branches")
        if len(self.unet_widths) != 3:
            raise ValueError("unet_widths needs 3 entries")
        for name in ("in_channels", "stem_width", "out_channels", "depth", "header_width", "plan_width",
                     "horizon", "block_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if any(w < 1 for w in self.branch_widths + self.unet_widths) or any(s < 1 for s in self.branch_scales):
            raise ValueError("widths and scales must be positive")
        if not 0 <= self.tap <= self.depth:
            raise ValueError(f"tap must lie in [0, depth={self.depth}], got {self.tap}")
        if self.plan_width < 2:
            raise ValueError("plan_width must be at least 2")

    def scaled(self, factor: float) -> "BackboneConfig":
        """Copy with every internal width multiplied by ``factor``."""

        def s(w):
            return max(1, int(round(w * factor)))

        d = asdict(self)
        d.update(
            stem_width=s(self.stem_width),
            out_channels=s(self.out_channels),
            branch_widths=tuple(s(w) for w in self.branch_widths),
            unet_widths=tuple(s(w) for w in self.unet_widths),
            header_width=s(self.header_width),
            plan_width=max(2, s(self.plan_width)),
        )
        return BackboneConfig(**d)

    # -- FLOP model -------------------------------------------------------

    def flop_layers(self, support: np.ndarray | None, grid: tuple[int, int] | None = None,
                    scorer: bool = True) -> list[LayerFlops]:
        """Per-layer backbone FLOPs (stem, scorer, cross-scale blocks; headers excluded).

        The scorer is counted (always dense) when a mask is given and ``scorer`` is set.
        """
        if grid is None:
            if support is None:
                raise ValueError("grid size needed for a dense count")
            grid = (support.shape[1] * DOWNSAMPLE, support.shape[2] * DOWNSAMPLE)
        H, W = grid
        h4, w4 = H // DOWNSAMPLE, W // DOWNSAMPLE
        layers = [
            dense_conv_flops("stem.0", (self.stem_width, self.in_channels, 3, 3), H // 2, W // 2),
            dense_conv_flops("stem.1", (self.out_channels, self.stem_width, 3, 3), h4, w4),
        ]
        if support is not None and scorer:
            layers += [dense_conv_flops(t, s, h, w) for t, s, h, w in
                       unet_layer_shapes(self.out_channels, self.unet_widths, h4, w4)]
        full = np.ones((1, h4, w4), dtype=bool)
        for i in range(self.depth):
            gated = support is not None and i >= self.tap
            block = cross_scale_flops(f"block{i}", self.out_channels, self.branch_widths, self.branch_scales,
                                      support if gated else full, self.block_size)
            for layer in block:
                layer.gated = gated
            layers += block
        return layers


def save_config(path, cfg: BackboneConfig) -> None:
    Path(path).write_text(CONFIG_MAGIC + "\n" + json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")


def config_from_dict(d: dict) -> BackboneConfig:
    known = {f.name for f in fields(BackboneConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown model config keys: {unknown}")
    cfg = BackboneConfig(**d)
    cfg.validate()
    return cfg


def load_config(path) -> BackboneConfig:
    header, _, body = Path(path).read_text().partition("\n")
    if header.strip() != CONFIG_MAGIC:
        raise ValueError(f"{path}: expected header {CONFIG_MAGIC!r}")
    return config_from_dict(json.loads(body))


# ---------------------------------------------------------------------------
# cross-scale block


def cross_scale_flops(prefix: str, C: int, widths, scales, support: np.ndarray, b: int) -> list[LayerFlops]:
    """Analytic mirror of :meth:`CrossScaleBlock.sparse`."""
    out = []
    union = np.zeros_like(support)
    for k, (c, s) in enumerate(zip(widths, scales)):
        sup = pool_support(support, s)
        bs = block_size_for(sup.shape[1], sup.shape[2], b)
        sup = dilate(sup, 1)
        out.append(conv_flops(f"{prefix}.branch{k}.conv1", (c, C, 3, 3), sup, bs))
        sup = dilate(sup, 1)
        out.append(conv_flops(f"{prefix}.branch{k}.conv2", (c, c, 3, 3), sup, bs))
        union |= upsample_support(sup, s)
    out.append(conv_flops(f"{prefix}.fuse", (C, sum(widths), 1, 1), union, b))
    return out


class CrossScaleBlock(nn.Module):
    """Three parallel branches (avg-pool, two bias-free 3×3 convs, nearest upsample)
    fused by a bias-free 1×1 conv. Used as F in x + F(x ⊙ A)."""

    def __init__(self, channels: int, widths, scales, rng=None, tag: str = "block"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.scales = tuple(scales)
        self.branches = []
        for k, (c, s) in enumerate(zip(widths, scales)):
            conv1 = nn.Conv2d(channels, c, 3, bias=False, rng=rng, tag=f"{tag}.branch{k}.conv1")
            conv2 = nn.Conv2d(c, c, 3, bias=False, rng=rng, tag=f"{tag}.branch{k}.conv2")
            self.branches.append(_Branch(conv1, conv2))
        self.fuse = nn.Conv2d(sum(widths), channels, 1, bias=False, rng=rng, tag=f"{tag}.fuse")
        # keep the residual path dominant at initialisation
        self.fuse.weight.data *= 0.5

    def __call__(self, x: Tensor) -> Tensor:
        outs = []
        for br, s in zip(self.branches, self.scales):
            u = F.avg_pool2d(x, s) if s > 1 else x
            h = F.relu(br.conv2(F.relu(br.conv1(u))))
            outs.append(F.upsample_nearest(h, s) if s > 1 else h)
        return self.fuse(F.concat(outs, axis=1))

    def sparse(self, x: Tensor, support: np.ndarray, b: int) -> Tensor:
        outs, union = [], np.zeros_like(support)
        for br, s in zip(self.branches, self.scales):
            u = F.avg_pool2d(x, s) if s > 1 else x
            sup = pool_support(support, s)
            bs = block_size_for(sup.shape[1], sup.shape[2], b)
            sup = dilate(sup, 1)
            h, _ = sparse_conv(u, br.conv1.weight, sup, bs, br.conv1.tag)
            sup = dilate(sup, 1)
            h, _ = sparse_conv(F.relu(h), br.conv2.weight, sup, bs, br.conv2.tag)
            h = F.relu(h)
            outs.append(F.upsample_nearest(h, s) if s > 1 else h)
            union |= upsample_support(sup, s)
        y, _ = sparse_conv(F.concat(outs, axis=1), self.fuse.weight, union, b, self.fuse.tag)
        return y


class _Branch(nn.Module):
    def __init__(self, conv1, conv2):
        self.conv1 = conv1
        self.conv2 = conv2


# ---------------------------------------------------------------------------
# headers


@dataclass
class DetectionOutput:
    score: Tensor
    regression: Tensor
    logit: Tensor


class DetectionHeader(nn.Module):
    """Separate classification and regression conv stacks over the features."""

    def __init__(self, channels: int, width: int, horizon: int = T_FUTURE, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cls_conv = nn.Conv2d(channels, width, 3, rng=rng, tag="det.cls")
        self.cls_out = nn.Conv2d(width, 1, 1, zero_init=True, rng=rng, tag="det.cls_out")
        self.reg_conv = nn.Conv2d(channels, width, 3, rng=rng, tag="det.reg")
        self.reg_out = nn.Conv2d(width, 6 * (horizon + 1), 1, zero_init=True, rng=rng, tag="det.reg_out")

    def __call__(self, feats: Tensor) -> DetectionOutput:
        logit = self.cls_out(F.relu(self.cls_conv(feats)))
        reg = self.reg_out(F.relu(self.reg_conv(feats)))
        return DetectionOutput(F.sigmoid(logit), reg, logit)


class PlanningHeader(nn.Module):
    """Conv then two stride-2 deconvs back to input resolution, one channel per future step."""

    def __init__(self, channels: int, width: int, horizon: int = T_FUTURE, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv = nn.Conv2d(channels, width, 3, rng=rng, tag="plan.conv")
        self.up1 = nn.Deconv2d(width, width // 2, rng=rng, tag="plan.up1")
        self.up2 = nn.Deconv2d(width // 2, horizon, rng=rng, tag="plan.up2")

    def __call__(self, feats: Tensor) -> Tensor:
        h = F.relu(self.conv(feats))
        h = F.relu(self.up1(h))
        return self.up2(h)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ModelOutput:
    features: Tensor
    detection: DetectionOutput
    cost: Tensor
    mask: AttentionMask | None = None
    logits: Tensor | None = None
    extra: dict = field(default_factory=dict)


class SANMP(nn.Module):
    """Stem (two stride-2 convs) → cross-scale blocks → detection and planning headers.

    The attention scorer reads the features after ``cfg.tap`` blocks and gates
    every later block.
    """

    def __init__(self, cfg: BackboneConfig | None = None, seed: int = 0):
        cfg = cfg or BackboneConfig()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem0 = nn.Conv2d(cfg.in_channels, cfg.stem_width, 3, stride=2, rng=rng, tag="stem.0")
        self.stem1 = nn.Conv2d(cfg.stem_width, cfg.out_channels, 3, stride=2, rng=rng, tag="stem.1")
        self.blocks = [
            CrossScaleBlock(cfg.out_channels, cfg.branch_widths, cfg.branch_scales, rng=rng, tag=f"block{i}")
            for i in range(cfg.depth)
        ]
        self.unet = UNetScorer(cfg.out_channels, cfg.unet_widths, rng=rng)
        self.detect = DetectionHeader(cfg.out_channels, cfg.header_width, cfg.horizon, rng=rng)
        self.plan = PlanningHeader(cfg.out_channels, cfg.plan_width, cfg.horizon, rng=rng)

    def backbone(self, x: Tensor, attention="none", K: float = 1.0, rng=None, sparse: bool = False):
        """Features plus the mask used.

        ``attention`` is "none" (ungated), "learned" (U-Net + Gumbel binarisation;
        noise only when ``rng`` is given) or a fixed mask at backbone resolution.
        ``sparse`` selects block-sparse execution of gated blocks.
        """
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise nn.ShapeError(f"backbone expects N×{self.cfg.in_channels}×H×W input, got {x.shape}")
        if x.shape[2] % (DOWNSAMPLE * 4) or x.shape[3] % (DOWNSAMPLE * 4):
            raise nn.ShapeError(f"input spatial size {x.shape[2:]} must be divisible by {DOWNSAMPLE * 4}")
        h = F.relu(self.stem0(x))
        h = F.relu(self.stem1(h))
        mask, z = None, None
        if not (isinstance(attention, str) and attention in ("none", "learned")):
            mask = _fixed_mask(attention, h)
        for i, blk in enumerate(self.blocks):
            if i == self.cfg.tap and isinstance(attention, str) and attention == "learned":
                z = self.unet(h)
                mask = attend(z, K, rng)
            if mask is not None and i >= self.cfg.tap:
                if sparse:
                    h = sparse_residual_block(h, blk, mask.hard, self.cfg.block_size)
                else:
                    h = dense_residual_block(h, blk, mask.gated)
            else:
                h = dense_residual_block(h, blk)
        return h, mask, z

    def __call__(self, x: Tensor, attention="none", K: float = 1.0, rng=None, sparse: bool = False) -> ModelOutput:
        feats, mask, z = self.backbone(x, attention, K, rng, sparse)
        return ModelOutput(feats, self.detect(feats), self.plan(feats), mask, z)

    def flop_layers(self, support, grid=None, scorer: bool = True):
        return self.cfg.flop_layers(support, grid, scorer)

    def backbone_parameters(self) -> list[Tensor]:
        out = self.stem0.parameters() + self.stem1.parameters()
        for blk in self.blocks:
            out += blk.parameters()
        return out


def _fixed_mask(mask, feats: Tensor) -> AttentionMask:
    if isinstance(mask, AttentionMask):
        hard = mask.hard
    else:
        hard = np.asarray(mask, dtype=np.float32)
    if hard.ndim == 2:
        hard = hard[None, None]
    elif hard.ndim == 3:
        hard = hard[:, None]
    if hard.shape[-2:] != feats.shape[-2:]:
        raise nn.ShapeError(f"mask {hard.shape[-2:]} does not match backbone resolution {feats.shape[-2:]}")
    hard = np.ascontiguousarray(np.broadcast_to(hard, (feats.shape[0], 1) + feats.shape[2:]), dtype=np.float32)
    t = Tensor(hard)
    return AttentionMask(hard, t, t, 1.0)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Detection:
    box: tuple[float, float, float, float, float]
    score: float
    future: np.ndarray  # T × 5 boxes
    cell: tuple[int, int]


def decode_detections(score: np.ndarray, regression: np.ndarray, bounds: Bounds | None = None,
                      threshold: float = 0.5, nms_iou: float = 0.5, stride: int = DOWNSAMPLE,
                      max_candidates: int | None = None) -> list[Detection]:
    """Boxes from one score map (h×w) and regression map (6(T+1)×h×w), score-ordered, after NMS.

    ``max_candidates`` keeps only the highest-scoring cells before NMS.
    """
    bounds = bounds or Bounds()
    score = np.asarray(score).reshape(score.shape[-2:])
    reg = np.asarray(regression).reshape((-1,) + score.shape)
    cells = np.argwhere(score >= threshold)
    if max_candidates is not None and len(cells) > max_candidates:
        order = np.argsort(-score[cells[:, 0], cells[:, 1]], kind="stable")[:max_candidates]
        cells = cells[np.sort(order)]
    cand = []
    for i, j in cells:
        anchor = anchor_at(bounds, i, j)
        boxes = geo.decode_box(reg[:, i, j].reshape(-1, 6).astype(np.float64), anchor)
        cand.append(Detection(tuple(float(v) for v in boxes[0]), float(score[i, j]), boxes[1:], (int(i), int(j))))
    cand.sort(key=lambda d: (-d.score, d.cell))
    return nms(cand, nms_iou)


def nms(dets: list[Detection], iou: float) -> list[Detection]:
    keep: list[Detection] = []
    for d in dets:
        if all(geo.rotated_iou(d.box, k.box) <= iou for k in keep):
            keep.append(d)
    return keep
