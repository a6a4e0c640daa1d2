"""Block-sparse execution of gated residual blocks and FLOP accounting.

A gated block computes ``x + F(x ⊙ A)``. With bias-free convolutions and
ReLU, ``F`` maps zero to zero, so each conv layer only has to be evaluated on
the cells its input can reach: the support of layer k is the support of
layer k-1 dilated by the kernel radius. Every layer is run on the b×b blocks
that touch its support, gathering each block with a halo of the kernel
radius from a zero-padded dense buffer and scattering the results back.
The result matches the dense formula cell for cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from . import nn
from .formats import write_csv
from .nn import Tensor
from .nn import functional as F
from .nn.tensor import make_result


@dataclass(frozen=True)
class BlockIndex:
    """Active b×b blocks as sorted (batch, block_row, block_col) rows."""

    b: int
    halo: int
    blocks: np.ndarray
    grid: tuple[int, int, int]  # (N, H, W)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def n_total(self) -> int:
        N, H, W = self.grid
        return N * (H // self.b) * (W // self.b)

    @property
    def covers_all(self) -> bool:
        return len(self) == self.n_total


def _as_nhw(mask) -> np.ndarray:
    m = np.asarray(mask.hard if hasattr(mask, "hard") else mask)
    if m.ndim == 2:
        m = m[None]
    elif m.ndim == 4:
        if m.shape[1] != 1:
            raise nn.ShapeError(f"mask must have a single channel, got shape {m.shape}")
        m = m[:, 0]
    elif m.ndim != 3:
        raise nn.ShapeError(f"mask must be H×W, N×H×W or N×1×H×W, got shape {m.shape}")
    return m > 0


def mask_to_blocks(mask, b: int, halo: int = 0) -> BlockIndex:
    """Blocks of size ``b`` containing at least one active cell."""
    m = _as_nhw(mask)
    N, H, W = m.shape
    if b < 1 or H % b or W % b:
        raise ValueError(f"block size {b} does not divide the {H}×{W} grid")
    any_on = m.reshape(N, H // b, b, W // b, b).any(axis=(2, 4))
    return BlockIndex(b, halo, np.argwhere(any_on), (N, H, W))


def block_size_for(H: int, W: int, b: int) -> int:
    """Largest block size ≤ b dividing both grid dimensions."""
    for d in range(min(b, H, W), 0, -1):
        if H % d == 0 and W % d == 0:
            return d
    return 1


def dilate(support: np.ndarray, radius: int) -> np.ndarray:
    """Square dilation of an N×H×W boolean support (the reach of a (2r+1)² kernel)."""
    if radius == 0:
        return support
    st = np.ones((1, 2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(support, structure=st)


def pool_support(support: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return support
    N, H, W = support.shape
    return support.reshape(N, H // f, f, W // f, f).any(axis=(2, 4))


def upsample_support(support: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return support
    return support.repeat(f, axis=1).repeat(f, axis=2)


# ---------------------------------------------------------------------------
# gather / scatter


def gather_tiles(x: Tensor, index: BlockIndex) -> Tensor:
    """Copy each active block plus halo into an n×C×(b+2h)×(b+2h) batch."""
    b, h = index.b, index.halo
    t = b + 2 * h
    xp = np.pad(x.data, ((0, 0), (0, 0), (h, h), (h, h)))
    n, bi, bj = index.blocks.T
    win = sliding_window_view(xp, (t, t), axis=(2, 3))[:, :, ::b, ::b]
    tiles = np.ascontiguousarray(win[n, :, bi, bj])

    def bw(g):
        gp = np.zeros_like(xp)
        for k in range(len(n)):
            r0, c0 = bi[k] * b, bj[k] * b
            gp[n[k], :, r0 : r0 + t, c0 : c0 + t] += g[k]
        H, W = x.shape[2], x.shape[3]
        return (gp[:, :, h : h + H, h : h + W],)

    return make_result(tiles, (x,), bw)


def scatter_tiles(tiles: Tensor, index: BlockIndex, channels: int) -> Tensor:
    """Write n×C×b×b tiles into a zero N×C×H×W grid (blocks are disjoint)."""
    N, H, W = index.grid
    b = index.b
    out = np.zeros((N, channels, H, W), dtype=tiles.dtype)
    view = out.reshape(N, channels, H // b, b, W // b, b)
    n, bi, bj = index.blocks.T
    view[n, :, bi, :, bj, :] = tiles.data

    def bw(g):
        return (np.ascontiguousarray(g.reshape(N, channels, H // b, b, W // b, b)[n, :, bi, :, bj, :]),)

    return make_result(out, (tiles,), bw)


def sparse_conv(x: Tensor, weight: Tensor, support: np.ndarray, b: int, tag: str | None = None):
    """Stride-1 'same' conv evaluated only on blocks touching ``support``.

    ``support`` is the output region that may be non-zero. Returns the dense
    result grid (zeros elsewhere) and the block index used.
    """
    k = weight.shape[-1]
    r = k // 2
    index = mask_to_blocks(support, b, halo=r)
    N, _, H, W = x.shape
    cout = weight.shape[0]
    if index.covers_all:
        return F.conv2d(x, weight, None, padding=r, tag=tag), index
    if len(index) == 0:
        return Tensor(np.zeros((N, cout, H, W), dtype=x.dtype)), index
    tiles = gather_tiles(x, index)
    out = F.conv2d(tiles, weight, None, padding=0, tag=tag)
    return scatter_tiles(out, index, cout), index


# ---------------------------------------------------------------------------
# gated residual blocks


@dataclass
class LayerFlops:
    name: str
    dense: int
    sparse: int
    active_blocks: int
    total_blocks: int
    gated: bool = True


class ResidualUnit(nn.Module):
    """Bias-free conv3×3 → ReLU → conv3×3, so F(0) = 0."""

    def __init__(self, channels: int, hidden: int | None = None, rng=None, tag: str = "unit"):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden or channels
        self.conv1 = nn.Conv2d(channels, hidden, 3, bias=False, rng=rng, tag=f"{tag}.conv1")
        self.conv2 = nn.Conv2d(hidden, channels, 3, bias=False, rng=rng, tag=f"{tag}.conv2")
        self.tag = tag

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(F.relu(self.conv1(x)))

    def sparse(self, x: Tensor, support: np.ndarray, b: int) -> Tensor:
        s1 = dilate(support, 1)
        h, _ = sparse_conv(x, self.conv1.weight, s1, b, self.conv1.tag)
        y, _ = sparse_conv(F.relu(h), self.conv2.weight, dilate(s1, 1), b, self.conv2.tag)
        return y

    def flop_layers(self, support: np.ndarray, b: int) -> list[LayerFlops]:
        out = []
        for conv in (self.conv1, self.conv2):
            support = dilate(support, 1)
            out.append(conv_flops(conv.tag, conv.weight.shape, support, b))
        return out


def conv_flops(name: str, wshape, support: np.ndarray, b: int) -> LayerFlops:
    """FLOPs (2 × multiply-adds) of a stride-1 conv run on the blocks covering ``support``."""
    cout, cin, k, _ = wshape
    N, H, W = support.shape
    per_cell = 2 * cout * cin * k * k
    idx = mask_to_blocks(support, b)
    return LayerFlops(name, per_cell * N * H * W, per_cell * len(idx) * b * b, len(idx), idx.n_total)


def dense_conv_flops(name: str, wshape, out_h: int, out_w: int, n: int = 1) -> LayerFlops:
    """FLOPs of an ungated conv producing an out_h×out_w map."""
    cout, cin, k, _ = wshape
    f = 2 * cout * cin * k * k * out_h * out_w * n
    return LayerFlops(name, f, f, 0, 0, gated=False)


def _check_mask_resolution(x: Tensor, mask) -> np.ndarray:
    m = np.asarray(mask.hard if hasattr(mask, "hard") else mask, dtype=x.dtype)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.shape[-2:] != x.shape[-2:] or m.shape[0] not in (1, x.shape[0]):
        raise nn.ShapeError(f"mask {m.shape[-2:]} does not match features {x.shape[-2:]}")
    return np.broadcast_to(m, (x.shape[0], 1) + x.shape[2:])


def dense_residual_block(x: Tensor, fn, mask=None) -> Tensor:
    """Reference x + F(x ⊙ A) on the full grid; ``mask`` may be a Tensor to keep its gradient."""
    if mask is None:
        return x + fn(x)
    if isinstance(mask, Tensor):
        if mask.shape[-2:] != x.shape[-2:]:
            raise nn.ShapeError(f"mask {mask.shape[-2:]} does not match features {x.shape[-2:]}")
        return x + fn(x * mask)
    return x + fn(x * Tensor(_check_mask_resolution(x, mask)))


def sparse_residual_block(x: Tensor, fn, mask, b: int = 4) -> Tensor:
    """x + F(x ⊙ A) with F evaluated block-sparsely; ``fn`` must provide ``sparse``."""
    m = _check_mask_resolution(x, mask)
    support = m[:, 0] > 0
    return x + fn.sparse(x * Tensor(np.ascontiguousarray(m)), support, b)


# ---------------------------------------------------------------------------
# FLOP reports


@dataclass
class FlopReport:
    layers: list[LayerFlops] = field(default_factory=list)
    sparsity: float = 0.0

    @property
    def dense_flops(self) -> int:
        return sum(layer.dense for layer in self.layers)

    @property
    def sparse_flops(self) -> int:
        return sum(layer.sparse for layer in self.layers)

    @property
    def ratio(self) -> float:
        return self.sparse_flops / self.dense_flops if self.dense_flops else 0.0

    def subset(self, prefix: str) -> "FlopReport":
        return FlopReport([layer for layer in self.layers if layer.name.startswith(prefix)], self.sparsity)

    def gated(self) -> "FlopReport":
        return FlopReport([layer for layer in self.layers if layer.gated], self.sparsity)

    def save_csv(self, path) -> None:
        rows = [(layer.name, layer.dense, layer.sparse, layer.active_blocks) for layer in self.layers]
        rows.append(("total", self.dense_flops, self.sparse_flops, ""))
        write_csv(path, ["layer", "dense", "sparse", "active_blocks"], rows)


def count_flops(model_or_config, mask=None, grid: tuple[int, int] | None = None, scorer: bool = True) -> FlopReport:
    """Analytic dense vs sparse FLOPs of a backbone under ``mask`` (None means dense).

    ``model_or_config`` must provide ``flop_layers(mask_support, grid, scorer)``;
    ``scorer`` says whether the attention scorer runs (learned masks) or not (fixed masks).
    """
    if mask is None:
        support = None
        sparsity = 0.0
    else:
        support = _as_nhw(mask)
        sparsity = 1.0 - support.mean()
    return FlopReport(model_or_config.flop_layers(support, grid, scorer), float(sparsity))
