"""Patch-channel reconstruction, full-channel global self-attention, reassembly.

Shapes along the pipeline, for an input ``B x C x H x W`` and patch side K::

    unfold   -> B x (C K^2) x L
    reshape  -> B x C x K^2 x L
    permute  -> B x K^2 x C x L

Attention then runs independently for every (sample, intra-patch offset)
slice, relating all C channels to each other across the L patches. The
reassembler runs the three steps backwards and crops any padding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .layers import softmax
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class PatchGrid:
    K: int
    H: int
    W: int

    def __post_init__(self):
        if self.K < 1 or self.H < 1 or self.W < 1:
            raise ShapeError(f"invalid patch grid K={self.K}, H={self.H}, W={self.W}")

    @property
    def L_h(self) -> int:
        return (self.H - 1) // self.K + 1

    @property
    def L_w(self) -> int:
        return (self.W - 1) // self.K + 1

    @property
    def L(self) -> int:
        return self.L_h * self.L_w

    @property
    def padded(self) -> tuple[int, int]:
        return self.L_h * self.K, self.L_w * self.K


def _trace(trace, stage, t):
    if trace is not None:
        trace.append((stage, tuple(t.shape)))


def unfold(x: Tensor, K: int) -> Tensor:
    """Non-overlapping K x K patches (stride K); H and W must be multiples of K."""
    B, C, H, W = x.shape
    if H % K or W % K:
        raise ShapeError(f"unfold needs extents divisible by {K}, got {H}x{W}")
    lh, lw = H // K, W // K
    y = T.reshape(x, (B, C, lh, K, lw, K))
    y = T.permute(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (B, C * K * K, lh * lw))


def fold(x: Tensor, channels: int, K: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`unfold` for padded extents ``H`` x ``W``."""
    B = x.shape[0]
    lh, lw = H // K, W // K
    if x.shape[1:] != (channels * K * K, lh * lw):
        raise ShapeError(f"fold: {x.shape} inconsistent with C={channels}, K={K}, {H}x{W}")
    y = T.reshape(x, (B, channels, K, K, lh, lw))
    y = T.permute(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (B, channels, H, W))


def reconstruct(x: Tensor, K: int, trace: list | None = None) -> Tensor:
    """Rearrange ``B x C x H x W`` into ``B x K^2 x C x L``.

    Element ``(b, p, c, l)`` is the pixel at intra-patch offset ``p`` (row
    major within the patch) of patch ``l`` (row major over the patch grid)
    in channel ``c``. Extents that are not multiples of K are zero-padded on
    the bottom and right first.
    """
    if x.ndim != 4:
        raise ShapeError(f"reconstruct expects B x C x H x W, got {x.shape}")
    B, C, H, W = x.shape
    grid = PatchGrid(K, H, W)
    ph, pw = grid.padded
    x = T.pad2d(x, ph - H, pw - W)
    x1 = unfold(x, K)
    _trace(trace, "unfold", x1)
    x2 = T.reshape(x1, (B, C, K * K, grid.L))
    _trace(trace, "reshape", x2)
    x3 = T.permute(x2, (0, 2, 1, 3))
    _trace(trace, "permute", x3)
    return x3


def reassemble(y: Tensor, K: int, H: int, W: int, trace: list | None = None) -> Tensor:
    """Inverse of :func:`reconstruct`; returns ``B x C x H x W``."""
    if y.ndim != 4 or y.shape[1] != K * K:
        raise ShapeError(f"reassemble expects B x {K * K} x C x L, got {y.shape}")
    grid = PatchGrid(K, H, W)
    B, _, C, L = y.shape
    if L != grid.L:
        raise ShapeError(f"{L} patches inconsistent with {H}x{W} at K={K} (expected {grid.L})")
    f1 = T.permute(y, (0, 2, 1, 3))
    _trace(trace, "permute", f1)
    f2 = T.reshape(f1, (B, C * K * K, L))
    _trace(trace, "reshape", f2)
    ph, pw = grid.padded
    f3 = fold(f2, C, K, ph, pw)
    _trace(trace, "fold", f3)
    return T.crop2d(f3, H, W)


def split_qkv(x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split the channel axis (axis 2) into contiguous Q, K, V thirds."""
    c = x.shape[2]
    if c % 3:
        raise ShapeError(f"channel axis {c} is not divisible by 3")
    n = c // 3
    return tuple(T.slice_axis(x, 2, i * n, (i + 1) * n) for i in range(3))


def attention_weights(q: Tensor, k: Tensor, prescale: bool = True) -> Tensor:
    """Softmax of the scaled channel-by-channel score matrix.

    ``prescale`` divides Q by sqrt(L) before the product; otherwise the
    product itself is divided afterwards (kept for comparison only).
    """
    if q.shape != k.shape:
        raise ShapeError(f"Q {q.shape} and K {k.shape} differ")
    L = q.shape[-1]
    factor = 1.0 / math.sqrt(L)
    kt = T.transpose_last(k)
    if prescale:
        scores = T.matmul(T.scale(q, factor), kt)
    else:
        scores = T.scale(T.matmul(q, kt), factor)
    return softmax(scores)


def fcgsa(q: Tensor, k: Tensor, v: Tensor, prescale: bool = True) -> Tensor:
    """Full-channel global self-attention over ``B x K^2 x c x L`` inputs."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"Q, K, V must share a 4-d shape, got {q.shape}, {k.shape}, {v.shape}")
    return T.matmul(attention_weights(q, k, prescale), v)
