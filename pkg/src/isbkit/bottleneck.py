"""Residual bottleneck and its instance-specific attention branch (ISB)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import fcgsa, reassemble, reconstruct, split_qkv
from .layers import ConvNormAct, Module
from .tensor import ConfigError, ShapeError, Tensor


def derive_channels(c: int, s: int = 8) -> tuple[int, int, int]:
    """Return (compressed width incl. Q/K/V, attention width, restored width)."""
    c2 = c // s
    if c2 < 1:
        raise ConfigError(f"c={c} with compression ratio s={s} leaves no channels")
    return 3 * c2, c2, c


@dataclass(frozen=True)
class IsbConfig:
    c: int
    s: int = 8
    K: int = 4

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"patch side must be positive, got {self.K}")
        derive_channels(self.c, self.s)

    @property
    def c1(self) -> int:
        return derive_channels(self.c, self.s)[0]

    @property
    def c2(self) -> int:
        return derive_channels(self.c, self.s)[1]

    @property
    def c3(self) -> int:
        return self.c


class Bottleneck(Module):
    """Two 3x3 Conv-BN-SiLU stages with optional residual and optional ISB branch.

    The ISB branch is a 1x1 Conv-IN-SiLU compression to ``c1`` channels, patch
    attention, and a 3x3 Conv-IN-SiLU expansion from ``c2`` back to ``c``.
    It reads the block input and its output is added to the block output.
    """

    def __init__(self, c: int, shortcut: bool = True, isb: IsbConfig | None = None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if isb is not None and isb.c != c:
            raise ConfigError(f"ISB config for {isb.c} channels attached to a {c}-channel block")
        self.c = c
        self.shortcut = shortcut
        self.isb = isb
        self.cv1 = ConvNormAct(c, c, 3, "batch", rng=rng)
        self.cv2 = ConvNormAct(c, c, 3, "batch", rng=rng)
        if isb is not None:
            self.compress = ConvNormAct(c, isb.c1, 1, "instance", rng=rng)
            self.expand = ConvNormAct(isb.c2, c, 3, "instance", rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        if self.isb is None:
            return bottleneck_baseline(x, self)
        return bottleneck_isb(x, self, self.isb)


def _check_input(x: Tensor, c: int) -> None:
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"expected B x {c} x H x W, got {x.shape}")


def bottleneck_baseline(x: Tensor, params: Bottleneck) -> Tensor:
    _check_input(x, params.c)
    y = params.cv2(params.cv1(x))
    return T.add(x, y) if params.shortcut else y


def isb_branch(x: Tensor, params: Bottleneck, cfg: IsbConfig, trace: list | None = None) -> Tensor:
    _check_input(x, cfg.c)
    H, W = x.shape[2:]
    xc = params.compress(x)
    if trace is not None:
        trace.append(("compress", xc.shape))
    x3 = reconstruct(xc, cfg.K, trace)
    q, k, v = split_qkv(x3)
    if trace is not None:
        trace.append(("split_qkv", q.shape))
    f = fcgsa(q, k, v)
    if trace is not None:
        trace.append(("attention", f.shape))
    xf = reassemble(f, cfg.K, H, W, trace)
    out = params.expand(xf)
    if trace is not None:
        trace.append(("expand", out.shape))
    return out


def bottleneck_isb(x: Tensor, params: Bottleneck, cfg: IsbConfig) -> Tensor:
    return T.add(bottleneck_baseline(x, params), isb_branch(x, params, cfg))
