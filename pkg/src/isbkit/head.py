"""Decoupled detection heads: the YOLOv8 baseline and the ISADH variant.

ISADH differs from the baseline in two places. Its box branch uses 1x1
hidden convs instead of 3x3. Each branch also gets a parallel 1x1
Conv-IN-SiLU instance path, added to the branch's second hidden output
before the final predictor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .layers import Conv, ConvNormAct, Module
from .tensor import ConfigError, ShapeError, Tensor

Variant = Literal["baseline", "isadh", "asymmetric"]
VARIANTS = ("baseline", "isadh", "asymmetric")


@dataclass(frozen=True)
class HeadConfig:
    level_channels: tuple[int, ...]
    nc: int = 80
    reg_max: int = 16
    c2: int | None = None
    c3: int | None = None
    strides: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(int(c) for c in self.level_channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if not self.level_channels or min(self.level_channels) < 1:
            raise ConfigError(f"invalid level channels {self.level_channels}")
        if self.nc < 1 or self.reg_max < 1:
            raise ConfigError("nc and reg_max must be positive")
        if len(self.strides) < len(self.level_channels):
            raise ConfigError("one stride per level is required")
        if self.box_hidden < 1 or self.cls_hidden < 1:
            raise ConfigError("hidden widths must be positive")

    @property
    def box_hidden(self) -> int:
        """C2; defaults to the YOLOv8 rule max(16, cin0 // 4, 4 * reg_max)."""
        if self.c2 is not None:
            return self.c2
        return max(16, self.level_channels[0] // 4, 4 * self.reg_max)

    @property
    def cls_hidden(self) -> int:
        """C3; defaults to the YOLOv8 rule max(cin0, min(nc, 100))."""
        if self.c3 is not None:
            return self.c3
        return max(self.level_channels[0], min(self.nc, 100))

    @property
    def box_channels(self) -> int:
        return 4 * self.reg_max


@dataclass
class HeadOutput:
    cls: list[Tensor] = field(default_factory=list)
    box: list[Tensor] = field(default_factory=list)


class LevelHead(Module):
    def __init__(self, cin: int, cfg: HeadConfig, variant: Variant, rng: np.random.Generator):
        c2, c3 = cfg.box_hidden, cfg.cls_hidden
        box_k = 3 if variant == "baseline" else 1
        self.cin = cin
        self.cls1 = ConvNormAct(cin, c3, 3, "batch", rng=rng)
        self.cls2 = ConvNormAct(c3, c3, 3, "batch", rng=rng)
        self.cls_pred = Conv(c3, cfg.nc, 1, bias=True, rng=rng)
        self.box1 = ConvNormAct(cin, c2, box_k, "batch", rng=rng)
        self.box2 = ConvNormAct(c2, c2, box_k, "batch", rng=rng)
        self.box_pred = Conv(c2, cfg.box_channels, 1, bias=True, rng=rng)
        self.instance = variant == "isadh"
        if self.instance:
            self.cls_inst = ConvNormAct(cin, c3, 1, "instance", rng=rng)
            self.box_inst = ConvNormAct(cin, c2, 1, "instance", rng=rng)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ShapeError(f"head level expects B x {self.cin} x H x W, got {x.shape}")
        c = self.cls2(self.cls1(x))
        b = self.box2(self.box1(x))
        if self.instance:
            c = T.add(c, self.cls_inst(x))
            b = T.add(b, self.box_inst(x))
        return self.cls_pred(c), self.box_pred(b)


class DecoupledHead(Module):
    def __init__(self, cfg: HeadConfig, variant: Variant = "baseline",
                 rng: np.random.Generator | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown head variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.variant = variant
        self.levels = [LevelHead(cin, cfg, variant, rng) for cin in cfg.level_channels]

    def __call__(self, features: Sequence[Tensor]) -> HeadOutput:
        if len(features) != len(self.levels):
            raise ShapeError(f"expected {len(self.levels)} feature levels, got {len(features)}")
        out = HeadOutput()
        for level, x in zip(self.levels, features):
            c, b = level(x)
            out.cls.append(c)
            out.box.append(b)
        return out


def head_baseline(features: Sequence[Tensor], params: DecoupledHead) -> HeadOutput:
    if params.variant != "baseline":
        raise ConfigError(f"head_baseline given a {params.variant} head")
    return params(features)


def head_isadh(features: Sequence[Tensor], params: DecoupledHead) -> HeadOutput:
    if params.variant != "isadh":
        raise ConfigError(f"head_isadh given a {params.variant} head")
    return params(features)


def head_param_closed_form(cfg: HeadConfig, variant: Variant) -> int:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown head variant {variant!r}")
    c2, c3, nc, nb = cfg.box_hidden, cfg.cls_hidden, cfg.nc, cfg.box_channels
    kb = 9 if variant == "baseline" else 1
    total = 0
    for cin in cfg.level_channels:
        cls = 9 * cin * c3 + 9 * c3 * c3 + 2 * (2 * c3) + c3 * nc + nc
        box = kb * cin * c2 + kb * c2 * c2 + 2 * (2 * c2) + c2 * nb + nb
        total += cls + box
        if variant == "isadh":
            total += cin * c3 + 2 * c3 + cin * c2 + 2 * c2
    return total
