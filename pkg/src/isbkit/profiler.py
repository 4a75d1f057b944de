"""Analytic parameter and FLOP accounting.

Modules are described as flat lists of :class:`LayerSpec`. The describers
below mirror the layer names of the instantiated modules (``cv1.conv``,
``levels.0.box_inst.norm``, ...), so a report can be checked row by row
against enumeration of real parameter tensors.

Counting convention (echoed in every report):

* conv FLOPs = factor * k^2 * cin * cout * H' * W'
* attention FLOPs = factor * K^2 * 2 * c2^2 * L per sample (the two products)
* softmax FLOPs = alpha * K^2 * c2^2 per sample, reported on its own row
* normalization, activation and residual additions are not counted
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

from .attention import PatchGrid
from .bottleneck import IsbConfig
from .head import VARIANTS, HeadConfig
from .layers import BN_EPS, BN_MOMENTUM, ConvSpec, Module
from .tensor import ConfigError, ShapeError

SCHEMA_VERSION = 1
FLOPS_PER_MAC = 2
SOFTMAX_ALPHA = 4  # max, subtract, exp, divide per score element


@dataclass(frozen=True)
class ScalePreset:
    name: str
    depth: float
    width: float
    max_channels: int


PRESETS: dict[str, ScalePreset] = {
    p.name: p
    for p in (
        ScalePreset("N", 0.33, 0.25, 1024),
        ScalePreset("S", 0.33, 0.50, 1024),
        ScalePreset("M", 0.67, 0.75, 768),
        ScalePreset("L", 1.00, 1.00, 512),
        ScalePreset("X", 1.00, 1.25, 512),
    )
}

# YOLOv8 head inputs (P3, P4, P5) before width scaling
BASE_LEVEL_CHANNELS = (256, 512, 1024)


def get_preset(name: str) -> ScalePreset:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def apply_scale(preset: ScalePreset, base_channels: int, divisor: int = 8) -> int:
    """min(max_channels, width * base rounded up to a multiple of ``divisor``)."""
    if base_channels < 1:
        raise ConfigError("base channel count must be positive")
    scaled = preset.width * base_channels
    rounded = math.ceil(round(scaled / divisor, 9)) * divisor
    return min(preset.max_channels, rounded)


def preset_head_config(preset: ScalePreset | str, nc: int = 80, reg_max: int = 16,
                       base: Sequence[int] = BASE_LEVEL_CHANNELS) -> HeadConfig:
    if isinstance(preset, str):
        preset = get_preset(preset)
    return HeadConfig(tuple(apply_scale(preset, c) for c in base), nc=nc, reg_max=reg_max)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: Literal["conv", "norm", "attention", "softmax"]
    cin: int = 0
    cout: int = 0
    kernel: int = 1
    stride: int = 1
    bias: bool = False
    downsample: int = 1  # input extent of this layer = description input / downsample
    c2: int = 0
    K: int = 0


@dataclass
class ModuleDescription:
    name: str
    layers: list[LayerSpec]
    config: dict = field(default_factory=dict)


def _conv_norm(name: str, cin: int, cout: int, k: int, down: int = 1) -> list[LayerSpec]:
    return [
        LayerSpec(f"{name}.conv", "conv", cin, cout, k, downsample=down),
        LayerSpec(f"{name}.norm", "norm", cout, cout, downsample=down),
    ]


def describe_isb_branch(cfg: IsbConfig) -> list[LayerSpec]:
    return [
        *_conv_norm("compress", cfg.c, cfg.c1, 1),
        LayerSpec("attention", "attention", c2=cfg.c2, K=cfg.K),
        LayerSpec("softmax", "softmax", c2=cfg.c2, K=cfg.K),
        *_conv_norm("expand", cfg.c2, cfg.c, 3),
    ]


def describe_bottleneck(c: int, isb: IsbConfig | None = None) -> ModuleDescription:
    layers = _conv_norm("cv1", c, c, 3) + _conv_norm("cv2", c, c, 3)
    config = {"c": c}
    if isb is not None:
        layers += describe_isb_branch(isb)
        config.update(s=isb.s, K=isb.K, c1=isb.c1, c2=isb.c2)
    return ModuleDescription("bottleneck_isb" if isb else "bottleneck", layers, config)


def describe_head(cfg: HeadConfig, variant: str) -> ModuleDescription:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown head variant {variant!r}")
    c2, c3 = cfg.box_hidden, cfg.cls_hidden
    kb = 3 if variant == "baseline" else 1
    layers: list[LayerSpec] = []
    for i, (cin, st) in enumerate(zip(cfg.level_channels, cfg.strides)):
        p = f"levels.{i}."
        layers += _conv_norm(p + "cls1", cin, c3, 3, st)
        layers += _conv_norm(p + "cls2", c3, c3, 3, st)
        layers.append(LayerSpec(p + "cls_pred", "conv", c3, cfg.nc, 1, bias=True, downsample=st))
        layers += _conv_norm(p + "box1", cin, c2, kb, st)
        layers += _conv_norm(p + "box2", c2, c2, kb, st)
        layers.append(LayerSpec(p + "box_pred", "conv", c2, cfg.box_channels, 1, bias=True,
                                downsample=st))
        if variant == "isadh":
            layers += _conv_norm(p + "cls_inst", cin, c3, 1, st)
            layers += _conv_norm(p + "box_inst", cin, c2, 1, st)
    config = {"level_channels": list(cfg.level_channels), "nc": cfg.nc, "reg_max": cfg.reg_max,
              "c2": c2, "c3": c3, "strides": list(cfg.strides), "variant": variant}
    return ModuleDescription(f"head_{variant}", layers, config)


def describe_attention(c2: int, K: int) -> ModuleDescription:
    return ModuleDescription(
        "attention",
        [LayerSpec("attention", "attention", c2=c2, K=K), LayerSpec("softmax", "softmax", c2=c2, K=K)],
        {"c2": c2, "K": K},
    )


# --------------------------------------------------------------------------
# reports


@dataclass
class LayerCost:
    name: str
    params: int
    flops: int = 0


def default_convention(factor: int = FLOPS_PER_MAC) -> dict:
    return {
        "flops_per_mac": factor,
        "softmax_alpha": SOFTMAX_ALPHA,
        "counted": "conv, attention products, softmax",
        "channel_rounding": "ceil to multiple of 8",
        "bn_eps": BN_EPS,
        "bn_momentum": BN_MOMENTUM,
    }


@dataclass
class CostReport:
    rows: list[LayerCost]
    convention: dict = field(default_factory=default_convention)
    input_size: tuple[int, ...] | None = None
    config: dict = field(default_factory=dict)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def totals(self) -> dict:
        return {"params": self.params, "flops": self.flops}

    def row(self, name: str) -> LayerCost:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "input_size": list(self.input_size) if self.input_size else None,
            "convention": self.convention,
            "rows": [asdict(r) for r in self.rows],
            "totals": self.totals,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(
            rows=[LayerCost(**r) for r in d["rows"]],
            convention=d["convention"],
            input_size=tuple(d["input_size"]) if d.get("input_size") else None,
            config=d.get("config", {}),
        )


def layer_params(layer: LayerSpec) -> int:
    if layer.kind == "conv":
        return layer.kernel ** 2 * layer.cin * layer.cout + (layer.cout if layer.bias else 0)
    if layer.kind == "norm":
        return 2 * layer.cout
    return 0


def count_params(desc: ModuleDescription) -> CostReport:
    rows = [LayerCost(l.name, layer_params(l)) for l in desc.layers]
    return CostReport(rows, config={"module": desc.name, **desc.config})


def attention_flops(c2: int, K: int, L: int, factor: int = FLOPS_PER_MAC) -> int:
    """Both products of the attention for one sample: (c2 x L)(L x c2) and (c2 x c2)(c2 x L)."""
    return factor * K * K * 2 * c2 * c2 * L


def _extent(n: int, down: int) -> int:
    if n % down:
        raise ShapeError(f"input extent {n} is not divisible by level stride {down}")
    return n // down


def count_flops(desc: ModuleDescription, input_shape: Sequence[int],
                factor: int = FLOPS_PER_MAC) -> CostReport:
    """Cost report for an input of shape (H, W) or (B, C, H, W)."""
    shape = tuple(int(s) for s in input_shape)
    batch = 1
    if len(shape) == 4:
        batch, H, W = shape[0], shape[2], shape[3]
    elif len(shape) == 2:
        H, W = shape
    else:
        raise ShapeError(f"input shape must be (H, W) or (B, C, H, W), got {shape}")
    rows = []
    for l in desc.layers:
        h, w = _extent(H, l.downsample), _extent(W, l.downsample)
        if l.kind == "conv":
            spec = ConvSpec(l.cin, l.cout, l.kernel, l.stride, bias=l.bias)
            oh, ow = spec.output_extent(h), spec.output_extent(w)
            flops = factor * l.kernel ** 2 * l.cin * l.cout * oh * ow
        elif l.kind == "attention":
            flops = attention_flops(l.c2, l.K, PatchGrid(l.K, h, w).L, factor)
        elif l.kind == "softmax":
            flops = SOFTMAX_ALPHA * l.K * l.K * l.c2 * l.c2
        else:
            flops = 0
        rows.append(LayerCost(l.name, layer_params(l), batch * flops))
    return CostReport(rows, default_convention(factor), shape, {"module": desc.name, **desc.config})


def enumerate_params(module: Module) -> dict[str, int]:
    """Parameter count per layer, grouped by the owning layer's path."""
    out: dict[str, int] = {}
    for path, t in module.named_parameters().items():
        layer = path.rsplit(".", 1)[0]
        out[layer] = out.get(layer, 0) + t.size
    return out


@dataclass
class DeltaReport:
    rows: list[LayerCost]
    a: CostReport
    b: CostReport

    @property
    def params(self) -> int:
        return self.b.params - self.a.params

    @property
    def flops(self) -> int:
        return self.b.flops - self.a.flops

    @property
    def totals(self) -> dict:
        return {"params": self.params, "flops": self.flops}

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": {"a": self.a.config, "b": self.b.config},
            "input_size": list(self.a.input_size) if self.a.input_size else None,
            "convention": self.a.convention,
            "rows": [asdict(r) for r in self.rows],
            "totals": self.totals,
        }


def compare(a: ModuleDescription, b: ModuleDescription, input_shape: Sequence[int],
            factor: int = FLOPS_PER_MAC) -> DeltaReport:
    """Per-layer and total cost of ``b`` minus cost of ``a``."""
    ra, rb = count_flops(a, input_shape, factor), count_flops(b, input_shape, factor)
    ia = {r.name: r for r in ra.rows}
    ib = {r.name: r for r in rb.rows}
    names = list(ia) + [n for n in ib if n not in ia]
    zero = LayerCost("", 0, 0)
    rows = [
        LayerCost(n, ib.get(n, zero).params - ia.get(n, zero).params,
                  ib.get(n, zero).flops - ia.get(n, zero).flops)
        for n in names
    ]
    return DeltaReport(rows, ra, rb)


def presets_to_json() -> str:
    return json.dumps({k: asdict(v) for k, v in PRESETS.items()}, sort_keys=True)


def presets_from_json(text: str) -> dict[str, ScalePreset]:
    return {k: ScalePreset(**v) for k, v in json.loads(text).items()}
