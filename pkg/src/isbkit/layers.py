"""Convolution, batch/instance normalization, SiLU and softmax.

Each layer is a single graph node with a hand-written backward rule; the
:class:`Module` helpers below only organise parameters for the blocks built
on top.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError, Tensor, _tally, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.03


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None
    bias: bool = False

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be a positive odd size, got {self.kernel}")
        if self.padding is None:
            object.__setattr__(self, "padding", (self.kernel - 1) // 2)

    def output_extent(self, n: int) -> int:
        span = n + 2 * self.padding - self.kernel
        if span < 0 or span % self.stride:
            raise ShapeError(
                f"extent {n} with kernel {self.kernel}, stride {self.stride}, "
                f"padding {self.padding} gives a non-integral output"
            )
        return span // self.stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # B x C x H x W -> B x (C k k) x (oh ow)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    B, C = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None) -> Tensor:
    """Cross-correlation of ``x`` (B x Cin x H x W) with ``weight`` (Cout x Cin x k x k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if spec is None:
        spec = ConvSpec(cin, cout, k, bias=bias is not None)
    if k != k2 or k != spec.kernel:
        raise ShapeError(f"weight {weight.shape} does not match kernel {spec.kernel}")
    if x.shape[1] != cin or cin != spec.in_channels or cout != spec.out_channels:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    B, _, H, W = x.shape
    oh, ow = spec.output_extent(H), spec.output_extent(W)
    s, p = spec.stride, spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, oh, ow)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols).reshape(B, cout, oh, ow)
    _tally("conv2d", macs=B * cout * cin * k * k * oh * ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        g2 = g.reshape(B, cout, oh * ow)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(B, cin, k, k, oh, ow)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(out, parents, back, "conv2d")


@dataclass
class NormState:
    """Per-channel normalization parameters and (batch kind) running statistics."""

    kind: Literal["batch", "instance"]
    channels: int
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: Literal["train", "eval"] = "train"
    gain: Tensor = None
    shift: Tensor = None
    running_mean: np.ndarray | None = field(default=None, repr=False)
    running_var: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("batch", "instance"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.gain is None:
            self.gain = Tensor(np.ones(self.channels), requires_grad=True)
        if self.shift is None:
            self.shift = Tensor(np.zeros(self.channels), requires_grad=True)
        if self.kind == "batch":
            if self.running_mean is None:
                self.running_mean = np.zeros(self.channels)
            if self.running_var is None:
                self.running_var = np.ones(self.channels)
        else:
            self.running_mean = self.running_var = None


def _normalize(x: Tensor, state: NormState, axes: tuple[int, ...], stats=None) -> Tensor:
    """Shared forward/backward for both norms.

    With ``stats`` given (eval-mode batch norm) the statistics are constants;
    otherwise they are computed over ``axes`` and differentiated through.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"{state.kind} norm over {state.channels} channels got input {x.shape}")
    d = x.data
    gain = state.gain.data.astype(d.dtype)[None, :, None, None]
    shift = state.shift.data.astype(d.dtype)[None, :, None, None]
    if stats is None:
        mu = d.mean(axis=axes, keepdims=True)
        var = d.var(axis=axes, keepdims=True)
    else:
        mu = stats[0].astype(d.dtype)[None, :, None, None]
        var = stats[1].astype(d.dtype)[None, :, None, None]
    inv = 1.0 / np.sqrt(var + d.dtype.type(state.eps))
    xhat = (d - mu) * inv
    out = xhat * gain + shift
    n = math.prod(d.shape[a] for a in axes)
    g_state, s_state = state.gain, state.shift

    def back(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3)) if g_state.requires_grad else None
        gshift = g.sum(axis=(0, 2, 3)) if s_state.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain
            if stats is None:
                gx = inv / n * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv
        return gx, ggain, gshift

    return record(out, (x, state.gain, state.shift), back, f"{state.kind}_norm")


def instance_norm(x: Tensor, state: NormState) -> Tensor:
    """Normalize each (sample, channel) plane by its own mean and population variance."""
    if state.kind != "instance":
        raise ContractError("instance_norm needs an instance-kind NormState")
    return _normalize(x, state, (2, 3))


def batch_norm(x: Tensor, state: NormState) -> Tensor:
    if state.kind != "batch":
        raise ContractError("batch_norm needs a batch-kind NormState")
    if state.mode == "eval":
        return _normalize(x, state, (0, 2, 3), stats=(state.running_mean, state.running_var))
    B, _, H, W = x.shape
    if B * H * W < 2:
        raise ContractError("train-mode batch norm needs at least two values per channel")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * var
    return _normalize(x, state, (0, 2, 3))


def normalize(x: Tensor, state: NormState) -> Tensor:
    return batch_norm(x, state) if state.kind == "batch" else instance_norm(x, state)


def _sigmoid(d: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = _sigmoid(d)
    return record(d * s, (x,), lambda g: (g * s * (1 + d * (1 - s)),), "silu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by subtracting the row max."""
    d = x.data
    with np.errstate(invalid="ignore", over="ignore"):
        e = np.exp(d - d.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
    _tally("softmax", elementwise=d.size)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), back, "softmax")


# --------------------------------------------------------------------------
# parameter containers


class Module:
    """Minimal parameter container.

    Parameters are the gradient-tracked :class:`Tensor` attributes of a module
    or of any nested :class:`Module`, :class:`NormState` or list of modules.
    Tensors are immutable, so training swaps them through :meth:`assign`.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, NormState, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _slots(self, prefix: str = ""):
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, self, name
            elif isinstance(value, NormState):
                yield f"{path}.gain", value, "gain"
                yield f"{path}.shift", value, "shift"
            else:
                yield from value._slots(path + ".")

    def named_parameters(self) -> dict[str, Tensor]:
        return {path: getattr(owner, attr) for path, owner, attr in self._slots()}

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.named_parameters().values()], dtype=np.int64))

    def assign(self, params: dict[str, Tensor]) -> None:
        slots = {path: (owner, attr) for path, owner, attr in self._slots()}
        for path, t in params.items():
            owner, attr = slots[path]
            old = getattr(owner, attr)
            if old.shape != t.shape:
                raise ShapeError(f"{path}: shape {t.shape} != {old.shape}")
            setattr(owner, attr, t if t.requires_grad else Tensor(t.data, requires_grad=True))

    def norm_states(self) -> list[NormState]:
        out = []
        for _, value in self._children():
            if isinstance(value, NormState):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.norm_states())
        return out

    def train(self, mode: bool = True):
        for st in self.norm_states():
            st.mode = "train" if mode else "eval"
        return self

    def eval(self):
        return self.train(False)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv(Module):
    """Plain convolution, optionally with bias (used for final predictors)."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, bias: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = ConvSpec(cin, cout, k, stride, bias=bias)
        self.weight = _uniform(rng, (cout, cin, k, k), cin * k * k)
        self.bias = _uniform(rng, (cout,), cin * k * k) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)


class ConvNormAct(Module):
    """Bias-free conv followed by batch or instance norm and SiLU."""

    def __init__(self, cin: int, cout: int, k: int, norm: Literal["batch", "instance"] = "batch",
                 stride: int = 1, rng: np.random.Generator | None = None):
        self.conv = Conv(cin, cout, k, stride, bias=False, rng=rng)
        self.norm = NormState(norm, cout)

    def __call__(self, x: Tensor) -> Tensor:
        return silu(normalize(self.conv(x), self.norm))
