"""Gradient-check suites over miniature configurations.

Shared by the ``gradcheck`` CLI command and the test suite. Each suite
returns ``{name: GradReport}``; losses are fixed random projections of the
outputs so every gradient entry is generic.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import fcgsa, reassemble, reconstruct
from .bottleneck import Bottleneck, IsbConfig
from .head import DecoupledHead, HeadConfig
from .layers import Module, NormState, batch_norm, conv2d, instance_norm, silu, softmax
from .tensor import GradReport, Tensor, gradcheck

TOL = 1e-4
STEP = 1e-5


def projection(out: Tensor, seed: int = 99) -> Tensor:
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum(T.mul(out, Tensor(r)))


def module_gradcheck(module: Module, x: Tensor | list[Tensor],
                     forward: Callable[[Module, object], list[Tensor]],
                     tol: float = TOL) -> GradReport:
    """Gradcheck w.r.t. the module input(s) and every parameter tensor."""
    params = module.named_parameters()
    xs = x if isinstance(x, list) else [x]
    inputs = {f"input{i}": t for i, t in enumerate(xs)}
    inputs.update({f"param:{k}": v for k, v in params.items()})

    def f(**kw):
        module.assign({k[6:]: v for k, v in kw.items() if k.startswith("param:")})
        feats = [kw[f"input{i}"] for i in range(len(xs))]
        outs = forward(module, feats if isinstance(x, list) else feats[0])
        return T.add_all([projection(o, 99 + i) for i, o in enumerate(outs)])

    try:
        return gradcheck(f, inputs, tol=tol, h=STEP)
    finally:
        module.assign(params)


def layer_suite(seed: int = 0) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    w3 = Tensor(rng.normal(size=(4, 3, 3, 3)))
    w1 = Tensor(rng.normal(size=(4, 3, 1, 1)))
    b = Tensor(rng.normal(size=4))
    gain, shift = rng.normal(size=3) + 1.5, rng.normal(size=3)

    def norm(kind, mode="train"):
        def f(x, gain, shift):
            st = NormState(kind, 3, gain=gain, shift=shift, mode=mode)
            if mode == "eval":
                st.running_mean = np.array([0.1, -0.2, 0.3])
                st.running_var = np.array([0.5, 1.5, 2.0])
            fn = instance_norm if kind == "instance" else batch_norm
            return projection(fn(x, st))
        return f

    ng = {"x": x, "gain": Tensor(gain), "shift": Tensor(shift)}
    return {
        "conv3x3": gradcheck(lambda x, w, b: projection(conv2d(x, w, b)), [x, w3, b], TOL, STEP),
        "conv1x1": gradcheck(lambda x, w: projection(conv2d(x, w)), [x, w1], TOL, STEP),
        "instance_norm": gradcheck(norm("instance"), ng, TOL, STEP),
        "batch_norm_train": gradcheck(norm("batch"), ng, TOL, STEP),
        "batch_norm_eval": gradcheck(norm("batch", "eval"), ng, TOL, STEP),
        "silu": gradcheck(lambda x: projection(silu(x)), [x], TOL, STEP),
        "softmax": gradcheck(lambda x: projection(softmax(x)), [x], TOL, STEP),
        "matmul": gradcheck(
            lambda a, b: projection(T.matmul(a, b)),
            [Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4, 5)))], TOL, STEP,
        ),
    }


def attention_suite(shape=(1, 4, 3, 5), seed: int = 0) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    q, k, v = (Tensor(rng.normal(size=shape)) for _ in range(3))
    x = Tensor(rng.normal(size=(1, 2, 5, 6)))
    return {
        "fcgsa": gradcheck(lambda q, k, v: projection(fcgsa(q, k, v)), [q, k, v], TOL, STEP),
        "reconstruct_reassemble": gradcheck(
            lambda x: projection(reassemble(T.scale(reconstruct(x, 4), 1.5), 4, 5, 6)), [x], TOL, STEP
        ),
    }


def bottleneck_suite(c: int = 8, s: int = 8, K: int = 2, hw: tuple[int, int] = (4, 4),
                     seed: int = 0) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, c, *hw)))
    base = Bottleneck(c, True, None, rng=np.random.default_rng(seed + 1))
    isb = Bottleneck(c, True, IsbConfig(c, s, K), rng=np.random.default_rng(seed + 2))
    return {
        "bottleneck": module_gradcheck(base, x, lambda m, x: [m(x)]),
        "bottleneck_isb": module_gradcheck(isb, x, lambda m, x: [m(x)]),
    }


def head_suite(variant: str, cin: int = 8, hidden: int = 8, nc: int = 2, reg_max: int = 2,
               hw: tuple[int, int] = (4, 4), seed: int = 0) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    cfg = HeadConfig((cin,), nc=nc, reg_max=reg_max, c2=hidden, c3=hidden, strides=(8,))
    head = DecoupledHead(cfg, variant, rng=np.random.default_rng(seed + 1))
    x = Tensor(rng.normal(size=(2, cin, *hw)))

    def fwd(m, feats):
        out = m(feats)
        return out.cls + out.box

    return {f"head_{variant}": module_gradcheck(head, [x], fwd)}
