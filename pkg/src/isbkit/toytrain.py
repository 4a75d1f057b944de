"""Synthetic grid-detection task used to push gradients through both modules.

Images hold a few axis-aligned coloured rectangles; the colour index is the
class. Each rectangle is assigned to the stride-aligned grid cell holding its
centre, and the box target for that cell is
``(cx offset in cell, cy offset in cell, w / size, h / size)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import unfold
from .bottleneck import Bottleneck, IsbConfig
from .head import DecoupledHead, HeadConfig, HeadOutput
from .layers import ConvNormAct, Module
from .tensor import ShapeError, Tensor, backward, record

PALETTE = np.array(
    [
        [1.0, 0.1, 0.1],
        [0.1, 0.9, 0.2],
        [0.2, 0.3, 1.0],
        [1.0, 0.9, 0.1],
        [0.9, 0.2, 0.9],
        [0.1, 0.9, 0.9],
    ]
)


class GenerationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class ToySample:
    image: np.ndarray  # 3 x H x W
    cls: np.ndarray  # nc x G x G one-hot, zero on background cells
    box: np.ndarray  # 4 x G x G
    objectness: np.ndarray  # G x G in {0, 1}


def gen_synthetic(n: int, size: int = 32, classes: int = 2, seed: int = 0, stride: int = 4,
                  max_objects: int = 3, min_side: int = 4, max_side: int = 12,
                  max_tries: int = 200) -> list[ToySample]:
    if size % stride:
        raise ValueError(f"image size {size} is not divisible by stride {stride}")
    if not 1 <= classes <= len(PALETTE):
        raise ValueError(f"classes must be in [1, {len(PALETTE)}]")
    max_side = min(max_side, size)
    if not 1 <= min_side <= max_side:
        raise ValueError(f"need 1 <= min_side <= max_side, got {min_side}, {max_side}")
    rng = np.random.default_rng(seed)
    g = size // stride
    samples = []
    for _ in range(n):
        image = rng.normal(0.0, 0.05, size=(3, size, size))
        cls = np.zeros((classes, g, g))
        box = np.zeros((4, g, g))
        occupied = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _ in range(max_tries):
                w, h = rng.integers(min_side, max_side + 1, size=2)
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
                cx, cy = x0 + w / 2, y0 + h / 2
                gx, gy = min(int(cx // stride), g - 1), min(int(cy // stride), g - 1)
                if occupied[y0:y0 + h, x0:x0 + w].any() or cls[:, gy, gx].any():
                    continue
                break
            else:
                raise GenerationError(f"no collision-free placement after {max_tries} tries")
            k = int(rng.integers(0, classes))
            occupied[y0:y0 + h, x0:x0 + w] = True
            image[:, y0:y0 + h, x0:x0 + w] = PALETTE[k][:, None, None] + rng.normal(
                0.0, 0.05, size=(3, h, w)
            )
            cls[k, gy, gx] = 1.0
            box[:, gy, gx] = (cx / stride - gx, cy / stride - gy, w / size, h / size)
        samples.append(ToySample(image, cls, box, cls.max(axis=0)))
    return samples


def stack_samples(samples: list[ToySample]) -> tuple[np.ndarray, np.ndarray]:
    """Images ``N x 3 x H x W`` and dense targets ``N x (nc + 4) x G x G``."""
    X = np.stack([s.image for s in samples])
    Y = np.stack([np.concatenate([s.cls, s.box]) for s in samples])
    return X, Y


def space_to_depth(x: Tensor, r: int) -> Tensor:
    B, C, H, W = x.shape
    return T.reshape(unfold(x, r), (B, C * r * r, H // r, W // r))


class ToyModel(Module):
    """Space-to-depth stem, bottleneck stack, single-level decoupled head."""

    def __init__(self, nc: int = 2, width: int = 16, n_blocks: int = 1, isb: bool = False,
                 head: str = "baseline", ratio: int = 8, patch: int = 4, stride: int = 4,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.stride = stride
        self.stem = ConvNormAct(3 * stride * stride, width, 3, "batch", rng=rng)
        cfg = IsbConfig(width, ratio, patch) if isb else None
        self.blocks = [Bottleneck(width, True, cfg, rng=rng) for _ in range(n_blocks)]
        self.head = DecoupledHead(HeadConfig((width,), nc=nc, reg_max=1, strides=(stride,)),
                                  head, rng=rng)

    def __call__(self, images: Tensor) -> HeadOutput:
        x = self.stem(space_to_depth(images, self.stride))
        for b in self.blocks:
            x = b(x)
        return self.head([x])


def bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of logits ``z`` against targets ``y``."""
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs targets {y.shape}")
    d = z.data
    per = np.maximum(d, 0) - d * y + np.log1p(np.exp(-np.abs(d)))
    n = d.size
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return record(per.mean(), (z,), lambda g: (g * (sig - y) / n,), "bce")


def toy_loss(pred: HeadOutput, target: np.ndarray) -> Tensor:
    """BCE over class logits plus L1 on box outputs at positive cells.

    ``target`` is ``B x (nc + 4) x G x G`` as produced by :func:`stack_samples`.
    """
    cls, box = pred.cls[0], pred.box[0]
    nc = cls.shape[1]
    if box.shape[1] != 4:
        raise ShapeError(f"toy loss needs reg_max = 1 (4 box channels), got {box.shape[1]}")
    if target.shape != (cls.shape[0], nc + 4, *cls.shape[2:]) or box.shape[2:] != cls.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match predictions {cls.shape}, {box.shape}")
    cls_t, box_t = target[:, :nc], target[:, nc:]
    pos = cls_t.max(axis=1, keepdims=True)
    mask = np.broadcast_to(pos, box_t.shape)
    npos = max(float(mask.sum()), 1.0)
    err = T.absolute(T.sub(box, Tensor(box_t)))
    l1 = T.scale(T.sum(T.mul(err, Tensor(mask))), 1.0 / npos)
    return T.add(bce_with_logits(cls, cls_t), l1)


def train(model: ToyModel, X: np.ndarray, Y: np.ndarray, steps: int = 300, lr: float = 0.05,
          momentum: float = 0.9, seed: int = 0, batch_size: int | None = None,
          record_grads: bool = False):
    """Plain SGD (with optional momentum) over every parameter.

    Returns the per-step loss list; with ``record_grads`` also the list of
    per-step gradient maps.
    """
    if lr < 0 or steps < 1:
        raise ValueError("need lr >= 0 and steps >= 1")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    bs = n if batch_size is None else min(batch_size, n)
    velocity: dict[str, np.ndarray] = {}
    losses, grad_log = [], []
    model.train()
    order = np.arange(n)
    cursor = n
    for step in range(steps):
        if bs < n:
            if cursor + bs > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + bs]
            cursor += bs
        else:
            idx = order
        params = model.named_parameters()
        loss = toy_loss(model(Tensor(X[idx])), Y[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(step, value)
        losses.append(value)
        grads = backward(loss, list(params.values()))
        if record_grads:
            grad_log.append({k: grads[t] for k, t in params.items()})
        if lr == 0:
            continue
        update = {}
        for name, t in params.items():
            g = grads[t]
            if momentum:
                v = velocity.get(name)
                v = g if v is None else momentum * v + g
                velocity[name] = v
                g = v
            update[name] = Tensor(t.data - lr * g, requires_grad=True)
        model.assign(update)
    return (losses, grad_log) if record_grads else losses
