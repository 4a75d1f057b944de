"""scikit-learn compatible wrapper around the toy detector."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .layers import sigmoid
from .tensor import Tensor
from .toytrain import ToyModel, toy_loss, train


def check_images(X, stride: int = 1) -> np.ndarray:
    """Validate an ``N x 3 x H x W`` finite float image batch."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images shaped N x 3 x H x W, got {X.shape}")
    if X.shape[2] % stride or X.shape[3] % stride:
        raise ValueError(f"image extents {X.shape[2:]} are not divisible by stride {stride}")
    return X


def check_targets(Y, X: np.ndarray, stride: int) -> np.ndarray:
    Y = check_array(Y, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    grid = (X.shape[2] // stride, X.shape[3] // stride)
    if Y.ndim != 4 or Y.shape[0] != X.shape[0] or Y.shape[2:] != grid or Y.shape[1] < 5:
        raise ValueError(f"targets {Y.shape} do not match images {X.shape} at stride {stride}")
    return Y


class ToyDetector(BaseEstimator):
    """Toy single-level detector with optional ISB bottleneck and ISADH head.

    ``y`` holds dense per-cell targets ``N x (nc + 4) x G x G``: class
    one-hots followed by box offsets. ``predict`` returns the same layout
    with class probabilities in place of one-hots.
    """

    def __init__(self, isb: bool = False, head: str = "baseline", width: int = 16,
                 n_blocks: int = 1, ratio: int = 8, patch: int = 4, stride: int = 4,
                 steps: int = 300, lr: float = 0.05, momentum: float = 0.9,
                 batch_size: int | None = None, seed: int = 0):
        self.isb = isb
        self.head = head
        self.width = width
        self.n_blocks = n_blocks
        self.ratio = ratio
        self.patch = patch
        self.stride = stride
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.seed = seed

    def _build(self, nc: int) -> ToyModel:
        return ToyModel(nc=nc, width=self.width, n_blocks=self.n_blocks, isb=self.isb,
                        head=self.head, ratio=self.ratio, patch=self.patch,
                        stride=self.stride, seed=self.seed)

    def fit(self, X, y):
        X = check_images(X, self.stride)
        y = check_targets(y, X, self.stride)
        self.n_classes_ = y.shape[1] - 4
        self.model_ = self._build(self.n_classes_)
        self.loss_curve_ = train(self.model_, X, y, steps=self.steps, lr=self.lr,
                                 momentum=self.momentum, seed=self.seed,
                                 batch_size=self.batch_size)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.stride)
        self.model_.eval()
        try:
            out = self.model_(Tensor(X))
        finally:
            self.model_.train()
        return np.concatenate([sigmoid(out.cls[0]).data, out.box[0].data], axis=1)

    def score(self, X, y) -> float:
        """Negative toy loss in eval mode (higher is better)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.stride)
        y = check_targets(y, X, self.stride)
        self.model_.eval()
        try:
            return -toy_loss(self.model_(Tensor(X)), y).item()
        finally:
            self.model_.train()
