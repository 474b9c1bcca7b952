"""Layer objects: parameters, gradients, trainable flags and per-layer state.

Each layer wraps the functional kernels in ops.py, caching whatever its
backward pass needs when run in train mode. A frozen layer still propagates
gradients to its input but stores no parameter gradients; a frozen batch-norm
additionally normalizes with its running statistics and leaves them untouched.
"""
from __future__ import annotations

import numpy as np

from . import ops


class Layer:
    kind = "base"

    def __init__(self, name: str):
        self.name = name
        self.trainable = True
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        self.grads = {}

    def hyper(self) -> dict:
        """Construction hyperparameters, for specs and checkpoints."""
        return {}

    def _accumulate(self, key: str, grad: np.ndarray) -> None:
        if not self.trainable:
            return
        if key in self.grads:
            self.grads[key] += grad
        else:
            self.grads[key] = grad


class Conv(Layer):
    kind = "conv"

    def __init__(self, name: str, in_channels: int, filters: int, kernel_size: int,
                 rng: np.random.Generator):
        super().__init__(name)
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)               # He init for the ReLU stack
        self.params = {
            "w": rng.normal(0.0, std, (filters, in_channels, kernel_size, kernel_size)),
            "b": np.zeros(filters),
        }
        self._x: np.ndarray | None = None
        self._cols: np.ndarray | None = None

    def hyper(self) -> dict:
        return {"in_channels": self.in_channels, "filters": self.filters,
                "kernel_size": self.kernel_size}

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        if c != self.in_channels:
            raise ops.ShapeError(
                f"{self.name}: input channel axis {c} != expected {self.in_channels}")
        k = self.kernel_size
        return (b, self.filters, h - k + 1, w - k + 1)

    def forward(self, x, mode):
        if mode == "train" and self.trainable:
            # share the column matrix between forward and weight-gradient
            self._cols = ops.im2col(x, self.kernel_size, self.kernel_size)
            self._x = x
        else:
            self._cols = None
            self._x = x if mode == "train" else None
        return ops.conv2d_forward(x, self.params["w"], self.params["b"],
                                  cols=self._cols)

    def backward(self, grad_out, need_input_grad=True):
        grad_x, grad_w, grad_b = ops.conv2d_backward(
            self._x, self.params["w"], grad_out, cols=self._cols,
            need_input_grad=need_input_grad)
        self._accumulate("w", grad_w)
        self._accumulate("b", grad_b)
        return grad_x


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.state = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self._cache: ops.BNCache | None = None
        self._frozen_scale: np.ndarray | None = None

    def hyper(self) -> dict:
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, mode):
        self._cache = None
        self._frozen_scale = None
        # A frozen batch-norm is pinned to its running statistics even in
        # train mode, so neither its parameters nor its state can drift.
        effective = mode if (self.trainable or mode == "eval") else "eval"
        out, cache = ops.batchnorm_forward(
            x, self.params["gamma"], self.params["beta"], effective,
            self.state["running_mean"], self.state["running_var"],
            momentum=self.momentum, eps=self.eps)
        if effective == "train":
            self._cache = cache
        elif mode == "train":
            bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
            self._frozen_scale = (self.params["gamma"]
                                  / np.sqrt(self.state["running_var"] + self.eps)).reshape(bshape)
        return out

    def backward(self, grad_out, need_input_grad=True):
        if self._frozen_scale is not None:        # fixed affine map while frozen
            return grad_out * self._frozen_scale
        grad_x, grad_gamma, grad_beta = ops.batchnorm_backward(self._cache, grad_out)
        self._accumulate("gamma", grad_gamma)
        self._accumulate("beta", grad_beta)
        return grad_x


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name: str):
        super().__init__(name)
        self._mask: np.ndarray | None = None

    def forward(self, x, mode):
        self._mask = (x > 0.0) if mode == "train" else None
        return ops.relu_forward(x)

    def backward(self, grad_out, need_input_grad=True):
        return grad_out * self._mask              # subgradient 0 at exactly 0


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name: str):
        super().__init__(name)
        self._index: ops.PoolIndex | None = None

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        return (b, c, h // 2, w // 2)

    def forward(self, x, mode):
        out, index = ops.maxpool2x2_forward(x)
        self._index = index if mode == "train" else None
        return out

    def backward(self, grad_out, need_input_grad=True):
        return ops.maxpool2x2_backward(self._index, grad_out)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self, name: str):
        super().__init__(name)
        self._shape: tuple[int, ...] | None = None

    def out_shape(self, in_shape):
        b = in_shape[0]
        return (b, int(np.prod(in_shape[1:])))

    def forward(self, x, mode):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out, need_input_grad=True):
        return grad_out.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, in_features: int, units: int, rng: np.random.Generator):
        super().__init__(name)
        self.in_features = in_features
        self.units = units
        std = np.sqrt(2.0 / in_features)
        self.params = {"w": rng.normal(0.0, std, (units, in_features)), "b": np.zeros(units)}
        self._x: np.ndarray | None = None

    def hyper(self) -> dict:
        return {"in_features": self.in_features, "units": self.units}

    def out_shape(self, in_shape):
        b, f = in_shape
        if f != self.in_features:
            raise ops.ShapeError(
                f"{self.name}: input feature axis {f} != expected {self.in_features}")
        return (b, self.units)

    def forward(self, x, mode):
        self._x = x if mode == "train" else None
        return ops.dense_forward(x, self.params["w"], self.params["b"])

    def backward(self, grad_out, need_input_grad=True):
        grad_x, grad_w, grad_b = ops.dense_backward(self._x, self.params["w"], grad_out)
        self._accumulate("w", grad_w)
        self._accumulate("b", grad_b)
        return grad_x


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name: str, rate: float, rng: np.random.Generator):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self._mask: np.ndarray | None = None

    def hyper(self) -> dict:
        return {"rate": self.rate}

    def forward(self, x, mode):
        out, mask = ops.dropout_forward(x, self.rate, mode, self.rng)
        self._mask = mask
        return out

    def backward(self, grad_out, need_input_grad=True):
        return ops.dropout_backward(self._mask, self.rate, grad_out)


class SoftmaxCEHead(Layer):
    """Pass-through output layer owning the softmax cross-entropy loss."""
    kind = "softmax_ce_head"

    def forward(self, x, mode):
        return x

    def backward(self, grad_out, need_input_grad=True):
        return grad_out

    def loss(self, logits: np.ndarray, labels: np.ndarray):
        return ops.softmax_cross_entropy(logits, labels)
