"""Optimizers: Adam (default) and SGD with momentum.

State slots are created lazily and only for trainable parameters; a frozen
layer never acquires optimizer state, so its tensors stay bit-identical no
matter how many steps run.
"""
from __future__ import annotations

import numpy as np

from .network import Network


class Optimizer:
    algorithm = "base"

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, net: Network) -> None:
        """Apply one update to every trainable parameter, then clear gradients."""
        self.step_count += 1
        for layer in net.layers:
            if not layer.trainable:
                continue
            for key, grad in layer.grads.items():
                self._update(layer.name, key, layer.params[key], grad)
        net.zero_grads()

    def _update(self, layer_name: str, key: str, param: np.ndarray, grad: np.ndarray) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    algorithm = "sgd-momentum"

    def __init__(self, learning_rate: float = 1e-3, momentum: float = 0.9):
        super().__init__(learning_rate)
        self.momentum = momentum
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def _update(self, layer_name, key, param, grad):
        slot = (layer_name, key)
        v = self.velocity.get(slot)
        if v is None:
            v = self.velocity[slot] = np.zeros_like(param)
        v *= self.momentum
        v -= self.learning_rate * grad
        param += v


class Adam(Optimizer):
    algorithm = "adam"

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[tuple[str, str], np.ndarray] = {}
        self.v: dict[tuple[str, str], np.ndarray] = {}

    def _update(self, layer_name, key, param, grad):
        slot = (layer_name, key)
        m = self.m.get(slot)
        if m is None:
            m = self.m[slot] = np.zeros_like(param)
            self.v[slot] = np.zeros_like(param)
        v = self.v[slot]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        mhat = m / (1.0 - self.beta1 ** self.step_count)
        vhat = v / (1.0 - self.beta2 ** self.step_count)
        param -= self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(algorithm: str = "adam", learning_rate: float = 1e-3,
                   momentum: float = 0.9) -> Optimizer:
    if algorithm == "adam":
        return Adam(learning_rate)
    if algorithm == "sgd-momentum":
        return SGDMomentum(learning_rate, momentum)
    raise ValueError(f"unknown optimizer {algorithm!r}; choose adam or sgd-momentum")
