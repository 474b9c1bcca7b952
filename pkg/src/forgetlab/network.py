"""Sequential CNN assembly: the 48x48 7-class expression net and its desk-scale twin.

Both variants share the same topology and layer names; the desk variant only
shrinks widths so end-to-end runs finish in minutes on a CPU.

    input [B,1,48,48]
      conv1 (2x2) bn1 relu1
      conv2 (2x2) bn2 relu2  pool1
      conv3 (3x3) bn3 relu3
      conv4 (3x3) bn4 relu4
      conv5 (3x3) bn5 relu5  pool2
      flatten fc1 relu6 drop1 fc2 relu7 drop2 fc3 head

Spatial trace: 48 -> 47 -> 46 -> 23 -> 21 -> 19 -> 17 -> 8.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (BatchNorm, Conv, Dense, Dropout, Flatten, Layer, MaxPool,
                     ReLU, SoftmaxCEHead)

NUM_CLASSES = 7
INPUT_HW = (48, 48)

# widths per variant: five conv filter counts and the two hidden dense widths
ARCH_WIDTHS = {
    "paper": ((64, 64, 128, 128, 128), (2048, 1024)),
    "desk": ((8, 8, 16, 16, 16), (64, 32)),
}

# layers that own parameters, in declaration order
PARAM_LAYERS = ("conv1", "bn1", "conv2", "bn2", "conv3", "bn3", "conv4", "bn4",
                "conv5", "bn5", "fc1", "fc2", "fc3")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    hyper: dict


class Network:
    """Ordered layer stack with materialized parameters and freeze flags."""

    def __init__(self, arch: str, seed: int, layers: list[Layer]):
        self.arch = arch
        self.seed = seed
        self.layers = layers
        self._by_name = {l.name: l for l in layers}
        if len(self._by_name) != len(layers):
            raise ValueError("layer names must be unique")
        self.head: SoftmaxCEHead = layers[-1]  # type: ignore[assignment]

    # -- construction -------------------------------------------------------

    def __getitem__(self, name: str) -> Layer:
        return self._by_name[name]

    def specs(self) -> list[LayerSpec]:
        return [LayerSpec(l.name, l.kind, l.hyper()) for l in self.layers]

    def reseed_dropout(self, seed: int) -> None:
        """Give the dropout layers fresh, reproducible mask streams."""
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(0xD0,))
        children = ss.spawn(sum(1 for l in self.layers if isinstance(l, Dropout)))
        i = 0
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng(children[i])
                i += 1

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out, mode)
        return out

    def backward(self, grad_logits: np.ndarray) -> None:
        """Push gradients down the stack, accumulating on trainable parameters.

        Layers below the lowest trainable parameterized layer cannot influence
        any update, so backward stops there instead of running to the input.
        """
        stop = self._lowest_trainable_index()
        if stop is None:
            return
        grad = grad_logits
        for i in range(len(self.layers) - 1, stop, -1):
            grad = self.layers[i].backward(grad)
        self.layers[stop].backward(grad, need_input_grad=False)

    def _lowest_trainable_index(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if layer.params and layer.trainable:
                return i
        return None

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    # -- freezing ------------------------------------------------------------

    def set_trainable(self, names: set[str] | frozenset[str]) -> None:
        """Exactly the named layers become trainable; every other is frozen."""
        unknown = set(names) - set(self._by_name)
        if unknown:
            raise KeyError(f"unknown layer name(s): {sorted(unknown)}")
        for layer in self.layers:
            layer.trainable = layer.name in names
        self.zero_grads()

    def trainable_layers(self) -> set[str]:
        return {l.name for l in self.layers if l.params and l.trainable}

    # -- bookkeeping ---------------------------------------------------------

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def layer_param_report(self) -> list[tuple[str, str, int]]:
        return [(l.name, l.kind, l.param_count()) for l in self.layers if l.params]

    def snapshot(self) -> dict[tuple[str, str], np.ndarray]:
        """Copies of every parameter and state tensor, keyed by (layer, tensor)."""
        snap: dict[tuple[str, str], np.ndarray] = {}
        for layer in self.layers:
            for key, val in layer.params.items():
                snap[(layer.name, key)] = val.copy()
            for key, val in layer.state.items():
                snap[(layer.name, key)] = val.copy()
        return snap

    def restore(self, snap: dict[tuple[str, str], np.ndarray]) -> None:
        for layer in self.layers:
            for key in layer.params:
                layer.params[key] = snap[(layer.name, key)].copy()
            for key in layer.state:
                layer.state[key] = snap[(layer.name, key)].copy()


def build_network(arch: str = "paper", seed: int = 0) -> Network:
    """Deterministically materialize the expression CNN for the given variant."""
    if arch not in ARCH_WIDTHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCH_WIDTHS)}")
    (c1, c2, c3, c4, c5), (f1, f2) = ARCH_WIDTHS[arch]
    ss = np.random.SeedSequence(seed)
    init_rng = np.random.default_rng(ss.spawn(1)[0])

    h, _ = INPUT_HW
    flat = ((h - 2) // 2 - 6) // 2                # 48->47->46->23->21->19->17->8
    flat_width = flat * flat * c5

    def _drop(name):                              # mask streams replaced by reseed_dropout
        return Dropout(name, 0.5, np.random.default_rng(ss.spawn(1)[0]))

    layers: list[Layer] = [
        Conv("conv1", 1, c1, 2, init_rng), BatchNorm("bn1", c1), ReLU("relu1"),
        Conv("conv2", c1, c2, 2, init_rng), BatchNorm("bn2", c2), ReLU("relu2"),
        MaxPool("pool1"),
        Conv("conv3", c2, c3, 3, init_rng), BatchNorm("bn3", c3), ReLU("relu3"),
        Conv("conv4", c3, c4, 3, init_rng), BatchNorm("bn4", c4), ReLU("relu4"),
        Conv("conv5", c4, c5, 3, init_rng), BatchNorm("bn5", c5), ReLU("relu5"),
        MaxPool("pool2"),
        Flatten("flatten"),
        Dense("fc1", flat_width, f1, init_rng), ReLU("relu6"), _drop("drop1"),
        Dense("fc2", f1, f2, init_rng), ReLU("relu7"), _drop("drop2"),
        Dense("fc3", f2, NUM_CLASSES, init_rng),
        SoftmaxCEHead("head"),
    ]
    net = Network(arch, seed, layers)
    net.reseed_dropout(seed)
    _validate_stack(net)
    return net


def build_baseline(seed: int = 0) -> Network:
    """The full-width variant; exactly 19,271,431 parameters."""
    return build_network("paper", seed)


def _validate_stack(net: Network) -> None:
    shape: tuple[int, ...] = (1, 1) + INPUT_HW
    for layer in net.layers:
        shape = layer.out_shape(shape)
    if shape != (1, NUM_CLASSES):
        raise ValueError(f"stack produces {shape}, expected (1, {NUM_CLASSES})")
