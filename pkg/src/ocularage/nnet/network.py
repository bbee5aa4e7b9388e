"""Sequential network container and the compact OcularNet topology."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch, StaleCache
from .layers import (BatchNorm, Conv2D, DepthwiseConv2D, DualHead, GlobalAvgPool,
                     HardSwish, Layer, MaxPool, ReLU, Dense, layer_from_spec)

EYE_INPUT = (1, 240, 320)
IRIS_INPUT = (2, 32, 256)


class Cache:
    """Per-layer caches from one forward pass, tagged with the parameter version."""

    __slots__ = ("entries", "version", "start")

    def __init__(self, entries, version, start=0):
        self.entries = entries
        self.version = version
        self.start = start


class Network:
    def __init__(self, layers: list[Layer], input_shape: tuple):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.version = 0
        self.precision = "fp32"
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        self.output_shape = shape

    # -- construction -----------------------------------------------------
    def topology(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer.spec() for layer in self.layers]}

    @classmethod
    def from_topology(cls, topology: dict, rng=None) -> "Network":
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = [layer_from_spec(s, rng) for s in topology["layers"]]
        return cls(layers, tuple(topology["input_shape"]))

    # -- parameters -------------------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{name}": p for i, layer in enumerate(self.layers)
                for name, p in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{name}"] = layer.grads.get(name, np.zeros_like(p))
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{name}": b for i, layer in enumerate(self.layers)
                for name, b in layer.buffers.items()}

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in a fixed order."""
        out = self.named_params()
        out.update(self.named_buffers())
        return out

    def load_state(self, tensors: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"{i}.{name}"
                    if key not in tensors:
                        raise ShapeMismatch(f"missing tensor {key}")
                    value = np.asarray(tensors[key])
                    if value.shape != store[name].shape:
                        raise ShapeMismatch(f"{key}: expected {store[name].shape}, got {value.shape}")
                    store[name] = value.astype(store[name].dtype).copy()
        self.bump()

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def n_stored_values(self) -> int:
        return sum(t.size for t in self.state_tensors().values())

    def size_bytes(self, precision: str | None = None) -> int:
        """Bytes needed to store every parameter and buffer at the given precision."""
        precision = precision or self.precision
        width = {"fp32": 4, "fp16": 2, "fp64": 8}[precision]
        return self.n_stored_values() * width

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def bump(self):
        self.version += 1

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for name in store:
                    store[name] = store[name].astype(dtype)
            layer.grads.clear()
        self.bump()
        return self

    def copy(self) -> "Network":
        net = Network.from_topology(self.topology())
        for layer, src in zip(net.layers, self.layers):
            for store, sstore in ((layer.params, src.params), (layer.buffers, src.buffers)):
                for name in sstore:
                    store[name] = sstore[name].copy()
        net.precision = self.precision
        return net

    # -- passes -----------------------------------------------------------
    def _check_input(self, x):
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"expected input (N, {', '.join(map(str, self.input_shape))}), "
                                f"got {x.shape}")

    def forward(self, x: np.ndarray, training: bool = False, start: int = 0, stop: int | None = None):
        """Run layers ``start:stop``; returns the output and a cache for :meth:`backward`."""
        if start == 0:
            self._check_input(x)
        entries = []
        for layer in self.layers[start:stop]:
            x, c = layer.forward(x, training)
            entries.append(c)
        return x, Cache(entries, self.version, start)

    def backward(self, cache: Cache, dy: np.ndarray):
        """Accumulate parameter gradients and return (grads, input grad)."""
        if cache.version != self.version:
            raise StaleCache("parameters changed since the forward pass")
        layers = self.layers[cache.start:cache.start + len(cache.entries)]
        for layer, c in zip(reversed(layers), reversed(cache.entries)):
            dy = layer.backward(c, dy)
        return self.named_grads(), dy

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def feature_layer_index(self) -> int | None:
        """Index of the GlobalAvgPool whose input is the last convolutional feature map."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GlobalAvgPool):
                has_conv = any(isinstance(l, (Conv2D, DepthwiseConv2D)) for l in self.layers[:i])
                return i if has_conv else None
        return None


def build_ocularnet(in_channels: int = 1, input_hw: tuple = EYE_INPUT[1:],
                    widths=(16, 32, 64, 128, 384), hidden: int = 192,
                    stem_kernel: int = 4, stem_stride: int = 4, seed: int = 42) -> Network:
    """Depthwise-separable backbone with a shared dense neck and dual heads.

    A non-overlapping patch stem is followed by one separable block per
    remaining width. A 2x max pool precedes every block for as long as the
    feature map stays at least 2 pixels on each side.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [Conv2D(in_channels, widths[0], stem_kernel, stride=stem_stride, rng=rng),
                           BatchNorm(widths[0]), HardSwish()]
    h, w = ((d - stem_kernel) // stem_stride + 1 for d in input_hw)
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        if h >= 2 and w >= 2:
            layers.append(MaxPool(2))
            h, w = h // 2, w // 2
        layers += [DepthwiseConv2D(c_in, 3, 1, 1, rng=rng), BatchNorm(c_in), ReLU(),
                   Conv2D(c_in, c_out, 1, rng=rng), BatchNorm(c_out), ReLU()]
    layers += [GlobalAvgPool(), Dense(widths[-1], hidden, rng=rng), ReLU(), DualHead(hidden, rng=rng)]
    return Network(layers, (in_channels, *input_hw))


def adapt_stem(rgb_weights: np.ndarray, target_channels: int) -> np.ndarray:
    """Turn an RGB stem kernel ``[out, 3, k, k]`` into a 1- or 2-channel kernel.

    Channel 0 is the mean over the RGB channels; a second (mask) channel is
    zero-initialized.
    """
    w = np.asarray(rgb_weights)
    if w.ndim != 4 or w.shape[1] != 3:
        raise ShapeMismatch(f"stem weights must be [out, 3, k, k], got {w.shape}")
    if target_channels not in (1, 2):
        raise ShapeMismatch("target_channels must be 1 or 2")
    gray = w.mean(axis=1, keepdims=True)
    if target_channels == 1:
        return gray
    return np.concatenate([gray, np.zeros_like(gray)], axis=1)


def adapt_network_stem(net: Network, target_channels: int) -> Network:
    """Rebuild ``net`` for a new input channel count using :func:`adapt_stem`.

    The stem is expected to have 3 input channels. The BatchNorm that
    follows the stem is reinitialized because its statistics no longer match.
    """
    stem = net.layers[0]
    if not isinstance(stem, Conv2D):
        raise ShapeMismatch("first layer is not a convolution")
    topo = net.topology()
    topo["layers"][0]["in_channels"] = target_channels
    topo["input_shape"][0] = target_channels
    new = Network.from_topology(topo)
    state = net.state_tensors()
    state["0.weight"] = adapt_stem(stem.params["weight"], target_channels)
    if isinstance(net.layers[1], BatchNorm):
        fresh = BatchNorm(net.layers[1].channels)
        for name, t in {**fresh.params, **fresh.buffers}.items():
            state[f"1.{name}"] = t
    new.load_state(state)
    return new


def quantize_fp16(net: Network) -> Network:
    """Copy of ``net`` with every stored value rounded to IEEE binary16 (kept in float32)."""
    out = net.copy()
    for layer in out.layers:
        for store in (layer.params, layer.buffers):
            for name in store:
                store[name] = store[name].astype(np.float16).astype(np.float32)
    out.precision = "fp16"
    out.bump()
    return out
