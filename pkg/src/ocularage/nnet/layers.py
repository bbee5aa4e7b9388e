"""Layers with hand-written forward and backward passes.

Activations are NCHW (or NC for dense layers). Each layer keeps its
trainable tensors in ``params`` and accumulates gradients into ``grads``;
non-trainable state (BatchNorm running statistics) lives in ``buffers``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"kind": self.kind}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x: np.ndarray, training: bool = False):
        raise NotImplementedError

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def _accumulate(self, name: str, g: np.ndarray):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "kind")
        return f"{self.kind}({args})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=0,
                 bias=False, rng=None):
        super().__init__()
        if min(in_channels, out_channels, kernel, stride) < 1 or padding < 0:
            raise ValueError("Conv2D hyperparameters must be positive")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.bias = bias
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel))
        self.params["weight"] = w.astype(np.float32)
        if bias:
            self.params["bias"] = np.zeros(out_channels, np.float32)

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"Conv2D expects {self.in_channels} channels, got {c}")
        return (self.out_channels,
                _conv_out(h, self.kernel, self.stride, self.padding),
                _conv_out(w, self.kernel, self.stride, self.padding))

    def _cols(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        n, c = x.shape[:2]
        if k == 1:
            win = xp[:, :, ::s, ::s]
            ho, wo = win.shape[2:]
            cols = win.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
        else:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            ho, wo = win.shape[2:4]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, xp.shape, ho, wo

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"Conv2D expects (N, {self.in_channels}, H, W), got {x.shape}")
        n = x.shape[0]
        w = self.params["weight"]
        cols, xp_shape, ho, wo = self._cols(x)
        y = cols @ w.reshape(self.out_channels, -1).T
        if self.bias:
            y += self.params["bias"]
        y = np.ascontiguousarray(y.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2))
        return y, (cols, xp_shape, ho, wo)

    def backward(self, cache, dy):
        cols, xp_shape, ho, wo = cache
        k, s, p = self.kernel, self.stride, self.padding
        n, c = xp_shape[:2]
        w = self.params["weight"]
        dy_r = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self._accumulate("weight", (dy_r.T @ cols).reshape(w.shape))
        if self.bias:
            self._accumulate("bias", dy_r.sum(axis=0))
        dcols = dy_r @ w.reshape(self.out_channels, -1)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        if k == 1:
            dxp[:, :, ::s, ::s][:, :, :ho, :wo] += dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, ho, wo, c, k, k)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                        dcols[..., i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class DepthwiseConv2D(Layer):
    kind = "DepthwiseConv2D"

    def __init__(self, channels, kernel=3, stride=1, padding=1, rng=None):
        super().__init__()
        if min(channels, kernel, stride) < 1 or padding < 0:
            raise ValueError("DepthwiseConv2D hyperparameters must be positive")
        self.channels, self.kernel, self.stride, self.padding = channels, kernel, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(2.0 / (kernel * kernel)), (channels, 1, kernel, kernel))
        self.params["weight"] = w.astype(np.float32)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.channels:
            raise ShapeMismatch(f"DepthwiseConv2D expects {self.channels} channels, got {c}")
        return (c, _conv_out(h, self.kernel, self.stride, self.padding),
                _conv_out(w, self.kernel, self.stride, self.padding))

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"DepthwiseConv2D expects (N, {self.channels}, H, W), got {x.shape}")
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = _conv_out(x.shape[2], k, s, p)
        wo = _conv_out(x.shape[3], k, s, p)
        w = self.params["weight"]
        y = np.zeros((x.shape[0], self.channels, ho, wo), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                y += patch * w[:, 0, i, j][None, :, None, None]
        return y, (xp, ho, wo)

    def backward(self, cache, dy):
        xp, ho, wo = cache
        k, s, p = self.kernel, self.stride, self.padding
        w = self.params["weight"]
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None),
                      slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dy, xp[sl])
                dxp[sl] += dy * w[:, 0, i, j][None, :, None, None]
        self._accumulate("weight", dw)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features, out_features, bias=True, rng=None, init_std=None):
        super().__init__()
        if min(in_features, out_features) < 1:
            raise ValueError("Dense sizes must be positive")
        self.in_features, self.out_features, self.bias = in_features, out_features, bias
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / in_features) if init_std is None else init_std
        self.params["weight"] = rng.normal(0.0, std, (out_features, in_features)).astype(np.float32)
        if bias:
            self.params["bias"] = np.zeros(out_features, np.float32)

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features, "bias": self.bias}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeMismatch(f"Dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"Dense expects (N, {self.in_features}), got {x.shape}")
        y = x @ self.params["weight"].T
        if self.bias:
            y = y + self.params["bias"]
        return y, x

    def backward(self, cache, dy):
        x = cache
        self._accumulate("weight", dy.T @ x)
        if self.bias:
            self._accumulate("bias", dy.sum(axis=0))
        return dy @ self.params["weight"]


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, training=False):
        return np.maximum(x, 0), x > 0

    def backward(self, cache, dy):
        return dy * cache


class HardSwish(Layer):
    kind = "HardSwish"

    def forward(self, x, training=False):
        return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0, x

    def backward(self, cache, dy):
        x = cache
        d = np.where(x < -3.0, 0.0, np.where(x > 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
        return dy * d.astype(dy.dtype)


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W), or over N for 2-D input."""

    kind = "BatchNorm"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = np.ones(channels, np.float32)
        self.params["beta"] = np.zeros(channels, np.float32)
        self.buffers["running_mean"] = np.zeros(channels, np.float32)
        self.buffers["running_var"] = np.ones(channels, np.float32)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels,
                "momentum": self.momentum, "eps": self.eps}

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeMismatch(f"BatchNorm expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, training=False):
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"BatchNorm expects {self.channels} channels, got {x.shape[1]}")
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.channels
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - mom) * rm + mom * mean
            rv[...] = (1 - mom) * rv + mom * var * (m / max(m - 1, 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        invstd = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(bs).astype(x.dtype)) * invstd.reshape(bs)
        y = xhat * self.params["gamma"].reshape(bs) + self.params["beta"].reshape(bs)
        return y, (xhat, invstd, training, axes)

    def backward(self, cache, dy):
        xhat, invstd, training, axes = cache
        bs = self._bshape(dy)
        self._accumulate("gamma", (dy * xhat).sum(axis=axes))
        self._accumulate("beta", dy.sum(axis=axes))
        dxhat = dy * self.params["gamma"].reshape(bs)
        if not training:
            return dxhat * invstd.reshape(bs)
        m = dy.size // self.channels
        s1 = dxhat.sum(axis=axes).reshape(bs)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bs)
        return (invstd.reshape(bs) / m) * (m * dxhat - s1 - xhat * s2)


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""

    kind = "MaxPool"

    def __init__(self, size=2):
        super().__init__()
        if size < 1:
            raise ValueError("MaxPool size must be positive")
        self.size = size

    def spec(self):
        return {"kind": self.kind, "size": self.size}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)

    def forward(self, x, training=False):
        k = self.size
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        if k == 2:
            quads = [x[:, :, a:2 * ho:2, b:2 * wo:2] for a in (0, 1) for b in (0, 1)]
            y = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
            idx = np.full(y.shape, 3, np.uint8)
            for q in (2, 1, 0):
                idx[quads[q] == y] = q
            return y, (x.shape, idx)
        win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, cache, dy):
        shape, idx = cache
        k = self.size
        n, c, h, w = shape
        ho, wo = idx.shape[2:]
        dx = np.zeros(shape, dtype=dy.dtype)
        if k == 2:
            for q, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                dx[:, :, a:2 * ho:2, b:2 * wo:2] = np.where(idx == q, dy, 0)
            return dx
        dwin = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        dx[:, :, :ho * k, :wo * k] = dwin
        return dx


class GlobalAvgPool(Layer):
    kind = "GlobalAvgPool"

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, training=False):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, dy):
        n, c, h, w = cache
        return np.broadcast_to(dy[:, :, None, None] / (h * w), cache).astype(dy.dtype)


class DualHead(Layer):
    """Classification and regression heads over a shared feature vector.

    Output columns are ``[logit_young, logit_old, age]``.
    """

    kind = "DualHead"

    def __init__(self, in_features, n_classes=2, rng=None):
        super().__init__()
        self.in_features, self.n_classes = in_features, n_classes
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(1.0 / in_features)
        self.params["cls_weight"] = rng.normal(0.0, std, (n_classes, in_features)).astype(np.float32)
        self.params["cls_bias"] = np.zeros(n_classes, np.float32)
        self.params["reg_weight"] = rng.normal(0.0, std, (1, in_features)).astype(np.float32)
        self.params["reg_bias"] = np.zeros(1, np.float32)

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "n_classes": self.n_classes}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeMismatch(f"DualHead expects ({self.in_features},), got {in_shape}")
        return (self.n_classes + 1,)

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"DualHead expects (N, {self.in_features}), got {x.shape}")
        p = self.params
        logits = x @ p["cls_weight"].T + p["cls_bias"]
        age = x @ p["reg_weight"].T + p["reg_bias"]
        return np.concatenate([logits, age], axis=1), x

    def backward(self, cache, dy):
        x = cache
        p = self.params
        k = self.n_classes
        dl, da = dy[:, :k], dy[:, k:]
        self._accumulate("cls_weight", dl.T @ x)
        self._accumulate("cls_bias", dl.sum(axis=0))
        self._accumulate("reg_weight", da.T @ x)
        self._accumulate("reg_bias", da.sum(axis=0))
        return dl @ p["cls_weight"] + da @ p["reg_weight"]


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2D, DepthwiseConv2D, Dense, ReLU, HardSwish, BatchNorm,
                MaxPool, GlobalAvgPool, DualHead)}


def layer_from_spec(spec: dict, rng=None) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ShapeMismatch(f"unknown layer kind {kind!r}") from None
    if cls in (Conv2D, DepthwiseConv2D, Dense, DualHead):
        spec["rng"] = rng
    return cls(**spec)
