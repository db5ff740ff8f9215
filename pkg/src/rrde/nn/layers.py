"""Stateful layer wrappers around :mod:`rrde.nn.functional`."""
from __future__ import annotations

import numpy as np

from . import functional as F


class Parameter:
    """A trainable array with its gradient accumulator."""

    def __init__(self, value, id: str, dtype=np.float64):
        self.value = np.array(value, dtype=dtype)
        self.grad = np.zeros_like(self.value)
        self.id = id

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


class Layer:
    """Base class: ``forward`` caches what ``backward`` needs."""

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that belongs in a checkpoint."""
        return {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2d(Layer):
    """Bias-free convolution on NHWC activations; weight stored (out, in, kh, kw)."""

    def __init__(self, in_ch, out_ch, k, stride=1, pad=0, *, rng, name, dtype=np.float64):
        fan_in = in_ch * k * k
        w = rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in)
        self.weight = Parameter(w, f"{name}.weight", dtype)
        self.stride, self.pad = stride, pad
        self._cache = None

    def parameters(self):
        return [self.weight]

    def forward(self, x, train=False):
        out, self._cache = F.conv2d_nhwc_forward(x, self.weight.value, self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw = F.conv2d_nhwc_backward(dout, self._cache)
        self.weight.grad += dw
        return dx


class BatchNorm(Layer):
    """Batch norm over the last (channel) axis."""

    def __init__(self, channels, *, name, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma", dtype)
        self.beta = Parameter(np.zeros(channels), f"{name}.beta", dtype)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.name = name
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train=False):
        out, self._cache = F.batch_norm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, train,
            channel_axis=-1)
        return out

    def backward(self, dout):
        dx, dg, db = F.batch_norm_backward(dout, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Dense(Layer):
    def __init__(self, d_in, d_out, *, rng, name, dtype=np.float64):
        w = rng.standard_normal((d_in, d_out)) * np.sqrt(1.0 / d_in)
        self.weight = Parameter(w, f"{name}.weight", dtype)
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias", dtype)
        self._cache = None

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False):
        out, self._cache = F.dense_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = F.dense_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ReLU(Layer):
    def forward(self, x, train=False):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._mask)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        out, self._shape = F.global_avg_pool_forward(x)
        return out

    def backward(self, dout):
        return F.global_avg_pool_backward(dout, self._shape)


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout
