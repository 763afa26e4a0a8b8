"""Differentiable layers.

Each layer is a small stateless object describing its hyper-parameters.
Parameters and running buffers live in the owning graph and are passed in
explicitly, so one layer definition never carries hidden state.
"""

import math

import numpy as np

from . import functional as F
from ..errors import GraphError


class Layer:
    """Base class. Shapes exchanged with the graph exclude the batch axis."""

    n_inputs = 1

    def output_shape(self, *in_shapes):
        return in_shapes[0]

    def param_shapes(self):
        return {}

    def buffer_shapes(self):
        return {}

    def init_params(self, rng, dtype):
        return {}

    def init_buffers(self, dtype):
        return {}

    def forward(self, inputs, params, buffers, training):
        raise NotImplementedError

    def backward(self, grad, cache, params):
        raise NotImplementedError

    def macs(self, in_shapes, out_shape):
        return 0

    def spec(self):
        """JSON-able description used in checkpoints and reprs."""
        return {"type": type(self).__name__}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k != "type")
        return f"{type(self).__name__}({args})"


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, groups=1, bias=True):
        if in_channels % groups or out_channels % groups:
            raise GraphError(
                f"groups={groups} must divide in={in_channels} and out={out_channels}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.groups = groups
        self.bias = bias

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise GraphError(f"expected {self.in_channels} input channels, got {c}")
        ho = F.conv_output_size(h, self.kernel, self.stride, self.pad)
        wo = F.conv_output_size(w, self.kernel, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise GraphError(f"input {h}x{w} too small for kernel {self.kernel}")
        return (self.out_channels, ho, wo)

    def param_shapes(self):
        shapes = {"weight": (self.out_channels, self.in_channels // self.groups,
                             self.kernel, self.kernel)}
        if self.bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def init_params(self, rng, dtype):
        fan_in = self.in_channels // self.groups * self.kernel ** 2
        params = {"weight": _he_uniform(rng, self.param_shapes()["weight"], fan_in, dtype)}
        if self.bias:
            params["bias"] = np.zeros(self.out_channels, dtype=dtype)
        return params

    def forward(self, inputs, params, buffers, training):
        (x,) = inputs
        y, cols = F.conv2d(x, params["weight"], self.stride, self.pad, self.groups)
        if self.bias:
            y += params["bias"][None, :, None, None]
        return y, (x.shape, cols)

    def backward(self, grad, cache, params):
        x_shape, cols = cache
        w = params["weight"]
        grads = {"weight": F.conv2d_grad_weight(grad, cols, w.shape, self.groups)}
        if self.bias:
            grads["bias"] = grad.sum(axis=(0, 2, 3))
        dx = F.conv2d_grad_input(grad, w, x_shape, self.stride, self.pad, self.groups)
        return [dx], grads

    def macs(self, in_shapes, out_shape):
        _, ho, wo = out_shape
        return (self.kernel ** 2 * (self.in_channels // self.groups)
                * self.out_channels * ho * wo)

    def spec(self):
        return {"type": "Conv", "in": self.in_channels, "out": self.out_channels,
                "k": self.kernel, "stride": self.stride, "pad": self.pad,
                "groups": self.groups, "bias": self.bias}


class TransConv(Layer):
    """Transposed convolution; ``out_pad`` may be a per-axis pair."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, out_pad=0, bias=True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.out_pad = tuple(out_pad) if np.ndim(out_pad) else (out_pad, out_pad)
        if any(p < 0 or (p > 0 and p >= stride) for p in self.out_pad):
            raise GraphError(f"out_pad {self.out_pad} must be smaller than stride {stride}")
        self.bias = bias

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise GraphError(f"expected {self.in_channels} input channels, got {c}")
        ho = F.transconv_output_size(h, self.kernel, self.stride, self.pad, self.out_pad[0])
        wo = F.transconv_output_size(w, self.kernel, self.stride, self.pad, self.out_pad[1])
        return (self.out_channels, ho, wo)

    def param_shapes(self):
        shapes = {"weight": (self.in_channels, self.out_channels, self.kernel, self.kernel)}
        if self.bias:
            shapes["bias"] = (self.out_channels,)
        return shapes

    def init_params(self, rng, dtype):
        # fan-in seen by each output pixel of a stride-s transposed conv
        fan_in = max(1, self.in_channels * self.kernel ** 2 // self.stride ** 2)
        params = {"weight": _he_uniform(rng, self.param_shapes()["weight"], fan_in, dtype)}
        if self.bias:
            params["bias"] = np.zeros(self.out_channels, dtype=dtype)
        return params

    def forward(self, inputs, params, buffers, training):
        (x,) = inputs
        oph, opw = self.out_pad
        w = params["weight"]
        if oph == opw:
            y, buf = F.conv_transpose2d(x, w, self.stride, self.pad, oph)
        else:
            y, buf = F.conv_transpose2d(x, w, self.stride, self.pad, max(oph, opw))
            ho, wo = self.output_shape(x.shape[1:])[1:]
            y = y[:, :, :ho, :wo]
            buf = (buf[0], buf[1], ho + 2 * self.pad, wo + 2 * self.pad)
        if self.bias:
            y = y + params["bias"][None, :, None, None]
        return y, (x, buf)

    def backward(self, grad, cache, params):
        x, buf = cache
        dx, dw = F.conv_transpose2d_backward(grad, x, params["weight"], buf, self.stride, self.pad)
        grads = {"weight": dw}
        if self.bias:
            grads["bias"] = grad.sum(axis=(0, 2, 3))
        return [dx], grads

    def macs(self, in_shapes, out_shape):
        # every input pixel scatters a k*k*out stencil
        _, h, w = in_shapes[0]
        return self.kernel ** 2 * self.in_channels * self.out_channels * h * w

    def spec(self):
        return {"type": "TransConv", "in": self.in_channels, "out": self.out_channels,
                "k": self.kernel, "stride": self.stride, "pad": self.pad,
                "out_pad": list(self.out_pad), "bias": self.bias}


class BatchNorm(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise GraphError(f"expected {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def buffer_shapes(self):
        return {"running_mean": (self.channels,), "running_var": (self.channels,)}

    def init_params(self, rng, dtype):
        return {"gamma": np.ones(self.channels, dtype=dtype),
                "beta": np.zeros(self.channels, dtype=dtype)}

    def init_buffers(self, dtype):
        return {"running_mean": np.zeros(self.channels, dtype=dtype),
                "running_var": np.ones(self.channels, dtype=dtype)}

    def forward(self, inputs, params, buffers, training):
        (x,) = inputs
        gamma = params["gamma"][None, :, None, None]
        beta = params["beta"][None, :, None, None]
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.size // x.shape[1]
            if buffers is not None:
                unbiased = var * m / max(m - 1, 1)
                buffers["running_mean"] *= 1 - self.momentum
                buffers["running_mean"] += self.momentum * mean
                buffers["running_var"] *= 1 - self.momentum
                buffers["running_var"] += self.momentum * unbiased
        else:
            mean = buffers["running_mean"]
            var = buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * xhat + beta, (xhat, inv_std, training)

    def backward(self, grad, cache, params):
        xhat, inv_std, training = cache
        gamma = params["gamma"]
        grads = {"gamma": (grad * xhat).sum(axis=(0, 2, 3)), "beta": grad.sum(axis=(0, 2, 3))}
        scale = (gamma * inv_std)[None, :, None, None]
        if not training:
            return [grad * scale], grads
        mean_g = grad.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (grad * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return [scale * (grad - mean_g - xhat * mean_gx)], grads

    def spec(self):
        return {"type": "BatchNorm", "channels": self.channels, "eps": self.eps,
                "momentum": self.momentum}


class ReLU(Layer):
    def forward(self, inputs, params, buffers, training):
        (x,) = inputs
        mask = x > 0
        return x * mask, mask

    def backward(self, grad, cache, params):
        return [grad * cache], {}


class Sigmoid(Layer):
    def forward(self, inputs, params, buffers, training):
        (x,) = inputs
        # split by sign so exp never overflows
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    def backward(self, grad, cache, params):
        y = cache
        return [grad * y * (1.0 - y)], {}


class Concat(Layer):
    """Channel concatenation of any number of inputs."""

    n_inputs = None

    def output_shape(self, *in_shapes):
        hw = {s[1:] for s in in_shapes}
        if len(hw) != 1:
            raise GraphError(f"concat inputs disagree on spatial size: {sorted(hw)}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]

    def forward(self, inputs, params, buffers, training):
        return np.concatenate(inputs, axis=1), [x.shape[1] for x in inputs]

    def backward(self, grad, cache, params):
        splits = np.cumsum(cache)[:-1]
        return list(np.split(grad, splits, axis=1)), {}


class Add(Layer):
    """Element-wise sum (residual connection)."""

    n_inputs = 2

    def output_shape(self, *in_shapes):
        if len(set(in_shapes)) != 1:
            raise GraphError(f"add inputs disagree on shape: {in_shapes}")
        return in_shapes[0]

    def forward(self, inputs, params, buffers, training):
        out = inputs[0] + inputs[1]
        for x in inputs[2:]:
            out = out + x
        return out, len(inputs)

    def backward(self, grad, cache, params):
        return [grad] * cache, {}


class MaxPool(Layer):
    def __init__(self, kernel, stride=None):
        self.kernel = kernel
        self.stride = stride or kernel

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho = F.conv_output_size(h, self.kernel, self.stride, 0)
        wo = F.conv_output_size(w, self.kernel, self.stride, 0)
        if ho < 1 or wo < 1:
            raise GraphError(f"input {h}x{w} too small for pool {self.kernel}")
        return (c, ho, wo)

    def forward(self, inputs, params, buffers, training):
        (x,) = inputs
        y, idx = F.max_pool2d(x, self.kernel, self.stride)
        return y, (idx, x.shape)

    def backward(self, grad, cache, params):
        idx, x_shape = cache
        return [F.max_pool2d_backward(grad, idx, x_shape, self.kernel, self.stride)], {}

    def spec(self):
        return {"type": "MaxPool", "k": self.kernel, "stride": self.stride}


LAYER_TYPES = {cls.__name__: cls for cls in
               (Conv, TransConv, BatchNorm, ReLU, Sigmoid, Concat, Add, MaxPool)}
