"""Differentiable building blocks: depthwise-separable convolution, batch
norm, CBAM channel/spatial attention, the double-conv unit, and the losses.

Each block owns its parameters (`p`), non-trainable state (`s`), and after a
backward pass its gradients (`g`).  Forward in train mode caches whatever the
analytic backward needs; eval mode caches nothing and mutates nothing except
batch-norm running statistics, which only move in train mode.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateBatchError, ShapeError, StateError, ValidationError


def _he_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Block:
    """Base for all layers: a parameter dict, a state dict, named children."""

    def __init__(self):
        self.p = {}
        self.s = {}
        self.g = {}
        self._children = {}
        self._cache = None

    def _child(self, name, block):
        self._children[name] = block
        return block

    def named_params(self, prefix=""):
        """Yield (hierarchical name, array) in deterministic construction order."""
        for key, val in self.p.items():
            yield (f"{prefix}.{key}" if prefix else key), val
        for name, child in self._children.items():
            yield from child.named_params(f"{prefix}.{name}" if prefix else name)

    def named_states(self, prefix=""):
        for key, val in self.s.items():
            yield (f"{prefix}.{key}" if prefix else key), val
        for name, child in self._children.items():
            yield from child.named_states(f"{prefix}.{name}" if prefix else name)

    def named_grads(self, prefix=""):
        for key in self.p:
            yield (f"{prefix}.{key}" if prefix else key), self.g.get(key)
        for name, child in self._children.items():
            yield from child.named_grads(f"{prefix}.{name}" if prefix else name)

    def set_param(self, name, value):
        head, _, rest = name.partition(".")
        if rest and head in self._children:
            self._children[head].set_param(rest, value)
        elif name in self.p:
            if self.p[name].shape != value.shape:
                raise ShapeError(f"parameter {name}: shape {value.shape} != {self.p[name].shape}")
            self.p[name] = value
        else:
            raise KeyError(f"no parameter named {name!r}")

    def set_state(self, name, value):
        head, _, rest = name.partition(".")
        if rest and head in self._children:
            self._children[head].set_state(rest, value)
        elif name in self.s:
            self.s[name] = value
        else:
            raise KeyError(f"no state named {name!r}")

    def to_dtype(self, dtype):
        """Cast every parameter and state in place; clears stale caches."""
        self.p = {k: v.astype(dtype) for k, v in self.p.items()}
        self.s = {k: v.astype(dtype) for k, v in self.s.items()}
        self.g = {}
        self._cache = None
        for child in self._children.values():
            child.to_dtype(dtype)
        return self

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward")
        return self._cache


class DepthwiseSeparableConv(Block):
    """3x3 depthwise conv (multiplier k, no bias) followed by a 1x1 pointwise
    conv with bias.  Parameter count is 9k*C_in + k*C_in*C_out + C_out."""

    def __init__(self, c_in, c_out, multiplier, rng, dtype=T.DTYPE):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.multiplier = multiplier
        mid = c_in * multiplier
        self.p["depthwise.weight"] = _he_uniform(rng, (mid, 1, 3, 3), 9, dtype)
        self.p["pointwise.weight"] = _he_uniform(rng, (c_out, mid, 1, 1), mid, dtype)
        self.p["pointwise.bias"] = np.zeros(c_out, dtype=dtype)

    def forward(self, x, train=False):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape[1]}")
        mid = T.conv2d(x, self.p["depthwise.weight"], padding=1, groups=self.c_in)
        y = T.conv2d(mid, self.p["pointwise.weight"], self.p["pointwise.bias"])
        self._cache = (x, mid) if train else None
        return y

    def backward(self, grad_out):
        x, mid = self._need_cache()
        g_mid, g_pw, g_pb = T.conv2d_backward(mid, self.p["pointwise.weight"], grad_out)
        g_x, g_dw, _ = T.conv2d_backward(x, self.p["depthwise.weight"], g_mid,
                                         padding=1, groups=self.c_in, has_bias=False)
        self.g = {"depthwise.weight": g_dw, "pointwise.weight": g_pw, "pointwise.bias": g_pb}
        return g_x


class BatchNorm(Block):
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with the biased batch variance and blends the same
    statistics into the running buffers (momentum weight on the new value).
    Eval mode uses the running buffers and never mutates them.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=T.DTYPE):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.p["gamma"] = np.ones(channels, dtype=dtype)
        self.p["beta"] = np.zeros(channels, dtype=dtype)
        self.s["running_mean"] = np.zeros(channels, dtype=dtype)
        self.s["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        if train:
            if n * h * w < 2:
                raise DegenerateBatchError("batch norm needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = x.dtype.type(self.momentum)
            self.s["running_mean"] = (1 - mom) * self.s["running_mean"] + mom * mean
            self.s["running_var"] = (1 - mom) * self.s["running_var"] + mom * var
        else:
            mean = self.s["running_mean"]
            var = self.s["running_var"]
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(self.eps))
        xc = x - mean[None, :, None, None]
        xhat = xc * inv_std[None, :, None, None]
        y = self.p["gamma"][None, :, None, None] * xhat + self.p["beta"][None, :, None, None]
        self._cache = (xc, xhat, inv_std) if train else None
        return y.astype(x.dtype, copy=False)

    def backward(self, grad_out):
        xc, xhat, inv_std = self._need_cache()
        n, _, h, w = grad_out.shape
        m = n * h * w
        self.g = {"gamma": (grad_out * xhat).sum(axis=(0, 2, 3)),
                  "beta": grad_out.sum(axis=(0, 2, 3))}
        dxhat = grad_out * self.p["gamma"][None, :, None, None]
        dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * -0.5 * inv_std ** 3
        dmean = (-dxhat.sum(axis=(0, 2, 3)) * inv_std
                 + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3)))
        dx = (dxhat * inv_std[None, :, None, None]
              + (2.0 / m) * dvar[None, :, None, None] * xc
              + dmean[None, :, None, None] / m)
        return dx.astype(grad_out.dtype, copy=False)


class ChannelAttention(Block):
    """CBAM channel gate: a shared two-layer bottleneck MLP (no biases) over
    the spatial average and spatial max descriptors, summed and squashed."""

    def __init__(self, channels, reduction, rng, dtype=T.DTYPE):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"reduction {reduction} does not divide {channels} channels")
        self.channels = channels
        hidden = channels // reduction
        self.p["w1"] = _he_uniform(rng, (hidden, channels), channels, dtype)
        self.p["w2"] = _he_uniform(rng, (channels, hidden), hidden, dtype)
        # diagnostics: when record_scales is set, forward keeps its last gate
        self.record_scales = False
        self.last_scale = None

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {c}")
        w1, w2 = self.p["w1"], self.p["w2"]
        flat = x.reshape(n, c, h * w)
        avg = flat.mean(axis=2)
        arg = flat.argmax(axis=2)
        mx = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
        pre_a = avg @ w1.T
        pre_m = mx @ w1.T
        z = np.maximum(pre_a, 0) @ w2.T + np.maximum(pre_m, 0) @ w2.T
        s = T.sigmoid(z)
        y = x * s[:, :, None, None]
        if self.record_scales:
            self.last_scale = s
        self._cache = (x, avg, arg, pre_a, pre_m, s) if train else None
        return y

    def backward(self, grad_out):
        x, avg, arg, pre_a, pre_m, s = self._need_cache()
        n, c, h, w = x.shape
        w1, w2 = self.p["w1"], self.p["w2"]
        gs = (grad_out * x).sum(axis=(2, 3))
        gx = grad_out * s[:, :, None, None]
        dz = gs * s * (1.0 - s)
        h_a = np.maximum(pre_a, 0)
        h_m = np.maximum(pre_m, 0)
        self.g = {"w2": dz.T @ h_a + dz.T @ h_m}
        dh = dz @ w2
        dpre_a = dh * (pre_a > 0)
        dpre_m = dh * (pre_m > 0)
        mx = np.take_along_axis(x.reshape(n, c, h * w), arg[:, :, None], axis=2)[:, :, 0]
        self.g["w1"] = dpre_a.T @ avg + dpre_m.T @ mx
        davg = dpre_a @ w1
        dmx = dpre_m @ w1
        gx += davg[:, :, None, None] / (h * w)
        scat = np.zeros((n, c, h * w), dtype=grad_out.dtype)
        np.put_along_axis(scat, arg[:, :, None], dmx[:, :, None], axis=2)
        gx += scat.reshape(n, c, h, w)
        return gx


class SpatialAttention(Block):
    """CBAM spatial gate: 7x7 conv over the channel-mean and channel-max
    planes, squashed to a per-position factor."""

    def __init__(self, rng, kernel=7, dtype=T.DTYPE):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"spatial attention kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.p["conv.weight"] = _he_uniform(rng, (1, 2, kernel, kernel), 2 * kernel * kernel, dtype)
        self.p["conv.bias"] = np.zeros(1, dtype=dtype)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        mean_c = x.mean(axis=1, keepdims=True)
        arg = x.argmax(axis=1)
        max_c = np.take_along_axis(x, arg[:, None], axis=1)
        f = np.concatenate([mean_c, max_c], axis=1)
        z = T.conv2d(f, self.p["conv.weight"], self.p["conv.bias"], padding=self.kernel // 2)
        m = T.sigmoid(z)
        y = x * m
        self._cache = (x, f, arg, m) if train else None
        return y

    def backward(self, grad_out):
        x, f, arg, m = self._need_cache()
        c = x.shape[1]
        gm = (grad_out * x).sum(axis=1, keepdims=True)
        gx = grad_out * m
        dz = gm * m * (1.0 - m)
        gf, g_w, g_b = T.conv2d_backward(f, self.p["conv.weight"], dz, padding=self.kernel // 2)
        self.g = {"conv.weight": g_w, "conv.bias": g_b}
        gx += gf[:, 0:1] / c
        scat = np.zeros_like(x)
        np.put_along_axis(scat, arg[:, None], gf[:, 1:2], axis=1)
        gx += scat
        return gx


class CBAM(Block):
    """Channel attention then spatial attention, as one refinement block."""

    def __init__(self, channels, reduction, rng, dtype=T.DTYPE):
        super().__init__()
        self.channel = self._child("channel", ChannelAttention(channels, reduction, rng, dtype))
        self.spatial = self._child("spatial", SpatialAttention(rng, dtype=dtype))

    def forward(self, x, train=False):
        return self.spatial.forward(self.channel.forward(x, train), train)

    def backward(self, grad_out):
        return self.channel.backward(self.spatial.backward(grad_out))


class DoubleConvDS(Block):
    """Two (ds_conv -> batch norm -> relu) units.

    The first unit maps c_in to c_mid, the second c_mid to c_out; c_mid
    defaults to c_out.  Decoder stages pass a halved c_mid to keep the
    parameter budget down, mirroring the up-path blocks this design borrows.
    """

    def __init__(self, c_in, c_out, multiplier, rng, c_mid=None, dtype=T.DTYPE):
        super().__init__()
        mid = c_out if c_mid is None else c_mid
        self.dsc1 = self._child("dsc1", DepthwiseSeparableConv(c_in, mid, multiplier, rng, dtype))
        self.bn1 = self._child("bn1", BatchNorm(mid, dtype=dtype))
        self.dsc2 = self._child("dsc2", DepthwiseSeparableConv(mid, c_out, multiplier, rng, dtype))
        self.bn2 = self._child("bn2", BatchNorm(c_out, dtype=dtype))

    def forward(self, x, train=False):
        z1 = self.bn1.forward(self.dsc1.forward(x, train), train)
        a1 = T.relu(z1)
        z2 = self.bn2.forward(self.dsc2.forward(a1, train), train)
        self._cache = (z1, z2) if train else None
        return T.relu(z2)

    def backward(self, grad_out):
        z1, z2 = self._need_cache()
        g = self.dsc2.backward(self.bn2.backward(T.relu_backward(grad_out, z2)))
        return self.dsc1.backward(self.bn1.backward(T.relu_backward(g, z1)))


def loss(pred, target, kind):
    """Dispatch to a loss by name.  Returns (scalar loss, grad wrt pred)."""
    if kind == "bce_logits":
        tv = np.asarray(target)
        if not np.all((tv == 0) | (tv == 1)):
            raise ValidationError("bce_logits requires binary targets")
        return T.bce_with_logits(pred, target)
    if kind == "mse":
        return T.mse(pred, target)
    raise ConfigError(f"unknown loss kind {kind!r}")


def ds_conv_param_count(c_in, c_out, multiplier):
    """Closed-form trainable parameter count of one depthwise-separable conv."""
    return 9 * multiplier * c_in + multiplier * c_in * c_out + c_out
