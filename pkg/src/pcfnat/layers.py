"""Layers: grouped 1-D convolution, normalization, attention, drop path and
the pre-norm NA/GA transformer block.

Activations are ``[batch, channels, time]`` throughout.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError
from .na_kernel import (PADDED, NaConfig, TileShape, na_backward, na_backward_blocked,
                        na_backward_naive, na_forward, na_forward_blocked, na_forward_naive)
from .tensor import Tensor

NA = "NA"
GA = "GA"


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape).astype(tn.default_dtype())


# ------------------------------------------------------------------ grouped conv

def group_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, groups=1) -> Tensor:
    """Grouped 1-D convolution without padding.

    ``x`` is ``[B, Cin, T]``, ``weight`` is ``[Cout, Cin/groups, kernel]``;
    output is ``[B, Cout, (T - kernel) // stride + 1]``.
    """
    B, cin, T = x.shape
    cout, cpg, ksize = weight.shape
    if cin != cpg * groups or cout % groups:
        raise ConfigError(
            f"group conv: input {cin} / output {cout} channels incompatible with {groups} groups "
            f"and weight {weight.shape}")
    if T < ksize:
        raise ContractError(f"group conv: {T} frames shorter than kernel {ksize}")
    t_out = (T - ksize) // stride + 1
    opg = cout // groups
    last = stride * (t_out - 1) + 1

    xd = x.data
    if ksize == 1 and stride == 1:
        cols = xd.reshape(B, groups, cpg, T)
    else:
        # [B, Cin, k, T'] ordered (channel, tap) like the weight
        taps = np.stack([xd[:, :, j:j + last:stride] for j in range(ksize)], axis=2)
        cols = taps.reshape(B, groups, cpg * ksize, t_out)
    w = weight.data.reshape(groups, opg, cpg * ksize)
    out = (w @ cols).reshape(B, cout, t_out)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gg = g.reshape(B, groups, opg, t_out)
        gw = (gg @ np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.swapaxes(w, -1, -2) @ gg            # [B, g, cpg*k, T']
            if ksize == 1 and stride == 1:
                gx = gcols.reshape(B, cin, T)
            else:
                gcols = gcols.reshape(B, cin, ksize, t_out)
                gx = np.zeros_like(xd)
                for j in range(ksize):
                    gx[:, :, j:j + last:stride] += gcols[:, :, j]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return tn.apply(out, parents, backward)


class GroupConv1d(Module):
    def __init__(self, in_channels, out_channels, kernel=1, stride=1, groups=1, bias=True,
                 rng=None, zero_init=False):
        if in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.groups = kernel, stride, groups
        fan_in = in_channels // groups * kernel
        bound = 1.0 / math.sqrt(fan_in)
        shape = (out_channels, in_channels // groups, kernel)
        init = np.zeros(shape, tn.default_dtype()) if zero_init else _uniform(rng, shape, bound)
        self.weight = tn.parameter(init)
        self.bias = None
        if bias:
            b = np.zeros(out_channels, tn.default_dtype()) if zero_init else _uniform(rng, out_channels, bound)
            self.bias = tn.parameter(b)

    def forward(self, x):
        return group_conv1d(x, self.weight, self.bias, self.stride, self.groups)

    @staticmethod
    def count(in_channels, out_channels, kernel=1, groups=1, bias=True) -> int:
        return out_channels * (in_channels // groups) * kernel + (out_channels if bias else 0)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = tn.parameter(_uniform(rng, (out_features, in_features), bound))
        self.bias = tn.parameter(_uniform(rng, out_features, bound))

    def forward(self, x):
        return tn.matmul(x, tn.transpose(self.weight)) + self.bias


# ------------------------------------------------------------------ normalization

class BatchNorm1d(Module):
    """Batch normalization over ``[B, C]`` or ``[B, C, T]`` inputs."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        dt = tn.default_dtype()
        self.gamma = tn.parameter(np.ones(channels, dt))
        self.beta = tn.parameter(np.zeros(channels, dt))
        self.running_mean = Tensor(np.zeros(channels, dt))
        self.running_var = Tensor(np.ones(channels, dt))

    def forward(self, x):
        if x.ndim not in (2, 3) or x.shape[1] != self.channels:
            raise ContractError(f"batch norm over {self.channels} channels got shape {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2)
        tail = (1,) if x.ndim == 3 else ()
        if self.training:
            mu = tn.mean(x, axes, keepdims=True)
            var = tn.variance_along(x, axes, keepdims=True)
            xhat = (x - mu) / tn.sqrt(var + self.eps)
            n = x.size // self.channels
            m = self.momentum
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_mean.data[:] = (1 - m) * self.running_mean.data + m * mu.data.reshape(-1)
            self.running_var.data[:] = (1 - m) * self.running_var.data + m * unbiased
        else:
            rm = self.running_mean.data.reshape((-1,) + tail)
            rv = self.running_var.data.reshape((-1,) + tail)
            xhat = (x - Tensor(rm)) / Tensor(np.sqrt(rv + self.eps))
        return xhat * tn.reshape(self.gamma, (-1,) + tail) + tn.reshape(self.beta, (-1,) + tail)


class ChannelLayerNorm(Module):
    """Layer normalization over the channel axis of ``[B, C, T]``."""

    def __init__(self, channels, eps=1e-5):
        self.channels, self.eps = channels, eps
        dt = tn.default_dtype()
        self.gamma = tn.parameter(np.ones(channels, dt))
        self.beta = tn.parameter(np.zeros(channels, dt))

    def forward(self, x):
        mu = tn.mean(x, 1, keepdims=True)
        var = tn.variance_along(x, 1, keepdims=True)
        xhat = (x - mu) / tn.sqrt(var + self.eps)
        return xhat * tn.reshape(self.gamma, (-1, 1)) + tn.reshape(self.beta, (-1, 1))


def make_norm(kind: str, channels: int) -> Module:
    if kind == "batch":
        return BatchNorm1d(channels)
    if kind == "layer":
        return ChannelLayerNorm(channels)
    raise ConfigError(f"unknown norm {kind!r}")


# ------------------------------------------------------------------ attention

def neighborhood_attention(q: Tensor, k: Tensor, v: Tensor, cfg: NaConfig,
                           tile: TileShape | None = None, impl: str = "auto") -> Tensor:
    """Differentiable NA over ``[B, H, T, d]``.

    ``impl="auto"`` runs the blocked kernel in padded mode and the naive one
    otherwise; ``"naive"`` / ``"blocked"`` force a path.
    """
    if impl == "auto":
        fwd, bwd = na_forward, na_backward
    elif impl == "naive":
        fwd, bwd = (lambda *a: na_forward_naive(*a[:4])), (lambda *a: na_backward_naive(*a[:6]))
    elif impl == "blocked":
        tile = tile or TileShape()
        fwd, bwd = na_forward_blocked, na_backward_blocked
    else:
        raise ConfigError(f"unknown NA implementation {impl!r}")
    out, attn = fwd(q.data, k.data, v.data, cfg, tile)

    def backward(g):
        return bwd(np.ascontiguousarray(g), q.data, k.data, v.data, attn, cfg, tile)

    return tn.apply(out, (q, k, v), backward)


def global_attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None) -> Tensor:
    """Unmasked scaled dot-product attention over ``[..., T, d]``."""
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = tn.scale(tn.matmul(q, tn.swapaxes(k, -1, -2)), scale)
    return tn.matmul(tn.softmax(scores, -1), v)


class Attention(Module):
    """qkv projection -> NA or GA -> output projection.

    Projections are grouped kernel-1 convolutions.  Each group emits its own
    q, k and v slices, so q/k/v channel group ``i`` only sees input group ``i``.
    """

    def __init__(self, channels, heads, kind=NA, groups=1, window=27, padding_mode=PADDED,
                 tile: TileShape | None = None, rng=None, zero_init_out=False):
        if kind not in (NA, GA):
            raise ConfigError(f"attention kind must be NA or GA, got {kind!r}")
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        rng = rng or np.random.default_rng(0)
        self.channels, self.heads, self.kind, self.groups = channels, heads, kind, groups
        self.na_cfg = NaConfig(window=window, heads=heads, channels=channels,
                               padding_mode=padding_mode) if kind == NA else None
        self.tile = tile
        self.qkv = GroupConv1d(channels, 3 * channels, 1, groups=groups, rng=rng)
        self.proj = GroupConv1d(channels, channels, 1, groups=groups, rng=rng, zero_init=zero_init_out)

    def split_heads(self, x):
        """``[B, 3C, T]`` (group-major q/k/v) -> three ``[B, H, T, d]`` tensors."""
        B, _, T = x.shape
        g, C, H = self.groups, self.channels, self.heads
        x = tn.reshape(x, (B, g, 3, C // g, T))
        parts = []
        for i in range(3):
            p = tn.reshape(x[:, :, i], (B, H, C // H, T))
            parts.append(tn.swapaxes(p, 2, 3))
        return parts

    def forward(self, x):
        B, C, T = x.shape
        q, k, v = self.split_heads(self.qkv(x))
        if self.kind == NA:
            o = neighborhood_attention(q, k, v, self.na_cfg, self.tile)
        else:
            o = global_attention(q, k, v)
        o = tn.reshape(tn.swapaxes(o, 2, 3), (B, C, T))
        return self.proj(o)


def ga_forward(x: Tensor, layer: Attention) -> Tensor:
    if layer.kind != GA:
        raise ConfigError("ga_forward needs a GA attention layer")
    return layer(x)


# ------------------------------------------------------------------ blocks

def drop_path(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero the whole residual branch per sample with probability ``p``,
    rescaling survivors by ``1/(1-p)``.  Identity in eval mode."""
    if not 0 <= p < 1:
        raise ConfigError(f"drop path probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape[0]) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * Tensor(keep.reshape((-1,) + (1,) * (x.ndim - 1)))


class FeedForward(Module):
    def __init__(self, channels, hidden, groups=1, rng=None, zero_init_out=False):
        self.fc1 = GroupConv1d(channels, hidden, 1, groups=groups, rng=rng)
        self.fc2 = GroupConv1d(hidden, channels, 1, groups=groups, rng=rng, zero_init=zero_init_out)

    def forward(self, x):
        return self.fc2(tn.gelu(self.fc1(x)))


class BlockLayer(Module):
    """Pre-norm attention layer::

        y = x + DropPath(Attn(Norm(x)))
        z = y + DropPath(FFN(Norm(y)))
    """

    def __init__(self, channels, kind=NA, heads=16, groups=1, window=27, padding_mode=PADDED,
                 ffn_hidden=None, drop_prob=0.0, norm="batch", tile=None, rng=None,
                 zero_init_out=False):
        if not 0 <= drop_prob < 1:
            raise ConfigError(f"drop path probability must be in [0, 1), got {drop_prob}")
        rng = rng or np.random.default_rng(0)
        self.kind, self.drop_prob = kind, drop_prob
        self.norm1 = make_norm(norm, channels)
        self.attn = Attention(channels, heads, kind, groups, window, padding_mode, tile, rng,
                              zero_init_out=zero_init_out)
        self.norm2 = make_norm(norm, channels)
        self.ffn = FeedForward(channels, ffn_hidden or 4 * channels, groups, rng,
                               zero_init_out=zero_init_out)
        self.rng = rng

    def forward(self, x):
        y = x + drop_path(self.attn(self.norm1(x)), self.drop_prob, self.training, self.rng)
        return y + drop_path(self.ffn(self.norm2(y)), self.drop_prob, self.training, self.rng)


def block_layer_forward(x: Tensor, layer: BlockLayer) -> Tensor:
    return layer(x)


class Downsample(Module):
    """Kernel-2, stride-2 grouped convolution followed by a norm: halves T."""

    def __init__(self, in_channels, out_channels, groups=1, norm="batch", rng=None):
        self.conv = GroupConv1d(in_channels, out_channels, kernel=2, stride=2, groups=groups, rng=rng)
        self.norm = make_norm(norm, out_channels)

    def forward(self, x):
        if x.shape[-1] < 2:
            raise ContractError(f"downsampling needs at least 2 frames, got {x.shape[-1]}")
        return self.norm(self.conv(x))


def downsample(x: Tensor, stem: Downsample) -> Tensor:
    return stem(x)
