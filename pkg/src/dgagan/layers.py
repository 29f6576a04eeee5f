"""Parameterized layers composing the generators and discriminators.

Parameters live directly on module attributes as ``requires_grad`` leaf
tensors; ``Module.params()`` walks the attribute tree so optimizers and
checkpoints see one flat name -> tensor mapping.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class providing parameter discovery over nested modules."""

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.params(prefix=f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.params(prefix=f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params().values():
            p.requires_grad = flag

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kernel_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    """Fan-in-scaled zero-mean normal draw, flagged as a trainable leaf."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv3dLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride=1, dilation=1,
                 padding=0, rng: np.random.Generator | None = None, bias: bool = True,
                 dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = kernel
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = in_ch * k ** 3
        self.weight = kernel_init(rng, (out_ch, in_ch, k, k, k), fan_in, dtype)
        self.bias = (Tensor(np.zeros((out_ch, 1, 1, 1), dtype=dtype), requires_grad=True)
                     if bias else None)

    def forward(self, x: Tensor) -> Tensor:
        out = ad.conv3d(x, self.weight, stride=self.stride, dilation=self.dilation,
                        padding=self.padding)
        if self.bias is not None:
            out = out + self.bias
        return out


class InstanceNorm3d(Module):
    """Per-channel, per-sample standardization with learnable scale/shift."""

    EPS = 1e-5

    def __init__(self, channels: int, dtype=np.float64):
        self.scale = Tensor(np.ones((channels, 1, 1, 1), dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros((channels, 1, 1, 1), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValueError("instance norm expects a rank-4 tensor")
        mu = ad.tmean(x, axis=(1, 2, 3), keepdims=True)
        centered = x - mu
        var = ad.tmean(centered * centered, axis=(1, 2, 3), keepdims=True)
        xhat = centered / ad.sqrt(var + self.EPS)
        return self.scale * xhat + self.shift


def norm_forward(x: Tensor, norm: InstanceNorm3d) -> Tensor:
    return norm(x)


class SelfAttention3d(Module):
    """SAGAN-style spatial self-attention with a zero-initialized residual gate.

    Keys and values may be spatially max-pooled by ``kv_pool`` to bound the
    position-by-position energy matrix on large feature maps; queries keep
    full resolution, so the output shape always equals the input shape.
    """

    def __init__(self, channels: int, reduction: int = 8, kv_pool: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        rng = rng if rng is not None else np.random.default_rng(0)
        inner = channels // reduction
        self.channels = channels
        self.inner = inner
        self.kv_pool = kv_pool
        self.query = Conv3dLayer(channels, inner, kernel=1, rng=rng, bias=False, dtype=dtype)
        self.key = Conv3dLayer(channels, inner, kernel=1, rng=rng, bias=False, dtype=dtype)
        self.value = Conv3dLayer(channels, channels, kernel=1, rng=rng, bias=False, dtype=dtype)
        self.gamma = Tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        c, D, H, W = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        n = D * H * W
        q = ad.reshape(self.query(x), (self.inner, n))
        k = self.key(x)
        v = self.value(x)
        if self.kv_pool > 1:
            k = ad.max_pool3d(k, self.kv_pool)
            v = ad.max_pool3d(v, self.kv_pool)
        m = k.shape[1] * k.shape[2] * k.shape[3]
        k = ad.reshape(k, (self.inner, m))
        v = ad.reshape(v, (self.channels, m))
        energy = ad.transpose(q, (1, 0)) @ k              # [n, m]
        attn = ad.softmax(energy, axis=1)
        agg = v @ ad.transpose(attn, (1, 0))              # [C, n]
        return self.gamma * ad.reshape(agg, (c, D, H, W)) + x


def self_attention_forward(x: Tensor, layer: SelfAttention3d) -> Tensor:
    return layer(x)


def upsample_trilinear(x: Tensor, target) -> Tensor:
    return ad.upsample_trilinear(x, target)


def downsample(x: Tensor, kind: str = "max_pool", conv: Conv3dLayer | None = None) -> Tensor:
    """Factor-2 spatial reduction via pooling or a stride-2 convolution."""
    if kind == "max_pool":
        return ad.max_pool3d(x, 2)
    if kind == "strided_conv":
        if conv is None:
            raise ValueError("strided_conv downsampling needs a Conv3dLayer")
        return conv(x)
    raise ValueError(f"unknown downsample kind {kind!r}")


class ConvBlock(Module):
    """conv3 -> optional instance norm -> relu/leaky-relu."""

    def __init__(self, in_ch: int, out_ch: int, rng, stride=1, dilation=1,
                 norm: bool = True, act: str = "leaky_relu", dtype=np.float64):
        pad = dilation if np.isscalar(dilation) else tuple(dilation)
        self.conv = Conv3dLayer(in_ch, out_ch, kernel=3, stride=stride, dilation=dilation,
                                padding=pad, rng=rng, dtype=dtype)
        self.norm = InstanceNorm3d(out_ch, dtype=dtype) if norm else None
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv(x)
        if self.norm is not None:
            out = self.norm(out)
        if self.act == "relu":
            return ad.relu(out)
        if self.act == "leaky_relu":
            return ad.leaky_relu(out, 0.2)
        if self.act == "none":
            return out
        raise ValueError(f"unknown activation {self.act!r}")
