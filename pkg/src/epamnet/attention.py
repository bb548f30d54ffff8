"""Pose-driven spatial-temporal attention over the RGB feature map.

Two interchangeable blocks produce the same :class:`AttentionMaps` contract:

* :class:`NestingAttention` - conv(1x3x3, C->1), relu, conv(1x7x7), sigmoid for
  the spatial map; per-frame spatial mean, fc, relu, fc, sigmoid for the
  temporal weights.
* :class:`PooledAttention` - channel mean/max maps, conv(1x7x7, 2->1), sigmoid;
  per-frame spatial mean, 1D conv over time, sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .functional import ConvSpec
from .nn import Conv3d, Linear, Module
from .tensor import Tensor, as_tensor, concat, reshape, take

# sigmoid(3) ~ 0.95: the modulation starts close to the identity
_OPEN_GATE_BIAS = 3.0


@dataclass
class AttentionMaps:
    spatial: Tensor      # [N, 1, T, S, S]
    descriptor: Tensor   # [N, T], per-frame spatial mean of ``spatial``
    temporal: Tensor     # [N, T]
    joint: Tensor | None = None  # spatial * temporal, filled in by modulate


def time_strided_sample(features: Tensor, frames: int) -> Tensor:
    """Keep every (T_in / frames)-th time slice, starting with the first."""
    features = as_tensor(features)
    t_axis = features.ndim - 3
    t_in = features.shape[t_axis]
    if frames < 1 or t_in % frames:
        raise ConfigurationError(f"{t_in} pose frames cannot be strided down to {frames}")
    if t_in == frames:
        return features
    return take(features, range(0, t_in, t_in // frames), axis=t_axis)


def _frame_means(spatial: Tensor) -> Tensor:
    """[N, 1, T, S, S] -> [N, T] (or [1, T, S, S] -> [T])."""
    z = spatial.mean(axis=(-2, -1))
    return reshape(z, z.shape[:-2] + (z.shape[-1],))


class NestingAttention(Module):
    variant = "nesting"

    def __init__(self, in_channels: int, frames: int, hidden: int | None = None, rng=0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.frames = frames
        self.hidden = max(frames // 4, 1) if hidden is None else hidden
        self.squeeze = Conv3d(ConvSpec(in_channels, 1, (1, 3, 3), 1, (0, 1, 1)), rng, bias=True)
        self.spread = Conv3d(ConvSpec(1, 1, (1, 7, 7), 1, (0, 3, 3)), rng, bias=True)
        self.fc1 = Linear(frames, self.hidden, rng)
        self.fc2 = Linear(self.hidden, frames, rng)
        for last in (self.spread, self.fc2):
            last.weight.data[...] = 0.0
            last.bias.data[...] = _OPEN_GATE_BIAS

    def spatial(self, f: Tensor) -> Tensor:
        return F.sigmoid(self.spread(F.relu(self.squeeze(f))))

    def temporal(self, spatial: Tensor) -> tuple[Tensor, Tensor]:
        z = _frame_means(spatial)
        if z.shape[-1] != self.frames:
            raise DimensionError(f"temporal attention built for {self.frames} frames, got {z.shape[-1]}")
        return z, F.sigmoid(self.fc2(F.relu(self.fc1(z))))

    def forward(self, f: Tensor) -> AttentionMaps:
        s = self.spatial(f)
        z, t = self.temporal(s)
        return AttentionMaps(s, z, t)

    def trace(self, shape, rows, prefix="attention"):
        h = self.squeeze.trace(shape, rows, prefix + ".squeeze")
        self.spread.trace(h, rows, prefix + ".spread")
        h = self.fc1.trace((self.frames,), rows, prefix + ".fc1")
        self.fc2.trace(h, rows, prefix + ".fc2")
        return (1, *shape[1:])


class PooledAttention(Module):
    variant = "alternative"

    def __init__(self, frames: int, kernel: int = 3, rng=0):
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigurationError(f"temporal kernel must be odd, got {kernel}")
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.frames = frames
        self.kernel = kernel
        self.spread = Conv3d(ConvSpec(2, 1, (1, 7, 7), 1, (0, 3, 3)), rng, bias=True)
        self.temporal_conv = Conv3d(ConvSpec.same(1, 1, (kernel, 1, 1)), rng, bias=True)
        for last in (self.spread, self.temporal_conv):
            last.weight.data[...] = 0.0
            last.bias.data[...] = _OPEN_GATE_BIAS

    @staticmethod
    def channel_pools(f: Tensor) -> tuple[Tensor, Tensor]:
        c_axis = f.ndim - 4
        return f.mean(axis=c_axis, keepdims=True), f.max(axis=c_axis, keepdims=True)

    def spatial(self, f: Tensor) -> Tensor:
        avg, mx = self.channel_pools(f)
        return F.sigmoid(self.spread(concat([avg, mx], axis=f.ndim - 4)))

    def temporal(self, spatial: Tensor) -> tuple[Tensor, Tensor]:
        z = _frame_means(spatial)
        if z.shape[-1] != self.frames:
            raise DimensionError(f"temporal attention built for {self.frames} frames, got {z.shape[-1]}")
        signal = reshape(z, z.shape[:-1] + (1, z.shape[-1], 1, 1))
        out = F.sigmoid(self.temporal_conv(signal))
        return z, reshape(out, z.shape)

    def forward(self, f: Tensor) -> AttentionMaps:
        s = self.spatial(f)
        z, t = self.temporal(s)
        return AttentionMaps(s, z, t)

    def trace(self, shape, rows, prefix="attention"):
        self.spread.trace((2, *shape[1:]), rows, prefix + ".spread")
        self.temporal_conv.trace((1, self.frames, 1, 1), rows, prefix + ".temporal_conv")
        return (1, *shape[1:])


def build_attention(variant: str, in_channels: int, frames: int, hidden: int | None = None,
                    kernel: int = 3, rng=0) -> Module:
    if variant == "nesting":
        return NestingAttention(in_channels, frames, hidden, rng)
    if variant == "alternative":
        return PooledAttention(frames, kernel, rng)
    raise ConfigurationError(f"unknown attention variant {variant!r}")


def _expect(block, cls, name):
    if not isinstance(block, cls):
        raise ConfigurationError(f"{name} needs a {cls.variant} attention block, got {type(block).__name__}")


def spatial_attention(f: Tensor, block: NestingAttention) -> Tensor:
    _expect(block, NestingAttention, "spatial_attention")
    return block.spatial(as_tensor(f))


def temporal_attention(spatial: Tensor, block: NestingAttention) -> tuple[Tensor, Tensor]:
    _expect(block, NestingAttention, "temporal_attention")
    return block.temporal(as_tensor(spatial))


def alt_spatial_attention(f: Tensor, block: PooledAttention) -> Tensor:
    _expect(block, PooledAttention, "alt_spatial_attention")
    return block.spatial(as_tensor(f))


def alt_temporal_attention(spatial: Tensor, block: PooledAttention) -> Tensor:
    _expect(block, PooledAttention, "alt_temporal_attention")
    return block.temporal(as_tensor(spatial))[1]


def modulate(f_r: Tensor, spatial: Tensor, temporal: Tensor) -> tuple[Tensor, Tensor]:
    """Scale the RGB feature by ``spatial * temporal``, broadcast over channels.

    Returns ``(modulated feature, joint map)``.
    """
    f_r, spatial, temporal = as_tensor(f_r), as_tensor(spatial), as_tensor(temporal)
    if spatial.shape[-3:] != f_r.shape[-3:] or spatial.shape[-4] != 1:
        raise DimensionError(f"junction rgb/attention: feature {f_r.shape} vs spatial map {spatial.shape}")
    if temporal.shape[-1] != spatial.shape[-3]:
        raise DimensionError(f"junction rgb/attention: {temporal.shape[-1]} temporal weights "
                             f"for {spatial.shape[-3]} frames")
    t = reshape(temporal, temporal.shape[:-1] + (1, temporal.shape[-1], 1, 1))
    joint = spatial * t
    return f_r * joint, joint
