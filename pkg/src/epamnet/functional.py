"""Differentiable operators used by the X3D backbones and the attention block.

Spatio-temporal ops take either a single sample ``[C, T, H, W]`` or a batch
``[N, C, T, H, W]``; the batch axis is added and removed transparently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, accumulate, as_tensor, make_node, reshape

_AXES = ("T", "H", "W")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigurationError(f"expected 3 values (t, h, w), got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 3D convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigurationError(f"invalid kernel/stride/padding in {self}")

    @classmethod
    def same(cls, in_channels, out_channels, kernel, stride=1, groups=1) -> "ConvSpec":
        """Zero padding ``(k - 1) // 2`` per axis, for odd kernels."""
        kernel = _triple(kernel)
        if any(k % 2 == 0 for k in kernel):
            raise ConfigurationError(f"'same' padding needs odd kernels, got {kernel}")
        return cls(in_channels, out_channels, kernel, _triple(stride),
                   tuple((k - 1) // 2 for k in kernel), groups)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels

    def output_extents(self, extents: Sequence[int]) -> tuple[int, int, int]:
        out = []
        for axis, n, k, s, p in zip(_AXES, extents, self.kernel, self.stride, self.padding):
            size = (n + 2 * p - k) // s + 1
            if n + 2 * p < k or size < 1:
                raise DimensionError(f"axis {axis}: kernel {k} does not fit extent {n} with padding {p}")
            out.append(size)
        return tuple(out)

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, int, int, int]:
        c, *ext = in_shape
        if c != self.in_channels:
            raise DimensionError(f"axis C: expected {self.in_channels} input channels, got {c}")
        return (self.out_channels, *self.output_extents(ext))

    def macs(self, in_shape: Sequence[int]) -> int:
        _, t, h, w = self.output_shape(in_shape)
        k = int(np.prod(self.kernel))
        return self.out_channels * (self.in_channels // self.groups) * k * t * h * w

    def params(self, bias: bool) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if bias else 0)


def _batched(x: Tensor, ndim: int = 5) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return reshape(x, (1, *x.shape)), True
    if x.ndim != ndim:
        raise DimensionError(f"expected a {ndim - 1}-d sample or {ndim}-d batch, got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _windows(kernel, stride, out_ext):
    """Yield (offset, slices) for every kernel tap over a padded input."""
    (kt, kh, kw), (st, sh, sw), (to, ho, wo) = kernel, stride, out_ext
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                yield (i, j, k), (slice(None), slice(None),
                                  slice(i, i + st * (to - 1) + 1, st),
                                  slice(j, j + sh * (ho - 1) + 1, sh),
                                  slice(k, k + sw * (wo - 1) + 1, sw))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """Zero-padded 3D cross-correlation, grouped.

    ``weight`` is ``[C_out, C_in / groups, k_t, k_h, k_w]``. Channel-wise
    convolutions (``groups == C_in == C_out``) take a multiply-add path that
    never mixes channels.
    """
    x, squeeze = _batched(as_tensor(x))
    stride, padding = _triple(stride), _triple(padding)
    n, c, *ext = x.shape
    if weight.ndim != 5:
        raise DimensionError(f"weight must be 5-d [C_out, C_in/groups, kt, kh, kw], got {weight.shape}")
    if groups < 1 or c % groups:
        raise ConfigurationError(f"groups={groups} does not divide input channels {c}")
    if weight.shape[1] != c // groups:
        raise DimensionError(f"axis C: weight expects {weight.shape[1] * groups} input channels, got {c}")
    spec = ConvSpec(c, weight.shape[0], weight.shape[2:], stride, padding, groups)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias must have shape ({spec.out_channels},), got {bias.shape}")
    out_ext = spec.output_extents(ext)
    pt, ph, pw = padding
    xp = x.data
    if pt or ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    w = weight.data
    o = spec.out_channels
    og, cg = o // groups, c // groups
    dw = groups == c and o == c
    L = int(np.prod(out_ext))

    if dw:
        out = np.zeros((n, o, *out_ext), dtype=np.result_type(xp, w))
        for (i, j, k), sl in _windows(spec.kernel, stride, out_ext):
            out += xp[sl] * w[:, 0, i, j, k][None, :, None, None, None]
    else:
        acc = np.zeros((n, groups, og, L), dtype=np.result_type(xp, w))
        for (i, j, k), sl in _windows(spec.kernel, stride, out_ext):
            patch = xp[sl].reshape(n, groups, cg, L)
            acc += np.matmul(w[:, :, i, j, k].reshape(groups, og, cg), patch)
        out = acc.reshape(n, o, *out_ext)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def bw(g):
        need_x = x.requires_grad
        gxp = np.zeros_like(xp) if need_x else None
        if weight.requires_grad or need_x:
            gw = np.zeros_like(w)
            if dw:
                for (i, j, k), sl in _windows(spec.kernel, stride, out_ext):
                    gw[:, 0, i, j, k] = np.einsum("ncthw,ncthw->c", g, xp[sl])
                    if need_x:
                        gxp[sl] += g * w[:, 0, i, j, k][None, :, None, None, None]
            else:
                gg = g.reshape(n, groups, og, L)
                g_cols = gg.transpose(1, 2, 0, 3).reshape(groups, og, n * L)
                for (i, j, k), sl in _windows(spec.kernel, stride, out_ext):
                    patch = xp[sl].reshape(n, groups, cg, L)
                    if weight.requires_grad:
                        p_cols = patch.transpose(1, 0, 3, 2).reshape(groups, n * L, cg)
                        gw[:, :, i, j, k] = np.matmul(g_cols, p_cols).reshape(o, cg)
                    if need_x:
                        wt = w[:, :, i, j, k].reshape(groups, og, cg).transpose(0, 2, 1)
                        gxp[sl] += np.matmul(wt, gg).reshape(n, c, *out_ext)
            accumulate(weight, gw)
        if need_x:
            t, h, wd = ext
            accumulate(x, gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd])
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 2, 3, 4)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatched(make_node(out, parents, bw, "conv3d"), squeeze)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = W x + b`` over the last axis; ``weight`` is ``[D_out, D_in]``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input feature axis {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match D_out={weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        if x.requires_grad:
            accumulate(x, g @ weight.data)
        if weight.requires_grad:
            accumulate(weight, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None:
            accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "linear")


# -- activations --------------------------------------------------------------

def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        accumulate(x, g * mask)

    return make_node(x.data * mask, (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def bw(g):
        accumulate(x, g * s * (1 - s))

    return make_node(s, (x,), bw, "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def bw(g):
        accumulate(x, g * (s + x.data * s * (1 - s)))

    return make_node(x.data * s, (x,), bw, "swish")


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        accumulate(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return make_node(p, (x,), bw, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return make_node(out, (x,), bw, "log_softmax")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "swish": swish, "softmax": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(as_tensor(x))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"got {labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    logp = log_softmax(logits)
    picked = np.zeros((n, k), dtype=logp.dtype)
    picked[np.arange(n), labels] = -1.0 / n
    return (logp * Tensor(picked, op="const")).sum()


# -- pooling -------------------------------------------------------------------

def pool(x: Tensor, kind: str = "avg", axes: str = "spatiotemporal", window=None) -> Tensor:
    """Average or max pooling over the spatial (H, W) or all three (T, H, W) axes.

    ``window=None`` pools each named axis down to extent 1. Otherwise the
    non-overlapping window must divide each named extent. Max pooling sends
    the gradient to the lowest flat index among ties.
    """
    if kind not in ("avg", "max"):
        raise ConfigurationError(f"unknown pool kind {kind!r}")
    if axes not in ("spatial", "spatiotemporal"):
        raise ConfigurationError(f"unknown pool axes {axes!r}")
    x, squeeze = _batched(as_tensor(x))
    n, c, t, h, w = x.shape
    named = (2, 3, 4) if axes == "spatiotemporal" else (3, 4)
    if window is None:
        win = [x.shape[a] for a in named]
    else:
        win = [int(v) for v in (window if not isinstance(window, int) else [window] * len(named))]
        if len(win) != len(named):
            raise DimensionError(f"window {window} does not match {len(named)} pooled axes")
    full_win = [1, 1, 1]
    for a, k in zip(named, win):
        ext = x.shape[a]
        if k > ext:
            raise DimensionError(f"axis {_AXES[a - 2]}: window {k} larger than extent {ext}")
        if ext % k:
            raise DimensionError(f"axis {_AXES[a - 2]}: window {k} does not divide extent {ext}")
        full_win[a - 2] = k
    wt, wh, ww = full_win
    ot, oh, ow = t // wt, h // wh, w // ww
    blocks = x.data.reshape(n, c, ot, wt, oh, wh, ow, ww).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, ot, oh, ow, wt * wh * ww)
    if kind == "avg":
        out = blocks.mean(axis=-1)
    else:
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if kind == "avg":
            gb = np.broadcast_to(g[..., None] / blocks.shape[-1], blocks.shape)
        else:
            gb = np.zeros(blocks.shape, dtype=g.dtype)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ot, oh, ow, wt, wh, ww).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        accumulate(x, gb.reshape(x.shape))

    return _unbatched(make_node(np.ascontiguousarray(out), (x,), bw, f"{kind}pool"), squeeze)


# -- normalisation -------------------------------------------------------------

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalisation over every axis except the channel axis.

    The channel axis is 0 for an unbatched ``[C, ...]`` sample and 1 otherwise
    (any input with 5 axes is taken to be batched). In training mode the
    running statistics arrays are updated in place.
    """
    x = as_tensor(x)
    cax = 1 if x.ndim == 5 or x.ndim == 2 else 0
    c = x.shape[cax]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batchnorm: parameters sized {scale.shape[0]} for {c} channels")
    red = tuple(a for a in range(x.ndim) if a != cax)
    bshape = [1] * x.ndim
    bshape[cax] = c
    gamma = scale.data.reshape(bshape)
    beta = shift.data.reshape(bshape)
    if training:
        m = x.size // c
        mean = x.data.mean(axis=red, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=red, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        unbiased = var.reshape(c) * (m / (m - 1) if m > 1 else 1.0)
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std
    out = gamma * xhat + beta

    def bw(g):
        if scale.requires_grad:
            accumulate(scale, (g * xhat).sum(axis=red))
        if shift.requires_grad:
            accumulate(shift, g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gamma
            if training:
                dx = inv_std / m * (m * dxhat - dxhat.sum(axis=red, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=red, keepdims=True))
            else:
                dx = dxhat * inv_std
            accumulate(x, dx)

    return make_node(out, (x, scale, shift), bw, "batchnorm")
