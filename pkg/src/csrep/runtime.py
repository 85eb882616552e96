"""Forward-inference kernels on ``[batch, channels, frames]`` arrays.

Activations are plain numpy arrays of rank 3. Every op is a pure function:
inputs are never modified and outputs are freshly allocated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

STATS_VAR_FLOOR = 1e-10
DEFAULT_LEAKY_SLOPE = 0.01
ACTIVATIONS = ("relu", "leaky_relu")


class ShapeError(ValueError):
    """Raised when an operand does not have the shape an op requires."""


def _as_tensor3(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a [batch, channels, frames] array, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"empty dimension in tensor of shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class TdnnLayer:
    """A 1-D convolution over frames with symmetric same-padding.

    ``weight`` has shape ``[out, in // groups, context]``. The input is padded
    by ``(context - 1) // 2 * dilation`` frames on each side. Padded frames are
    zero unless ``pad_value`` gives a per-input-channel constant; layers that
    absorbed a preceding batch norm carry one so that boundary frames stay
    exact.
    """

    weight: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    groups: int = 1
    pad_value: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 3:
            raise ShapeError(f"TDNN weight must be [out, in/groups, context], got {w.shape}")
        out_ch, _, context = w.shape
        if context % 2 != 1:
            raise ValueError(f"context must be odd, got {context}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.groups < 1 or out_ch % self.groups:
            raise ValueError(f"{out_ch} output channels not divisible by groups={self.groups}")
        b = np.asarray(self.bias, dtype=w.dtype)
        if b.shape != (out_ch,):
            raise ShapeError(f"bias shape {b.shape} does not match {out_ch} output channels")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if self.pad_value is not None:
            p = np.asarray(self.pad_value, dtype=w.dtype)
            if p.shape != (self.in_channels,):
                raise ShapeError(f"pad_value shape {p.shape} does not match {self.in_channels} input channels")
            object.__setattr__(self, "pad_value", p)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def context(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.context - 1) // 2 * self.dilation

    @cached_property
    def _taps(self) -> np.ndarray:
        # [context, groups, out/groups, in/groups], contiguous per tap for matmul
        g = self.groups
        o, i, c = self.weight.shape
        return np.ascontiguousarray(self.weight.reshape(g, o // g, i, c).transpose(3, 0, 1, 2))


@dataclass(frozen=True, eq=False)
class BatchNormParams:
    """Inference-mode batch norm. ``std`` already includes ``eps``."""

    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.mean, self.std, self.scale, self.shift)]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1 or arrays[0].ndim != 1:
            raise ShapeError(f"batch norm vectors must be 1-D and equal length, got {sorted(shapes)}")
        if not np.all(arrays[1] > 0):
            raise ValueError("batch norm std must be strictly positive")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        for name, a in zip(("mean", "std", "scale", "shift"), arrays):
            object.__setattr__(self, name, a)

    @classmethod
    def from_running_var(cls, mean, var, scale, shift, eps=1e-5):
        return cls(mean, np.sqrt(np.asarray(var) + eps), scale, shift, eps)

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def factor(self) -> np.ndarray:
        return self.scale / self.std


@dataclass(frozen=True, eq=False)
class SeParams:
    w_reduce: np.ndarray
    b_reduce: np.ndarray
    w_expand: np.ndarray
    b_expand: np.ndarray

    def __post_init__(self):
        for name in ("w_reduce", "b_reduce", "w_expand", "b_expand"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        nb, n = np.shape(self.w_reduce)
        if nb < 1:
            raise ShapeError("SE bottleneck must be at least 1")
        if (np.shape(self.b_reduce) != (nb,) or np.shape(self.w_expand) != (n, nb)
                or np.shape(self.b_expand) != (n,)):
            raise ShapeError("inconsistent SE parameter shapes")

    @property
    def channels(self) -> int:
        return self.w_reduce.shape[1]

    @property
    def bottleneck(self) -> int:
        return self.w_reduce.shape[0]


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    slope: float = field(default=DEFAULT_LEAKY_SLOPE)

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if not 0.0 <= self.slope < 1.0:
            raise ValueError(f"slope must be in [0, 1), got {self.slope}")


@dataclass(frozen=True, eq=False)
class Linear:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 2 or np.shape(self.bias) != (w.shape[0],):
            raise ShapeError(f"inconsistent FC shapes {w.shape} / {np.shape(self.bias)}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", np.asarray(self.bias))

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def _padded(x: np.ndarray, layer: TdnnLayer) -> np.ndarray:
    p = layer.padding
    if p == 0:
        return x
    b, n, t = x.shape
    xp = np.empty((b, n, t + 2 * p), dtype=np.result_type(x, layer.weight))
    xp[:, :, p:p + t] = x
    fill = 0 if layer.pad_value is None else layer.pad_value[:, None]
    xp[:, :, :p] = fill
    xp[:, :, p + t:] = fill
    return xp


def conv1d(x, layer: TdnnLayer) -> np.ndarray:
    """Same-padded grouped, dilated 1-D convolution.

    Computed as one matrix product per kernel tap over a shifted view of the
    padded input, accumulated in the element type.
    """
    x = _as_tensor3(x)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} input channels, got {x.shape[1]}")
    b, _, t = x.shape
    g, d = layer.groups, layer.dilation
    xp = _padded(x, layer)
    taps = layer._taps
    if g == 1:
        y = np.matmul(taps[0, 0], xp[:, :, 0:t])
        for c in range(1, layer.context):
            y += np.matmul(taps[c, 0], xp[:, :, c * d:c * d + t])
        y += layer.bias[:, None]
        return y
    xg = xp.reshape(b, g, -1, xp.shape[2])
    y = np.matmul(taps[0], xg[..., 0:t])
    for c in range(1, layer.context):
        y += np.matmul(taps[c], xg[..., c * d:c * d + t])
    y = y.reshape(b, layer.out_channels, t)
    y += layer.bias[:, None]
    return y


def conv1d_naive(x, layer: TdnnLayer) -> np.ndarray:
    """Literal nested-loop convolution. Test oracle only; do not use on big inputs."""
    x = _as_tensor3(x)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} input channels, got {x.shape[1]}")
    B, N, T = x.shape
    O, I, C = layer.weight.shape
    d = layer.dilation
    half = (C - 1) // 2
    out_per_group = O // layer.groups
    out = np.zeros((B, O, T), dtype=np.result_type(x, layer.weight))
    for b in range(B):
        for o in range(O):
            group = o // out_per_group
            for t in range(T):
                acc = float(layer.bias[o])
                for i in range(I):
                    n = group * I + i
                    for c in range(C):
                        src = t + (c - half) * d
                        if 0 <= src < T:
                            v = float(x[b, n, src])
                        elif layer.pad_value is not None:
                            v = float(layer.pad_value[n])
                        else:
                            v = 0.0
                        acc += float(layer.weight[o, i, c]) * v
                out[b, o, t] = acc
    return out


def batchnorm_infer(x, bn: BatchNormParams) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[1] != bn.channels:
        raise ShapeError(f"batch norm over {bn.channels} channels got shape {x.shape}")
    tail = (slice(None), ) + (None,) * (x.ndim - 2)
    return (x - bn.mean[tail]) * bn.factor[tail] + bn.shift[tail]


def activation(x, kind: str = "relu", slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "leaky_relu":
        if 0 <= slope <= 1:
            return np.maximum(x, x * x.dtype.type(slope))
        return np.where(x < 0, x * x.dtype.type(slope), x)
    raise ValueError(f"unknown activation {kind!r}")


def se_block(x, se: SeParams) -> np.ndarray:
    """Squeeze-excitation: rescale each channel by a gate computed from its temporal mean."""
    x = _as_tensor3(x)
    if x.shape[1] != se.channels:
        raise ShapeError(f"SE block over {se.channels} channels got {x.shape[1]}")
    s = x.mean(axis=2)
    h = np.maximum(s @ se.w_reduce.T + se.b_reduce, 0)
    gate = expit(h @ se.w_expand.T + se.b_expand).astype(x.dtype, copy=False)
    return x * gate[:, :, None]


def stats_pool(x) -> np.ndarray:
    """Concatenate per-channel temporal mean and population std -> ``[B, 2N]``."""
    x = _as_tensor3(x)
    mean = x.mean(axis=2)
    var = ((x - mean[:, :, None]) ** 2).mean(axis=2)
    std = np.sqrt(np.maximum(var, STATS_VAR_FLOOR))
    return np.concatenate([mean, std], axis=1)


def fc(x, w, b) -> np.ndarray:
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or np.shape(b) != (w.shape[0],):
        raise ShapeError(f"fc shapes do not line up: x {x.shape}, w {w.shape}, b {np.shape(b)}")
    return x @ w.T + b
