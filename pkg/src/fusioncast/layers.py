"""Convolution, pooling, MLP and ConvLSTM building blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Anything that owns parameters. Subclasses register them as attributes."""

    def parameters(self) -> list[Parameter]:
        """All parameters reachable from this module, shared ones listed once."""
        out, seen = [], set()
        for value in vars(self).values():
            if isinstance(value, Parameter):
                found = [value]
            elif isinstance(value, Module):
                found = value.parameters()
            elif isinstance(value, (list, tuple)):
                found = [p for v in value if isinstance(v, Module) for p in v.parameters()]
            else:
                continue
            for p in found:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Conv2DLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, name: str = "conv"):
        rng = rng or np.random.default_rng(0)
        shape = (out_ch, in_ch, kernel, kernel)
        fan = kernel * kernel
        self.kernel = Parameter(glorot_uniform(rng, shape, in_ch * fan, out_ch * fan), f"{name}.kernel")
        self.bias = Parameter(np.zeros(out_ch), f"{name}.bias")
        self.stride = stride
        self.padding = padding

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    def out_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.kernel.shape[2]) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


class Deconv2DLayer(Module):
    """Transposed convolution; kernel layout (in_ch, out_ch, k, k)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2, padding: int = 1,
                 rng: np.random.Generator | None = None, name: str = "deconv"):
        rng = rng or np.random.default_rng(0)
        fan = kernel * kernel
        self.kernel = Parameter(glorot_uniform(rng, (in_ch, out_ch, kernel, kernel), in_ch * fan, out_ch * fan),
                                f"{name}.kernel")
        self.bias = Parameter(np.zeros(out_ch), f"{name}.bias")
        self.stride = stride
        self.padding = padding

    def out_extent(self, n: int) -> int:
        return (n - 1) * self.stride - 2 * self.padding + self.kernel.shape[2]

    def __call__(self, x: Tensor) -> Tensor:
        return deconv2d(x, self)


class SharedMLP(Module):
    """Two dense layers C -> hidden -> C with a ReLU between.

    The hidden width is ``max(C // reduction, 4)``.
    """

    def __init__(self, channels: int, reduction: int = 4, rng: np.random.Generator | None = None,
                 name: str = "mlp", hidden: int | None = None):
        rng = rng or np.random.default_rng(0)
        hidden = hidden if hidden is not None else max(channels // reduction, 4)
        self.w1 = Parameter(glorot_uniform(rng, (hidden, channels), channels, hidden), f"{name}.w1")
        self.b1 = Parameter(np.zeros(hidden), f"{name}.b1")
        self.w2 = Parameter(glorot_uniform(rng, (channels, hidden), hidden, channels), f"{name}.w2")
        self.b2 = Parameter(np.zeros(channels), f"{name}.b2")

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def __call__(self, v: Tensor) -> Tensor:
        return mlp_apply(v, self)


class ConvLSTMCell(Module):
    """ConvLSTM without peephole terms. Gate channels are ordered (i, f, g, o)."""

    def __init__(self, in_ch: int, hidden_ch: int, kernel: int = 3, rng: np.random.Generator | None = None,
                 name: str = "cell", forget_bias: float = 1.0):
        rng = rng or np.random.default_rng(0)
        g = 4 * hidden_ch
        fan = kernel * kernel
        self.w_x = Parameter(glorot_uniform(rng, (g, in_ch, kernel, kernel), in_ch * fan, g * fan), f"{name}.w_x")
        self.w_h = Parameter(glorot_uniform(rng, (g, hidden_ch, kernel, kernel), hidden_ch * fan, g * fan),
                             f"{name}.w_h")
        bias = np.zeros(g)
        bias[hidden_ch:2 * hidden_ch] = forget_bias
        self.bias = Parameter(bias, f"{name}.bias")
        self.padding = kernel // 2

    @property
    def in_ch(self) -> int:
        return self.w_x.shape[1]

    @property
    def hidden_ch(self) -> int:
        return self.w_h.shape[1]

    def zero_state(self, x: Tensor) -> tuple[Tensor, Tensor]:
        shape = x.shape[:-3] + (self.hidden_ch,) + x.shape[-2:]
        return Tensor(np.zeros(shape, dtype=x.data.dtype)), Tensor(np.zeros(shape, dtype=x.data.dtype))

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return convlstm_step(x, h, c, self)


def conv2d(x: Tensor, layer: Conv2DLayer) -> Tensor:
    return ad.conv2d(x, layer.kernel, layer.bias, stride=layer.stride, padding=layer.padding)


def deconv2d(x: Tensor, layer: Deconv2DLayer) -> Tensor:
    return ad.conv_transpose2d(x, layer.kernel, layer.bias, stride=layer.stride, padding=layer.padding)


def channel_pool(x: Tensor) -> Tensor:
    """Stack the per-pixel channel mean (channel 0) and channel max (channel 1)."""
    return ad.concat_channels([ad.channel_mean(x), ad.channel_max(x)])


def global_pool(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and spatial max."""
    return ad.spatial_mean(x), ad.spatial_max(x)


def mlp_apply(v: Tensor, mlp: SharedMLP) -> Tensor:
    if v.shape[-1] != mlp.channels:
        raise ShapeError(f"mlp expects {mlp.channels} channels, got {v.shape[-1]}")
    hidden = ad.relu(ad.linear(v, mlp.w1, mlp.b1))
    return ad.linear(hidden, mlp.w2, mlp.b2)


def convlstm_step(x: Tensor, h: Tensor, c: Tensor, cell: ConvLSTMCell) -> tuple[Tensor, Tensor]:
    if x.shape[-2:] != h.shape[-2:] or h.shape != c.shape:
        raise ShapeError(f"convlstm_step: x {x.shape}, h {h.shape}, c {c.shape} disagree")
    if x.shape[-3] != cell.in_ch or h.shape[-3] != cell.hidden_ch:
        raise ShapeError(f"convlstm_step: expected {cell.in_ch}/{cell.hidden_ch} channels, "
                         f"got {x.shape[-3]}/{h.shape[-3]}")
    gates = ad.ew_add(ad.conv2d(x, cell.w_x, cell.bias, padding=cell.padding),
                      ad.conv2d(h, cell.w_h, None, padding=cell.padding))
    n = cell.hidden_ch
    parts = _split_gates(gates, n)
    i, f, o = ad.sigmoid(parts[0]), ad.sigmoid(parts[1]), ad.sigmoid(parts[3])
    g = ad.tanh(parts[2])
    c_next = ad.ew_add(ad.ew_mul(f, c), ad.ew_mul(i, g))
    h_next = ad.ew_mul(o, ad.tanh(c_next))
    return h_next, c_next


def _split_gates(gates: Tensor, n: int) -> list[Tensor]:
    return [ad.channel_slice(gates, k * n, (k + 1) * n) for k in range(4)]


@dataclass
class BranchState:
    h: Tensor
    c: Tensor


def encode_sequence(features: list[Tensor], cell: ConvLSTMCell) -> BranchState:
    """Run the cell over time from a zero state and return the final (H, C)."""
    if not features:
        raise ValueError("encode_sequence needs at least one time step")
    h, c = cell.zero_state(features[0])
    for x in features:
        h, c = convlstm_step(x, h, c, cell)
    return BranchState(h, c)
