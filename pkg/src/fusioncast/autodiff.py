"""Small dense tensor with tape-based reverse-mode differentiation.

Only the operations the nowcasting model needs are provided. Every op works on
arrays with arbitrary leading dimensions so a batch axis can ride along in
front of the ``[channel][height][width]`` layout.

Usage::

    with Tape() as tape:
        loss = mean(square(sub(model(x), y)))
    tape.backward(loss)        # gradients land in Parameter.grad
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "NonFiniteGradientError",
    "as_tensor",
    "get_default_dtype",
    "default_dtype",
    "ew_add",
    "ew_sub",
    "ew_mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "square",
    "abs_",
    "sum_",
    "mean",
    "concat_channels",
    "stack",
    "select",
    "channel_slice",
    "reshape",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "channel_mean",
    "channel_max",
    "spatial_mean",
    "spatial_max",
    "finite_difference_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float64))


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the float type new tensors are created with."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_default_dtype())
        if arr.ndim > 5:
            raise ShapeError(f"tensor order {arr.ndim} exceeds 5")
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"empty extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A learnable tensor with an accumulated gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records executed ops; ``backward`` replays their adjoints in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.grads: dict[int, np.ndarray] = {}
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(id(t))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if root.data.size != 1:
                raise ShapeError(f"backward needs a scalar root or an explicit seed, got {root.shape}")
            seed = np.ones_like(root.data)
        grads = {id(root): np.asarray(seed, dtype=root.data.dtype)}
        params: dict[int, Parameter] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(t, Parameter):
                    params[key] = t
        for key, p in params.items():
            p.grad += grads[key]
        self.grads = grads


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), backward)
    return out


# -- broadcasting -------------------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim >= 3 and b.shape == a.shape[:-2]:
        return "channel"
    if a.ndim >= 3 and b.shape == a.shape[:-3] + (1,) + a.shape[-2:]:
        return "map"
    if 0 < b.ndim < a.ndim and b.shape == a.shape[a.ndim - b.ndim:]:
        return "trailing"
    raise ShapeError(f"cannot broadcast shape {b.shape} against {a.shape}")


def _expand(b: np.ndarray, kind: str) -> np.ndarray:
    if kind == "channel":
        return b[..., None, None]
    return b


def _reduce(g: np.ndarray, kind: str, b_shape: tuple) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "channel":
        return g.sum(axis=(-2, -1))
    if kind == "map":
        return g.sum(axis=-3, keepdims=True)
    lead = tuple(range(g.ndim - len(b_shape)))
    return g.sum(axis=lead)


# -- elementwise ----------------------------------------------------------------

def ew_add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    out = a.data + _expand(b.data, kind)
    return _make(out, (a, b), lambda g: (g, _reduce(g, kind, b.shape)))


def ew_sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    out = a.data - _expand(b.data, kind)
    return _make(out, (a, b), lambda g: (g, -_reduce(g, kind, b.shape)))


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.data, b.data)
    bx = _expand(b.data, kind)
    out = a.data * bx

    def backward(g):
        return g * bx, _reduce(g * a.data, kind, b.shape)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


_ONE_BELOW = {np.dtype(np.float64): np.nextafter(1.0, 0.0),
              np.dtype(np.float32): np.nextafter(np.float32(1.0), np.float32(0.0))}


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    # keep the open interval (0, 1) under saturation
    np.clip(out, np.finfo(d.dtype).tiny, _ONE_BELOW[d.dtype], out=out)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


# -- structural -----------------------------------------------------------------

def concat_channels(xs: Sequence[Tensor], axis: int = -3) -> Tensor:
    """Concatenate along the channel axis; the gradient is split back in order."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"incompatible extents for concat: {ref} vs {t.shape}")
    if len(xs) == 1:
        return _make(xs[0].data.copy(), (xs[0],), lambda g: (g,))
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _make(out, tuple(xs), backward)


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=axis), (x,), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop, :, :] = g
        return (full,)

    return _make(x.data[..., start:stop, :, :], (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


# -- dense ----------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight laid out (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward)


# -- convolution ------------------------------------------------------------------

def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw). Returns output and the window view."""
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of ``_correlate`` with respect to its input.

    g is (N, O, Ho, Wo); w is (O, C, kh, kw); returns (N, C, H, W).
    """
    n, _, ho, wo = g.shape
    c, kh, kw = w.shape[1:]
    hp, wp = in_hw[0] + 2 * pad, in_hw[1] + 2 * pad
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[..., i, j]
    if pad:
        out = out[:, :, pad:hp - pad, pad:wp - pad]
    return np.ascontiguousarray(out)


def _flatten_maps(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    if x.ndim < 3:
        raise ShapeError(f"expected a [channel][height][width] map, got shape {x.shape}")
    lead = x.shape[:-3]
    return x.reshape((-1,) + x.shape[-3:]), lead


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with symmetric zero padding."""
    o, c, kh, kw = weight.shape
    if x.shape[-3] != c:
        raise ShapeError(f"conv2d: input has {x.shape[-3]} channels, kernel expects {c}")
    h, w_ = x.shape[-2:]
    ho, wo = _conv_out_extent(h, kh, stride, padding), _conv_out_extent(w_, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output extent {ho}x{wo} < 1 for input {h}x{w_}")
    xf, lead = _flatten_maps(x.data)
    out, win = _correlate(xf, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gf = g.reshape((-1,) + g.shape[-3:])
        gx = _scatter(gf, weight.data, stride, padding, (h, w_)).reshape(x.shape)
        gw = np.tensordot(gf, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = gf.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(lead + out.shape[1:]), inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution; weight is laid out (in_ch, out_ch, kh, kw).

    Output extent is ``(in - 1) * stride - 2 * padding + k``. The input
    gradient is the ordinary ``conv2d`` of the upstream gradient with the same
    kernel.
    """
    c_in, c_out, kh, kw = weight.shape
    if x.shape[-3] != c_in:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[-3]} channels, kernel expects {c_in}")
    h, w_ = x.shape[-2:]
    ho, wo = (h - 1) * stride - 2 * padding + kh, (w_ - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output extent {ho}x{wo} < 1")
    xf, lead = _flatten_maps(x.data)
    out = _scatter(xf, weight.data, stride, padding, (ho, wo))
    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        gf = g.reshape((-1,) + g.shape[-3:])
        gx, win = _correlate(gf, weight.data, stride, padding)
        # win: N, C_out, h, w, kh, kw  ->  dW[i, o, a, b] = sum x[n,i,p,q] * win[n,o,p,q,a,b]
        gw = np.tensordot(xf, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = gf.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx.reshape(x.shape), gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(lead + out.shape[1:]), inputs, backward)


# -- pooling --------------------------------------------------------------------

def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[-3]
    out = x.data.mean(axis=-3, keepdims=True)
    return _make(out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


def _argmax_mask(d: np.ndarray, axis) -> np.ndarray:
    """One-hot mask of the first maximum along ``axis`` (int or tuple)."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % d.ndim for a in axes)
    keep = [i for i in range(d.ndim) if i not in axes]
    moved = np.moveaxis(d, axes, range(d.ndim - len(axes), d.ndim))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(mask, idx[..., None], True, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.moveaxis(mask, range(d.ndim - len(axes), d.ndim), axes)


def channel_max(x: Tensor) -> Tensor:
    out = x.data.max(axis=-3, keepdims=True)
    mask = _argmax_mask(x.data, -3)
    return _make(out, (x,), lambda g: (g * mask,))


def spatial_mean(x: Tensor) -> Tensor:
    hw = x.shape[-1] * x.shape[-2]
    out = x.data.mean(axis=(-2, -1))
    return _make(out, (x,), lambda g: (np.broadcast_to(g[..., None, None] / hw, x.shape).copy(),))


def spatial_max(x: Tensor) -> Tensor:
    out = x.data.max(axis=(-2, -1))
    mask = _argmax_mask(x.data, (-2, -1))
    return _make(out, (x,), lambda g: (g[..., None, None] * mask,))


# -- verification -----------------------------------------------------------------

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> tuple[float, str]:
    """Compare tape gradients of scalar ``f()`` with central differences.

    For each parameter the relative error is
    ``|g_analytic - g_central| / max(|g_analytic|, |g_central|, 1e-8)`` with
    ``|.|`` the Euclidean norm over the checked coordinates. Returns the worst
    error and the name of the parameter that produced it. ``max_coords``
    samples that many coordinates per parameter (seeded) instead of all.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        root = f()
    tape.backward(root)
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, ""
    for p in params:
        analytic = p.grad.ravel().copy()
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteGradientError(f"non-finite analytic gradient in {p.name!r}")
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is None:
            if n > 512:
                raise ShapeError(f"{p.name!r} has {n} elements; full checks are limited to 512")
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=min(max_coords, n), replace=False))
        numeric = np.empty(len(coords))
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * eps)
        if not np.all(np.isfinite(numeric)):
            raise NonFiniteGradientError(f"non-finite numeric gradient in {p.name!r}")
        a = analytic[coords]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        err = float(np.linalg.norm(a - numeric) / denom)
        if err > worst or not worst_name:
            worst, worst_name = err, p.name
    return worst, worst_name
