"""Reverse-mode differentiation over image-shaped tensors.

Evaluation is eager: every operation computes its value immediately and
records vector-Jacobian callbacks on the output node, so an expression graph
is simply the set of tensors reachable from a scalar output. All arithmetic
is float64. Tensors are immutable after construction (their buffers are
marked read-only), which makes evaluation and :func:`backward` pure functions
that are safe to run concurrently on distinct graphs.

The op set is deliberately small and closed: elementwise arithmetic, relu,
sqrt, square, clip, constant-exponent power, conv2d, gaussian_filter,
bilinear_warp, 2x2 average pooling, channel-unit normalization, and the
spatial/global means. Everything else must be composed from these.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

Vjp = Optional[Callable[[np.ndarray], np.ndarray]]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GradientError(ValueError):
    """Invalid gradient request, e.g. backward on a non-scalar output."""


class Tensor:
    """A node in the expression graph.

    Leaves are created directly (optionally marked differentiable); interior
    nodes are produced by the ops below and carry the callbacks used by
    :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple["Tensor", ...] = ()
        self._vjps: tuple[Vjp, ...] = ()

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], vjps: Sequence[Vjp]) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = any(p.requires_grad for p in parents)
        # Keep callbacks only for parents that can receive gradient.
        out._parents = tuple(parents)
        out._vjps = tuple(v if p.requires_grad else None for p, v in zip(parents, vjps))
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic (numpy broadcasting, gradients unbroadcast) --

    def __add__(self, other):
        a, b = self, _coerce(other)
        return Tensor._node(
            a.data + b.data,
            (a, b),
            (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _coerce(other)
        return Tensor._node(
            a.data - b.data,
            (a, b),
            (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
        )

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _coerce(other)
        return Tensor._node(
            a.data * b.data,
            (a, b),
            (
                lambda g: _unbroadcast(g * b.data, a.data.shape),
                lambda g: _unbroadcast(g * a.data, b.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _coerce(other)
        out = a.data / b.data
        return Tensor._node(
            out,
            (a, b),
            (
                lambda g: _unbroadcast(g / b.data, a.data.shape),
                lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _coerce(other).__truediv__(self)

    def __neg__(self):
        return Tensor._node(-self.data, (self,), (lambda g: -g,))


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise primitives ------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return Tensor._node(np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def square(x: Tensor) -> Tensor:
    return Tensor._node(x.data * x.data, (x,), (lambda g: g * (2.0 * x.data),))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(x.data)
    return Tensor._node(out, (x,), (lambda g: g / (2.0 * out),))


def power(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for a constant real exponent.

    Fractional exponents require a non-negative base. The derivative of a
    sub-unit power diverges at a zero base; the gradient there is defined as
    zero (a deterministic subgradient choice, mirroring relu at its kink) so
    NaNs can never enter the backward pass.
    """
    p = float(exponent)
    if p != round(p) and np.any(x.data < 0.0):
        raise ValueError("fractional power of negative value")
    out = np.power(x.data, p)

    def vjp(g: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.data, p - 1.0)
        return g * np.where(np.isfinite(d), d, 0.0)

    return Tensor._node(out, (x,), (vjp,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; straight-through gradient inside the bounds, zero outside."""
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._node(np.clip(x.data, lo, hi), (x,), (lambda g: g * mask,))


# -- reductions ------------------------------------------------------------


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of a (C, H, W) tensor -> shape (C,)."""
    if x.data.ndim != 3:
        raise ShapeError(f"spatial_mean expects (C, H, W), got {x.data.shape}")
    c, h, w = x.data.shape
    scale = 1.0 / (h * w)
    return Tensor._node(
        x.data.mean(axis=(1, 2)),
        (x,),
        (lambda g: np.broadcast_to(g[:, None, None] * scale, (c, h, w)).copy(),),
    )


def global_mean(x: Tensor) -> Tensor:
    """Mean over all elements -> shape (1,)."""
    n = x.data.size
    scale = 1.0 / n
    return Tensor._node(
        np.array([x.data.mean()]),
        (x,),
        (lambda g: np.full(x.data.shape, g.reshape(-1)[0] * scale),),
    )


def global_sum(x: Tensor) -> Tensor:
    """Sum over all elements, composed as mean * count."""
    return global_mean(x) * float(x.data.size)


def normalize_channels(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Scale each spatial location of a (C, H, W) tensor to unit channel norm."""
    if x.data.ndim != 3:
        raise ShapeError(f"normalize_channels expects (C, H, W), got {x.data.shape}")
    norm = np.sqrt(np.sum(x.data * x.data, axis=0, keepdims=True) + eps)
    out = x.data / norm

    def vjp(g: np.ndarray) -> np.ndarray:
        dot = np.sum(g * x.data, axis=0, keepdims=True)
        return g / norm - x.data * dot / (norm * norm * norm)

    return Tensor._node(out, (x,), (vjp,))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; trailing odd row/column is dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool2 expects (C, H, W), got {x.data.shape}")
    c, h, w = x.data.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"avg_pool2 needs H, W >= 2, got {x.data.shape}")
    blocks = x.data[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
    out = blocks.mean(axis=(2, 4))

    def vjp(g: np.ndarray) -> np.ndarray:
        gx = np.zeros((c, h, w))
        gx[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return gx

    return Tensor._node(out, (x,), (vjp,))


# -- convolution family ----------------------------------------------------


def conv2d(x: Tensor, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a (C, H, W) tensor with fixed kernels (O, C, kh, kw).

    Kernels are constants: gradient flows to the input only.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    if x.data.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(
            f"conv2d expects image (C, H, W) and kernels (O, C, kh, kw), "
            f"got {x.data.shape} and {kernels.shape}"
        )
    c, h, w = x.data.shape
    n_out, n_in, kh, kw = kernels.shape
    if n_in != c:
        raise ShapeError(f"kernel expects {n_in} input channels, image has {c}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if hp < kh or wp < kw or oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be empty: image {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    xp = x.data
    if padding:
        xp = np.zeros((c, hp, wp))
        xp[:, padding : padding + h, padding : padding + w] = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, oh, ow, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    out = (cols @ kernels.reshape(n_out, -1).T).T.reshape(n_out, oh, ow)

    def vjp(g: np.ndarray) -> np.ndarray:
        gxp = np.zeros((c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                # out[o, y, x] took xp[c, y*s + i, x*s + j] * K[o, c, i, j]
                contrib = np.tensordot(kernels[:, :, i, j], g, axes=(0, 0))
                gxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += contrib
        if padding:
            return gxp[:, padding : padding + h, padding : padding + w]
        return gxp

    return Tensor._node(out, (x,), (vjp,))


def gaussian_kernel_1d(window: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is its outer product."""
    if window % 2 == 0 or window < 1:
        raise ValueError(f"gaussian window must be odd and positive, got {window}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    coords = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(coords * coords) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate1d_valid(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, taps.size, axis=axis)
    return win @ taps


def _correlate1d_full(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[axis] = (taps.size - 1, taps.size - 1)
    return _correlate1d_valid(np.pad(x, pad), taps, axis)


def gaussian_filter(x: Tensor, window: int, sigma: float) -> Tensor:
    """Valid-region per-channel convolution with a normalized 2-D Gaussian."""
    if x.data.ndim != 3:
        raise ShapeError(f"gaussian_filter expects (C, H, W), got {x.data.shape}")
    taps = gaussian_kernel_1d(window, sigma)
    _, h, w = x.data.shape
    if window > min(h, w):
        raise ShapeError(f"window {window} exceeds image extent {h}x{w}")
    out = _correlate1d_valid(_correlate1d_valid(x.data, taps, 1), taps, 2)

    def vjp(g: np.ndarray) -> np.ndarray:
        # Transpose of valid correlation is full correlation; the Gaussian is symmetric.
        return _correlate1d_full(_correlate1d_full(g, taps, 2), taps, 1)

    return Tensor._node(out, (x,), (vjp,))


def bilinear_warp(source: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp `source` by a per-pixel displacement field.

    `flow` has shape (2, H, W): channel 0 displaces rows, channel 1 displaces
    columns, so output(c, i, j) samples source at (i + flow[0,i,j],
    j + flow[1,i,j]) with bilinear interpolation. Sampling coordinates are
    clamped to the image bounds; at integer coordinates the flow gradient
    uses the right-sided interpolation cell.
    """
    if source.data.ndim != 3:
        raise ShapeError(f"bilinear_warp expects source (C, H, W), got {source.data.shape}")
    c, h, w = source.data.shape
    if flow.data.shape != (2, h, w):
        raise ShapeError(
            f"flow shape {flow.data.shape} does not match source spatial dims (2, {h}, {w})"
        )

    raw_r = np.arange(h, dtype=np.float64)[:, None] + flow.data[0]
    raw_c = np.arange(w, dtype=np.float64)[None, :] + flow.data[1]
    in_r = (raw_r >= 0.0) & (raw_r <= h - 1.0)
    in_c = (raw_c >= 0.0) & (raw_c <= w - 1.0)
    rr = np.clip(raw_r, 0.0, h - 1.0)
    cc = np.clip(raw_c, 0.0, w - 1.0)

    r0 = np.minimum(np.floor(rr), max(h - 2, 0)).astype(np.intp)
    c0 = np.minimum(np.floor(cc), max(w - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    tr = rr - r0
    tc = cc - c0

    v00 = source.data[:, r0, c0]
    v01 = source.data[:, r0, c1]
    v10 = source.data[:, r1, c0]
    v11 = source.data[:, r1, c1]
    w00 = (1.0 - tr) * (1.0 - tc)
    w01 = (1.0 - tr) * tc
    w10 = tr * (1.0 - tc)
    w11 = tr * tc
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def vjp_source(g: np.ndarray) -> np.ndarray:
        gs = np.zeros(c * h * w)
        chan = (np.arange(c, dtype=np.intp) * (h * w))[:, None]
        for weight, ri, ci in ((w00, r0, c0), (w01, r0, c1), (w10, r1, c0), (w11, r1, c1)):
            idx = (chan + (ri * w + ci).ravel()[None, :]).ravel()
            np.add.at(gs, idx, (g * weight).reshape(c, -1).ravel())
        return gs.reshape(c, h, w)

    def vjp_flow(g: np.ndarray) -> np.ndarray:
        d_row = ((1.0 - tc) * (v10 - v00) + tc * (v11 - v01)) * g
        d_col = ((1.0 - tr) * (v01 - v00) + tr * (v11 - v10)) * g
        return np.stack((d_row.sum(axis=0) * in_r, d_col.sum(axis=0) * in_c))

    return Tensor._node(out, (source, flow), (vjp_source, vjp_flow))


# -- backward pass ----------------------------------------------------------


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar output with respect to every differentiable leaf.

    Purely functional: no state is stored on the graph, so the same graph can
    be differentiated repeatedly (or concurrently from different outputs).
    """
    if output.data.size != 1:
        raise GradientError(f"backward requires a scalar output, got shape {output.data.shape}")
    if not output.requires_grad:
        return {}

    # Post-order over the differentiable subgraph; visit each node once.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones(output.data.shape)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaf_grads[node] = g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if vjp is None:
                continue
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_grads


def gradient(output: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of a scalar output with respect to one differentiable leaf."""
    grads = backward(output)
    if wrt not in grads:
        if not wrt.requires_grad:
            raise GradientError("requested gradient for a non-differentiable tensor")
        return np.zeros(wrt.data.shape)
    return grads[wrt]
