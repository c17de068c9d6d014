"""Minimal reverse-mode autodiff over numpy arrays, plus the AdamW update.

Forward arithmetic runs in the dtype of the inputs (float32 in production;
tests may build float64 graphs for finite-difference shadows).  Explicit
reductions (sum, mean, softmax denominators, layer-norm statistics)
accumulate in float64 before casting back.  The graph is the implicit link
structure between Tensors; ``backward`` walks it once in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in shapes))


class Tensor:
    """An n-d array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def tensor(data, requires_grad=False, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def topological_order(root: Tensor) -> list[Tensor]:
    """All nodes reachable from `root`, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Populate .grad on every tracked tensor reachable from scalar `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    loss._accum(seed.reshape(loss.data.shape))
    for node in reversed(topological_order(loss)):
        if node._backward is not None and node.grad is not None and node.requires_grad:
            node._backward(node.grad)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    out = Tensor(a.data + b.data, parents=(a, b))

    def back(g):
        if a.requires_grad:
            a._accum(_reduce_to(g, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accum(_reduce_to(g, b.shape).astype(b.dtype, copy=False))

    out._backward = back
    return out


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    out = Tensor(a.data * b.data, parents=(a, b))

    def back(g):
        if a.requires_grad:
            a._accum(_reduce_to(g * b.data, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accum(_reduce_to(g * a.data, b.shape).astype(b.dtype, copy=False))

    out._backward = back
    return out


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    out = Tensor(a.data / b.data, parents=(a, b))

    def back(g):
        if a.requires_grad:
            a._accum(_reduce_to(g / b.data, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.shape).astype(b.dtype, copy=False))

    out._backward = back
    return out


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data**exponent, parents=(a,))

    def back(g):
        if a.requires_grad:
            a._accum((g * exponent * a.data ** (exponent - 1.0)).astype(a.dtype, copy=False))

    out._backward = back
    return out


def log(a: Tensor) -> Tensor:
    """Natural log; the caller keeps the argument strictly positive."""
    out = Tensor(np.log(a.data), parents=(a,))

    def back(g):
        if a.requires_grad:
            a._accum((g / a.data).astype(a.dtype, copy=False))

    out._backward = back
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), parents=(a,))

    def back(g):
        if a.requires_grad:
            a._accum((g * (a.data > 0)).astype(a.dtype, copy=False))

    out._backward = back
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y.astype(a.dtype, copy=False), parents=(a,))

    def back(g):
        if a.requires_grad:
            a._accum((g * out.data * (1.0 - out.data)).astype(a.dtype, copy=False))

    out._backward = back
    return out


def matmul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, parents=(a, b))

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_reduce_to(ga, a.shape).astype(a.dtype, copy=False))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_reduce_to(gb, b.shape).astype(b.dtype, copy=False))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def back(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    out._backward = back
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), parents=(a,))
    inv = tuple(np.argsort(axes))

    def back(g):
        if a.requires_grad:
            a._accum(g.transpose(inv))

    out._backward = back
    return out


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Pick one slice along `axis` (the axis is dropped)."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = Tensor(a.data[sl], parents=(a,))

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            a._accum(full)

    out._backward = back
    return out


def concat(parts: list[Tensor], axis: int) -> Tensor:
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != axis and o != b for i, (o, b) in enumerate(zip(other, base))
        ):
            raise _shape_error("concat", *(p.shape for p in parts))
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    out._backward = back
    return out


def embed(table: Tensor, indices) -> Tensor:
    """Row lookup: table (V, C) gathered at integer `indices` (any shape)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx], parents=(table,))

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table._accum(full)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# reductions and normalizations


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    val = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    out = Tensor(val, parents=(a,))

    def back(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    out._backward = back
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = Tensor((e / denom).astype(a.dtype, copy=False), parents=(a,))

    def back(g):
        if a.requires_grad:
            y = out.data
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum(((g - dot) * y).astype(a.dtype, copy=False))

    out._backward = back
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; gamma/beta have that axis's length."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise _shape_error("layer_norm", x.shape, gamma.shape, beta.shape)
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * inv).astype(x.dtype)
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))

    def back(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, n).sum(axis=0).astype(gamma.dtype, copy=False))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, n).sum(axis=0).astype(beta.dtype, copy=False))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accum(((dxhat - m1 - xhat * m2) * inv).astype(x.dtype, copy=False))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1; x is (B, C, H, W)."""
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise _shape_error("conv2d(kernel)", weight.shape, "(O, C, 3, 3)")
    if x.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    b_, c, h, w = x.shape
    o = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros((b_, o, h * w), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            xs = xp[:, :, di : di + h, dj : dj + w].reshape(b_, c, h * w)
            acc += weight.data[:, :, di, dj] @ xs
    val = acc.reshape(b_, o, h, w)
    if bias is not None:
        val = val + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(val, parents=parents)

    def back(g):
        gf = g.reshape(b_, o, h * w)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
        if weight.requires_grad:
            dw = np.zeros_like(weight.data)
            for di in range(3):
                for dj in range(3):
                    xs = xp[:, :, di : di + h, dj : dj + w].reshape(b_, c, h * w)
                    dw[:, :, di, dj] = np.einsum("bon,bcn->oc", gf, xs)
            weight._accum(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    chunk = (weight.data[:, :, di, dj].T @ gf).reshape(b_, c, h, w)
                    dxp[:, :, di : di + h, dj : dj + w] += chunk
            x._accum(dxp[:, :, 1 : h + 1, 1 : w + 1])

    out._backward = back
    return out


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    b, c, h, w = x.shape
    if h % k or w % k:
        raise _shape_error(f"avg_pool2d(k={k})", x.shape)
    blocks = x.data.reshape(b, c, h // k, k, w // k, k)
    val = blocks.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)
    out = Tensor(val, parents=(x,))

    def back(g):
        if x.requires_grad:
            gg = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            x._accum(gg.astype(x.dtype, copy=False))

    out._backward = back
    return out


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the trailing two (spatial) axes."""
    h, w = x.shape[-2], x.shape[-1]
    val = x.data.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)
    out = Tensor(val, parents=(x,))

    def back(g):
        if x.requires_grad:
            x._accum((g[..., None, None] / (h * w) * np.ones((h, w), dtype=x.dtype)).astype(x.dtype, copy=False))

    out._backward = back
    return out


def _resize_axis_weights(n_in: int, n_out: int):
    # half-pixel-centered source coordinate for each output index
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize (..., H, W) to (..., out_h, out_w) with half-pixel bilinear weights."""
    h, w = x.shape[-2], x.shape[-1]
    i0, i1, fy = _resize_axis_weights(h, out_h)
    j0, j1, fx = _resize_axis_weights(w, out_w)
    fy = fy.reshape(-1, 1).astype(x.dtype)
    fx = fx.reshape(1, -1).astype(x.dtype)
    d = x.data
    val = (
        d[..., i0[:, None], j0[None, :]] * (1 - fy) * (1 - fx)
        + d[..., i0[:, None], j1[None, :]] * (1 - fy) * fx
        + d[..., i1[:, None], j0[None, :]] * fy * (1 - fx)
        + d[..., i1[:, None], j1[None, :]] * fy * fx
    )
    out = Tensor(val.astype(x.dtype, copy=False), parents=(x,))

    def back(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for ii, jj, wgt in (
                (i0, j0, (1 - fy) * (1 - fx)),
                (i0, j1, (1 - fy) * fx),
                (i1, j0, fy * (1 - fx)),
                (i1, j1, fy * fx),
            ):
                np.add.at(dx, (..., ii[:, None], jj[None, :]), g * wgt)
            x._accum(dx)

    out._backward = back
    return out


def gather_weighted_sum(x: Tensor, idx: np.ndarray, weight: np.ndarray, total: np.ndarray) -> Tensor:
    """Sparse gather: out[n] = sum_k x.ravel()[idx[n,k]] * weight[n,k] / total[n].

    Used to apply a geometry BlendPlan inside the graph; idx/weight/total are
    constants of the plan.
    """
    w = weight.astype(x.dtype, copy=False)
    tot = total.astype(x.dtype, copy=False)
    flat = x.data.reshape(-1)
    out = Tensor((flat[idx] * w).sum(axis=1) / tot, parents=(x,))

    def back(g):
        if x.requires_grad:
            dflat = np.zeros(flat.shape, dtype=x.dtype)
            np.add.at(dflat, idx.reshape(-1), ((g / tot)[:, None] * w).reshape(-1))
            x._accum(dflat.reshape(x.shape))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# parameter initialization and AdamW


def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) clipped to two standard deviations."""
    dtype = np.dtype(dtype)
    draw_type = dtype if dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.dtype(np.float64)
    raw = rng.standard_normal(shape, dtype=draw_type)
    return (np.clip(raw, -2.0, 2.0) * draw_type.type(std)).astype(dtype, copy=False)


@dataclass
class AdamWState:
    """Per-parameter moment buffers and hyperparameters of AdamW."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay multiplies the weights directly (it never enters the
    moment buffers).  Missing gradients are treated as zero.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise _shape_error(f"adamw_step({name})", g.shape, p.data.shape)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
