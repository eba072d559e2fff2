"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward rule on the output tensor. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order, accumulates gradients into leaves that require them, and then releases
the graph. A released graph cannot be replayed.

Storage is float32 by default. Float64 inputs stay float64 through every op,
which is what the finite-difference checks rely on.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the op."""


class DegenerateInputError(ValueError):
    """Input has zero norm where a direction is required."""


class UsageError(RuntimeError):
    """API misuse: non-scalar loss, replayed graph, missing gradients."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


@contextmanager
def count_ops() -> Iterator[Counter]:
    """Count network ops (conv2d/deconv2d/linear) executed on this thread."""
    c: Counter = Counter()
    _counters().append(c)
    try:
        yield c
    finally:
        _counters().remove(c)


def _tick(name: str) -> None:
    for c in _counters():
        c[name] += 1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._released = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls (gradient accumulation); the graph
    itself is released afterwards, so calling this twice on the same loss
    raises :class:`UsageError`.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise UsageError("graph already consumed; recompute the forward pass")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._released = True


# --------------------------------------------------------------------------
# convolution kernels (numpy level)
# --------------------------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride)
    out = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    return out, win


def _correlate_adjoint(g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of ``_correlate`` w.r.t. its input, cropped to ``in_hw``."""
    o, ho, wo = g.shape
    kh, kw = w.shape[2:]
    if stride > 1:
        gd = np.zeros((o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, ::stride, ::stride] = g
    else:
        gd = g
    gd = np.pad(gd, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full, _ = _correlate(gd, wt, 1, 0)
    h, wd = in_hw
    hp, wp = h + 2 * pad, wd + 2 * pad
    if full.shape[1] < hp or full.shape[2] < wp:
        grown = np.zeros((full.shape[0], max(hp, full.shape[1]), max(wp, full.shape[2])), dtype=full.dtype)
        grown[:, : full.shape[1], : full.shape[2]] = full
        full = grown
    return full[:, pad : pad + h, pad : pad + wd]


def _check_conv(x: Tensor, w: Tensor, b: Optional[Tensor]) -> None:
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv expects input [C,H,W] and weight [O,C,kH,kW], got {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a [C,H,W] input with [O,C,kH,kW] filters."""
    _check_conv(x, weight, bias)
    c, h, w_ = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"weight expects {ci} input channels, input has {c}")
    if stride < 1 or padding < 0:
        raise DimensionError("stride must be positive and padding non-negative")
    if (h + 2 * padding - kh) < 0 or (w_ + 2 * padding - kw) < 0:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w_}")
    _tick("conv2d")
    out, win = _correlate(x.data, weight.data, stride, padding)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def _back(g):
        gx = _correlate_adjoint(g, weight.data, stride, padding, (h, w_)) if x.requires_grad else None
        gw = np.tensordot(g, win, axes=([1, 2], [1, 2])) if weight.requires_grad else None
        gb = g.sum(axis=(1, 2)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _back)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; the exact adjoint of :func:`conv2d`.

    ``weight`` has the conv layout [C_in, C_out, kH, kW]: the deconv maps the
    C_in channels of ``x`` onto C_out output channels. Output spatial size is
    ``(H - 1) * stride - 2 * padding + kH``.
    """
    _check_conv(x, weight, None)
    c, h, w_ = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"weight expects {ci} input channels, input has {c}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"bias shape {bias.shape} does not match {co} output channels")
    if padding > min(kh, kw) - 1:
        raise DimensionError("deconv2d padding must be < kernel size")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w_ - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise DimensionError("deconv2d output would be empty")
    _tick("deconv2d")
    out = _correlate_adjoint(x.data, weight.data, stride, padding, (ho, wo))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def _back(g):
        gx = gw = gb = None
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gp, kh, kw, stride)[:, :h, :w_]
        if x.requires_grad:
            gx = np.tensordot(weight.data, win, axes=([1, 2, 3], [0, 3, 4]))
        if weight.requires_grad:
            gw = np.tensordot(x.data, win, axes=([1, 2], [1, 2]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _back)


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """[N, C_in] @ [C_in, C_out] + [C_out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    _tick("linear")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def _back(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias is not None and bias.requires_grad else None,
        )

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"concat_channels needs equal spatial dims, got {a.shape} and {b.shape}")
    ca = a.shape[0]
    return _make(np.concatenate([a.data, b.data], axis=0), (a, b), lambda g: (g[:ca], g[ca:]))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def _back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _make(x.data[start:stop], (x,), _back)


def scale(x: Tensor, s: float) -> Tensor:
    if s == 1.0:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    s_arr = x.dtype.type(s)
    return _make(x.data * s_arr, (x,), lambda g: (g * s_arr,))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.shape != ():
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    if b.shape == () and a.shape != ():
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    if b.shape == () and a.shape != ():
        return _make(a.data - b.data, (a, b), lambda g: (g, -g.sum()))
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a scalar tensor."""
    _check_same(a, b, "mul")
    if b.shape == () and a.shape != ():
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, np.asarray((g * a.data).sum(), dtype=g.dtype)))
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Divide by a scalar tensor."""
    if b.shape != ():
        raise DimensionError("div: divisor must be a scalar tensor")
    inv = 1.0 / b.data

    def _back(g):
        return g * inv, np.asarray(-(g * a.data).sum() * inv * inv, dtype=g.dtype)

    return _make(a.data * inv, (a, b), _back)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def l1_norm(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.asarray(np.abs(a.data).sum(), dtype=a.dtype), (a,), lambda g: (g * sign,))


def l2_norm(a: Tensor) -> Tensor:
    n = np.sqrt((a.data.astype(np.float64) ** 2).sum())
    out = np.asarray(n, dtype=a.dtype)

    def _back(g):
        if n == 0:
            return (np.zeros_like(a.data),)
        return ((g * a.data / n).astype(a.dtype),)

    return _make(out, (a,), _back)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two tensors, flattened."""
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    x = a.data.astype(np.float64).ravel()
    y = b.data.astype(np.float64).ravel()
    na, nb = np.sqrt(x @ x), np.sqrt(y @ y)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine_similarity of a zero-norm tensor is undefined")
    cos = float(np.clip((x @ y) / (na * nb), -1.0, 1.0))
    dtype = np.result_type(a.dtype, b.dtype)

    def _back(g):
        g = float(g)
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return _make(np.asarray(cos, dtype=dtype), (a, b), _back)


# --------------------------------------------------------------------------
# structured ops used by the pillar encoder, the BEV warp and the losses
# --------------------------------------------------------------------------


def segment_max(feats: Tensor, cell: np.ndarray, n_cells: int) -> Tensor:
    """Per-cell channel max of non-negative point features.

    ``feats`` is [N, C], ``cell`` the flat cell index of each point. Returns
    [C, n_cells]; cells that receive no point are exactly zero. Gradient flows
    to the point(s) attaining each maximum.
    """
    n, c = feats.shape
    out = np.zeros((n_cells, c), dtype=feats.dtype)
    if n:
        np.maximum.at(out, cell, feats.data)
    winners = (feats.data == out[cell]) & (feats.data > 0) if n else np.zeros((0, c), bool)

    def _back(g):
        gt = g.T
        return ((gt[cell] * winners).astype(feats.dtype),)

    return _make(np.ascontiguousarray(out.T), (feats,), _back)


def sparse_apply(x: Tensor, matrix, out_hw: tuple) -> Tensor:
    """Apply a fixed sparse linear map over the flattened spatial dims.

    ``matrix`` is a scipy sparse [H_out*W_out, H_in*W_in] operator; each
    channel of ``x`` ([C, H_in, W_in]) is mapped independently.
    """
    c = x.shape[0]
    flat = x.data.reshape(c, -1)
    out = (matrix @ flat.T).T.astype(x.dtype, copy=False).reshape(c, *out_hw)
    in_shape = x.shape

    def _back(g):
        gx = (matrix.T @ g.reshape(c, -1).T).T
        return (np.asarray(gx, dtype=g.dtype).reshape(in_shape),)

    return _make(np.ascontiguousarray(out), (x,), _back)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray,
                       alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Weighted sum of the binary focal loss over ``logits``.

    ``weights`` carries both the ignore mask (weight 0) and any normaliser.
    """
    x = logits.data.astype(np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    log_p = -_softplus(-x)
    log_1mp = -_softplus(x)
    pos = targets > 0.5
    loss_pos = -alpha * (1 - p) ** gamma * log_p
    loss_neg = -(1 - alpha) * p ** gamma * log_1mp
    loss = np.where(pos, loss_pos, loss_neg)
    total = np.asarray((weights * loss).sum(), dtype=logits.dtype)

    def _back(g):
        d_pos = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        d_neg = (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log_1mp)
        d = np.where(pos, d_pos, d_neg) * weights * float(g)
        return (d.astype(logits.dtype),)

    return _make(total, (logits,), _back)


def smooth_l1_loss(pred: Tensor, target: np.ndarray, weights: np.ndarray, beta: float = 1.0 / 9.0) -> Tensor:
    """Weighted sum of the smooth-L1 (Huber) penalty of ``pred - target``."""
    d = pred.data.astype(np.float64) - target
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    total = np.asarray((weights * loss).sum(), dtype=pred.dtype)

    def _back(g):
        grad = np.where(quad, d / beta, np.sign(d)) * weights * float(g)
        return (grad.astype(pred.dtype),)

    return _make(total, (pred,), _back)


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` (in place)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    for t in inputs:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
    return worst
