"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op produces a new :class:`Tensor` holding a reference to a
:class:`_Record` with the parents and a closure mapping the output gradient
to parent gradients.  ``Tensor.backward`` walks the graph once in reverse
topological order; afterwards the records are marked consumed.

Layout for image-like data is N x C x H x W.  There is no broadcasting other
than with Python scalars.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "exp",
    "log",
    "abs",
    "sigmoid",
    "clamp_min",
    "matmul",
    "conv2d",
    "upsample_nearest",
    "softmax_channel",
    "log_softmax_channel",
    "reduce",
    "sum",
    "mean",
    "concat_channels",
    "take_channels",
    "reshape",
    "elementwise",
    "finite_diff_check",
    "no_grad",
]

_GRAD_ENABLED = True
# When not None, kink ops (relu/abs/clamp) append their branch pattern here.
_KINK_PROBE: list | None = None


class _Record:
    __slots__ = ("parents", "backward_fn", "consumed", "name")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False
        self.name = name


class Tensor:
    """Dense float64 array with an optional differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward_fn, name: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by {name}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._record = _Record(parents, backward_fn, name) if needs else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._record = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        if self._record is None:
            # leaf scalar: d(self)/d(self) = 1
            self.grad = _accumulate(self.grad, np.ones_like(self.data))
            return
        if self._record.consumed:
            raise RuntimeError("computation record already consumed by a previous backward")

        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            rec = t._record
            if rec is None:
                if g is not None and t.requires_grad:
                    t.grad = _accumulate(t.grad, g)
                continue
            if g is None:
                rec.consumed = True
                continue
            parent_grads = rec.backward_fn(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            rec.consumed = True
            # drop saved intermediates
            rec.backward_fn = None
            rec.parents = ()


def _accumulate(old, new):
    return new.copy() if old is None else old + new


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._record is not None:
            if t._record.consumed:
                raise RuntimeError("computation record already consumed by a previous backward")
            for p in t._record.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


@contextlib.contextmanager
def no_grad():
    """Disable record construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _probe(pattern: np.ndarray) -> None:
    if _KINK_PROBE is not None:
        _KINK_PROBE.append(pattern)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add")
    b = _as_tensor(b)
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return Tensor._from_op(a.data - c, (a,), lambda g: (g,), "sub")
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0.0
    _probe(pos)
    return Tensor._from_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    _probe(sgn)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient flows only where a > lo."""
    a = _as_tensor(a)
    keep = a.data > lo
    _probe(keep)
    return Tensor._from_op(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": lambda a, b=None: relu(a),
    "exp": lambda a, b=None: exp(a),
    "log": lambda a, b=None: log(a),
    "abs": lambda a, b=None: abs(a),
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, exp, log, abs."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "scale") and b is None:
        raise ValueError(f"{op_kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def _im2col(xpt: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # channel-major padded input (C, N, Hp, Wp) -> (C*kh*kw, N*ho*wo)
    c, n = xpt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xpt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation plus per-channel bias."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"conv2d: channel mismatch, input has {cin}, kernel expects {kcin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    num_h, num_w = h + 2 * pad - kh, w + 2 * pad - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ValueError("conv2d: output size is not integral")
    ho, wo = num_h // stride + 1, num_w // stride + 1
    hp, wp = h + 2 * pad, w + 2 * pad

    # Work channel-major so every im2col slice copies long contiguous runs.
    xpt = np.zeros((cin, n, hp, wp))
    xpt[:, :, pad : pad + h, pad : pad + w] = x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xpt, kh, kw, stride, ho, wo)
    del xpt
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = wmat @ cols
    out += bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            dxp = np.zeros((cin, n, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = dxp[:, :, pad : pad + h, pad : pad + w].transpose(1, 0, 2, 3)
        return gx, gk, gb

    return Tensor._from_op(out, (x, kernel, bias), backward, "conv2d")


def upsample_nearest(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if x.ndim != 4:
        raise ValueError("upsample_nearest expects N x C x H x W")
    if factor == 1:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "upsample")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward, "upsample")


# ---------------------------------------------------------------------------
# channel-wise distributions and reductions


def softmax_channel(logits) -> Tensor:
    """Softmax over axis 1, max-subtracted."""
    x = _as_tensor(logits)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(p, (x,), backward, "softmax_channel")


def log_softmax_channel(logits) -> Tensor:
    x = _as_tensor(logits)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax_channel")


def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def reduce(op: str, t, axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    t = _as_tensor(t)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    ax = _norm_axes(axes, t.ndim)
    count = 1
    for a in ax:
        count *= t.shape[a]
    out = t.data.sum(axis=ax, keepdims=keepdims)
    if op == "mean":
        out = out / count
    in_shape = t.shape
    kept_shape = tuple(1 if i in ax else s for i, s in enumerate(in_shape))
    factor = 1.0 if op == "sum" else 1.0 / count

    def backward(g):
        return (np.broadcast_to(g.reshape(kept_shape) * factor, in_shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64).reshape(out.shape or (1,)), (t,), backward, op)


def sum(t, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", t, axes, keepdims)


def mean(t, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", t, axes, keepdims)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[1] for t in ts]
    for t in ts[1:]:
        if t.shape[:1] != ts[0].shape[:1] or t.shape[2:] != ts[0].shape[2:]:
            raise ValueError("concat_channels: non-channel extents differ")
    out = np.concatenate([t.data for t in ts], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts)))

    return Tensor._from_op(out, tuple(ts), backward, "concat")


def take_channels(t, start: int, stop: int) -> Tensor:
    t = _as_tensor(t)
    if not 0 <= start < stop <= t.shape[1]:
        raise ValueError(f"channel slice [{start}:{stop}) out of range for {t.shape[1]} channels")
    shape = t.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(t.data[:, start:stop].copy(), (t,), backward, "take_channels")


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    old = t.shape
    return Tensor._from_op(t.data.reshape(shape).copy(), (t,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# gradient oracle


def _kink_signature(f, x: Tensor):
    global _KINK_PROBE
    prev = _KINK_PROBE
    _KINK_PROBE = []
    try:
        with no_grad():
            val = f(x).item()
        sig = _KINK_PROBE
    finally:
        _KINK_PROBE = prev
    return val, sig


def _same_branches(s1, s2) -> bool:
    if len(s1) != len(s2):
        return False
    return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(s1, s2))


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor.  Coordinates whose +/-h perturbation
    flips a relu/abs/clamp branch are skipped.  The denominator never drops
    below the difference quotient's rounding resolution, so gradients too
    small to resolve at step ``h`` are held to an absolute bound instead.  ``coords`` restricts the check
    to a subset of flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    probe = Tensor(x.data, requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad.reshape(-1) if probe.grad is not None else np.zeros(x.size)

    base = x.data.reshape(-1)
    _, sig0 = _kink_signature(f, Tensor(x.data))
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        fp, sp = _kink_signature(f, Tensor(plus.reshape(x.shape)))
        fm, sm = _kink_signature(f, Tensor(minus.reshape(x.shape)))
        if not (_same_branches(sig0, sp) and _same_branches(sig0, sm)):
            continue
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        # rounding in f limits a central difference to ~eps*|f|/h absolute
        # accuracy; gradients below 1e4 times that are compared absolutely
        floor = max(1e-8, 1e4 * np.finfo(np.float64).eps * max(np.abs(fp), np.abs(fm)) / h)
        err = np.abs(a - numeric) / max(floor, np.abs(a) + np.abs(numeric))
        worst = max(worst, float(err))
    return worst
