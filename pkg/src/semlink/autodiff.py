"""Dense float64 tensors with reverse-mode automatic differentiation.

Every network in this package runs on the small tape engine defined here.
Ops record themselves on the active :class:`Tape` (if any); ``Tape.backward``
replays the record in exact reverse order and accumulates gradients into
trainable leaves.  Outside a ``with Tape():`` block ops run untracked, which
is the inference fast path.

Broadcasting is deliberately restricted to scalar-with-tensor; anything else
goes through an explicit ``expand``.  All op outputs are checked finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "forward_op",
    "backward",
    "grad_check",
    "GradCheckReport",
    "OP_KINDS",
]

# Additive attention-mask sentinel.  Finite (keeps the all-finite tensor
# invariant) yet large enough that exp() underflows to exactly 0.0 after the
# softmax max-shift, so masked attention weights are exact zeros.
MASK_FILL = -1e9

_GELU_K0 = math.sqrt(2.0 / math.pi)
_GELU_K1 = 0.044715


def _c_contig(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to 1-d; preserve rank.
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class AutodiffError(ValueError):
    """Base error for tensor-engine misuse."""


class ShapeError(AutodiffError):
    """Input shapes do not conform to the op's rule."""


class NonFiniteError(AutodiffError):
    """An op produced NaN or infinity."""


class Tensor:
    """Dense row-major float64 array plus a lazily allocated gradient.

    ``trainable`` marks leaves whose gradient should survive ``backward``.
    ``node_id`` is assigned by the tape that first records the tensor.
    """

    __slots__ = ("data", "grad", "trainable", "node_id")

    def __init__(self, data, trainable: bool = False):
        arr = _c_contig(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created from non-finite data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Constant copy sharing no tape history."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    # Small amount of operator sugar; the library itself calls the module
    # functions directly.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    out_id: int
    backward_fn: object  # grad_out -> tuple of grads aligned with inputs


@dataclass
class Tape:
    """Ordered record of executed ops; backward walks it in exact reverse."""

    nodes: list[_Node] = field(default_factory=list)
    _registry: dict[int, Tensor] = field(default_factory=dict)
    _next_id: int = 0

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise AutodiffError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _register(self, t: Tensor) -> int:
        if t.node_id is None or t.node_id not in self._registry or self._registry[t.node_id] is not t:
            t.node_id = self._next_id
            self._next_id += 1
            self._registry[t.node_id] = t
        return t.node_id

    def record(self, kind: str, inputs: tuple[Tensor, ...], out: Tensor, backward_fn) -> None:
        for t in inputs:
            self._register(t)
        out_id = self._register(out)
        self.nodes.append(_Node(kind, inputs, out_id, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and populate grads of trainable leaves."""
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.node_id is None or self._registry.get(loss.node_id) is not loss:
            raise AutodiffError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g_out = grads.pop(node.out_id, None)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                acc = grads.get(t.node_id)
                grads[t.node_id] = g if acc is None else acc + g
        for tid, g in grads.items():
            t = self._registry[tid]
            if t.trainable:
                t.grad = g.copy() if t.grad is None else t.grad + g


_ACTIVE_TAPE: Tape | None = None


def backward(loss: Tensor) -> None:
    """Backward through the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise AutodiffError("no active tape")
    _ACTIVE_TAPE.backward(loss)


def _finish(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    # single-reduction finiteness guard: any nan/inf poisons the sum
    if not math.isfinite(float(np.sum(out_data))):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = _c_contig(np.asarray(out_data, dtype=np.float64))
    out.grad = None
    out.trainable = False
    out.node_id = None
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(kind, inputs, out, backward_fn)
    return out


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"op '{kind}': shapes {a.shape} and {b.shape} do not match "
                         "(only scalar-with-tensor broadcasting is allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to a scalar when the forward input was scalar."""
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)
    return _finish("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    def bwd(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)
    return _finish("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    def bwd(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)
    return _finish("mul", (a, b), ad * bd, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    def bwd(g):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)
    return _finish("div", (a, b), out, bwd)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _finish("square", (x,), xd * xd, lambda g: (2.0 * xd * g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _finish("sqrt", (x,), out, lambda g: (0.5 * g / out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    xd = x.data
    return _finish("log", (x,), out, lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish("exp", (x,), out, lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _finish("relu", (x,), np.maximum(xd, 0.0), lambda g: (g * (xd > 0.0),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(k0*(x + k1*x^3)))."""
    xd = x.data
    with np.errstate(over="ignore", invalid="ignore"):
        inner = _GELU_K0 * (xd + _GELU_K1 * xd ** 3)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)
    def bwd(g):
        with np.errstate(over="ignore", invalid="ignore"):
            dinner = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)
    return _finish("gelu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _finish("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# linear algebra / structure
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    def bwd(g):
        return g @ bd.T, ad.T @ g
    return _finish("matmul", (a, b), ad @ bd, bwd)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish("transpose", (x,), np.transpose(x.data, axes),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"op 'reshape': cannot reshape {old} to {shape}")
    return _finish("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(old),))


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast of x to `shape` (numpy broadcast rules)."""
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"op 'expand': cannot expand {old} to {shape}") from e
    pad = len(shape) - len(old)
    summed_axes = tuple(range(pad)) + tuple(
        pad + i for i, n in enumerate(old) if n == 1 and shape[pad + i] != 1
    )
    def bwd(g):
        gg = g.sum(axis=summed_axes) if summed_axes else g
        return (gg.reshape(old),)
    return _finish("expand", (x,), out.copy(), bwd)


def concat(tensors: list[Tensor] | tuple[Tensor, ...], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("op 'concat': needs at least one input")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )
    return _finish("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"op 'slice': range [{start}:{stop}] invalid for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)
    return _finish("slice", (x,), x.data[idx].copy(), bwd)


def gather(table: Tensor, indices) -> Tensor:
    """Row lookup: table (V, D), indices (n,) ints -> (n, D)."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"op 'gather': table must be 2-D and indices 1-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"op 'gather': index out of range for table {table.shape}")
    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)
    return _finish("gather", (table,), table.data[idx], bwd)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ShapeError(f"op 'masked_fill': mask {m.shape} does not match input {x.shape}")
    out = np.where(m, value, x.data)
    return _finish("masked_fill", (x,), out, lambda g: (g * ~m,))


def straight_through(x: Tensor, values: np.ndarray) -> Tensor:
    """Forward emits `values`; backward passes the gradient to x unchanged.

    Used for channel transit: the emitted values are x plus a constant offset
    computed outside the tape, so identity is the exact gradient.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape != x.shape:
        raise ShapeError(f"op 'straight_through': values {vals.shape} do not match input {x.shape}")
    return _finish("straight_through", (x,), vals.copy(), lambda g: (g,))


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select: cond ? a : b.  Bit-exact pass-through per branch."""
    c = np.asarray(cond, dtype=bool)
    if a.shape != b.shape or c.shape != a.shape:
        raise ShapeError(f"op 'where': shapes {c.shape}/{a.shape}/{b.shape} do not match")
    def bwd(g):
        return g * c, g * ~c
    return _finish("where", (a, b), np.where(c, a.data, b.data), bwd)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    if axis is None:
        n = xd.size
        def bwd(g):
            return (np.full_like(xd, float(g) / n),)
        return _finish("mean", (x,), np.mean(xd), bwd)
    n = xd.shape[axis]
    def bwd_ax(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)
    return _finish("mean", (x,), np.mean(xd, axis=axis), bwd_ax)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    if axis is None:
        def bwd(g):
            return (np.full_like(xd, float(g)),)
        return _finish("sum", (x,), np.sum(xd), bwd)
    def bwd_ax(g):
        return (np.repeat(np.expand_dims(g, axis), xd.shape[axis], axis=axis),)
    return _finish("sum", (x,), np.sum(xd, axis=axis), bwd_ax)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    def bwd(g):
        dot = np.sum(out * g, axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _finish("softmax", (x,), out, bwd)


def layernorm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; optional affine gain/bias of width D."""
    xd = x.data
    d = xd.shape[-1]
    if gain is not None and (gain.shape != (d,) or bias is None or bias.shape != (d,)):
        gshape = gain.shape if gain is not None else None
        raise ShapeError(f"op 'layernorm': affine params {gshape} do not match width {d}")
    with np.errstate(over="ignore"):
        mu = np.mean(xd, axis=-1, keepdims=True)
        xc = xd - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if gain is None:
        def bwd(g):
            dot1 = np.mean(g, axis=-1, keepdims=True)
            dot2 = np.mean(g * xhat, axis=-1, keepdims=True)
            return (inv * (g - dot1 - xhat * dot2),)
        return _finish("layernorm", (x,), xhat, bwd)
    gd, bd = gain.data, bias.data
    out = xhat * gd + bd
    def bwd_affine(g):
        ghat = g * gd
        dot1 = np.mean(ghat, axis=-1, keepdims=True)
        dot2 = np.mean(ghat * xhat, axis=-1, keepdims=True)
        gx = inv * (ghat - dot1 - xhat * dot2)
        axes = tuple(range(xd.ndim - 1))
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)
    return _finish("layernorm", (x, gain, bias), out, bwd_affine)


# ---------------------------------------------------------------------------
# convolutions ("same" zero padding, explicit stride)
# ---------------------------------------------------------------------------


def _same_pad(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)  # ceil
    total = max((out - 1) * stride + k - n, 0)
    left = total // 2
    return out, left, total - left


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """x (T, Cin), w (k, Cin, Cout) -> (ceil(T/stride), Cout)."""
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"op 'conv1d': shapes {x.shape} and {w.shape} do not conform")
    t, cin = x.shape
    k, _, cout = w.shape
    out_len, pl, pr = _same_pad(t, k, stride)
    xp = np.pad(x.data, ((pl, pr), (0, 0)))
    win = sliding_window_view(xp, k, axis=0)[::stride]    # (out_len, Cin, k)
    u = np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(out_len, k * cin)
    wm = w.data.reshape(k * cin, cout)
    def bwd(g):
        gu = (g @ wm.T).reshape(out_len, k, cin)
        gw = (u.T @ g).reshape(k, cin, cout)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + out_len * stride:stride] += gu[:, j, :]
        return gxp[pl:pl + t], gw
    return _finish("conv1d", (x, w), u @ wm, bwd)


def conv2d(x: Tensor, w: Tensor, stride: tuple[int, int] | int = 1) -> Tensor:
    """x (Cin, H, W) or (H, W) as one channel; w (kh, kw, Cin, Cout) -> (Cout, H', W')."""
    if isinstance(stride, int):
        stride = (stride, stride)
    squeeze_in = x.data.ndim == 2
    xd = x.data[None, :, :] if squeeze_in else x.data
    if xd.ndim != 3 or w.data.ndim != 4 or xd.shape[0] != w.shape[2]:
        raise ShapeError(f"op 'conv2d': shapes {x.shape} and {w.shape} do not conform")
    cin, h, wid = xd.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    ho, pt, pb = _same_pad(h, kh, sh)
    wo, pl, pr = _same_pad(wid, kw, sw)
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]  # (Cin, ho, wo, kh, kw)
    u = np.ascontiguousarray(win.transpose(1, 2, 3, 4, 0)).reshape(ho * wo, kh * kw * cin)
    wm = w.data.reshape(kh * kw * cin, cout)
    out = (u @ wm).T.reshape(cout, ho, wo)
    def bwd(g):
        gflat = g.reshape(cout, ho * wo).T
        gw = (u.T @ gflat).reshape(kh, kw, cin, cout)
        gu = (gflat @ wm.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + ho * sh:sh, j:j + wo * sw:sw] += gu[:, :, i, j, :].transpose(2, 0, 1)
        gx = gxp[:, pt:pt + h, pl:pl + wid]
        return (gx[0] if squeeze_in else gx), gw
    return _finish("conv2d", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# generic dispatch surface
# ---------------------------------------------------------------------------

_DISPATCH = {
    "matmul": lambda ins, at: matmul(*ins),
    "add": lambda ins, at: add(*ins),
    "sub": lambda ins, at: sub(*ins),
    "mul": lambda ins, at: mul(*ins),
    "div": lambda ins, at: div(*ins),
    "conv1d": lambda ins, at: conv1d(ins[0], ins[1], stride=at.get("stride", 1)),
    "conv2d": lambda ins, at: conv2d(ins[0], ins[1], stride=at.get("stride", 1)),
    "layernorm": lambda ins, at: layernorm(*ins, eps=at.get("eps", 1e-5)),
    "softmax": lambda ins, at: softmax(ins[0], axis=at.get("axis", -1)),
    "log": lambda ins, at: log(*ins),
    "exp": lambda ins, at: exp(*ins),
    "sqrt": lambda ins, at: sqrt(*ins),
    "gelu": lambda ins, at: gelu(*ins),
    "relu": lambda ins, at: relu(*ins),
    "sigmoid": lambda ins, at: sigmoid(*ins),
    "gather": lambda ins, at: gather(ins[0], at["indices"]),
    "concat": lambda ins, at: concat(ins, axis=at.get("axis", 0)),
    "slice": lambda ins, at: slice_axis(ins[0], at["axis"], at["start"], at["stop"]),
    "transpose": lambda ins, at: transpose(ins[0], axes=at.get("axes")),
    "mean": lambda ins, at: mean(ins[0], axis=at.get("axis")),
    "sum": lambda ins, at: sum_(ins[0], axis=at.get("axis")),
    "square": lambda ins, at: square(*ins),
    "masked_fill": lambda ins, at: masked_fill(ins[0], at["mask"], at["value"]),
    "expand": lambda ins, at: expand(ins[0], at["shape"]),
    "reshape": lambda ins, at: reshape(ins[0], at["shape"]),
    "where": lambda ins, at: where(at["cond"], ins[0], ins[1]),
    "straight_through": lambda ins, at: straight_through(ins[0], at["values"]),
}

OP_KINDS = tuple(sorted(_DISPATCH))


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch an op by kind name; inputs is a sequence of Tensors."""
    if kind not in _DISPATCH:
        raise AutodiffError(f"unknown op kind '{kind}' (valid: {', '.join(OP_KINDS)})")
    return _DISPATCH[kind](tuple(inputs), attrs or {})


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_coord: tuple[int, ...] | None
    n_coords: int
    failures: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
                f"over {self.n_coords} coords (worst at {self.worst_coord})")


def grad_check(fn, point: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               ) -> GradCheckReport:
    """Compare tape gradient of scalar-valued fn against central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8); pass iff
    the max over checked coordinates is <= tol.  When the point has more
    coordinates than max_coords, a random subset is checked.
    """
    x = Tensor(point.data.copy(), trainable=True)
    with Tape() as tape:
        y = fn(x)
        if y.data.shape != ():
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    n = flat.size
    coords = np.arange(n)
    if max_coords is not None and n > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)

    max_err = 0.0
    worst = None
    failures: list[str] = []
    an_flat = analytic.reshape(-1)
    for c in coords:
        base = flat[c]
        probe = Tensor(x.data.copy())
        pf = probe.data.reshape(-1)
        pf[c] = base + eps
        try:
            f_plus = float(fn(probe).data)
            pf[c] = base - eps
            f_minus = float(fn(probe).data)
        except NonFiniteError:
            coord = np.unravel_index(c, x.data.shape)
            failures.append(f"non-finite value probing coordinate {coord}")
            continue
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            coord = np.unravel_index(c, x.data.shape)
            failures.append(f"non-finite value probing coordinate {coord}")
            continue
        fd = (f_plus - f_minus) / (2.0 * eps)
        an = an_flat[c]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        if rel > max_err:
            max_err = rel
            worst = tuple(np.unravel_index(c, x.data.shape))
    passed = not failures and max_err <= tol
    return GradCheckReport(passed, max_err, worst, len(coords), failures)
