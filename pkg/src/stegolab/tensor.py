"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package (codec training, noise
predictor training, latent optimization) goes through :func:`apply_primitive`.
Images and feature maps use NHWC layout.

Typical use::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(tape, loss)
    grads[x]  # -> array([2., 2., 2.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "ShapeError",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "gradient_check",
    "AdamState",
    "adam_step",
    "Adam",
    "constant",
]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""


class Tensor:
    """A dense float64 array plus a flag saying whether gradients are wanted."""

    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.array(value, dtype=np.float64, copy=True) if not isinstance(
            value, np.ndarray) or value.dtype != np.float64 else value
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_as_tensor(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_primitive("scale", [self], {"factor": float(other)})
        return apply_primitive("mul", [self, _as_tensor(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return apply_primitive("scale", [self], {"factor": 1.0 / float(other)})

    def __neg__(self):
        return apply_primitive("scale", [self], {"factor": -1.0})

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _as_tensor(other)])

    def sum(self, axis=None, keepdims: bool = False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _as_tensor(obj) -> Tensor:
    return obj if isinstance(obj, Tensor) else Tensor(np.asarray(obj, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Mapping[str, Any]
    saved: Any


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; only one tape is active at a time per nesting
    level, and inner tapes shadow outer ones until they exit.
    """

    nodes: List[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)


_TAPE_STACK: List[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    forward: Callable[[Sequence[np.ndarray], Mapping[str, Any]], Tuple[np.ndarray, Any]]
    backward: Callable[[np.ndarray, Any, Sequence[np.ndarray], Mapping[str, Any]], Tuple]
    arity: Optional[int]


PRIMITIVES: Dict[str, Primitive] = {}


def _register(kind: str, arity: Optional[int]):
    def wrap(cls):
        PRIMITIVES[kind] = Primitive(cls.forward, cls.backward, arity)
        return cls
    return wrap


def _mismatch(kind: str, *shapes) -> ShapeError:
    shown = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{kind}: incompatible input shapes {shown}")


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _mismatch(kind, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(xs, attrs):
        _broadcast_shape("add", *xs)
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


@_register("sub", 2)
class _Sub:
    @staticmethod
    def forward(xs, attrs):
        _broadcast_shape("sub", *xs)
        return xs[0] - xs[1], None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


@_register("mul", 2)
class _Mul:
    @staticmethod
    def forward(xs, attrs):
        _broadcast_shape("mul", *xs)
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return _unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)


@_register("scale", 1)
class _Scale:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] * attrs["factor"], None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g * attrs["factor"],)


@_register("matmul", 2)
class _Matmul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _mismatch("matmul", a.shape, b.shape)
        return a @ b, None

    @staticmethod
    def backward(g, saved, xs, attrs):
        a, b = xs
        return g @ b.T, a.T @ g


def _im2col(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    n, h, w, c = x.shape
    pad = dilation * (k // 2)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, h, w, k * k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i * dilation:i * dilation + h,
                                             j * dilation:j * dilation + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(cols: np.ndarray, shape, k: int, dilation: int) -> np.ndarray:
    n, h, w, c = shape
    pad = dilation * (k // 2)
    cols = cols.reshape(n, h, w, k * k, c)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            xp[:, i * dilation:i * dilation + h, j * dilation:j * dilation + w, :] += \
                cols[:, :, :, i * k + j, :]
    return xp[:, pad:pad + h, pad:pad + w, :]


def _shift_geometry(x_shape, k: int, dilation: int):
    n, h, w, _ = x_shape
    pad = dilation * (k // 2)
    hp, wp = h + 2 * pad, w + 2 * pad
    max_off = (k - 1) * dilation * (wp + 1)
    offsets = [i * dilation * wp + j * dilation for i in range(k) for j in range(k)]
    return pad, hp, wp, n * hp * wp - max_off, offsets


def _conv_shift_forward(x, w, dilation):
    # Taps are contiguous row windows of the flattened padded input; outputs
    # are computed on the padded grid and cropped to the top-left h x w block.
    n, h, wd, c = x.shape
    k, cout = w.shape[0], w.shape[3]
    pad, hp, wp, length, offsets = _shift_geometry(x.shape, k, dilation)
    xf = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))).reshape(-1, c)
    out = np.zeros((n * hp * wp, cout))
    acc = out[:length]
    taps = w.reshape(k * k, c, cout)
    for t, off in enumerate(offsets):
        acc += xf[off:off + length] @ taps[t]
    return out.reshape(n, hp, wp, cout)[:, :h, :wd]


def _conv_shift_backward(g, x, w, dilation, need_x, need_w):
    n, h, wd, c = x.shape
    k, cout = w.shape[0], w.shape[3]
    pad, hp, wp, length, offsets = _shift_geometry(x.shape, k, dilation)
    gp = np.zeros((n, hp, wp, cout))
    gp[:, :h, :wd] = g
    gf = gp.reshape(-1, cout)[:length]
    taps = w.reshape(k * k, c, cout)
    gw = gx = None
    if need_w:
        xf = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))).reshape(-1, c)
        gw = np.stack([xf[off:off + length].T @ gf for off in offsets]).reshape(w.shape)
    if need_x:
        gxf = np.zeros((n * hp * wp, c))
        for t, off in enumerate(offsets):
            gxf[off:off + length] += gf @ taps[t].T
        gx = gxf.reshape(n, hp, wp, c)[:, pad:pad + h, pad:pad + wd]
    return gx, gw


_IM2COL_MAX_CIN = 4


@_register("conv2d", None)
class _Conv2d:
    """Stride-1 zero-padded 'same' convolution, NHWC input, (k, k, Cin, Cout) kernel.

    k must be odd (3 everywhere except the fixed 5x5 steganalysis front-end).
    """

    @staticmethod
    def forward(xs, attrs):
        if len(xs) not in (2, 3):
            raise ShapeError(f"conv2d: expects (x, kernel[, bias]), got {len(xs)} inputs")
        x, w = xs[0], xs[1]
        if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0 \
                or w.shape[2] != x.shape[3]:
            raise _mismatch("conv2d", x.shape, w.shape)
        if len(xs) == 3 and xs[2].shape != (w.shape[3],):
            raise _mismatch("conv2d", x.shape, w.shape, xs[2].shape)
        k = w.shape[0]
        d = int(attrs.get("dilation", 1))
        n, h, wd, c = x.shape
        if c <= _IM2COL_MAX_CIN:
            out = (_im2col(x, k, d) @ w.reshape(-1, w.shape[3])).reshape(n, h, wd, w.shape[3])
        else:
            out = _conv_shift_forward(x, w, d)
        if len(xs) == 3:
            out = out + xs[2]
        return out, None

    @staticmethod
    def backward(g, saved, xs, attrs):
        x, w = xs[0], xs[1]
        k = w.shape[0]
        d = int(attrs.get("dilation", 1))
        needs = attrs.get("_needs", (True,) * len(xs))
        if x.shape[3] <= _IM2COL_MAX_CIN:
            g2 = g.reshape(-1, w.shape[3])
            gw = (_im2col(x, k, d).T @ g2).reshape(w.shape) if needs[1] else None
            gx = _col2im(g2 @ w.reshape(-1, w.shape[3]).T, x.shape, k, d) if needs[0] else None
        else:
            gx, gw = _conv_shift_backward(g, x, w, d, needs[0], needs[1])
        if len(xs) == 3:
            gb = g.reshape(-1, w.shape[3]).sum(axis=0) if needs[2] else None
            return gx, gw, gb
        return gx, gw


@_register("relu", 1)
class _Relu:
    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0.0), None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g * (xs[0] > 0),)


@_register("leaky_relu", 1)
class _LeakyRelu:
    @staticmethod
    def forward(xs, attrs):
        slope = attrs.get("slope", 0.2)
        return np.where(xs[0] > 0, xs[0], slope * xs[0]), None

    @staticmethod
    def backward(g, saved, xs, attrs):
        slope = attrs.get("slope", 0.2)
        return (g * np.where(xs[0] > 0, 1.0, slope),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_register("sigmoid", 1)
class _Sigmoid:
    @staticmethod
    def forward(xs, attrs):
        y = _sigmoid(xs[0])
        return y, y

    @staticmethod
    def backward(g, y, xs, attrs):
        return (g * y * (1.0 - y),)


@_register("tanh", 1)
class _Tanh:
    @staticmethod
    def forward(xs, attrs):
        y = np.tanh(xs[0])
        return y, y

    @staticmethod
    def backward(g, y, xs, attrs):
        return (g * (1.0 - y * y),)


@_register("abs", 1)
class _Abs:
    @staticmethod
    def forward(xs, attrs):
        return np.abs(xs[0]), None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g * np.sign(xs[0]),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_register("sum", 1)
class _Sum:
    @staticmethod
    def forward(xs, attrs):
        axis = _norm_axis(attrs.get("axis"), xs[0].ndim)
        return np.sum(xs[0], axis=axis, keepdims=attrs.get("keepdims", False)), axis

    @staticmethod
    def backward(g, axis, xs, attrs):
        shape = tuple(1 if i in axis else n for i, n in enumerate(xs[0].shape))
        return (np.broadcast_to(np.reshape(g, shape), xs[0].shape).copy(),)


@_register("mean", 1)
class _Mean:
    @staticmethod
    def forward(xs, attrs):
        axis = _norm_axis(attrs.get("axis"), xs[0].ndim)
        count = int(np.prod([xs[0].shape[a] for a in axis])) if axis else 1
        return np.mean(xs[0], axis=axis, keepdims=attrs.get("keepdims", False)), (axis, count)

    @staticmethod
    def backward(g, saved, xs, attrs):
        axis, count = saved
        shape = tuple(1 if i in axis else n for i, n in enumerate(xs[0].shape))
        return (np.broadcast_to(np.reshape(g, shape), xs[0].shape) / count,)


@_register("concat", None)
class _Concat:
    @staticmethod
    def forward(xs, attrs):
        axis = attrs.get("axis", -1)
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError:
            raise _mismatch("concat", *(x.shape for x in xs)) from None
        return out, axis

    @staticmethod
    def backward(g, axis, xs, attrs):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))


@_register("slice", 1)
class _Slice:
    """Contiguous slice along one axis: attrs axis, start, stop."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        axis = attrs["axis"] % x.ndim
        index = [slice(None)] * x.ndim
        index[axis] = slice(attrs["start"], attrs["stop"])
        return x[tuple(index)], tuple(index)

    @staticmethod
    def backward(g, index, xs, attrs):
        out = np.zeros_like(xs[0])
        out[index] = g
        return (out,)


@_register("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(xs, attrs):
        try:
            return xs[0].reshape(attrs["shape"]), None
        except ValueError:
            raise _mismatch("reshape", xs[0].shape, attrs["shape"]) from None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g.reshape(xs[0].shape),)


@_register("upsample2x", 1)
class _Upsample2x:
    """Nearest-neighbour 2x spatial upsampling of an NHWC tensor."""

    @staticmethod
    def forward(xs, attrs):
        if xs[0].ndim != 4:
            raise _mismatch("upsample2x", xs[0].shape)
        return xs[0].repeat(2, axis=1).repeat(2, axis=2), None

    @staticmethod
    def backward(g, saved, xs, attrs):
        n, h, w, c = xs[0].shape
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)


@_register("avgpool2", 1)
class _AvgPool2:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
            raise _mismatch("avgpool2", x.shape)
        n, h, w, c = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)), None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g.repeat(2, axis=1).repeat(2, axis=2) / 4.0,)


@_register("clamp01_ste", 1)
class _Clamp01Ste:
    """Clamp to [0, 1]; the backward pass is the identity."""

    @staticmethod
    def forward(xs, attrs):
        return np.clip(xs[0], 0.0, 1.0), None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g,)


@_register("ste", 1)
class _StraightThrough:
    """Arbitrary shape-preserving forward map (attrs['fn']) with identity backward."""

    @staticmethod
    def forward(xs, attrs):
        out = np.asarray(attrs["fn"](xs[0]), dtype=np.float64)
        if out.shape != xs[0].shape:
            raise _mismatch("ste", xs[0].shape, out.shape)
        return out, None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return (g,)


@_register("bce_with_logits", 2)
class _BceWithLogits:
    """Elementwise -[t log sigmoid(z) + (1-t) log(1-sigmoid(z))], stable form."""

    @staticmethod
    def forward(xs, attrs):
        z, t = xs
        if z.shape != t.shape:
            raise _mismatch("bce_with_logits", z.shape, t.shape)
        out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        return out, None

    @staticmethod
    def backward(g, saved, xs, attrs):
        z, t = xs
        p = _sigmoid(z)
        # log-term derivative w.r.t. the target is -z
        return g * (p - t), g * (-z)


@_register("mse", 2)
class _Mse:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.shape != b.shape:
            raise _mismatch("mse", a.shape, b.shape)
        d = a - b
        return np.asarray(np.mean(d * d)), d

    @staticmethod
    def backward(g, d, xs, attrs):
        ga = g * 2.0 * d / d.size
        return ga, -ga


@_register("gaussian_sample", 0)
class _GaussianSample:
    """Seeded N(0, std^2) draw; a constant under differentiation."""

    @staticmethod
    def forward(xs, attrs):
        rng = np.random.default_rng(attrs["seed"])
        std = float(attrs.get("std", 1.0))
        return rng.standard_normal(tuple(attrs["shape"])) * std, None

    @staticmethod
    def backward(g, saved, xs, attrs):
        return ()


def apply_primitive(kind: str, inputs: Sequence[Tensor] = (), attrs: Optional[Mapping[str, Any]] = None
                    ) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the active tape if needed."""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise KeyError(f"unknown primitive kind {kind!r}")
    attrs = dict(attrs or {})
    inputs = tuple(_as_tensor(t) for t in inputs)
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ShapeError(f"{kind}: expects {prim.arity} inputs, got {len(inputs)}")
    value, saved = prim.forward([t.value for t in inputs], attrs)
    value = np.asarray(value, dtype=np.float64)
    tape = _active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    if needs_grad:
        attrs["_needs"] = tuple(t.requires_grad for t in inputs)
        tape.record(Node(kind, inputs, out, attrs, saved))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns a mapping from every grad-requiring leaf (plus anything listed in
    ``wrt``) to its gradient array. Leaves the loss does not depend on map to
    zeros.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: Dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for t in wrt or ():
        leaves[id(t)] = t

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        in_grads = prim.backward(g, node.saved, [t.value for t in node.inputs], node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out: Dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if key == id(loss):
            g = np.ones_like(loss.value)
        out[t] = np.zeros_like(t.value) if g is None else np.asarray(g).reshape(t.shape)
    return out


def gradient_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-6,
                   coords: Optional[Sequence[int]] = None) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    ``fn`` maps a Tensor to a scalar Tensor. ``coords`` restricts the check to a
    subset of flat indices (all by default).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.value if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if not np.all(np.isfinite(y.value)):
        raise ValueError("gradient_check: function value is not finite")
    g_ad = backward(tape, y, wrt=[x])[x].reshape(-1)

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        fp = fn(Tensor(plus.reshape(base.shape))).value
        fm = fn(Tensor(minus.reshape(base.shape))).value
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("gradient_check: function value is not finite")
        g_fd = float(fp - fm) / (2.0 * step)
        err = abs(g_ad[i] - g_fd) / max(1e-12, abs(g_ad[i]) + abs(g_fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
              ) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not modified."""
    if lr <= 0:
        raise ValueError(f"adam_step: learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("adam_step: params, grads and state are not aligned")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape} vs {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


class Adam:
    """Stateful wrapper that updates a list of Tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.value for p in self.params])

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        if self.lr == 0:
            return
        values = [p.value for p in self.params]
        g = [grads.get(p, np.zeros_like(p.value)) for p in self.params]
        new, self.state = adam_step(values, g, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for p, v in zip(self.params, new):
            p.value = v
