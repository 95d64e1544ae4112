"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation is a registered kernel: a forward function on
numpy arrays that returns ``(output, ctx)`` and a backward function mapping
``(ctx, grad_output)`` to one gradient per input.  ``Tensor`` methods are thin
wrappers around :func:`apply`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
NORM_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class ZeroNormError(ValueError):
    pass


_state = {"grad_enabled": True, "norm_guard": False}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def norm_guard(enabled: bool = True):
    """Clamp zero norms to ``NORM_CLAMP`` instead of raising (training mode)."""
    prev = _state["norm_guard"]
    _state["norm_guard"] = enabled
    try:
        yield
    finally:
        _state["norm_guard"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@dataclass(frozen=True)
class Kernel:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[Any, np.ndarray], tuple[np.ndarray | None, ...]]


KERNELS: dict[str, Kernel] = {}


def register(name: str):
    def deco(cls):
        KERNELS[name] = Kernel(name, cls.forward, cls.backward)
        return cls

    return deco


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx: Any = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if self.op is None and not self.requires_grad:
            raise GraphError("backward called on a tensor with no recorded forward graph")
        if grad is None:
            if self.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        ComputeGraph.from_output(self).backward(np.asarray(grad, dtype=DTYPE))

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __neg__(self):
        return apply("neg", self)

    def __getitem__(self, index):
        return apply("getitem", self, index=index)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=axes)

    @property
    def T(self):
        return self.transpose()

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def exp(self):
        return apply("exp", self)

    def log(self):
        return apply("log", self)

    def sqrt(self):
        return apply("sqrt", self)

    def relu(self):
        return apply("relu", self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(name: str, *inputs, **attrs) -> Tensor:
    """Run kernel ``name`` on ``inputs`` and record it in the graph."""
    kernel = KERNELS[name]
    tensors = tuple(as_tensor(x) for x in inputs)
    with np.errstate(all="ignore"):
        out, ctx = kernel.forward(*(t.data for t in tensors), **attrs)
    out = np.asarray(out, dtype=DTYPE)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output from kernel '{name}'")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.op = None
    result.parents = ()
    result.ctx = None
    result.requires_grad = False
    if grad_enabled() and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result.op = name
        result.parents = tensors
        result.ctx = ctx
    return result


@dataclass
class ComputeGraph:
    """Topologically ordered op records reachable from one output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, root: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        if seed.shape != root.shape:
            raise ShapeError(f"seed grad shape {seed.shape} != output shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = KERNELS[node.op].backward(node.ctx, g)
            for parent, pg in zip(node.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"kernel '{node.op}' produced grad {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


# -- helpers -------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise binary ----------------------------------------------------------


@register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("div")
class _Div:
    @staticmethod
    def forward(a, b):
        _check_broadcast(a, b)
        return a / b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


# -- elementwise unary -----------------------------------------------------------


@register("neg")
class _Neg:
    @staticmethod
    def forward(a):
        return -a, None

    @staticmethod
    def backward(ctx, g):
        return (-g,)


@register("exp")
class _Exp:
    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


@register("log")
class _Log:
    @staticmethod
    def forward(a):
        return np.log(a), a

    @staticmethod
    def backward(ctx, g):
        return (g / ctx,)


@register("sqrt")
class _Sqrt:
    @staticmethod
    def forward(a):
        out = np.sqrt(a)
        return out, out

    @staticmethod
    def backward(ctx, g):
        return (g / (2.0 * ctx),)


@register("relu")
class _Relu:
    @staticmethod
    def forward(a):
        return np.maximum(a, 0.0), a > 0

    @staticmethod
    def backward(ctx, g):
        return (g * ctx,)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@register("gelu")
class _Gelu:
    """Exact (erf) GELU."""

    @staticmethod
    def forward(a):
        cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
        return a * cdf, (a, cdf)

    @staticmethod
    def backward(ctx, g):
        a, cdf = ctx
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
        return (g * (cdf + a * pdf),)


@register("softplus")
class _Softplus:
    @staticmethod
    def forward(a):
        return np.logaddexp(0.0, a), a

    @staticmethod
    def backward(ctx, g):
        # d/dx log(1+e^x) = sigmoid(x)
        return (g * 0.5 * (1.0 + np.tanh(0.5 * ctx)),)


# -- reductions and shape ----------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        return a.sum(axis=axis, keepdims=keepdims), (a.shape, _norm_axis(axis, a.ndim), keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axes, keepdims = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


@register("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        return a.mean(axis=axis, keepdims=keepdims), (a.shape, axes, keepdims, count)

    @staticmethod
    def backward(ctx, g):
        shape, axes, keepdims, count = ctx
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape):
        try:
            out = a.reshape(tuple(shape))
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
        return out, a.shape

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx),)


@register("transpose")
class _Transpose:
    @staticmethod
    def forward(a, axes):
        axes = tuple(axes)
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"invalid axes {axes} for ndim {a.ndim}")
        return np.transpose(a, axes), axes

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx)),)


@register("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=0):
        ref = arrays[0]
        ax = axis % ref.ndim
        for arr in arrays[1:]:
            if arr.ndim != ref.ndim or any(arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise ShapeError(f"concat shape mismatch {ref.shape} vs {arr.shape} on axis {axis}")
        sizes = [arr.shape[ax] for arr in arrays]
        return np.concatenate(arrays, axis=ax), (ax, np.cumsum(sizes)[:-1])

    @staticmethod
    def backward(ctx, g):
        ax, splits = ctx
        return tuple(np.split(g, splits, axis=ax))


@register("getitem")
class _GetItem:
    @staticmethod
    def forward(a, index):
        return a[index], (a.shape, index)

    @staticmethod
    def backward(ctx, g):
        shape, index = ctx
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)


# -- linear algebra --------------------------------------------------------------


@register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs operands with ndim >= 2")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as exc:
            raise ShapeError(f"matmul batch dims {a.shape} vs {b.shape}") from exc
        return np.matmul(a, b), (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


# -- normalisations over the last axis ------------------------------------------------


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(a):
        z = np.exp(a - a.max(axis=-1, keepdims=True))
        out = z / z.sum(axis=-1, keepdims=True)
        return out, out

    @staticmethod
    def backward(ctx, g):
        y = ctx
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


@register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(a):
        shifted = a - a.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return out, out

    @staticmethod
    def backward(ctx, g):
        p = np.exp(ctx)
        return (g - p * g.sum(axis=-1, keepdims=True),)


@register("l2_normalize")
class _L2Normalize:
    @staticmethod
    def forward(a):
        norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        clamped = norm < NORM_CLAMP
        if np.any(clamped):
            if not _state["norm_guard"]:
                raise ZeroNormError("zero-norm vector in l2_normalize (enable norm_guard to clamp)")
            norm = np.where(clamped, NORM_CLAMP, norm)
        out = a / norm
        return out, (out, norm, clamped)

    @staticmethod
    def backward(ctx, g):
        y, norm, clamped = ctx
        proj = np.where(clamped, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / norm,)


@register("layer_norm")
class _LayerNorm:
    @staticmethod
    def forward(x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv, gamma, x.shape, gamma.shape, beta.shape)

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma, xshape, gshape, bshape = ctx
        n = xhat.shape[-1]
        gx_hat = g * gamma
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gshape), _unbroadcast(g, bshape)


# -- image ops ------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # x: (B, C, Hp, Wp) -> (B, Ho, Wo, C*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * kh * kw)


@register("conv2d")
class _Conv2d:
    """Stride-1 2-D convolution; x (B,Cin,H,W), w (Cout,Cin,kh,kw), b (Cout,)."""

    @staticmethod
    def forward(x, w, b, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d shape mismatch x={x.shape} w={w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d bias shape {b.shape} for {w.shape[0]} channels")
        p = padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cout, cin, kh, kw = w.shape
        cols = _im2col(xp, kh, kw)
        out = cols @ w.reshape(cout, -1).T + b
        return out.transpose(0, 3, 1, 2), (cols, w, xp.shape, p)

    @staticmethod
    def backward(ctx, g):
        cols, w, xp_shape, p = ctx
        cout, cin, kh, kw = w.shape
        g_nhwc = g.transpose(0, 2, 3, 1)
        gw = np.tensordot(g_nhwc, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
        gb = g_nhwc.sum(axis=(0, 1, 2))
        gcols = (g_nhwc @ w.reshape(cout, -1)).reshape(*g_nhwc.shape[:3], cin, kh, kw)
        gxp = np.zeros(xp_shape, dtype=DTYPE)
        ho, wo = g_nhwc.shape[1:3]
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else gxp
        return gx, gw, gb


@register("upsample_nearest")
class _UpsampleNearest:
    """Integer-factor nearest upsampling of the last two axes."""

    @staticmethod
    def forward(a, factor=2):
        return a.repeat(factor, axis=-2).repeat(factor, axis=-1), factor

    @staticmethod
    def backward(ctx, g):
        f = ctx
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // f, f, w // f, f).sum(axis=(-3, -1)),)


# -- functional API ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


def exp(a) -> Tensor:
    return apply("exp", a)


def log(a) -> Tensor:
    return apply("log", a)


def relu(a) -> Tensor:
    return apply("relu", a)


def gelu(a) -> Tensor:
    return apply("gelu", a)


def softplus(a) -> Tensor:
    return apply("softplus", a)


def softmax(a) -> Tensor:
    return apply("softmax", a)


def log_softmax(a) -> Tensor:
    return apply("log_softmax", a)


def l2_normalize(a) -> Tensor:
    return apply("l2_normalize", a)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, gamma, beta, eps=eps)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def conv2d(x, w, b, padding: int = 0) -> Tensor:
    return apply("conv2d", x, w, b, padding=padding)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    return apply("upsample_nearest", x, factor=factor)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
