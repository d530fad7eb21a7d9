"""Dense NCHW tensors with tape-based reverse-mode autodiff.

Every op builds a node holding its parents and a closure that maps the
upstream gradient to per-parent gradients.  ``Tensor.backward`` walks the
graph in reverse topological order and accumulates gradients on leaf
tensors that have ``requires_grad`` set.

Only first-order derivatives are supported.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from .errors import FormatError, GeometryError, ProbeError, ShapeError

MAX_RANK = 4

_default_dtype = np.float32
_debug = False
_grad_enabled = True
# op names whose backward is deliberately corrupted (fault-injection hook)
_grad_faults: set[str] = set()


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``np.float64`` for gradient checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Forward passes inside this block record no graph."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def inject_grad_fault(*op_names: str):
    """Scale the backward pass of the named ops by 1.5. Test hook only."""
    _grad_faults.update(op_names)
    try:
        yield
    finally:
        _grad_faults.difference_update(op_names)


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(_default_dtype)
    return arr


class Tensor:
    """An n-d array (rank <= 4) that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make numpy defer to Tensor operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = np.require(arr, requirements="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction helpers ------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        if _debug and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite output from op '{op}'")
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            if node.op in _grad_faults:
                parent_grads = tuple(None if pg is None else pg * 1.5 for pg in parent_grads)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise RuntimeError("cycle detected in autodiff graph")
            state[id(node)] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            child = node._parents[i]
            if state.get(id(child)) != 2:
                if state.get(id(child)) == 1:
                    raise RuntimeError("cycle detected in autodiff graph")
                stack.append((child, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None:
        dtype = _default_dtype
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc
    return a, b


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._make(out, (a,), backward, "pow")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """``add`` or ``mul`` with equal shapes, or ``b`` of shape NC11 against NCHW ``a``."""
    if a.shape != b.shape:
        ok = (
            a.ndim == 4 and b.ndim == 4
            and b.shape[0] == a.shape[0] and b.shape[1] == a.shape[1]
            and b.shape[2:] == (1, 1)
        )
        if not ok:
            raise ShapeError(f"elementwise {op}: incompatible shapes {a.shape} and {b.shape}")
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- unary -------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def atan(x: Tensor) -> Tensor:
    return Tensor._make(np.arctan(x.data), (x,), lambda g: (g / (1.0 + x.data * x.data),), "atan")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # relu'(0) = 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s + out * (1.0 - s)),)

    return Tensor._make(out, (x,), backward, "silu")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "silu": silu}


def activate(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# -- reductions and shape ops -------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = np.require(x.data[index], requirements="C")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (x,), backward, "getitem")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    out = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return Tensor._make(out, xs, backward, "stack")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} does not match {ref} outside channels")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return Tensor._make(out, xs, backward, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, NCHW -> NC11."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise GeometryError("global_avg_pool on empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return Tensor._make(out, (x,), backward, "global_avg_pool")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W + b`` for x of shape N x F and W of shape F x G."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense: bias {bias.shape} does not match {weight.shape[1]} outputs")
        out = add(out, bias)
    return out


# -- convolution --------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding, dilation):
    if len(x_shape) != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x_shape}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv2d expects (Cout,Cin,k,k) weight, got {w_shape}")
    cout, cin, kh, kw = w_shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if x_shape[1] != cin:
        raise ShapeError(f"conv2d: input has {x_shape[1]} channels, weight expects {cin}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError(f"invalid stride={stride} dilation={dilation} padding={padding}")
    ho = conv_output_size(x_shape[2], kh, stride, padding, dilation)
    wo = conv_output_size(x_shape[3], kh, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise GeometryError(
            f"conv2d: effective kernel {dilation * (kh - 1) + 1} exceeds padded input "
            f"{x_shape[2] + 2 * padding}x{x_shape[3] + 2 * padding}"
        )
    return kh, ho, wo


def _pad(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _im2col_view(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, k, k, Ho, Wo) strided view, no copy
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_direct(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                  stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Reference convolution by shift-and-accumulate over kernel taps (no autodiff)."""
    k, ho, wo = _check_conv(x.shape, weight.shape, stride, padding, dilation)
    xp = _pad(x, padding)
    n = x.shape[0]
    out = np.zeros((n, weight.shape[0], ho, wo), dtype=np.result_type(x, weight))
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            patch = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
            out += np.einsum("oc,nchw->nohw", weight[:, :, i, j], patch)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and dilation.

    ``out[n, o, i, j] = sum_{c,a,b} w[o, c, a, b] * x[n, c, i*s + d*a, j*s + d*b] + bias[o]``
    on the zero-padded input. Differentiable w.r.t. ``x``, ``weight`` and ``bias``.
    """
    k, ho, wo = _check_conv(x.shape, weight.shape, stride, padding, dilation)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} output channels")
    w = weight.data
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data
        out = np.tensordot(w[:, :, 0, 0], x.data, axes=(1, 1)).transpose(1, 0, 2, 3)
    else:
        xp = _pad(x.data, padding)
        cols = _im2col_view(xp, k, stride, dilation, ho, wo)
        out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            if pointwise:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if pointwise:
                gx = np.tensordot(w[:, :, 0, 0], g, axes=(0, 1)).transpose(1, 0, 2, 3)
            else:
                gcols = np.tensordot(w, g, axes=(0, 1))  # (C, k, k, N, Ho, Wo)
                n, c, h, wd = x.shape
                gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        r0, c0 = i * dilation, j * dilation
                        gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                            c0:c0 + stride * (wo - 1) + 1:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        grads = (gx, gw)
        return grads + (gb,) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max over k x k windows; padding never wins the max.

    The gradient goes to the first maximal element of each window in row-major
    scan order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW, got {x.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise GeometryError(f"invalid maxpool k={k} stride={stride} padding={padding}")
    if padding >= k:
        raise GeometryError(f"maxpool padding {padding} must be smaller than window {k}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding, 1)
    wo = conv_output_size(w, k, stride, padding, 1)
    if ho < 1 or wo < 1:
        raise GeometryError(f"maxpool window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = _pad(x.data, padding, value=-np.inf)
    hp, wp = xp.shape[2:]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        plane = (np.arange(n * c).reshape(n, c, 1, 1)) * (hp * wp)
        flat = (plane + rows * wp + cols).ravel()
        gxp = np.bincount(flat, weights=g.ravel(), minlength=n * c * hp * wp)
        gxp = gxp.reshape(n, c, hp, wp).astype(x.dtype)
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(gxp),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


# -- losses --------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    t = _as_array(targets).astype(logits.dtype)
    z = logits.data
    if t.shape != z.shape:
        raise ShapeError(f"bce targets {t.shape} do not match logits {z.shape}")
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (_sigmoid_np(z) - t),)

    return Tensor._make(out, (logits,), backward, "bce_with_logits")


# -- gradient checking -----------------------------------------------------------

def gradcheck(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
              wrt: Iterable[Tensor] = ()) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is called as ``f(x)`` (or ``f(*x)`` for a sequence) and must return a
    scalar Tensor. Gradients are checked w.r.t. ``x`` and every tensor in
    ``wrt``. Error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(inputs[0])) if isinstance(x, Tensor) else (lambda: f(*inputs))
    targets = inputs + [t for t in wrt if all(t is not s for s in inputs)]
    for t in targets:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 tensors")
        t.requires_grad = True
        t.grad = None
    loss = call()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

    worst = 0.0
    for ti, t in enumerate(targets):
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = call().item()
            flat[idx] = orig - eps
            fm = call().item()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                where = (ti, np.unravel_index(idx, t.shape))
                raise ProbeError(f"non-finite value while probing tensor {ti} at {where[1]}", where)
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[ti].reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for t in targets:
        t.grad = None
    return worst


# -- serialization ---------------------------------------------------------------

TENSOR_MAGIC = b"DCAPT\x00"


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor at ``offset``; returns the tensor and the offset past it."""
    m = len(TENSOR_MAGIC)
    if buf[offset:offset + m] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic", offset=offset)
    pos = offset + m
    if pos + 1 > len(buf):
        raise FormatError("truncated tensor header", offset=pos)
    rank = buf[pos]
    pos += 1
    if rank > MAX_RANK:
        raise FormatError(f"tensor rank {rank} exceeds {MAX_RANK}", offset=pos - 1)
    if pos + 4 * rank > len(buf):
        raise FormatError("truncated tensor extents", offset=pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if pos + nbytes > len(buf):
        raise FormatError("truncated tensor payload", offset=pos)
    data = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
    return Tensor(data.astype(np.float32)), pos + nbytes


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor", offset=end)
    return t
