"""Minimal reverse-mode automatic differentiation engine.

A Tensor wraps a numpy array and, when produced by an operation with
differentiable inputs, remembers its parents and a backward rule. Backward
rules are themselves written in terms of Tensor operations, so gradients are
ordinary graph nodes: calling ``backward(create_graph=True)`` yields ``.grad``
tensors that can be differentiated again. The attack harness relies on this
to optimize gradient-matching objectives.

Only the layer set needed by the fixed LeNet/DCGAN-style architectures is
provided: no GPU, no general broadcasting beyond bias addition, no dynamic
shapes.
"""

from __future__ import annotations

import itertools
import threading
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's admissible domain."""


class GraphError(RuntimeError):
    """Misuse of the recorded computation graph (e.g. double backward)."""


_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = False
_NODE_COUNTER = itertools.count(1)


class _EngineThreadState(threading.local):
    """Per-thread autograd mode and backward-pass flow tables; graphs on
    distinct threads must not observe each other."""

    def __init__(self):
        self.grad_enabled = True
        self.flow_stack: list[dict[int, "Tensor"]] = []


_TLS = _EngineThreadState()

LOG_EPS = 1e-12  # clamp for log arguments in GAN/KL losses


def set_default_dtype(dtype) -> None:
    """Select 64-bit (default) or 32-bit floats for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    """Verify every op output is finite (debug aid; off by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = _TLS.grad_enabled
        _TLS.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _TLS.grad_enabled = self._prev
        return False


class enable_grad:
    """Context manager re-enabling graph recording (used inside backward)."""

    def __enter__(self):
        self._prev = _TLS.grad_enabled
        _TLS.grad_enabled = True
        return self

    def __exit__(self, *exc):
        _TLS.grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional array participating in a recorded computation graph.

    ``node_id`` is set for tensors produced by recorded operations and None
    for constants and leaves. ``grad`` is allocated lazily by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.grad: Tensor | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self._op or 'leaf'}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd driver ----------------------------------------------------

    def backward(self, create_graph: bool = False) -> None:
        """Backpropagate from a scalar root through the recorded graph.

        Flowing gradients live in a per-pass table; only leaf tensors with
        ``requires_grad`` receive a persistent ``.grad``. Without
        ``create_graph`` the traversed graph is freed afterwards and a second
        backward raises GraphError; the forward pass must be re-recorded.
        With ``create_graph`` the produced ``.grad`` tensors are graph nodes
        supporting further differentiation.
        """
        _backprop(self, create_graph=create_graph, capture=None)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE))


def _backprop(root: Tensor, create_graph: bool, capture: dict[int, Tensor | None] | None) -> None:
    """Shared reverse-pass driver for Tensor.backward and grad()."""
    if root.data.size != 1:
        raise GraphError("backward requires a scalar root")
    if root._backward is None and root._parents:
        raise GraphError("backward already ran for this graph; re-record the forward pass")
    if not (root.requires_grad or root._parents):
        raise GraphError("root tensor is not part of a recorded graph")

    order = _toposort(root)
    flows: dict[int, Tensor] = {id(root): Tensor(np.ones_like(root.data))}
    _TLS.flow_stack.append(flows)
    ctx = enable_grad() if create_graph else no_grad()
    try:
        with ctx:
            for node in reversed(order):
                g = flows.pop(id(node), None)
                if g is None:
                    continue
                if capture is not None and id(node) in capture:
                    prev = capture[id(node)]
                    capture[id(node)] = g if prev is None else add(prev, g)
                fn = node._backward
                if fn is None:
                    if node._parents:
                        raise GraphError("graph was already freed by a previous backward; "
                                         "re-record the forward pass")
                    if capture is None and node.requires_grad:
                        node.grad = g if node.grad is None else add(node.grad, g)
                    continue
                fn(g)
                if not create_graph:
                    node._backward = None
    finally:
        _TLS.flow_stack.pop()


def grad(root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor | None]:
    """Gradients of a scalar root w.r.t. ``inputs`` without touching ``.grad``.

    Returns one Tensor per input (None where the root does not depend on it).
    With ``create_graph`` the results are graph nodes that can be
    differentiated again — the basis of gradient-matching objectives.
    """
    capture: dict[int, Tensor | None] = {id(t): None for t in inputs}
    _backprop(root, create_graph=create_graph, capture=capture)
    return [capture[id(t)] for t in inputs]


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out._parents = ()
    out._backward = None
    out._op = op
    out.requires_grad = False
    if _TLS.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_NODE_COUNTER)
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(target: Tensor, grad: Tensor) -> None:
    if not target.requires_grad:
        return
    flows = _TLS.flow_stack[-1]
    key = id(target)
    prev = flows.get(key)
    flows[key] = grad if prev is None else add(prev, grad)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = len(grad.shape) - len(shape)
    if extra > 0:
        grad = tsum(grad, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = tsum(grad, axis=axes, keepdims=True)
    if grad.shape != shape:
        grad = reshape(grad, shape)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g: Tensor):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g: Tensor):
        _accumulate(a, neg(g))

    return _make(-a.data, (a,), "neg", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g: Tensor):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(mul(g, b), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(mul(g, a), b.shape))

    return _make(data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data / b.data

    def backward(g: Tensor):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(div(g, b), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape))

    return _make(data, (a, b), "div", backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    a = _coerce(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g: Tensor):
        _accumulate(a, mul(g, mul(pow_const(a, exponent - 1.0), exponent)))

    return _make(data, (a,), "pow", backward)


def texp(a: Tensor) -> Tensor:
    a = _coerce(a)
    out_holder = []

    def backward(g: Tensor):
        _accumulate(a, mul(g, out_holder[0]))

    out = _make(np.exp(a.data), (a,), "exp", backward)
    out_holder.append(out)
    return out


def tlog(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g: Tensor):
        _accumulate(a, div(g, a))

    return _make(np.log(a.data), (a,), "log", backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = _coerce(a)
    mask = (a.data > floor).astype(a.data.dtype)

    def backward(g: Tensor):
        _accumulate(a, mul(g, Tensor(mask)))

    return _make(np.maximum(a.data, floor), (a,), "clamp_min", backward)


def relu(a: Tensor) -> Tensor:
    a = _coerce(a)
    mask = (a.data > 0).astype(a.data.dtype)

    def backward(g: Tensor):
        _accumulate(a, mul(g, Tensor(mask)))

    return _make(a.data * mask, (a,), "relu", backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = _coerce(a)
    factor = np.where(a.data > 0, a.data.dtype.type(1.0), a.data.dtype.type(slope))

    def backward(g: Tensor):
        _accumulate(a, mul(g, Tensor(factor)))

    return _make(a.data * factor, (a,), "leaky_relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_holder = []

    def backward(g: Tensor):
        s = out_holder[0]
        _accumulate(a, mul(g, mul(s, add(1.0, neg(s)))))

    out = _make(data.astype(x.dtype, copy=False), (a,), "sigmoid", backward)
    out_holder.append(out)
    return out


def tanh(a: Tensor) -> Tensor:
    a = _coerce(a)
    out_holder = []

    def backward(g: Tensor):
        t = out_holder[0]
        _accumulate(a, mul(g, add(1.0, neg(mul(t, t)))))

    out = _make(np.tanh(a.data), (a,), "tanh", backward)
    out_holder.append(out)
    return out


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity selected by name."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation kind '{kind}'")


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def backward(g: Tensor):
        _accumulate(a, reshape(g, old))

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def transpose2d(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")

    def backward(g: Tensor):
        _accumulate(a, transpose2d(g))

    return _make(np.ascontiguousarray(a.data.T), (a,), "transpose2d", backward)


def swap01(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g: Tensor):
        _accumulate(a, swap01(g))

    return _make(np.ascontiguousarray(np.swapaxes(a.data, 0, 1)), (a,), "swap01", backward)


def flip_hw(a: Tensor) -> Tensor:
    a = _coerce(a)

    def backward(g: Tensor):
        _accumulate(a, flip_hw(g))

    return _make(np.ascontiguousarray(a.data[..., ::-1, ::-1]), (a,), "flip_hw", backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def backward(g: Tensor):
        _accumulate(a, _unbroadcast(g, old))

    return _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), "broadcast", backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    old = a.shape

    def backward(g: Tensor):
        if axis is None:
            kept = (1,) * len(old)
        elif keepdims:
            kept = g.shape
        else:
            kept = list(old)
            for ax in axis:
                kept[ax] = 1
            kept = tuple(kept)
        _accumulate(a, broadcast_to(reshape(g, kept), old))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g: Tensor):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                _accumulate(t, narrow(g, axis, start, size))
            start += size

    return _make(data, tuple(tensors), "concat", backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _coerce(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    total = a.shape[axis]

    def backward(g: Tensor):
        pieces = []
        if start > 0:
            before = list(a.shape)
            before[axis] = start
            pieces.append(Tensor(np.zeros(before, dtype=a.data.dtype)))
        pieces.append(g)
        if start + length < total:
            after = list(a.shape)
            after[axis] = total - start - length
            pieces.append(Tensor(np.zeros(after, dtype=a.data.dtype)))
        _accumulate(a, concat(pieces, axis) if len(pieces) > 1 else g)

    return _make(np.ascontiguousarray(a.data[tuple(index)]), (a,), "narrow", backward)


def _zero_pad_hw(arr: np.ndarray, p: int) -> np.ndarray:
    n, c, h, w = arr.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=arr.dtype)
    out[:, :, p:p + h, p:p + w] = arr
    return out


def pad2d(a: Tensor, padding: int) -> Tensor:
    """Symmetric spatial zero padding of an (N, C, H, W) tensor."""
    a = _coerce(a)
    p = int(padding)
    if p == 0:
        return a

    def backward(g: Tensor):
        _accumulate(a, crop2d(g, p))

    return _make(_zero_pad_hw(a.data, p), (a,), "pad2d", backward)


def crop2d(a: Tensor, padding: int) -> Tensor:
    a = _coerce(a)
    p = int(padding)
    if p == 0:
        return a

    def backward(g: Tensor):
        _accumulate(a, pad2d(g, p))

    return _make(np.ascontiguousarray(a.data[:, :, p:-p, p:-p]), (a,), "crop2d", backward)


def dilate2d(a: Tensor, stride: int) -> Tensor:
    """Insert stride-1 zeros between spatial elements (transposed-conv helper)."""
    a = _coerce(a)
    s = int(stride)
    if s == 1:
        return a
    n, c, h, w = a.shape
    data = np.zeros((n, c, (h - 1) * s + 1, (w - 1) * s + 1), dtype=a.data.dtype)
    data[:, :, ::s, ::s] = a.data

    def backward(g: Tensor):
        _accumulate(a, stride_slice2d(g, s))

    return _make(data, (a,), "dilate2d", backward)


def stride_slice2d(a: Tensor, stride: int) -> Tensor:
    a = _coerce(a)
    s = int(stride)
    if s == 1:
        return a

    def backward(g: Tensor):
        _accumulate(a, dilate2d(g, s))

    return _make(np.ascontiguousarray(a.data[:, :, ::s, ::s]), (a,), "stride_slice2d", backward)


# ---------------------------------------------------------------------------
# linear algebra / convolution primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")

    def backward(g: Tensor):
        if a.requires_grad:
            _accumulate(a, matmul(g, transpose2d(b)))
        if b.requires_grad:
            _accumulate(b, matmul(transpose2d(a), g))

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def _affine_raw(x: Tensor, weight: Tensor) -> Tensor:
    """x @ weight.T as a primitive; BLAS consumes the transposed view directly."""

    def backward(g: Tensor):
        if x.requires_grad:
            _accumulate(x, matmul(g, weight))
        if weight.requires_grad:
            _accumulate(weight, matmul(transpose2d(g), x))

    return _make(x.data @ weight.data.T, (x, weight), "affine", backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-major dense layer: x @ weight.T + bias, weight is (Dout, Din)."""
    x, weight = _coerce(x), _coerce(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine shapes incompatible: input {x.shape}, weight {weight.shape}")
    out = _affine_raw(x, weight)
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"affine bias shape {bias.shape} != ({weight.shape[0]},)")
        out = add(out, bias)
    return out


def _conv_windows(x_padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    windows = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _conv_out_extent(extent: int, k: int, stride: int, padding: int, label: str) -> int:
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d {label} extent {extent} with kernel {k}, stride {stride}, "
            f"padding {padding} has no integral output extent"
        )
    out = span // stride + 1
    if out < 1:
        raise ShapeError(f"conv2d output {label} extent {out} < 1")
    return out


def _col2im(dcols: np.ndarray, n: int, cin: int, h: int, w: int,
            kh: int, kw: int, ho: int, wo: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add (N*Ho*Wo, Cin*kh*kw) columns back onto the input grid."""
    blocks = dcols.reshape(n, ho, wo, cin, kh, kw)
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                blocks[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    if padding:
        return np.ascontiguousarray(dxp[:, :, padding:-padding, padding:-padding])
    return dxp


def conv2d_raw(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with kernel (Cout,Cin,kh,kw), no bias.

    Implemented as an im2col GEMM. The first-order backward reuses the
    forward's column matrix (kernel gradient) and a col2im GEMM (input
    gradient); under create_graph the backward is built from differentiable
    primitives instead so the attack objectives stay twice-differentiable.
    """
    x, kernel = _coerce(x), _coerce(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, kc, kh, kw = kernel.shape
    if kc != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel expects {kc}")
    ho = _conv_out_extent(h, kh, stride, padding, "height")
    wo = _conv_out_extent(w, kw, stride, padding, "width")

    xp = _zero_pad_hw(x.data, padding) if padding else x.data
    windows = _conv_windows(xp, kh, kw, stride)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kflat = kernel.data.reshape(cout, -1)
    out = (cols @ kflat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g: Tensor):
        if _TLS.grad_enabled:
            if x.requires_grad:
                _accumulate(x, conv_transpose2d_raw(g, kernel, stride, padding))
            if kernel.requires_grad:
                _accumulate(kernel, conv2d_kernel_grad(x, g, stride, padding, (kh, kw)))
            return
        gcols = g.data.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if x.requires_grad:
            dx = _col2im(gcols @ kflat, n, cin, h, w, kh, kw, ho, wo, stride, padding)
            _accumulate(x, Tensor(dx))
        if kernel.requires_grad:
            dk = (gcols.T @ cols).reshape(cout, cin, kh, kw)
            _accumulate(kernel, Tensor(dk))

    return _make(np.ascontiguousarray(out), (x, kernel), "conv2d", backward)


def conv2d_kernel_grad(x: Tensor, g: Tensor, stride: int, padding: int, kernel_hw: tuple[int, int]) -> Tensor:
    """Gradient of conv2d w.r.t. its kernel, as a differentiable primitive."""
    x, g = _coerce(x), _coerce(g)
    n, cin, h, w = x.shape
    _, cout, ho, wo = g.shape
    kh, kw = kernel_hw

    xp = _zero_pad_hw(x.data, padding) if padding else x.data
    windows = _conv_windows(xp, kh, kw, stride)  # (N, Cin, Ho, Wo, kh, kw)
    wmat = np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * kh * kw, n * ho * wo)
    gmat = np.ascontiguousarray(g.data.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
    dk = (gmat @ wmat.T).reshape(cout, cin, kh, kw)

    def backward(c: Tensor):
        if x.requires_grad:
            _accumulate(x, conv_transpose2d_raw(g, c, stride, padding))
        if g.requires_grad:
            _accumulate(g, conv2d_raw(x, c, stride, padding))

    return _make(dk, (x, g), "conv2d_kgrad", backward)


def conv_transpose2d_raw(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution: adjoint of conv2d with the same geometry.

    Kernel layout is (Cin, Cout, kh, kw), matching the convention that the
    same kernel tensor serves conv2d (as (Cout', Cin', kh, kw)) and its
    input-gradient. Composite of dilate/pad/flip and conv2d, so its backward
    rule is inherited from the primitives.
    """
    x, kernel = _coerce(x), _coerce(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects 4-d input and kernel")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.shape[1]}, kernel expects {kernel.shape[0]}"
        )
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh != kw:
        raise ShapeError("conv_transpose2d supports square kernels only")
    if padding > kh - 1:
        raise ShapeError(f"conv_transpose2d padding {padding} exceeds kernel-1 ({kh - 1})")
    out_h = (x.shape[2] - 1) * stride - 2 * padding + kh
    out_w = (x.shape[3] - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv_transpose2d output extent {out_h}x{out_w} < 1")
    spread = pad2d(dilate2d(x, stride), kh - 1 - padding)
    return conv2d_raw(spread, flip_hw(swap01(kernel)), 1, 0)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = conv2d_raw(x, kernel, stride, padding)
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (kernel.shape[0],):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({kernel.shape[0]},)")
        out = add(out, reshape(bias, (1, kernel.shape[0], 1, 1)))
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = conv_transpose2d_raw(x, kernel, stride, padding)
    if bias is not None:
        bias = _coerce(bias)
        if bias.shape != (kernel.shape[1],):
            raise ShapeError(f"conv_transpose2d bias shape {bias.shape} != ({kernel.shape[1]},)")
        out = add(out, reshape(bias, (1, kernel.shape[1], 1, 1)))
    return out


def avg_pool2d(a: Tensor, size: int = 2) -> Tensor:
    a = _coerce(a)
    n, c, h, w = a.shape
    s = int(size)
    if h % s or w % s:
        raise ShapeError(f"avg_pool2d requires extents divisible by {s}, got {h}x{w}")
    data = a.data.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def backward(g: Tensor):
        _accumulate(a, avg_unpool2d(g, s))

    return _make(np.ascontiguousarray(data), (a,), "avg_pool2d", backward)


def avg_unpool2d(a: Tensor, size: int = 2) -> Tensor:
    a = _coerce(a)
    s = int(size)
    data = np.repeat(np.repeat(a.data, s, axis=2), s, axis=3) / (s * s)

    def backward(g: Tensor):
        _accumulate(a, avg_pool2d(g, s))

    return _make(data, (a,), "avg_unpool2d", backward)


# ---------------------------------------------------------------------------
# probability / loss operations
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=axis, keepdims=True)
    out_holder = []

    def backward(g: Tensor):
        s = out_holder[0]
        inner = tsum(mul(g, s), axis=axis, keepdims=True)
        _accumulate(a, mul(s, add(g, neg(broadcast_to(inner, s.shape)))))

    out = _make(data, (a,), "softmax", backward)
    out_holder.append(out)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    out_holder = []

    def backward(g: Tensor):
        probs = texp(out_holder[0])
        inner = tsum(g, axis=axis, keepdims=True)
        _accumulate(a, add(g, neg(mul(probs, broadcast_to(inner, probs.shape)))))

    out = _make(data, (a,), "log_softmax", backward)
    out_holder.append(out)
    return out


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick a[i, indices[i]] per row; adjoint scatters back to the row slots."""
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows shapes incompatible: {a.shape} with {idx.shape}")
    rows = np.arange(a.shape[0])
    cols = a.shape[1]

    def backward(g: Tensor):
        _accumulate(a, scatter_rows(g, idx, cols))

    return _make(np.ascontiguousarray(a.data[rows, idx]), (a,), "gather_rows", backward)


def scatter_rows(a: Tensor, indices: np.ndarray, num_cols: int) -> Tensor:
    a = _coerce(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros((a.shape[0], num_cols), dtype=a.data.dtype)
    data[np.arange(a.shape[0]), idx] = a.data

    def backward(g: Tensor):
        _accumulate(a, gather_rows(g, idx))

    return _make(data, (a,), "scatter_rows", backward)


def cross_entropy(logits: Tensor, labels: np.ndarray | Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer class labels under softmax."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, classes) logits, got {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy labels shape {labels.shape} mismatches logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DomainError(f"labels must lie in [0, {logits.shape[1]}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    return neg(tmean(gather_rows(log_softmax(logits, axis=-1), labels)))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = add(a, neg(b))
    return tmean(mul(diff, diff))


def gan_losses(d_real: Tensor, d_fake: Tensor, mode: str = "non_saturating") -> tuple[Tensor, Tensor]:
    """Discriminator and generator objectives from post-sigmoid outputs.

    Both returned losses are minimized. The discriminator loss as written
    drives d_real toward 1 and d_fake toward 0; the saturating generator
    loss is its literal counterpart while the non-saturating variant keeps
    gradients alive early in training. Log arguments are clamped at LOG_EPS.
    """
    d_real, d_fake = _coerce(d_real), _coerce(d_fake)
    for name, t in (("d_real", d_real), ("d_fake", d_fake)):
        if t.data.size and (t.data.min() < 0.0 or t.data.max() > 1.0):
            raise DomainError(f"{name} values must lie in [0, 1]")
    if mode not in ("saturating", "non_saturating"):
        raise ValueError(f"unknown GAN loss mode '{mode}'")
    disc = add(tmean(tlog(clamp_min(add(1.0, neg(d_real)), LOG_EPS))),
               tmean(tlog(clamp_min(d_fake, LOG_EPS))))
    if mode == "saturating":
        gen = tmean(tlog(clamp_min(add(1.0, neg(d_fake)), LOG_EPS)))
    else:
        gen = neg(tmean(tlog(clamp_min(d_fake, LOG_EPS))))
    return disc, gen


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of KL(p || q); rows must be probability vectors."""
    p, q = _coerce(p), _coerce(q)
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(f"kl_divergence expects matching (N, c) inputs, got {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6) or t.data.min() < -1e-12:
            raise DomainError(f"rows of {name} are not probability vectors")
    terms = mul(p, add(tlog(clamp_min(p, LOG_EPS)), neg(tlog(clamp_min(q, LOG_EPS)))))
    return tmean(tsum(terms, axis=1))


def assert_all_finite(arrays: Iterable[np.ndarray], context: str) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values encountered in {context}")
