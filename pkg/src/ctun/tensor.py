"""Dense tensor value type with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array of rank 1 to 4 (activations are always
NCHW). Operations in :mod:`ctun.ops` build an expression graph on the fly
whenever gradient recording is enabled and one of their inputs requires a
gradient; :func:`backward` walks that graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
import weakref

import numpy as np

from .errors import DTypeError, GradientError, ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class AllocationMeter:
    """Tracks the payload bytes of every live :class:`Tensor`.

    Bytes are charged when a tensor is constructed and refunded when it is
    garbage collected, so ``live_bytes`` follows CPython reference counting.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0

    def allocate(self, nbytes):
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def release(self, nbytes):
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self):
        """Restart peak tracking from the current live level."""
        with self._lock:
            self.peak_bytes = self.live_bytes


class MacCounter:
    """Counts multiply-accumulates performed by convolution kernels."""

    def __init__(self):
        self._lock = threading.Lock()
        self.macs = 0

    def add(self, n):
        with self._lock:
            self.macs += int(n)

    def reset(self):
        with self._lock:
            self.macs = 0


meter = AllocationMeter()
mac_counter = MacCounter()

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            if dtype is None and arr.dtype.kind in "biu":
                arr = arr.astype(np.float32)
            else:
                raise DTypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if not 1 <= arr.ndim <= 4:
            raise ShapeError("Tensor", "rank must be between 1 and 4", "1..4", arr.ndim)
        if arr.size == 0:
            raise ShapeError("Tensor", "all dimensions must be >= 1", ">= 1", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        nbytes = arr.nbytes
        meter.allocate(nbytes)
        weakref.finalize(self, meter.release, nbytes)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self):
        return self.data.nbytes

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", "tensor is not a scalar", 1, self.data.size)
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # Arithmetic sugar; the real kernels live in ops.
    def __add__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)


def make_result(data, parents, backward_fn, op):
    """Wrap a kernel output, attaching a graph node when recording applies.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    dtypes = {p.dtype for p in parents}
    if len(dtypes) > 1:
        raise DTypeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    if parents and data.dtype != parents[0].dtype:
        data = data.astype(parents[0].dtype, copy=False)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every recording leaf.

    Intermediate gradients are kept only while the walk needs them, so
    calling this twice on the same graph doubles leaf gradients.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", "loss must be a single scalar", 1, loss.shape)
    if not loss.requires_grad:
        raise GradientError("backward: loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(node.op, "backward produced a gradient of the wrong shape",
                                 parent.shape, pg.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
