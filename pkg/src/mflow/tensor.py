"""Dense float64 tensors with reverse-mode gradients and forward-mode tangents.

Reverse mode is a classic tape: every op records its parents and a backward
closure, and ``backward()`` walks the graph once in reverse topological order.
Forward mode rides along as a dual number: if any input carries a ``tangent``
array, the op also produces the corresponding output tangent in the same
forward pass. Tangents are plain numpy arrays and are never recorded on the
tape, so differentiating a loss never differentiates through a tangent.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Result shape for elementwise ops; only singleton axes may broadcast."""
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"rank mismatch: {sa} vs {sb}")
    out = []
    for a, b in zip(sa, sb):
        if a == b or a == 1 or b == 1:
            out.append(max(a, b))
        else:
            raise ShapeError(f"incompatible shapes: {sa} vs {sb}")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


class Tensor:
    """Immutable n-d float64 value, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "tangent", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, tangent=None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tangent = None if tangent is None else np.asarray(tangent, dtype=np.float64)
        if self.tangent is not None and self.tangent.shape != self.data.shape:
            raise ShapeError(f"tangent shape {self.tangent.shape} != value shape {self.data.shape}")
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def detach(self) -> "Tensor":
        """Value-identical tensor cut off from the tape and from tangents."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if id(node) in seen:
                continue
            if done:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(1.0)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not (parent.requires_grad or parent._parents):
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)
        _broadcast_shape(a.shape, b.shape)
        tan = _dual_binary(a, b, lambda ta, tb: ta + tb)
        return Tensor(a.data + b.data, tangent=tan, _parents=(a, b),
                      _backward=lambda g: ((a, _unbroadcast(g, a.shape)),
                                           (b, _unbroadcast(g, b.shape))))

    __radd__ = __add__

    def __neg__(self):
        a = self
        tan = None if a.tangent is None else -a.tangent
        return Tensor(-a.data, tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, -g),))

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)
        _broadcast_shape(a.shape, b.shape)
        tan = _dual_binary(a, b, lambda ta, tb: ta * b.data + a.data * tb)
        return Tensor(a.data * b.data, tangent=tan, _parents=(a, b),
                      _backward=lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                                           (b, _unbroadcast(g * a.data, b.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = Tensor._lift(other)
        return self * b ** -1.0

    def __rtruediv__(self, other):
        return Tensor._lift(other) * self ** -1.0

    def __pow__(self, exponent: float):
        a, p = self, float(exponent)
        out = a.data ** p
        local = p * a.data ** (p - 1.0)
        tan = None if a.tangent is None else local * a.tangent
        return Tensor(out, tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, g * local),))

    # -- nonlinearities -------------------------------------------------------

    def sqrt(self):
        return self ** 0.5

    def exp(self):
        a = self
        out = np.exp(a.data)
        tan = None if a.tangent is None else out * a.tangent
        return Tensor(out, tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, g * out),))

    def sin(self):
        a = self
        c = np.cos(a.data)
        tan = None if a.tangent is None else c * a.tangent
        return Tensor(np.sin(a.data), tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, g * c),))

    def cos(self):
        a = self
        s = np.sin(a.data)
        tan = None if a.tangent is None else -s * a.tangent
        return Tensor(np.cos(a.data), tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, -g * s),))

    def silu(self):
        """x * sigmoid(x); smooth, with analytic derivative."""
        a = self
        sig = 1.0 / (1.0 + np.exp(-a.data))
        local = sig * (1.0 + a.data * (1.0 - sig))
        tan = None if a.tangent is None else local * a.tangent
        return Tensor(a.data * sig, tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, g * local),))

    # -- linear algebra / structure -------------------------------------------

    def matmul(self, other):
        a, b = self, Tensor._lift(other)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes do not conform: {a.shape} @ {b.shape}")
        tan = _dual_binary(a, b, lambda ta, tb: ta @ b.data + a.data @ tb)
        return Tensor(a.data @ b.data, tangent=tan, _parents=(a, b),
                      _backward=lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)))

    __matmul__ = matmul

    def sum(self, axis: int | None = None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        tan = None if a.tangent is None else a.tangent.sum(axis=axis, keepdims=keepdims)

        def back(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return ((a, np.broadcast_to(gg, a.shape).copy()),)

        return Tensor(out, tangent=tan, _parents=(a,), _backward=back)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        out = a.data.reshape(*shape)
        tan = None if a.tangent is None else a.tangent.reshape(*shape)
        return Tensor(out, tangent=tan, _parents=(a,),
                      _backward=lambda g: ((a, g.reshape(a.shape)),))


def _dual_binary(a: Tensor, b: Tensor, rule) -> np.ndarray | None:
    """Tangent of a binary op; missing tangents are zero."""
    if a.tangent is None and b.tangent is None:
        return None
    ta = a.tangent if a.tangent is not None else np.zeros_like(a.data)
    tb = b.tangent if b.tangent is not None else np.zeros_like(b.data)
    return rule(ta, tb)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dims must match exactly."""
    ts = [Tensor._lift(t) for t in tensors]
    shapes = [t.shape for t in ts]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError(f"concat shapes do not conform along axis {axis}: {shapes}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    tan = None
    if any(t.tangent is not None for t in ts):
        tan = np.concatenate(
            [t.tangent if t.tangent is not None else np.zeros_like(t.data) for t in ts], axis=axis)

    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slices = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * len(t.shape)
            idx[axis] = slice(lo, hi)
            slices.append((t, g[tuple(idx)]))
        return tuple(slices)

    return Tensor(out, tangent=tan, _parents=tuple(ts), _backward=back)


def gather_rows(table: Tensor, idx) -> Tensor:
    """Select rows of a 2-d table by integer index (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(table.shape) != 2:
        raise ShapeError(f"gather_rows needs a 2-d table, got {table.shape}")
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]
    tan = None if table.tangent is None else table.tangent[idx]

    def back(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return ((table, gt),)

    return Tensor(out, tangent=tan, _parents=(table,), _backward=back)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor; zero gradient to ancestors, zero tangent."""
    return Tensor._lift(x).detach()


def jvp(f: Callable, xs, vs) -> tuple[Tensor, np.ndarray]:
    """Evaluate ``f`` and its directional derivative along ``vs`` in one pass.

    ``xs``/``vs`` may be single arrays or sequences of arrays with matching
    shapes. Returns ``(f(xs), J_f(xs) @ vs)``; the tangent is a plain array.
    """
    single = not isinstance(xs, (tuple, list))
    xs_seq: Iterable = [xs] if single else xs
    vs_seq: Iterable = [vs] if single else vs
    duals = []
    for x, v in zip(xs_seq, vs_seq, strict=True):
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if x.shape != v.shape:
            raise ShapeError(f"tangent shape {v.shape} != input shape {x.shape}")
        duals.append(Tensor(x, tangent=v))
    out = f(duals[0]) if single else f(*duals)
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    return out, tangent
