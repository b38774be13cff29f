"""Reverse-mode autograd over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure. Ops build a
graph by recording parent tensors and a function mapping the output
gradient to parent gradients; Tensor.backward() walks the graph in reverse
topological order and accumulates gradients by summation, so fan-out just
works. Gradients are plain ndarrays, never Tensors, and nothing here is
ever recorded into a second-order graph.

Shapes are explicit: elementwise ops require identical shapes (or a python
scalar); anything that broadcasts, reduces, or reindexes is a dedicated op
in functional.py with a hand-written backward.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np


class _GradMode(threading.local):
    # thread-local so no_grad in one eval worker cannot clobber another
    # thread's mode; fresh threads start with grads on
    def __init__(self):
        self.enabled = True


_grad_mode = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (teacher/eval forwards)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


def grad_enabled() -> bool:
    return _grad_mode.enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf.

        Without an explicit grad this requires a scalar (size-1) tensor.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")

        # Iterative post-order DFS; recursion depth would scale with network depth.
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # Minimal operator sugar; the real op set lives in functional.py.
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.mul(self, -1.0)

    def __sub__(self, other):
        from . import functional as F

        if isinstance(other, Tensor):
            return F.add(self, F.mul(other, -1.0))
        return F.add(self, -other)

    def sum(self):
        from . import functional as F

        return F.tsum(self)


def make_op(out_data, parents, backward) -> Tensor:
    """Wrap an op result. backward(out_grad) returns one grad (ndarray or
    None) per parent, aligned positionally. The closure is only attached
    when grad mode is on and some parent needs it."""
    tracked = _grad_mode.enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    return out
