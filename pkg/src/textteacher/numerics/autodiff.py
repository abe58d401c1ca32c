"""Reverse-mode differentiation over dense numpy arrays.

A graph is built by the op functions in :mod:`textteacher.numerics.ops` during
the forward pass and thrown away after :func:`backward`. There is no persistent
tape.
"""
import contextlib
import threading

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Forward-only region: ops produce constant nodes and record no parents."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TensorNode:
    """A differentiable array.

    Attributes:
        value: the forward value (never mutated after construction).
        requires_grad: whether gradients are tracked for this node.
    """

    __slots__ = ("value", "requires_grad", "name", "_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        if not np.issubdtype(self.value.dtype, np.floating):
            self.value = self.value.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.value)

    def backward(self, seed=None):
        backward(self, seed)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"TensorNode{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_node(x, dtype=None):
    if isinstance(x, TensorNode):
        return x
    arr = np.asarray(x, dtype=dtype)
    return TensorNode(arr)


def make_node(value, parents, backward_fn):
    """Create an op output; parents that do not require grad are pruned."""
    if not grad_enabled():
        return TensorNode(value)
    live = tuple(p for p in parents if p is not None and p.requires_grad)
    if not live:
        return TensorNode(value)
    return TensorNode(value, requires_grad=True, parents=parents, backward_fn=backward_fn)


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if p is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed=None):
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    ``seed`` is the upstream gradient; it may be omitted only for scalar roots,
    in which case it is 1. Repeated calls accumulate.
    """
    if seed is None:
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        seed = np.ones_like(root.value)
    else:
        seed = np.array(seed, dtype=root.value.dtype)
        if seed.shape != root.shape:
            raise ContractError(f"seed shape {seed.shape} != root shape {root.shape}")
    if not root.requires_grad:
        return
    pending = {id(root): seed}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        # grads are never mutated in place, so aliasing between nodes is safe
        node._grad = g if node._grad is None else node._grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if p is None or pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
