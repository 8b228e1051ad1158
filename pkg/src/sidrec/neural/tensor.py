"""Reverse-mode autodiff over numpy float64 arrays.

A Tensor wraps one ndarray plus the bookkeeping needed to run backward
over a fixed set of primitives (see ops.py).  There is no general tape:
each op closes over exactly the arrays its vector-Jacobian product
needs.  Gradients land only on Parameter leaves; intermediate grads
live in a per-backward dict and are dropped when backward returns.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import InputError

# Global inference switch.  Inside no_grad() ops compute identical
# values but skip all graph bookkeeping.
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """Node in the compute graph.  data is always float64."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        # parents/vjp are only populated for tracked interior nodes
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter.

        Multiple backward calls add up, matching explicit gradient
        accumulation across loss terms.
        """
        if not self.requires_grad:
            raise InputError("backward() on a tensor outside the gradient graph")
        if seed is None:
            if self.data.ndim != 0:
                raise InputError("backward() without seed needs a scalar loss")
            seed = np.ones((), dtype=np.float64)
        else:
            seed = _as_f64(seed)
            if seed.shape != self.data.shape:
                raise InputError("backward seed shape mismatch")

        topo = self._topo_order()
        # Stored grads are always private copies, so in-place += is safe
        # even when a vjp hands the same array to two parents.
        grads = {id(self): seed.copy()}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
                continue
            if node._vjp is None:
                continue
            for parent, delta in node._vjp(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] += delta
                else:
                    grads[key] = np.array(delta, dtype=np.float64)

    def _topo_order(self):
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf.  Keeps a persistent gradient buffer and a slot
    for optimizer state (see optim.AdamW)."""

    __slots__ = ("name", "grad", "state")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.state = {}

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def make_node(data, parents, vjp) -> Tensor:
    """Build an op result.  Skips tracking under no_grad or when no
    parent participates in differentiation."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp)
    return Tensor(data, requires_grad=False)


def stop_gradient(x: Tensor) -> Tensor:
    """Graph-edge marker: same values, no gradient flow, no data copy."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    return out
