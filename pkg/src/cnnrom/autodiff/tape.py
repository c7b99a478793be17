"""Reverse-mode tape.

Every primitive is recorded through :func:`record`, which stores the output
value, the input :class:`Var` objects and a vector-Jacobian product closure.
Nodes are appended in creation order, which is a topological order, so
:meth:`Tape.backward` simply walks the list backwards once.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Var:
    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents: tuple = ()
        self.vjp = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

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


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


def record(value, parents: Sequence, vjp: Callable) -> Var:
    """Create the output node of a primitive.

    ``vjp(g)`` must return one cotangent (or ``None``) per parent.
    """
    parents = tuple(as_var(p) for p in parents)
    out = Var(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        tape.nodes.append(out)
    return out


class Tape:
    """Context manager collecting primitive applications for one backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, out: Var, seed=None) -> None:
        """Accumulate ``d out / d leaf`` into ``.grad`` of every leaf requiring it."""
        if seed is None:
            if out.value.size != 1:
                raise ValueError("backward without a seed needs a scalar output")
            seed = np.ones_like(out.value)
        out.grad = np.asarray(seed, dtype=float).reshape(out.value.shape)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            cots = node.vjp(node.grad)
            for parent, cot in zip(node.parents, cots):
                if cot is None or not parent.requires_grad:
                    continue
                cot = np.asarray(cot, dtype=float)
                if cot.shape != parent.value.shape:
                    cot = _unbroadcast(cot, parent.value.shape)
                parent.grad = cot.copy() if parent.grad is None else parent.grad + cot
            if node is not out:
                node.grad = None  # free intermediate cotangents


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)
