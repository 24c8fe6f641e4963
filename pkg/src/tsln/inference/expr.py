"""Parameter bindings: small differentiable expressions over the flat vector.

Density terms never index the unconstrained vector directly; they receive
*nodes* which evaluate to arrays and push gradients back.  The node set is
closed and tiny on purpose: everything the stage models need is a sum of
products of gathered parameter blocks, plus a handful of elementwise
transforms and the BYM2 convolution.

Forward evaluation accepts ``x`` of shape ``(dim,)`` or ``(draws, dim)``;
the backward pass is defined for the unbatched case only.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "Node", "Param", "Const", "Add", "Mul", "Exp", "Logistic", "Sqrt",
    "Take", "MatVec", "BYM2", "as_node", "evaluate",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Node:
    """Base class; subclasses implement ``_forward`` and ``_backward``."""

    children: tuple = ()

    def value(self, x, tape: dict) -> np.ndarray:
        key = id(self)
        v = tape.get(key)
        if v is None:
            v = self._forward(x, tape)
            tape[key] = v
        return v

    def backprop(self, g, x, tape: dict, grad: np.ndarray) -> None:
        self._backward(np.asarray(g, dtype=float), x, tape, grad)

    def _forward(self, x, tape):
        raise NotImplementedError

    def _backward(self, g, x, tape, grad):
        raise NotImplementedError

    @property
    def is_constant(self) -> bool:
        return all(c.is_constant for c in self.children)

    def __add__(self, other):
        return Add(self, as_node(other))

    __radd__ = __add__

    def __mul__(self, other):
        return Mul(self, as_node(other))

    __rmul__ = __mul__


class Param(Node):
    """Contiguous block ``x[start:stop]`` of the unconstrained vector."""

    def __init__(self, start: int, stop: int, name: str = ""):
        self.start, self.stop, self.name = int(start), int(stop), name

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def is_constant(self) -> bool:
        return False

    def _forward(self, x, tape):
        return x[..., self.start:self.stop]

    def _backward(self, g, x, tape, grad):
        grad[self.start:self.stop] += _unbroadcast(g, (self.size,))

    def __repr__(self):
        return f"Param({self.name or ''}[{self.start}:{self.stop}])"


class Const(Node):
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    @property
    def is_constant(self) -> bool:
        return True

    def _forward(self, x, tape):
        return self.v

    def _backward(self, g, x, tape, grad):
        pass


def as_node(v) -> Node:
    return v if isinstance(v, Node) else Const(v)


class Add(Node):
    def __init__(self, *terms):
        self.children = tuple(as_node(t) for t in terms)

    def _forward(self, x, tape):
        out = self.children[0].value(x, tape)
        for c in self.children[1:]:
            out = out + c.value(x, tape)
        return out

    def _backward(self, g, x, tape, grad):
        for c in self.children:
            if not c.is_constant:
                c.backprop(_unbroadcast(g, np.shape(c.value(x, tape))), x, tape, grad)


class Mul(Node):
    def __init__(self, a, b):
        self.children = (as_node(a), as_node(b))

    def _forward(self, x, tape):
        a, b = self.children
        return a.value(x, tape) * b.value(x, tape)

    def _backward(self, g, x, tape, grad):
        a, b = self.children
        va, vb = a.value(x, tape), b.value(x, tape)
        if not a.is_constant:
            a.backprop(_unbroadcast(g * vb, np.shape(va)), x, tape, grad)
        if not b.is_constant:
            b.backprop(_unbroadcast(g * va, np.shape(vb)), x, tape, grad)


class Exp(Node):
    def __init__(self, a):
        self.children = (as_node(a),)

    def _forward(self, x, tape):
        return np.exp(self.children[0].value(x, tape))

    def _backward(self, g, x, tape, grad):
        self.children[0].backprop(g * self.value(x, tape), x, tape, grad)


class Logistic(Node):
    def __init__(self, a):
        self.children = (as_node(a),)

    def _forward(self, x, tape):
        return expit(self.children[0].value(x, tape))

    def _backward(self, g, x, tape, grad):
        p = self.value(x, tape)
        self.children[0].backprop(g * p * (1.0 - p), x, tape, grad)


class Sqrt(Node):
    def __init__(self, a):
        self.children = (as_node(a),)

    def _forward(self, x, tape):
        return np.sqrt(self.children[0].value(x, tape))

    def _backward(self, g, x, tape, grad):
        self.children[0].backprop(0.5 * g / self.value(x, tape), x, tape, grad)


class Take(Node):
    """Gather ``a[index]`` along the last axis."""

    def __init__(self, a, index):
        self.children = (as_node(a),)
        self.index = np.asarray(index, dtype=np.int64)

    def _forward(self, x, tape):
        return self.children[0].value(x, tape)[..., self.index]

    def _backward(self, g, x, tape, grad):
        a = self.children[0]
        n = np.shape(a.value(x, tape))[-1]
        a.backprop(np.bincount(self.index, weights=np.broadcast_to(g, self.index.shape), minlength=n), x, tape, grad)


class MatVec(Node):
    """Fixed (dense or sparse) matrix times a node: ``X @ a``."""

    def __init__(self, X, a):
        self.X = sp.csr_array(X) if sp.issparse(X) else np.asarray(X, dtype=float)
        self.XT = self.X.T.tocsr() if sp.issparse(self.X) else np.ascontiguousarray(self.X.T)
        self.children = (as_node(a),)

    def _forward(self, x, tape):
        v = self.children[0].value(x, tape)
        if v.ndim == 1:
            return self.X @ v
        return (self.X @ v.T).T

    def _backward(self, g, x, tape, grad):
        self.children[0].backprop(self.XT @ g, x, tape, grad)


class BYM2(Node):
    """``sigma * (s * sqrt(rho / kappa) + v * sqrt(1 - rho))``.

    ``rho`` and ``sigma`` must be size-1 nodes already on their constrained
    scales; ``kappa`` is a fixed positive scalar.
    """

    def __init__(self, s, v, rho, sigma, kappa: float):
        self.children = (as_node(s), as_node(v), as_node(rho), as_node(sigma))
        self.kappa = float(kappa)

    def _forward(self, x, tape):
        s, v, rho, sigma = (c.value(x, tape) for c in self.children)
        return sigma * (s * np.sqrt(rho / self.kappa) + v * np.sqrt(1.0 - rho))

    def _backward(self, g, x, tape, grad):
        s_n, v_n, rho_n, sig_n = self.children
        s, v, rho, sigma = (c.value(x, tape) for c in self.children)
        a = np.sqrt(rho / self.kappa)
        b = np.sqrt(1.0 - rho)
        if not s_n.is_constant:
            s_n.backprop(g * sigma * a, x, tape, grad)
        if not v_n.is_constant:
            v_n.backprop(g * sigma * b, x, tape, grad)
        if not sig_n.is_constant:
            sig_n.backprop(np.atleast_1d(np.sum(g * (s * a + v * b))), x, tape, grad)
        if not rho_n.is_constant:
            # d/drho sqrt(rho/k) = 1/(2 k a); d/drho sqrt(1-rho) = -1/(2 b); rho in (0, 1) here
            da = 0.5 / (self.kappa * a)
            db = -0.5 / b
            rho_n.backprop(np.atleast_1d(np.sum(g * sigma * (s * da + v * db))), x, tape, grad)


def evaluate(node: Node, x) -> np.ndarray:
    """Evaluate ``node`` at ``x`` (``(dim,)`` or ``(draws, dim)``)."""
    return np.asarray(node.value(np.asarray(x, dtype=float), {}))
