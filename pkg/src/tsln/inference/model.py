"""Assembling density terms over a named, flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import DimensionMismatch, NonFiniteDensity
from .expr import Node, Param, evaluate
from .terms import DensityTerm

__all__ = ["ParameterLayout", "Model", "log_density_and_grad"]

_TRANSFORMS = {
    "identity": lambda u: u,
    "log": np.exp,
    "logit": expit,
}


@dataclass(frozen=True)
class _Block:
    name: str
    start: int
    stop: int
    transform: str


class ParameterLayout:
    """Registry of named blocks in the unconstrained vector.

    ``transform`` records how a block maps to its constrained value:
    ``"log"`` blocks are log-scale positive parameters, ``"logit"`` blocks
    are logit-scale (0, 1) parameters.
    """

    def __init__(self):
        self.blocks: dict[str, _Block] = {}
        self.dim = 0

    def add(self, name: str, size: int, transform: str = "identity") -> Param:
        if name in self.blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        if transform not in _TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}")
        if size < 1:
            raise ValueError("parameter blocks must be non-empty")
        b = _Block(name, self.dim, self.dim + int(size), transform)
        self.blocks[name] = b
        self.dim = b.stop
        return Param(b.start, b.stop, name)

    def names(self) -> list[str]:
        out = []
        for b in self.blocks.values():
            size = b.stop - b.start
            out.extend([b.name] if size == 1 else [f"{b.name}[{i}]" for i in range(size)])
        return out

    def unconstrained(self, x, name: str) -> np.ndarray:
        b = self.blocks[name]
        return np.asarray(x)[..., b.start:b.stop]

    def constrain(self, x, name: str) -> np.ndarray:
        b = self.blocks[name]
        return _TRANSFORMS[b.transform](self.unconstrained(x, name))


class Model:
    """Sum of density terms over a :class:`ParameterLayout`.

    Parameters
    ----------
    layout : ParameterLayout
    terms : list of DensityTerm
    derived : dict of name -> Node, optional
        Deterministic quantities (linear predictors, probabilities) that
        stage modules evaluate on the posterior draws.
    """

    def __init__(self, layout: ParameterLayout, terms: list[DensityTerm], derived: dict[str, Node] | None = None):
        self.layout = layout
        self.terms = list(terms)
        self.derived = dict(derived or {})

    @property
    def dim(self) -> int:
        return self.layout.dim

    def lp_grad(self, x: np.ndarray):
        """Log density and gradient without validation (sampler hot path)."""
        tape: dict = {}
        grad = np.zeros(self.dim)
        lp = 0.0
        with np.errstate(all="ignore"):
            for t in self.terms:
                lp += t.logp_grad(x, tape, grad)
        return lp, grad

    def log_density_and_grad(self, x) -> tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionMismatch(f"expected parameter vector of length {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteDensity("parameter vector contains non-finite values")
        lp, grad = self.lp_grad(x)
        if not (np.isfinite(lp) and np.all(np.isfinite(grad))):
            raise NonFiniteDensity(f"log density {lp} or its gradient is not finite")
        return lp, grad

    def evaluate(self, name: str, x) -> np.ndarray:
        """Evaluate derived quantity ``name`` at one draw or a batch of draws."""
        return evaluate(self.derived[name], x)


def log_density_and_grad(model: Model, params) -> tuple[float, np.ndarray]:
    return model.log_density_and_grad(params)
