"""Gradient-based MCMC over assembled log-density terms."""
from .diagnostics import convergence_table, ess_bulk, hpdi, mcse_mean, rhat, rhat_ess
from .draws import DrawMatrix, read_draws, write_draws
from .expr import BYM2, Add, Const, Exp, Logistic, MatVec, Mul, Node, Param, Sqrt, Take, as_node, evaluate
from .hmc import SamplerConfig, chain_rng, sample
from .model import Model, ParameterLayout, log_density_and_grad
from .terms import (
    TERM_KINDS,
    BernoulliLogitWeighted,
    DensityTerm,
    Gaussian,
    HalfGaussian,
    ICARPairwise,
    SoftSumToZero,
    StudentT,
    UniformLogit,
)

__all__ = [
    "convergence_table", "ess_bulk", "hpdi", "mcse_mean", "rhat", "rhat_ess",
    "DrawMatrix", "read_draws", "write_draws",
    "BYM2", "Add", "Const", "Exp", "Logistic", "MatVec", "Mul", "Node", "Param", "Sqrt", "Take", "as_node", "evaluate",
    "SamplerConfig", "chain_rng", "sample",
    "Model", "ParameterLayout", "log_density_and_grad",
    "TERM_KINDS", "BernoulliLogitWeighted", "DensityTerm", "Gaussian", "HalfGaussian", "ICARPairwise",
    "SoftSumToZero", "StudentT", "UniformLogit",
]
