"""Variational Bayesian structure learning for linear-Gaussian SEMs.

A DAG is written as ``W = P L P^T`` with ``P`` a permutation and ``L``
strictly lower triangular.  The posterior over ``(P, L, Sigma)`` is
approximated by ``q(P | L, Sigma) q(L, Sigma)``, where the permutation
factor is a Gumbel-Sinkhorn relaxation driven by a small network.
"""

import jax

# All numerics (finite-difference checks, Bethe bounds) assume float64.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"

from dagvi.sem import (  # noqa: E402
    Dataset,
    LowerTriWeights,
    NoiseScales,
    Permutation,
    SemParams,
    compose_adjacency,
    log_likelihood,
    precision_matrix,
    sample_interventional,
    sample_observational,
)

__all__ = [
    "Dataset",
    "LowerTriWeights",
    "NoiseScales",
    "Permutation",
    "SemParams",
    "compose_adjacency",
    "log_likelihood",
    "precision_matrix",
    "sample_interventional",
    "sample_observational",
]
