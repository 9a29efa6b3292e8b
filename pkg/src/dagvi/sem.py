"""Linear-Gaussian structural equation models.

Conventions used throughout the package:

* ``W[i, j]`` is the weight of the edge ``i -> j`` and ``X = W^T X + eps``.
* ``W = P L P^T`` with ``L`` strictly lower triangular, so in the permuted
  coordinates ``y = P^T x`` position ``k`` can only have parents at
  positions ``> k``.  Position ``d - 1`` is therefore always a source.
* Row ``i`` of a permutation matrix has its single 1 in column
  ``mapping[i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jax.numpy as jnp
import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Permutation:
    mapping: np.ndarray

    def __post_init__(self):
        mapping = np.asarray(self.mapping, dtype=np.int64)
        d = mapping.shape[0]
        if mapping.ndim != 1 or d == 0:
            raise ValueError("permutation mapping must be a non-empty vector")
        if not np.array_equal(np.sort(mapping), np.arange(d)):
            raise ValueError(f"not a bijection on [0, {d}): {mapping.tolist()}")
        object.__setattr__(self, "mapping", mapping)

    @property
    def size(self) -> int:
        return int(self.mapping.shape[0])

    @classmethod
    def identity(cls, d: int) -> "Permutation":
        return cls(np.arange(d))

    @classmethod
    def from_matrix(cls, m) -> "Permutation":
        m = np.asarray(m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("permutation matrix must be square")
        if not (np.all((m == 0) | (m == 1)) and np.all(m.sum(0) == 1) and np.all(m.sum(1) == 1)):
            raise ValueError("not a permutation matrix")
        return cls(np.argmax(m, axis=1))

    def matrix(self) -> np.ndarray:
        d = self.size
        out = np.zeros((d, d))
        out[np.arange(d), self.mapping] = 1.0
        return out

    def inverse(self) -> "Permutation":
        return Permutation(np.argsort(self.mapping))

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.mapping, other.mapping)

    def __hash__(self):
        return hash(tuple(self.mapping.tolist()))


def n_lower(d: int) -> int:
    return d * (d - 1) // 2


@dataclass(frozen=True)
class LowerTriWeights:
    """Strictly lower-triangular weights, packed row-major (row 1 first)."""

    size: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != n_lower(self.size):
            raise ValueError(
                f"expected {n_lower(self.size)} weights for d={self.size}, got {values.shape[0]}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, d: int) -> "LowerTriWeights":
        return cls(d, np.zeros(n_lower(d)))

    @classmethod
    def from_matrix(cls, m) -> "LowerTriWeights":
        m = np.asarray(m, dtype=np.float64)
        d = m.shape[0]
        if np.any(np.triu(m) != 0):
            raise ValueError("matrix has entries on or above the diagonal")
        return cls(d, m[np.tril_indices(d, -1)])

    def matrix(self) -> np.ndarray:
        return unpack_lower(self.values, self.size)


def unpack_lower(values, d: int):
    """Inverse of the row-major strictly-lower packing; works on jax arrays."""
    rows, cols = np.tril_indices(d, -1)
    if isinstance(values, np.ndarray):
        out = np.zeros((d, d))
        out[rows, cols] = values
        return out
    return jnp.zeros((d, d), dtype=values.dtype).at[rows, cols].set(values)


@dataclass(frozen=True)
class NoiseScales:
    """Noise standard deviations stored as natural logs."""

    size: int
    log_sigma: np.ndarray
    equal_variance: bool = False

    def __post_init__(self):
        ls = np.asarray(self.log_sigma, dtype=np.float64).reshape(-1)
        if ls.shape[0] == 1 and self.size > 1:
            ls = np.full(self.size, ls[0])
        if ls.shape[0] != self.size:
            raise ValueError(f"expected {self.size} log-sigmas, got {ls.shape[0]}")
        if not np.all(np.isfinite(ls)):
            raise ValueError("log_sigma must be finite")
        if self.equal_variance and np.ptp(ls) != 0:
            raise ValueError("equal_variance noise must have identical entries")
        object.__setattr__(self, "log_sigma", ls)

    @classmethod
    def constant(cls, d: int, sigma: float = 1.0) -> "NoiseScales":
        return cls(d, np.full(d, np.log(sigma)), equal_variance=True)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def variances(self) -> np.ndarray:
        return np.exp(2.0 * self.log_sigma)

    @property
    def free_log_sigma(self) -> np.ndarray:
        """The 1 (equal variance) or d free coordinates."""
        return self.log_sigma[:1] if self.equal_variance else self.log_sigma


@dataclass(frozen=True)
class SemParams:
    p: Permutation
    l: LowerTriWeights
    noise: NoiseScales

    def __post_init__(self):
        if not (self.p.size == self.l.size == self.noise.size):
            raise ValueError("dimension mismatch between P, L and noise")

    @property
    def d(self) -> int:
        return self.p.size

    def adjacency(self) -> np.ndarray:
        return compose_adjacency(self.p, self.l)


@dataclass
class Dataset:
    values: np.ndarray
    source: str = "synthetic"
    truth: Optional[SemParams] = None
    path: Optional[Path] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("dataset must be an n x d matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("dataset contains non-finite entries")
        if self.truth is not None and self.truth.d != self.d:
            raise ValueError("ground truth dimension does not match data")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def d(self) -> int:
        return int(self.values.shape[1])

    def scatter(self) -> np.ndarray:
        return self.values.T @ self.values


def compose_adjacency(p: Permutation, l: LowerTriWeights) -> np.ndarray:
    if p.size != l.size:
        raise ValueError(f"permutation size {p.size} != weight size {l.size}")
    pm = p.matrix()
    return pm @ l.matrix() @ pm.T


def precision_matrix(w, noise: NoiseScales) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    if w.shape != (d, d) or noise.size != d:
        raise ValueError("dimension mismatch")
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite adjacency")
    a = np.eye(d) - w
    theta = (a / noise.variances) @ a.T
    return 0.5 * (theta + theta.T)


def log_likelihood(data: Dataset, w, noise: NoiseScales) -> float:
    """Gaussian log-likelihood of all rows with precision ``(I-W) S^-1 (I-W)^T``."""
    w = np.asarray(w, dtype=np.float64)
    if data.d != w.shape[0]:
        raise ValueError(f"data has d={data.d}, adjacency has d={w.shape[0]}")
    theta = precision_matrix(w, noise)
    sign, logdet = np.linalg.slogdet(theta)
    quad = np.einsum("ij,ij->", data.scatter(), theta)
    out = 0.5 * data.n * (logdet - data.d * LOG_2PI) - 0.5 * quad
    if sign <= 0 or not np.isfinite(out):
        raise FloatingPointError("log-likelihood is not finite; degenerate noise scales?")
    return float(out)


def dag_log_likelihood(scatter, n, w, log_sigma):
    """Differentiable kernel of ``log_likelihood`` for DAG adjacencies.

    Uses ``log det Theta = -2 sum(log sigma)``, which holds whenever
    ``W`` is a DAG, and the data only through ``X^T X``.
    """
    d = w.shape[0]
    a = jnp.eye(d) - w
    quad = jnp.sum((a.T @ scatter @ a).diagonal() * jnp.exp(-2.0 * log_sigma))
    return -n * jnp.sum(log_sigma) - 0.5 * n * d * LOG_2PI - 0.5 * quad


def _positions(params: SemParams):
    """Node index at each permuted position, and the ``L`` matrix."""
    inv = np.argsort(params.p.mapping)
    return inv, params.l.matrix()


def propagate(params: SemParams, eps: np.ndarray, clamp: Optional[dict] = None) -> np.ndarray:
    """Solve ``x = W^T x + eps`` row-wise by back-substitution.

    ``clamp`` maps node index to a fixed value (a do-intervention): the node
    ignores its parents and noise.
    """
    eps = np.asarray(eps, dtype=np.float64)
    n, d = eps.shape
    inv, lmat = _positions(params)
    y = np.zeros((n, d))
    clamp = clamp or {}
    for k in range(d - 1, -1, -1):
        node = inv[k]
        if node in clamp:
            y[:, k] = clamp[node]
            continue
        y[:, k] = y[:, k + 1:] @ lmat[k + 1:, k] + eps[:, node]
    return y[:, params.p.mapping]


def sample_observational(params: SemParams, n: int, rng: np.random.Generator,
                         source: str = "synthetic") -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    eps = rng.standard_normal((n, params.d)) * params.noise.sigma
    return Dataset(propagate(params, eps), source=source, truth=params)


def sample_interventional(params: SemParams, node: int, value: float, n: int,
                          rng: np.random.Generator) -> np.ndarray:
    if not 0 <= node < params.d:
        raise IndexError(f"node {node} out of range for d={params.d}")
    eps = rng.standard_normal((n, params.d)) * params.noise.sigma
    return propagate(params, eps, clamp={node: float(value)})


def topological_order(params: SemParams) -> np.ndarray:
    """Nodes listed sources first."""
    return np.argsort(params.p.mapping)[::-1]
