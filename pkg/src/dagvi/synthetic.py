"""Ground-truth SEMs and datasets on Erdos-Renyi DAGs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from dagvi.sem import (
    Dataset,
    LowerTriWeights,
    NoiseScales,
    Permutation,
    SemParams,
    n_lower,
    propagate,
)

EULER_GAMMA = float(np.euler_gamma)


@dataclass(frozen=True)
class GraphSpec:
    d: int
    avg_degree: float = 1.0
    weight_range: Tuple[float, float] = (0.5, 2.0)
    noise_kind: str = "gaussian"
    variance_mode: str = "equal"
    noise_scale_range: Tuple[float, float] = (0.5, 2.0)
    sigma: float = 1.0

    def __post_init__(self):
        low, high = self.weight_range
        if self.d < 1:
            raise ValueError("d must be positive")
        if not 0 < low < high:
            raise ValueError("weight_range must satisfy 0 < low < high")
        if self.avg_degree < 0 or (self.d > 1 and self.avg_degree * self.d / 2 > n_lower(self.d) + 1e-12):
            raise ValueError(f"avg_degree {self.avg_degree} impossible for d={self.d}")
        if self.noise_kind not in ("gaussian", "gumbel"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.variance_mode not in ("equal", "nonequal"):
            raise ValueError(f"unknown variance mode {self.variance_mode!r}")
        lo, hi = self.noise_scale_range
        if not 0 < lo <= hi:
            raise ValueError("noise_scale_range must be positive and ordered")

    @property
    def edge_probability(self) -> float:
        if self.d < 2:
            return 0.0
        return min(1.0, self.avg_degree / (self.d - 1))


def sample_er_dag(spec: GraphSpec, rng: np.random.Generator):
    """Binary strictly-lower adjacency in canonical order plus a random relabelling."""
    d = spec.d
    mask = np.tril(rng.random((d, d)) < spec.edge_probability, -1)
    return mask.astype(np.float64), Permutation(rng.permutation(d))


def sample_weights(adjacency, spec: GraphSpec, rng: np.random.Generator) -> LowerTriWeights:
    adjacency = np.asarray(adjacency)
    d = adjacency.shape[0]
    if np.any(np.triu(adjacency) != 0):
        raise ValueError("adjacency must be strictly lower triangular")
    low, high = spec.weight_range
    present = adjacency[np.tril_indices(d, -1)] != 0
    k = n_lower(d)
    magnitude = rng.uniform(low, high, size=k)
    sign = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    return LowerTriWeights(d, np.where(present, sign * magnitude, 0.0))


def sample_noise_scales(spec: GraphSpec, rng: np.random.Generator) -> NoiseScales:
    if spec.variance_mode == "equal":
        return NoiseScales.constant(spec.d, spec.sigma)
    lo, hi = spec.noise_scale_range
    return NoiseScales(spec.d, np.log(rng.uniform(lo, hi, size=spec.d)), equal_variance=False)


def sample_noise(spec: GraphSpec, noise: NoiseScales, n: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean noise with per-node variance sigma_j^2 (Gaussian or Gumbel)."""
    sigma = noise.sigma
    if spec.noise_kind == "gaussian":
        return rng.standard_normal((n, spec.d)) * sigma
    beta = sigma * np.sqrt(6.0) / np.pi
    return rng.gumbel(loc=-beta * EULER_GAMMA, scale=beta, size=(n, spec.d))


def sample_sem(spec: GraphSpec, rng: np.random.Generator) -> SemParams:
    adjacency, p = sample_er_dag(spec, rng)
    l = sample_weights(adjacency, spec, rng)
    return SemParams(p, l, sample_noise_scales(spec, rng))


def sample_dataset(spec: GraphSpec, n: int, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    params = sample_sem(spec, rng)
    eps = sample_noise(spec, params.noise, n, rng)
    return Dataset(
        propagate(params, eps),
        source="synthetic",
        truth=params,
        meta={"noise_kind": spec.noise_kind, "avg_degree": spec.avg_degree},
    )
