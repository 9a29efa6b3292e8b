"""Prior log-densities and the Gaussian-weight marginal likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from scipy.special import gammaln

from dagvi.sem import LOG_2PI, LowerTriWeights, NoiseScales, Permutation

_EULER = float(np.euler_gamma)
_SERIES_TERMS = 40
_CF_DEPTH = 120
# log of 1 / sqrt(2 pi^3), the horseshoe density constant
_HS_CONST = -0.5 * np.log(2.0 * np.pi ** 3)


@dataclass(frozen=True)
class HorseshoeSpec:
    eta: float

    def __post_init__(self):
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError("horseshoe global scale must be positive and finite")


@dataclass(frozen=True)
class GaussianWeightPriorSpec:
    nu: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")


def eta_rule_of_thumb(rho: float, d: int, n: int) -> float:
    """Global horseshoe scale ``rho / (d sqrt(n))`` for expected degree ``rho``."""
    if rho <= 0 or d < 1 or n < 1:
        raise ValueError("need rho > 0, d >= 1, n >= 1")
    return rho / (d * np.sqrt(n))


def log_scaled_exp1(z):
    """``log(exp(z) * E1(z))`` for ``z > 0``, stable for large ``z``.

    Power series below 1, continued fraction above.  Built from
    elementary jax ops so it is differentiable.
    """
    z = jnp.asarray(z, dtype=jnp.float64)
    small = z < 1.0
    zs = jnp.where(small, z, 0.5)
    zl = jnp.where(small, 1.5, z)

    k = jnp.arange(1, _SERIES_TERMS + 1, dtype=jnp.float64)
    log_fact = jnp.cumsum(jnp.log(k))
    terms = (-1.0) ** (k + 1) * jnp.exp(k * jnp.log(zs)[..., None] - log_fact - jnp.log(k))
    e1_small = -_EULER - jnp.log(zs) + jnp.sum(terms, axis=-1)
    g_small = zs + jnp.log(e1_small)

    # exp(z) E1(z) = 1 / (z + 1 - 1/(z + 3 - 4/(z + 5 - ...)))
    t = zl + 2.0 * _CF_DEPTH + 1.0
    for j in range(_CF_DEPTH, 0, -1):
        t = zl + 2.0 * j - 1.0 - j * j / t
    g_large = -jnp.log(t)
    return jnp.where(small, g_small, g_large)


def horseshoe_log_density(beta, eta):
    """Marginal horseshoe log-density of each entry of ``beta``.

    ``p(b) = exp(z) E1(z) / (eta sqrt(2 pi^3))`` with ``z = b^2 / (2 eta^2)``;
    infinite at ``b = 0``.
    """
    beta = jnp.asarray(beta, dtype=jnp.float64)
    z = 0.5 * (beta / eta) ** 2
    safe = jnp.where(z > 0, z, 1.0)
    val = _HS_CONST - jnp.log(eta) + log_scaled_exp1(safe)
    return jnp.where(z > 0, val, jnp.inf)


def _values(l):
    return l.values if isinstance(l, LowerTriWeights) else l


def horseshoe_log_prior(l, spec: HorseshoeSpec):
    return jnp.sum(horseshoe_log_density(_values(l), spec.eta))


def laplace_log_prior(l, b: float):
    if not b > 0:
        raise ValueError("Laplace scale must be positive")
    v = jnp.asarray(_values(l), dtype=jnp.float64)
    return jnp.sum(-jnp.log(2.0 * b) - jnp.abs(v) / b)


def gaussian_log_prior(l, nu: float):
    v = jnp.asarray(_values(l), dtype=jnp.float64)
    return jnp.sum(-0.5 * LOG_2PI - jnp.log(nu) - 0.5 * (v / nu) ** 2)


def log_prior_log_sigma(noise, s0: float = 10.0):
    """Independent ``N(0, s0^2)`` on the free log-sigma coordinates."""
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    ls = noise.free_log_sigma if isinstance(noise, NoiseScales) else noise
    ls = jnp.asarray(ls, dtype=jnp.float64)
    return jnp.sum(-0.5 * LOG_2PI - np.log(s0) - 0.5 * (ls / s0) ** 2)


def log_prior_permutation(d: int) -> float:
    if d < 1:
        raise ValueError("d must be positive")
    return float(-gammaln(d + 1))


def parent_energy(x, p: Permutation) -> np.ndarray:
    """``diag(P G^T P^T x^2)``: for each node, the sum of squares of the
    values at all positions that may be its parents under ``W = P L P^T``."""
    x = np.asarray(x, dtype=np.float64)
    pm = p.matrix()
    g = np.tril(np.ones((p.size, p.size)), -1)
    return pm @ g.T @ pm.T @ (x ** 2)


def marginal_log_likelihood_gaussian_prior(x, p: Permutation, noise: NoiseScales,
                                           spec: GaussianWeightPriorSpec) -> float:
    """``log p(x | P, Sigma)`` with the edge weights integrated against
    ``N(0, nu^2 I)``, in closed form (single observation)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.shape[0]
    if d < 2 or p.size != d or noise.size != d:
        raise ValueError("need d >= 2 and matching dimensions")
    nu = spec.nu
    var = noise.variances
    dd = parent_energy(x, p)
    zero = np.flatnonzero(dd == 0)
    if zero.size != 1:
        raise ValueError(f"degenerate observation: {zero.size} zero parent energies")
    keep = np.ones(d, dtype=bool)
    keep[zero[0]] = False
    s = nu ** 2 * dd / (var * (var + nu ** 2 * dd))
    d_p = dd[keep]
    inner = 1.0 / var[keep] + 1.0 / (d_p * nu ** 2)
    return float(
        -0.5 * d * LOG_2PI
        - np.sum(noise.log_sigma)
        - (d - 1) * np.log(nu)
        - 0.5 * np.sum(x ** 2 / var)
        + 0.5 * np.sum(s * x ** 2)
        - 0.5 * np.sum(np.log(d_p))
        - 0.5 * np.sum(np.log(inner))
    )


def gaussian_marginal_log_likelihood(x, p_matrix, log_sigma, nu):
    """Dataset sum of the Gaussian-weight marginal likelihood (jax kernel).

    Each node is ``N(0, sigma_j^2 + nu^2 D_j)`` given its predecessors, which
    is the same quantity as the closed form above, in a form that accepts a
    relaxed (doubly-stochastic) ``p_matrix`` and batches over rows.
    """
    d = p_matrix.shape[0]
    g = jnp.tril(jnp.ones((d, d)), -1)
    energy = (x ** 2) @ (p_matrix @ g @ p_matrix.T)
    var = jnp.exp(2.0 * log_sigma) + nu ** 2 * energy
    return jnp.sum(-0.5 * LOG_2PI - 0.5 * jnp.log(var) - 0.5 * x ** 2 / var)


@dataclass(frozen=True)
class Priors:
    """Bundle of priors used by the ELBO.

    ``weight`` is one of ``horseshoe``, ``laplace``, ``gaussian`` or
    ``gaussian-marginal`` (weights integrated out of the likelihood).
    """

    weight: str = "horseshoe"
    eta: float = 0.02
    laplace_scale: float = 0.5
    nu: float = 1.0
    log_sigma_std: float = 10.0

    def __post_init__(self):
        if self.weight not in ("horseshoe", "laplace", "gaussian", "gaussian-marginal"):
            raise ValueError(f"unknown weight prior {self.weight!r}")
        for name in ("eta", "laplace_scale", "nu", "log_sigma_std"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def log_weight_prior(self, l):
        if self.weight == "horseshoe":
            return jnp.sum(horseshoe_log_density(l, self.eta))
        if self.weight == "laplace":
            return laplace_log_prior(l, self.laplace_scale)
        return gaussian_log_prior(l, self.nu)

    def log_noise_prior(self, log_sigma_free):
        return log_prior_log_sigma(log_sigma_free, self.log_sigma_std)
