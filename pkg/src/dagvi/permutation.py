"""Distributions over permutations.

Sinkhorn normalisation, Gumbel-Sinkhorn sampling, maximum-weight matching
and the Boltzmann density ``P_T(P) ~ exp <T, P>`` whose partition function
(the permanent of ``exp T``) is approximated by the Bethe permanent.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax
from jax.scipy.special import logsumexp
from scipy.optimize import linear_sum_assignment

from dagvi.sem import Permutation

DEFAULT_TOL = 0.01
DEFAULT_MAX_ITERS = 2000
DEFAULT_GRAD_ITERS = 200
DEFAULT_TAU = 0.2
BETHE_ITERS = 200
BETHE_DAMPING = 0.5


@dataclass(frozen=True)
class DoublyStochastic:
    m: np.ndarray
    achieved_tolerance: float
    iterations: int


@dataclass(frozen=True)
class GumbelSinkhornDraw:
    logits: np.ndarray
    gumbel_noise: np.ndarray
    tau: float
    soft: DoublyStochastic
    hard: Permutation


def _marginal_error(log_m):
    m = jnp.exp(log_m)
    return jnp.maximum(jnp.max(jnp.abs(m.sum(1) - 1.0)), jnp.max(jnp.abs(m.sum(0) - 1.0)))


def _sweep(x, f, g):
    f = logsumexp(x - g[None, :], axis=1)
    g = logsumexp(x - f[:, None], axis=0)
    return f, g


def log_sinkhorn(x, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, grad_iters=DEFAULT_GRAD_ITERS):
    """Log-space Sinkhorn operator on ``exp(x)``.

    Runs row/column normalisation sweeps until every marginal is within
    ``tol`` of one, then ``grad_iters`` further sweeps through which
    gradients flow; the earlier sweeps are treated as constants.  The
    total never exceeds ``max_iters``.

    Returns ``(log_matrix, achieved_tolerance, sweeps)``.
    """
    d = x.shape[0]
    grad_iters = int(min(grad_iters, max_iters))
    budget = max_iters - grad_iters
    x_const = lax.stop_gradient(x)

    def cond(state):
        it, f, g, err = state
        return (it < budget) & (err > tol)

    def body(state):
        it, f, g, _ = state
        f, g = _sweep(x_const, f, g)
        return it + 1, f, g, _marginal_error(x_const - f[:, None] - g[None, :])

    zeros = jnp.zeros(d, dtype=x.dtype)
    it, f, g, _ = lax.while_loop(cond, body, (0, zeros, zeros, _marginal_error(x_const)))
    f, g = lax.stop_gradient(f), lax.stop_gradient(g)

    def step(carry, _):
        return _sweep(x, *carry), None

    (f, g), _ = lax.scan(step, (f, g), None, length=grad_iters)
    log_m = x - f[:, None] - g[None, :]
    return log_m, _marginal_error(log_m), it + grad_iters


def sinkhorn(t, tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
             grad_iters: int = DEFAULT_GRAD_ITERS) -> DoublyStochastic:
    if tol <= 0 or max_iters < 1:
        raise ValueError("need tol > 0 and max_iters >= 1")
    log_m, err, it = _log_sinkhorn_jit(jnp.asarray(t, dtype=jnp.float64), tol, max_iters, grad_iters)
    return DoublyStochastic(np.exp(np.asarray(log_m)), float(err), int(it))


_log_sinkhorn_jit = jax.jit(log_sinkhorn, static_argnums=(2, 3))


def sample_gumbel(key, shape):
    return jax.random.gumbel(key, shape, dtype=jnp.float64)


# --------------------------------------------------------------------------
# Maximum-weight matching
# --------------------------------------------------------------------------

def _best_value(m: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(m, maximize=True)
    return float(m[rows, cols].sum())


def hungarian_mapping(m) -> np.ndarray:
    """Column index per row of the maximum-weight assignment of ``m``.

    Among optimal assignments the lexicographically smallest mapping wins.
    Uniqueness is probed by forbidding each matched edge in turn; only when
    a tie exists is the mapping rebuilt greedily row by row.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix must be finite")
    n = m.shape[0]
    rows, mapping = linear_sum_assignment(m, maximize=True)
    if n == 1:
        return mapping.astype(np.int64)
    best = float(m[rows, mapping].sum())
    atol = 1e-12 * n * (1.0 + np.max(np.abs(m)))
    # a forbidden entry must be worse than any feasible assignment
    forbid = np.min(m) - 2.0 * n * (1.0 + np.max(np.abs(m)))

    tied = False
    for i in range(n):
        alt = m.copy()
        alt[i, mapping[i]] = forbid
        if _best_value(alt) >= best - atol:
            tied = True
            break
    if not tied:
        return mapping.astype(np.int64)

    out = np.zeros(n, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    fixed = 0.0
    for i in range(n):
        for j in np.flatnonzero(free):
            free[j] = False
            rest = m[i + 1:][:, free]
            value = fixed + m[i, j] + (_best_value(rest) if rest.size else 0.0)
            if value >= best - atol:
                out[i] = j
                fixed += m[i, j]
                break
            free[j] = True
    return out


def hungarian(m) -> Permutation:
    return Permutation(hungarian_mapping(m))


def _hard_matrix_host(m):
    m = np.asarray(m)
    out = np.zeros_like(m)
    out[np.arange(m.shape[0]), hungarian_mapping(m)] = 1.0
    return out


def hard_permutation_matrix(m):
    """Hungarian hardening usable inside ``jax.jit`` (not differentiable)."""
    m = lax.stop_gradient(m)
    return jax.pure_callback(
        _hard_matrix_host, jax.ShapeDtypeStruct(m.shape, m.dtype), m, vmap_method="sequential"
    )


def gumbel_sinkhorn_sample(t, tau: float = DEFAULT_TAU, tol: float = DEFAULT_TOL,
                           max_iters: int = DEFAULT_MAX_ITERS, key=None) -> GumbelSinkhornDraw:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    t = jnp.asarray(t, dtype=jnp.float64)
    key = jax.random.key(0) if key is None else key
    noise = sample_gumbel(key, t.shape)
    soft = sinkhorn((t + noise) / tau, tol=tol, max_iters=max_iters)
    return GumbelSinkhornDraw(
        logits=np.asarray(t),
        gumbel_noise=np.asarray(noise),
        tau=float(tau),
        soft=soft,
        hard=hungarian(soft.m),
    )


# --------------------------------------------------------------------------
# Bethe permanent
# --------------------------------------------------------------------------

class BetheEstimate(NamedTuple):
    value: float
    residual: float
    marginals: np.ndarray


def _leave_one_out_lse(v, axis):
    """``out[i, j] = logsumexp_{k != j} v[i, k]`` (axis=1) or over rows (axis=0)."""
    d = v.shape[0]
    off = jnp.where(jnp.eye(d, dtype=bool), -jnp.inf, 0.0)
    if axis == 1:
        return logsumexp(v[:, None, :] + off[None, :, :], axis=2)
    return logsumexp(v.T[:, None, :] + off[None, :, :], axis=2).T


def _bethe_objective(t, z):
    log_b = jax.nn.log_sigmoid(z)
    log_1mb = jax.nn.log_sigmoid(-z)
    b = jnp.exp(log_b)
    return jnp.sum(b * t) - jnp.sum(b * log_b) + jnp.sum((1.0 - b) * log_1mb)


def bethe_state(t, iters: int = BETHE_ITERS, damping: float = BETHE_DAMPING, tol: float = 1e-10):
    """Damped sum-product messages on the bipartite assignment graph.

    With ``A = exp(t)`` the row-to-edge message ratios ``x`` and
    column-to-edge ratios ``y`` satisfy ``x_ij = 1 / sum_{k!=j} A_ik y_ik``
    and ``y_ij = 1 / sum_{l!=i} A_lj x_lj``.  Edge beliefs are
    ``sigmoid(t + log x + log y)``; the Bethe free energy is evaluated at
    those beliefs.  Returns ``(log_perm_b, beliefs, residual)``.
    """
    t = lax.stop_gradient(t)
    d = t.shape[0]
    if d == 1:
        return t[0, 0], jnp.ones_like(t), jnp.zeros((), dtype=t.dtype)

    def update(lx, ly):
        lx_new = -_leave_one_out_lse(t + ly, axis=1)
        lx_new = damping * lx + (1.0 - damping) * lx_new
        ly_new = -_leave_one_out_lse(t + lx_new, axis=0)
        ly_new = damping * ly + (1.0 - damping) * ly_new
        return lx_new, ly_new

    def cond(state):
        it, _, _, res = state
        return (it < iters) & (res > tol)

    def body(state):
        it, lx, ly, _ = state
        nx, ny = update(lx, ly)
        res = jnp.maximum(jnp.max(jnp.abs(nx - lx)), jnp.max(jnp.abs(ny - ly)))
        return it + 1, nx, ny, res

    zeros = jnp.zeros_like(t)
    _, lx, ly, res = lax.while_loop(cond, body, (0, zeros, zeros, jnp.array(jnp.inf, t.dtype)))
    z = t + lx + ly
    return _bethe_objective(t, z), jax.nn.sigmoid(z), res


@partial(jax.custom_vjp, nondiff_argnums=(1, 2))
def bethe_log_permanent(t, iters=BETHE_ITERS, damping=BETHE_DAMPING):
    """Differentiable ``log perm_B(exp t)``.

    The gradient is the matrix of Bethe edge marginals, which is the exact
    derivative of the Bethe free energy at a stationary point of the
    message iteration.
    """
    return bethe_state(t, iters, damping)[0]


def _bethe_fwd(t, iters, damping):
    value, beliefs, _ = bethe_state(t, iters, damping)
    return value, beliefs


def _bethe_bwd(iters, damping, beliefs, g):
    return (g * beliefs,)


bethe_log_permanent.defvjp(_bethe_fwd, _bethe_bwd)

_bethe_state_jit = jax.jit(bethe_state, static_argnums=(1, 2))


def log_bethe_permanent(t, iters: int = BETHE_ITERS, damping: float = BETHE_DAMPING) -> BetheEstimate:
    if iters < 1 or not 0 <= damping < 1:
        raise ValueError("need iters >= 1 and 0 <= damping < 1")
    value, beliefs, res = _bethe_state_jit(jnp.asarray(t, dtype=jnp.float64), iters, damping)
    return BetheEstimate(float(value), float(res), np.asarray(beliefs))


def boltzmann_log_prob_matrix(p_matrix, t, iters=BETHE_ITERS, damping=BETHE_DAMPING):
    """``<T, P> - log perm_B(exp T)``; differentiable in both arguments."""
    return jnp.sum(t * p_matrix) - bethe_log_permanent(t, iters, damping)


def boltzmann_log_prob(p: Permutation, t, log_partition: Optional[float] = None) -> float:
    """Log-probability of ``p`` under the Boltzmann distribution with logits ``t``.

    ``log_partition`` overrides the Bethe estimate (e.g. with an exact value).
    """
    t = np.asarray(t, dtype=np.float64)
    if p.size != t.shape[0]:
        raise ValueError("size mismatch")
    if log_partition is None:
        log_partition = log_bethe_permanent(t).value
    return float(t[np.arange(p.size), p.mapping].sum() - log_partition)
