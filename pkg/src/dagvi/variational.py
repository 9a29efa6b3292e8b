"""Approximate posterior ``q(P | L, Sigma) q(L, Sigma)``.

``q(L, Sigma)`` is a Gaussian over the packed weights and the free
log-sigma coordinates (diagonal covariance for the equal-variance model,
full Cholesky factor otherwise).  ``q(P | L, Sigma)`` is a Gumbel-Sinkhorn
relaxation whose logits come from a one-hidden-layer network applied to
the sampled ``(l, log sigma)`` vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import jax
import jax.numpy as jnp
import numpy as np

from dagvi import permutation as perm
from dagvi.sem import LOG_2PI, LowerTriWeights, NoiseScales, Permutation, SemParams, n_lower, unpack_lower

LOGIT_RANGE = 20.0
HIDDEN = 128
CHECKPOINT_MAGIC = b"DAGVICK1"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIBBBxdI")


@dataclass(frozen=True)
class StateConfig:
    d: int
    equal_variance: bool = True
    variant: str = "diagonal"
    tau: float = perm.DEFAULT_TAU
    mean_field: bool = False
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.variant not in ("diagonal", "full"):
            raise ValueError(f"unknown family variant {self.variant!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def n_weights(self) -> int:
        return n_lower(self.d)

    @property
    def n_sigma(self) -> int:
        return 1 if self.equal_variance else self.d

    @property
    def dim(self) -> int:
        return self.n_weights + self.n_sigma


@dataclass(frozen=True)
class VariationalState:
    config: StateConfig
    params: Dict[str, Dict[str, jnp.ndarray]]

    @property
    def d(self) -> int:
        return self.config.d

    def with_params(self, params) -> "VariationalState":
        return replace(self, params=params)


def init_state(d: int, key, equal_variance: bool = True, variant: Optional[str] = None,
               tau: float = perm.DEFAULT_TAU, mean_field: bool = False, hidden: int = HIDDEN,
               init_log_std: float = -1.0, output_scale: float = 0.1) -> VariationalState:
    """Fresh state: zero-mean family, He-normal first layer, small output layer."""
    if variant is None:
        variant = "diagonal" if equal_variance else "full"
    cfg = StateConfig(d, equal_variance, variant, tau, mean_field, hidden)
    m = cfg.dim
    k1, k2 = jax.random.split(key)
    if variant == "diagonal":
        family = {"mean": jnp.zeros(m), "log_std": jnp.full(m, init_log_std)}
    else:
        family = {"mean": jnp.zeros(m), "chol": jnp.diag(jnp.full(m, init_log_std))}
    if mean_field:
        net = {"logits": jnp.zeros((d, d))}
    else:
        net = {
            "w1": jax.random.normal(k1, (m, hidden)) * np.sqrt(2.0 / m),
            "b1": jnp.zeros(hidden),
            "w2": jax.random.normal(k2, (hidden, d * d)) * np.sqrt(2.0 / hidden) * output_scale,
            "b2": jnp.zeros(d * d),
        }
    params = jax.tree_util.tree_map(lambda x: jnp.array(x, dtype=jnp.float64), {"family": family, "net": net})
    return VariationalState(cfg, params)


# --------------------------------------------------------------------------
# (L, Sigma) family
# --------------------------------------------------------------------------

def _scale_matrix(family):
    raw = family["chol"]
    return jnp.tril(raw, -1) + jnp.diag(jnp.exp(jnp.diag(raw)))


def draw_l_sigma(family, cfg: StateConfig, u):
    """Reparameterised draw ``z = mean + scale u``; returns ``(l, free log sigma, log q)``."""
    if cfg.variant == "diagonal":
        z = family["mean"] + jnp.exp(family["log_std"]) * u
        log_det = jnp.sum(family["log_std"])
    else:
        z = family["mean"] + _scale_matrix(family) @ u
        log_det = jnp.sum(jnp.diag(family["chol"]))
    log_q = -0.5 * cfg.dim * LOG_2PI - 0.5 * jnp.sum(u ** 2) - log_det
    return z[:cfg.n_weights], z[cfg.n_weights:], log_q


def family_log_density(family, cfg: StateConfig, z):
    """Exact Gaussian log-density of ``q(L, Sigma)`` at the point ``z``."""
    mean = family["mean"]
    if cfg.variant == "diagonal":
        u = (z - mean) / jnp.exp(family["log_std"])
        log_det = jnp.sum(family["log_std"])
    else:
        u = jax.scipy.linalg.solve_triangular(_scale_matrix(family), z - mean, lower=True)
        log_det = jnp.sum(jnp.diag(family["chol"]))
    return -0.5 * cfg.dim * LOG_2PI - 0.5 * jnp.sum(u ** 2) - log_det


def full_log_sigma(ls_free, cfg: StateConfig):
    if cfg.equal_variance:
        return jnp.broadcast_to(ls_free[0], (cfg.d,))
    return ls_free


def sample_l_sigma(state: VariationalState, key):
    """Draw ``(L, Sigma)`` and return them with ``log q(L, Sigma)`` at the draw."""
    cfg = state.config
    u = jax.random.normal(key, (cfg.dim,), dtype=jnp.float64)
    l, ls_free, log_q = draw_l_sigma(state.params["family"], cfg, u)
    ls = np.asarray(full_log_sigma(ls_free, cfg))
    noise = NoiseScales(cfg.d, ls, equal_variance=cfg.equal_variance)
    return LowerTriWeights(cfg.d, np.asarray(l)), noise, float(log_q)


# --------------------------------------------------------------------------
# q(P | L, Sigma)
# --------------------------------------------------------------------------

def logits_from_net(net, cfg: StateConfig, l, ls_free):
    if cfg.mean_field:
        out = net["logits"]
    else:
        h = jnp.concatenate([l, ls_free])
        h = jax.nn.relu(h @ net["w1"] + net["b1"])
        out = (h @ net["w2"] + net["b2"]).reshape(cfg.d, cfg.d)
    # 20 * (2 sigmoid(out) - 1)
    return LOGIT_RANGE * jnp.tanh(0.5 * out)


def conditional_logits(state: VariationalState, l, noise) -> np.ndarray:
    cfg = state.config
    lv = l.values if isinstance(l, LowerTriWeights) else l
    if isinstance(noise, NoiseScales):
        ls_free = noise.free_log_sigma
    else:
        ls_free = np.asarray(noise)[: cfg.n_sigma]
    t = logits_from_net(state.params["net"], cfg, jnp.asarray(lv, dtype=jnp.float64),
                        jnp.asarray(ls_free, dtype=jnp.float64))
    return np.asarray(t)


@dataclass(frozen=True)
class JointDraw:
    params: SemParams
    gumbel: perm.GumbelSinkhornDraw
    log_q_l_sigma: float
    log_q_p: float


def sample_joint(state: VariationalState, key, tol: float = perm.DEFAULT_TOL,
                 max_iters: int = perm.DEFAULT_MAX_ITERS) -> JointDraw:
    k1, k2 = jax.random.split(key)
    l, noise, log_q = sample_l_sigma(state, k1)
    t = conditional_logits(state, l, noise)
    draw = perm.gumbel_sinkhorn_sample(t, state.config.tau, tol, max_iters, key=k2)
    log_q_p = perm.boltzmann_log_prob(draw.hard, t)
    return JointDraw(SemParams(draw.hard, l, noise), draw, log_q, log_q_p)


def _batched_draw(params, cfg: StateConfig, key, count: int, tol: float, max_iters: int):
    def one(k):
        k1, k2 = jax.random.split(k)
        u = jax.random.normal(k1, (cfg.dim,), dtype=jnp.float64)
        l, ls_free, _ = draw_l_sigma(params["family"], cfg, u)
        t = logits_from_net(params["net"], cfg, l, ls_free)
        gamma = perm.sample_gumbel(k2, (cfg.d, cfg.d))
        log_soft, _, _ = perm.log_sinkhorn((t + gamma) / cfg.tau, tol, max_iters, 0)
        hard = perm.hard_permutation_matrix(jnp.exp(log_soft))
        return hard, l, full_log_sigma(ls_free, cfg)

    return jax.vmap(one)(jax.random.split(key, count))


_batched_draw_jit = jax.jit(_batched_draw, static_argnums=(1, 3, 4, 5))


def sample_posterior(state: VariationalState, key, count: int, tol: float = perm.DEFAULT_TOL,
                     max_iters: int = perm.DEFAULT_MAX_ITERS) -> List[SemParams]:
    """``count`` independent SEMs ``(P hard, L, Sigma)`` from the posterior."""
    hard, l, ls = _batched_draw_jit(state.params, state.config, key, count, tol, max_iters)
    hard, l, ls = np.asarray(hard), np.asarray(l), np.asarray(ls)
    cfg = state.config
    out = []
    for i in range(count):
        out.append(SemParams(
            Permutation.from_matrix(np.rint(hard[i])),
            LowerTriWeights(cfg.d, l[i]),
            NoiseScales(cfg.d, ls[i], equal_variance=cfg.equal_variance),
        ))
    return out


def posterior_adjacencies(state: VariationalState, key, count: int, **kwargs) -> np.ndarray:
    return np.stack([s.adjacency() for s in sample_posterior(state, key, count, **kwargs)])


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def _field_order(cfg: StateConfig):
    """``(group, name, shape)`` in on-disk order."""
    m, d, h = cfg.dim, cfg.d, cfg.hidden
    order = [("family", "mean", (m,))]
    if cfg.variant == "diagonal":
        order.append(("family", "log_std", (m,)))
    else:
        order.append(("family", "chol", (m, m)))
    if cfg.mean_field:
        order.append(("net", "logits", (d, d)))
    else:
        order += [("net", "w1", (m, h)), ("net", "b1", (h,)),
                  ("net", "w2", (h, d * d)), ("net", "b2", (d * d,))]
    return order


def save_checkpoint(state: VariationalState, path) -> None:
    """Header ``<magic, version, d, variant, equal_variance, mean_field, tau, hidden>``
    followed by raw little-endian float64 arrays in field order."""
    cfg = state.config
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.d,
                          0 if cfg.variant == "diagonal" else 1,
                          int(cfg.equal_variance), int(cfg.mean_field), cfg.tau, cfg.hidden)
    with open(path, "wb") as fh:
        fh.write(header)
        for group, name, shape in _field_order(cfg):
            arr = np.asarray(state.params[group][name], dtype="<f8")
            if arr.shape != shape:
                raise ValueError(f"{group}.{name} has shape {arr.shape}, expected {shape}")
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> VariationalState:
    raw = Path(path).read_bytes()
    magic, version, d, variant, eq, mf, tau, hidden = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = StateConfig(d, bool(eq), "diagonal" if variant == 0 else "full", tau, bool(mf), hidden)
    offset = _HEADER.size
    params: Dict[str, Dict[str, jnp.ndarray]] = {"family": {}, "net": {}}
    for group, name, shape in _field_order(cfg):
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[group][name] = jnp.asarray(arr.astype(np.float64))
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return VariationalState(cfg, params)
