"""ELBO estimation, gradients and the optimisation loop.

Each Monte-Carlo sample draws ``(L, Sigma)`` from the Gaussian family,
computes logits ``T = h(L, Sigma)``, relaxes ``P`` with Gumbel-Sinkhorn and
hardens it with the Hungarian algorithm.  The hard permutation is used in
the forward pass and the relaxed one in the backward pass.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
import optax
from scipy.special import gammaln

from dagvi import permutation as perm
from dagvi.priors import Priors, gaussian_marginal_log_likelihood
from dagvi.sem import Dataset, dag_log_likelihood, precision_matrix, unpack_lower
from dagvi.variational import (
    VariationalState,
    draw_l_sigma,
    full_log_sigma,
    init_state,
    logits_from_net,
    sample_posterior,
    save_checkpoint,
)

log = logging.getLogger(__name__)

OPTIMIZERS = {"adam": optax.adam, "adabelief": optax.adabelief}

TRACE_FIELDS = ["step", "elbo", "expected_log_lik", "kl_l_sigma", "kl_p",
                "grad_norm", "sample_kl", "wall_time"]


@dataclass(frozen=True)
class SinkhornSettings:
    tol: float = perm.DEFAULT_TOL
    max_iters: int = perm.DEFAULT_MAX_ITERS
    grad_iters: int = perm.DEFAULT_GRAD_ITERS
    bethe_iters: int = perm.BETHE_ITERS
    bethe_damping: float = perm.BETHE_DAMPING


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 1e-3
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int = 20000
    min_steps: int = 2000
    plateau_window: int = 2000
    plateau_delta: float = 0.0
    grad_norm_threshold: float = 0.01
    divergence_margin: float = 1e6
    max_nonfinite: int = 50
    tau: float = perm.DEFAULT_TAU
    sinkhorn_tol: float = perm.DEFAULT_TOL
    sinkhorn_max_iters: int = perm.DEFAULT_MAX_ITERS
    sinkhorn_grad_iters: int = perm.DEFAULT_GRAD_ITERS
    mc_samples: int = 1
    seed: int = 0
    equal_variance: bool = True
    mean_field: bool = False
    log_every: int = 250
    sample_kl_draws: int = 20
    checkpoint_every: int = 0
    init_log_std: float = -2.0
    net_step_scale: float = 1.0
    restarts: int = 1
    restart_score_samples: int = 200

    def __post_init__(self):
        positive = ("step_size", "max_steps", "plateau_window", "tau", "sinkhorn_tol",
                    "sinkhorn_max_iters", "mc_samples", "log_every", "restarts", "restart_score_samples",
                    "net_step_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {sorted(OPTIMIZERS)}")

    @property
    def sinkhorn(self) -> SinkhornSettings:
        return SinkhornSettings(self.sinkhorn_tol, self.sinkhorn_max_iters, self.sinkhorn_grad_iters)


class ElboReport(NamedTuple):
    elbo: float
    expected_log_lik: float
    kl_l_sigma: float
    kl_p: float
    grad_norm: float = float("nan")
    step: int = 0


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteElbo(FloatingPointError):
    pass


@dataclass
class TrainResult:
    state: VariationalState
    trace: List[dict]
    status: str
    steps: int
    nonfinite_steps: int = 0
    restart_scores: tuple = ()


# --------------------------------------------------------------------------
# per-sample terms
# --------------------------------------------------------------------------

def _data_stats(data: Optional[Dataset], d: int):
    if data is None or data.n == 0:
        return {"x": jnp.zeros((0, d)), "scatter": jnp.zeros((d, d)), "n": 0.0}
    x = jnp.asarray(data.values)
    return {"x": x, "scatter": x.T @ x, "n": float(data.n)}


def sample_terms(params, cfg, u, gamma, stats, priors: Priors, sk: SinkhornSettings, mode: str):
    """ELBO of one draw and its parts.

    ``mode`` selects how ``P`` enters: ``"st"`` (hard forward, relaxed
    backward), ``"soft"`` (relaxed in both passes, a smooth surrogate) or
    ``"hard"`` (no gradient through ``P``).
    """
    d = cfg.d
    l, ls_free, log_q_ls = draw_l_sigma(params["family"], cfg, u)
    log_sigma = full_log_sigma(ls_free, cfg)
    t = logits_from_net(params["net"], cfg, l, ls_free)
    log_soft, sk_err, _ = perm.log_sinkhorn((t + gamma) / cfg.tau, sk.tol, sk.max_iters, sk.grad_iters)
    soft = jnp.exp(log_soft)
    if mode == "soft":
        p = soft
    else:
        hard = perm.hard_permutation_matrix(soft)
        p = soft + jax.lax.stop_gradient(hard - soft) if mode == "st" else hard

    if priors.weight == "gaussian-marginal":
        loglik = gaussian_marginal_log_likelihood(stats["x"], p, log_sigma, priors.nu)
    else:
        w = p @ unpack_lower(l, d) @ p.T
        loglik = dag_log_likelihood(stats["scatter"], stats["n"], w, log_sigma)

    log_q_p = jnp.sum(t * p) - perm.bethe_log_permanent(t, sk.bethe_iters, sk.bethe_damping)
    kl_p = log_q_p + gammaln(d + 1)
    kl_ls = log_q_ls - priors.log_weight_prior(l) - priors.log_noise_prior(ls_free)
    elbo = loglik - kl_p - kl_ls
    return elbo, {"expected_log_lik": loglik, "kl_p": kl_p, "kl_l_sigma": kl_ls,
                  "sinkhorn_error": sk_err}


def draw_noise(key, cfg, count: int, noise_free: bool = False):
    ku, kg = jax.random.split(key)
    if noise_free:
        return jnp.zeros((count, cfg.dim)), jnp.zeros((count, cfg.d, cfg.d))
    u = jax.random.normal(ku, (count, cfg.dim), dtype=jnp.float64)
    g = perm.sample_gumbel(kg, (count, cfg.d, cfg.d))
    return u, g


def batch_objective(params, cfg, u, gamma, stats, priors, sk, mode):
    fn = jax.vmap(sample_terms, in_axes=(None, None, 0, 0, None, None, None, None))
    elbo, aux = fn(params, cfg, u, gamma, stats, priors, sk, mode)
    return jnp.mean(elbo), (elbo, aux)


_objective_jit = jax.jit(batch_objective, static_argnums=(1, 5, 6, 7))
_grad_jit = jax.jit(jax.value_and_grad(batch_objective, has_aux=True), static_argnums=(1, 5, 6, 7))


def _check_finite(elbo, aux):
    if np.all(np.isfinite(elbo)):
        return
    for name in ("expected_log_lik", "kl_p", "kl_l_sigma"):
        if not np.all(np.isfinite(aux[name])):
            raise NonFiniteElbo(f"non-finite ELBO: term {name} = {aux[name]}")
    raise NonFiniteElbo(f"non-finite ELBO: {elbo}")


def elbo_estimate(state: VariationalState, data: Optional[Dataset], priors: Priors, key,
                  mc_samples: int = 1, sinkhorn: SinkhornSettings = SinkhornSettings(),
                  mode: str = "hard") -> ElboReport:
    """Monte-Carlo ELBO averaged over ``mc_samples`` joint draws."""
    cfg = state.config
    if data is not None and data.d != cfg.d:
        raise ValueError(f"data has d={data.d}, state has d={cfg.d}")
    u, g = draw_noise(key, cfg, mc_samples)
    _, (elbo, aux) = _objective_jit(state.params, cfg, u, g, _data_stats(data, cfg.d), priors, sinkhorn, mode)
    elbo, aux = np.asarray(elbo), {k: np.asarray(v) for k, v in aux.items()}
    _check_finite(elbo, aux)
    return ElboReport(float(elbo.mean()), float(aux["expected_log_lik"].mean()),
                      float(aux["kl_l_sigma"].mean()), float(aux["kl_p"].mean()))


def _tree_norm(tree) -> float:
    return float(jnp.sqrt(sum(jnp.sum(x ** 2) for x in jax.tree_util.tree_leaves(tree))))


def elbo_gradient(state: VariationalState, data: Optional[Dataset], priors: Priors, key,
                  mc_samples: int = 1, sinkhorn: SinkhornSettings = SinkhornSettings(),
                  mode: str = "st", noise=None):
    """Gradient of the ELBO with respect to every variational parameter.

    ``noise`` may be a ``(u, gumbel)`` pair to freeze the random draws.
    Returns ``(grads, report)`` where ``grads`` mirrors ``state.params``.
    """
    cfg = state.config
    u, g = noise if noise is not None else draw_noise(key, cfg, mc_samples)
    (_, (elbo, aux)), grads = _grad_jit(state.params, cfg, u, g, _data_stats(data, cfg.d),
                                        priors, sinkhorn, mode)
    elbo, aux = np.asarray(elbo), {k: np.asarray(v) for k, v in aux.items()}
    _check_finite(elbo, aux)
    norm = _tree_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteElbo("non-finite gradient")
    report = ElboReport(float(elbo.mean()), float(aux["expected_log_lik"].mean()),
                        float(aux["kl_l_sigma"].mean()), float(aux["kl_p"].mean()), norm)
    return grads, report


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _optimizer(name: str, step_size: float, b1: float, b2: float, eps: float, net_scale: float):
    base = OPTIMIZERS[name](step_size, b1=b1, b2=b2, eps=eps)
    if net_scale == 1.0:
        return base
    # every hidden unit feeds every logit, so a full-rate step on the network moves
    # the logits far faster than the (L, Sigma) means can follow
    net = OPTIMIZERS[name](step_size * net_scale, b1=b1, b2=b2, eps=eps)
    return optax.multi_transform({"base": base, "net": net}, _param_labels)


def _param_labels(params):
    def tag(tree, label):
        return jax.tree_util.tree_map(lambda _: label, tree)
    # free mean-field logits have no fan-in and keep the base rate
    net = {k: tag(v, "base" if k == "logits" else "net") for k, v in params["net"].items()}
    return {"family": tag(params["family"], "base"), "net": net}


def make_optimizer(config: "TrainConfig"):
    # cached so that repeated runs reuse the compiled step
    b1, b2 = config.betas
    return _optimizer(config.optimizer, float(config.step_size), float(b1), float(b2), float(config.eps),
                      float(config.net_step_scale))


def _train_step(params, opt, key, cfg, stats, priors, sk, mc_samples, optimizer):
    u, g = draw_noise(key, cfg, mc_samples)
    (_, (elbo, aux)), grads = jax.value_and_grad(batch_objective, has_aux=True)(
        params, cfg, u, g, stats, priors, sk, "st")
    norm = jnp.sqrt(sum(jnp.sum(x ** 2) for x in jax.tree_util.tree_leaves(grads)))
    ok = jnp.isfinite(norm) & jnp.all(jnp.isfinite(elbo))
    # the ELBO is maximised, optax minimises
    updates, new_opt = optimizer.update(jax.tree_util.tree_map(jnp.negative, grads), opt, params)
    new_params = optax.apply_updates(params, updates)
    params = jax.tree_util.tree_map(lambda a, b: jnp.where(ok, a, b), new_params, params)
    opt = jax.tree_util.tree_map(lambda a, b: jnp.where(ok, a, b), new_opt, opt)
    stats_out = {
        "elbo": jnp.mean(elbo),
        "expected_log_lik": jnp.mean(aux["expected_log_lik"]),
        "kl_p": jnp.mean(aux["kl_p"]),
        "kl_l_sigma": jnp.mean(aux["kl_l_sigma"]),
        "grad_norm": norm,
        "ok": ok,
    }
    return params, opt, stats_out


_train_step_jit = jax.jit(_train_step, static_argnums=(3, 5, 6, 7, 8))


def _write_trace(path: Path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in TRACE_FIELDS})


def train(config: TrainConfig, data: Dataset, priors: Priors,
          state: Optional[VariationalState] = None, trace_path=None,
          checkpoint_path=None, monitor_kl: bool = True) -> TrainResult:
    """Maximise the ELBO until convergence or ``max_steps``.

    Stops when the gradient norm drops below ``grad_norm_threshold``, when
    the mean ELBO over a ``plateau_window`` fails to improve on the previous
    window by more than ``plateau_delta`` (after ``min_steps``), or on
    sustained divergence.

    With ``restarts > 1`` the fit is repeated from independent random
    initialisations and the run with the highest ELBO estimate (common
    noise, ``restart_score_samples`` draws) is kept.  The joint posterior
    over orderings and weights is multimodal and a single run can settle in
    a poor ordering early.
    """
    if config.restarts == 1 or state is not None:
        return _train_once(config, data, priors, state, trace_path, checkpoint_path, monitor_kl)
    best, scores = None, []
    score_key = jax.random.fold_in(jax.random.key(config.seed), 0x5EED)
    for r in range(config.restarts):
        sub = replace(config, restarts=1, seed=config.seed if r == 0 else config.seed * 1_000_003 + r)
        result = _train_once(sub, data, priors, None, None, None, monitor_kl)
        try:
            score = elbo_estimate(result.state, data, priors, score_key, config.restart_score_samples,
                                  config.sinkhorn).elbo
        except NonFiniteElbo:
            score = -math.inf
        log.info("restart %d: %s after %d steps, ELBO %.3f", r, result.status, result.steps, score)
        scores.append(score)
        if best is None or score > max(scores[:-1]):
            best = result
    if trace_path is not None:
        _write_trace(Path(trace_path), best.trace)
    if checkpoint_path is not None:
        save_checkpoint(best.state, checkpoint_path)
    return replace(best, restart_scores=tuple(scores))


def _train_once(config: TrainConfig, data: Dataset, priors: Priors,
                state: Optional[VariationalState], trace_path, checkpoint_path,
                monitor_kl: bool) -> TrainResult:
    key = jax.random.key(config.seed)
    key, init_key = jax.random.split(key)
    if state is None:
        state = init_state(data.d, init_key, equal_variance=config.equal_variance,
                           tau=config.tau, mean_field=config.mean_field,
                           init_log_std=config.init_log_std)
    cfg = state.config
    stats = _data_stats(data, cfg.d)
    sk = config.sinkhorn
    # strong float64 leaves so the jitted step compiles once
    params = jax.tree_util.tree_map(lambda x: jnp.array(x, dtype=jnp.float64), state.params)
    optimizer = make_optimizer(config)
    opt = optimizer.init(params)

    trace: List[dict] = []
    window: List[float] = []
    prev_window_mean = None
    initial_elbo = None
    below = 0
    nonfinite = 0
    consecutive_bad = 0
    status = "max_steps"
    start = time.perf_counter()
    step = 0
    for step in range(1, config.max_steps + 1):
        key, sub = jax.random.split(key)
        params, opt, out = _train_step_jit(params, opt, sub, cfg, stats, priors, sk,
                                           config.mc_samples, optimizer)
        if not bool(out["ok"]):
            nonfinite += 1
            consecutive_bad += 1
            log.warning("step %d: non-finite ELBO or gradient, update skipped", step)
            if consecutive_bad >= config.max_nonfinite:
                raise NonFiniteElbo(f"{consecutive_bad} consecutive non-finite steps at step {step}")
            continue
        consecutive_bad = 0
        elbo = float(out["elbo"])
        grad_norm = float(out["grad_norm"])
        if initial_elbo is None:
            initial_elbo = elbo
        window.append(elbo)

        if step % config.log_every == 0 or step == 1:
            row = {k: float(out[k]) for k in ("elbo", "expected_log_lik", "kl_l_sigma", "kl_p", "grad_norm")}
            row["step"] = step
            row["wall_time"] = time.perf_counter() - start
            if monitor_kl and data.n > 0:
                row["sample_kl"] = sample_kl_diagnostic(
                    data, state.with_params(params), config.sample_kl_draws, jax.random.fold_in(key, step))
            trace.append(row)
            log.info("step %d elbo %.3f grad %.3g", step, elbo, grad_norm)

        if config.checkpoint_every and checkpoint_path and step % config.checkpoint_every == 0:
            save_checkpoint(state.with_params(params), checkpoint_path)

        if elbo < initial_elbo - config.divergence_margin:
            below += 1
            if below >= config.plateau_window:
                status = "diverged"
                break
        else:
            below = 0

        if grad_norm < config.grad_norm_threshold:
            status = "converged_grad"
            break
        if len(window) == config.plateau_window:
            mean = float(np.mean(window))
            if (prev_window_mean is not None and step >= config.min_steps
                    and mean - prev_window_mean <= config.plateau_delta):
                status = "converged_plateau"
                break
            prev_window_mean = mean
            window = []

    state = state.with_params(params)
    if trace_path is not None:
        _write_trace(Path(trace_path), trace)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    if status == "diverged":
        log.error("training diverged at step %d", step)
    return TrainResult(state, trace, status, step, nonfinite)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def gaussian_kl(cov1, cov2) -> float:
    """``KL(N(0, cov1) || N(0, cov2))``."""
    cov1 = np.asarray(cov1, dtype=np.float64)
    cov2 = np.asarray(cov2, dtype=np.float64)
    d = cov1.shape[0]
    _, ld1 = np.linalg.slogdet(cov1)
    _, ld2 = np.linalg.slogdet(cov2)
    return float(0.5 * (np.trace(np.linalg.solve(cov2, cov1)) - d + ld2 - ld1))


def empirical_covariance(data: Dataset, ridge: float = 1e-6):
    """``X^T X / n`` (data are zero-mean), ridge-regularised only if singular."""
    cov = data.scatter() / max(data.n, 1)
    eps = 0.0
    if data.n <= data.d or np.linalg.cond(cov) > 1e12:
        eps = ridge * max(np.trace(cov) / data.d, 1.0)
        cov = cov + eps * np.eye(data.d)
        log.warning("empirical covariance is singular; ridge %.3g added", eps)
    return cov, eps


def sample_kl_diagnostic(data: Dataset, state: VariationalState, mc_samples: int, key) -> float:
    """KL from the empirical Gaussian to the one implied by the mean posterior precision."""
    cov, _ = empirical_covariance(data)
    draws = sample_posterior(state, key, mc_samples)
    theta = np.mean([precision_matrix(s.adjacency(), s.noise) for s in draws], axis=0)
    return gaussian_kl(cov, np.linalg.inv(theta))


def gradient_variance_diagnostic(state: VariationalState, data: Dataset, priors: Priors,
                                 repeats: int, key, mc_samples: int = 1,
                                 sinkhorn: SinkhornSettings = SinkhornSettings(),
                                 noise_free: bool = False) -> Dict[str, float]:
    """Mean per-coordinate variance of the gradient estimator, per parameter block."""
    if repeats < 2:
        raise ValueError("need at least two repeats")
    cfg = state.config
    samples = []
    for k in jax.random.split(key, repeats):
        noise = draw_noise(k, cfg, mc_samples, noise_free=noise_free)
        grads, _ = elbo_gradient(state, data, priors, None, sinkhorn=sinkhorn, noise=noise)
        samples.append(grads)
    return gradient_block_variance(samples)


def gradient_block_variance(samples) -> Dict[str, float]:
    out = {}
    for group in samples[0]:
        for name in samples[0][group]:
            stack = np.stack([np.asarray(s[group][name]) for s in samples])
            out[f"{group}.{name}"] = float(np.mean(np.var(stack, axis=0, ddof=1)))
    return out


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
