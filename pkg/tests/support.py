"""Shared helpers for the gradient checks."""

import jax
import jax.numpy as jnp

from dagvi.trainer import SinkhornSettings, _data_stats, batch_objective, draw_noise, elbo_gradient

# every sweep differentiated, so the analytic gradient is that of the computed iterate
TIGHT = SinkhornSettings(tol=1e-9, max_iters=3000, grad_iters=3000, bethe_iters=5000)


def perturbed(state, key, scale=0.3):
    leaves, tree = jax.tree_util.tree_flatten(state.params)
    keys = jax.random.split(key, len(leaves))
    leaves = [x + scale * jax.random.normal(k, x.shape) for x, k in zip(leaves, keys)]
    return state.with_params(jax.tree_util.tree_unflatten(tree, leaves))


def tree_dot(a, b):
    return sum(float(jnp.sum(x * y)) for x, y in zip(jax.tree_util.tree_leaves(a), jax.tree_util.tree_leaves(b)))


def fd_check(state, data, priors, key, directions=3, h=1e-5):
    cfg = state.config
    noise = draw_noise(key, cfg, 2)
    grads, _ = elbo_gradient(state, data, priors, None, sinkhorn=TIGHT, mode="soft", noise=noise)
    stats = _data_stats(data, cfg.d)
    f = jax.jit(lambda p: batch_objective(p, cfg, noise[0], noise[1], stats, priors, TIGHT, "soft")[0])
    errors = []
    for j in range(directions):
        leaves, tree = jax.tree_util.tree_flatten(state.params)
        ks = jax.random.split(jax.random.fold_in(key, j), len(leaves))
        v = jax.tree_util.tree_unflatten(tree, [jax.random.normal(kk, x.shape) for kk, x in zip(ks, leaves)])
        plus = jax.tree_util.tree_map(lambda p, d: p + h * d, state.params, v)
        minus = jax.tree_util.tree_map(lambda p, d: p - h * d, state.params, v)
        fd = (float(f(plus)) - float(f(minus))) / (2 * h)
        an = tree_dot(grads, v)
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return max(errors)
