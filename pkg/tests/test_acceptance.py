"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The d = 8 runs behind criteria 8 to 10 are trained once and shared.
"""

import math
import time
from dataclasses import replace

import jax
import numpy as np
import pytest

from dagvi import permutation as perm
from dagvi.config import load_config
from dagvi.experiments import Job, graph_spec, intervention_metrics, job_dataset, read_rows, run_experiment
from dagvi.metrics import BinaryGraph, shd, shd_c, wasserstein_1d
from dagvi.priors import GaussianWeightPriorSpec, Priors, eta_rule_of_thumb, marginal_log_likelihood_gaussian_prior
from dagvi.sem import LowerTriWeights, NoiseScales, Permutation, SemParams, sample_observational
from dagvi.synthetic import GraphSpec, sample_dataset
from dagvi.trainer import TrainConfig, elbo_estimate, train
from dagvi.variational import init_state, load_checkpoint, sample_posterior
from oracles import (
    all_dags,
    all_permutations,
    brute_force_assignment,
    exact_log_permanent,
    gaussian_marginal_by_monte_carlo,
    gaussian_marginal_by_quadrature,
    log_evidence_d2,
    markov_equivalent,
)
from support import fd_check, perturbed

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion, visible even with output capture on."""
    start = time.perf_counter()

    def emit(number, name, ok, detail):
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\n[criterion {number:>2}] {status}  {name}: {detail}  "
                  f"({time.perf_counter() - start:.0f}s)")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- criterion 1

def test_01_marginal_likelihood_oracles(verdict):
    rng = np.random.default_rng(101)
    worst_rel, worst_se = 0.0, 0.0
    for _ in range(20):
        mapping = rng.permutation(2)
        sigma = np.exp(rng.normal(scale=0.4, size=2))
        nu = float(np.exp(rng.normal(scale=0.4)))
        x = rng.normal(size=2) * 1.5
        ours = marginal_log_likelihood_gaussian_prior(x, Permutation(mapping), NoiseScales(2, np.log(sigma)),
                                                      GaussianWeightPriorSpec(nu))
        oracle = gaussian_marginal_by_quadrature(x, mapping, sigma, nu)
        worst_rel = max(worst_rel, abs(ours - oracle) / abs(oracle))
    for _ in range(10):
        mapping = rng.permutation(3)
        sigma = np.exp(rng.normal(scale=0.3, size=3))
        nu = float(np.exp(rng.normal(scale=0.3)))
        x = rng.normal(size=3)
        ours = marginal_log_likelihood_gaussian_prior(x, Permutation(mapping), NoiseScales(3, np.log(sigma)),
                                                      GaussianWeightPriorSpec(nu))
        estimate, rel_se = gaussian_marginal_by_monte_carlo(x, mapping, sigma, nu, 10**6, rng)
        # relative s.e. of the mean is the s.e. of its log
        worst_se = max(worst_se, abs(ours - estimate) / rel_se)
    verdict(1, "closed-form marginal vs quadrature / Monte Carlo", worst_rel <= 1e-4 and worst_se <= 3,
            f"max rel err (d=2) {worst_rel:.2e}, max |diff|/s.e. (d=3) {worst_se:.2f}")


# ---------------------------------------------------------------- criterion 2

def test_02_bethe_permanent_bounds(verdict):
    rng = np.random.default_rng(202)
    worst = math.inf
    for d, count in ((3, 50), (4, 20)):
        for _ in range(count):
            a = rng.uniform(0.05, 3.0, size=(d, d))
            exact = exact_log_permanent(np.log(a))
            est = perm.log_bethe_permanent(np.log(a)).value
            slack = min(est - (exact - 0.5 * d * math.log(2) - 1e-3), exact + 1e-3 - est)
            worst = min(worst, slack)
    verdict(2, "log perm - (d/2) log 2 <= log perm_B <= log perm", worst >= 0,
            f"smallest slack to either bound {worst:.3e} over 70 matrices")


# ---------------------------------------------------------------- criterion 3

def test_03_sinkhorn_contract(verdict):
    rng = np.random.default_rng(303)
    failures = []
    for _ in range(1000):
        d = int(rng.integers(2, 33))
        t = rng.uniform(-20, 20, size=(d, d)) / 0.2
        out = perm.sinkhorn(t, tol=0.01, max_iters=2000)
        if out.achieved_tolerance > 0.01:
            failures.append((d, out.achieved_tolerance))
    rate = 1 - len(failures) / 1000
    detail = f"{rate:.1%} converged within 2000 sweeps"
    if failures:
        detail += f"; failures (d, achieved tol): {failures[:5]}"
    verdict(3, "Sinkhorn marginals within 0.01", rate >= 0.99, detail)


# ---------------------------------------------------------------- criterion 4

def test_04_hungarian_exact(verdict):
    rng = np.random.default_rng(404)
    wrong = 0
    for _ in range(1000):
        d = int(rng.integers(1, 7))
        m = rng.normal(size=(d, d))
        wrong += not np.array_equal(perm.hungarian_mapping(m), brute_force_assignment(m))
    verdict(4, "Hungarian vs brute force", wrong == 0, f"{1000 - wrong}/1000 exact")


# ---------------------------------------------------------------- criterion 5

def test_05_gradient_finite_differences(verdict):
    data = sample_dataset(GraphSpec(3), 10, np.random.default_rng(505))
    errors = [fd_check(perturbed(init_state(3, jax.random.key(k)), jax.random.key(1000 + k)), data, Priors(),
                       jax.random.key(k)) for k in range(20)]
    verdict(5, "soft-surrogate gradient vs central differences", max(errors) <= 1e-3,
            f"max relative error {max(errors):.2e} over 20 states x 3 projections")


# ---------------------------------------------------------------- criterion 6

def test_06_elbo_below_log_evidence(verdict):
    rng = np.random.default_rng(606)
    priors = Priors("gaussian", nu=1.0, log_sigma_std=3.0)
    worst = -math.inf
    for k in range(20):
        truth = SemParams(Permutation(rng.permutation(2)), LowerTriWeights(2, [rng.choice([-1, 1]) * rng.uniform(0.5, 2)]),
                          NoiseScales.constant(2))
        data = sample_observational(truth, 10, rng)
        state = perturbed(init_state(2, jax.random.key(k)), jax.random.key(600 + k), scale=0.5)
        elbo = elbo_estimate(state, data, priors, jax.random.key(k), mc_samples=2000).elbo
        worst = max(worst, elbo - log_evidence_d2(data.values, 1.0, 3.0))
    verdict(6, "ELBO <= log evidence", worst <= 1e-6, f"max(ELBO - log evidence) = {worst:.3f}")


# ---------------------------------------------------------------- criterion 7

def chain_sem(rng):
    weights = rng.choice([-1, 1], size=2) * rng.uniform(0.5, 2.0, size=2)
    # (1,0) and (2,1) below the diagonal: a three-node chain under any ordering
    return SemParams(Permutation(rng.permutation(3)), LowerTriWeights(3, [weights[0], 0.0, weights[1]]),
                     NoiseScales.constant(3))


@pytest.mark.slow
def test_07_posterior_concentration(verdict):
    probs = []
    for seed in SEEDS:
        rng = np.random.default_rng(700 + seed)
        truth = chain_sem(rng)
        data = sample_observational(truth, 500, rng)
        # the ordering/weight posterior is multimodal: keep the best of several fits by ELBO
        config = TrainConfig(seed=seed, max_steps=3000, restarts=8)
        result = train(config, data, Priors(eta=eta_rule_of_thumb(2.0, 3, 500)), monitor_kl=False)
        draws = sample_posterior(result.state, jax.random.key(seed), 200)
        probs.append(float(np.mean([s.p == truth.p for s in draws])))
    hits = sum(p >= 0.8 for p in probs)
    verdict(7, "true-permutation posterior mass >= 0.8", hits >= 4,
            f"{hits}/5 seeds; per-seed mass {[round(p, 3) for p in probs]}")


# ------------------------------------------------------------- criteria 8-10

@pytest.fixture(scope="module")
def d8_runs(tmp_path_factory):
    """Every ablation variant on the five d = 8, ER1, n = 100 instances."""
    out = tmp_path_factory.mktemp("d8")
    config = load_config(None, ["experiment.kind=ablation", "experiment.dims=8", "experiment.ns=100"],
                         seeds=list(SEEDS), out=str(out))
    outcome = run_experiment(config)
    assert not outcome.failures, outcome.failures
    rows = read_rows(out / "results.csv")
    table = {(r.variant, r.seed, r.metric): r.value for r in rows}
    return config, out, table


@pytest.mark.slow
def test_08_structure_recovery(verdict, d8_runs):
    _, _, table = d8_runs
    eshd = [table[("full", s, "expected_shd")] for s in SEEDS]
    null = [table[("null", s, "expected_shd")] for s in SEEDS]
    tpr = [table[("full", s, "tpr")] for s in SEEDS]
    wins = sum(e < n for e, n in zip(eshd, null))
    ok = wins >= 4 and np.mean(tpr) >= 0.5
    verdict(8, "expected SHD below the empty-graph baseline", ok,
            f"{wins}/5 seeds below null; eSHD {np.round(eshd, 2).tolist()} vs null {null}; "
            f"mean TPR {np.mean(tpr):.3f}")


@pytest.mark.slow
def test_09_interventional_distributions(verdict, d8_runs):
    config, out, _ = d8_runs
    config = replace(config, kind="intervention")
    model, null = [], []
    for seed in SEEDS:
        data = job_dataset(config, Job("full", seed, 8, 100, 0))
        state = load_checkpoint(out / "runs" / f"full_d8_n100_seed{seed}" / "checkpoint.bin")
        draws = sample_posterior(state, jax.random.key(seed + 1_000_003), config.posterior_samples)
        m, n = intervention_metrics(data, draws, graph_spec(config, 8), config, np.random.default_rng([seed, 7]))
        model.append(m.get("wasserstein", math.nan))
        null.append(n.get("wasserstein", math.nan))
    # a seed without true edges has nothing to intervene along and counts as a miss
    wins = sum(m < n for m, n in zip(model, null))
    verdict(9, "interventional W1 below the empty-graph model", wins >= 4,
            f"{wins}/5 seeds; model {np.round(model, 3).tolist()} vs null {np.round(null, 3).tolist()}")


@pytest.mark.slow
def test_10_ablation_direction(verdict, d8_runs):
    _, _, table = d8_runs
    full = [table[("full", s, "expected_shd")] for s in SEEDS]
    parts, ok = [], True
    for variant in ("mean-field", "laplace", "sinkhorn-100"):
        other = [table[(variant, s, "expected_shd")] for s in SEEDS]
        hits = sum(o >= f for o, f in zip(other, full))
        ok &= hits >= 4
        parts.append(f"{variant} {hits}/5 {np.round(other, 2).tolist()}")
    verdict(10, "ablations no better than the full method", ok,
            f"full {np.round(full, 2).tolist()}; " + "; ".join(parts))


# --------------------------------------------------------------- criterion 11

def test_11_metric_oracles(verdict):
    rng = np.random.default_rng(1111)
    axioms = True
    for _ in range(300):
        d = int(rng.integers(2, 6))
        g = []
        for _ in range(3):
            m = rng.random((d, d)) < 0.4
            np.fill_diagonal(m, False)
            g.append(BinaryGraph.from_matrix(m))
        a, b, c = g
        axioms &= shd(a, b) == shd(b, a) and (shd(a, b) == 0) == (a == b)
        axioms &= shd(a, c) <= shd(a, b) + shd(b, c) and shd(a, a) == 0
    equivalence = True
    for d in (2, 3):
        dags = all_dags(d)
        for x in dags:
            for y in dags:
                if markov_equivalent(x, y):
                    equivalence &= shd_c(BinaryGraph.from_matrix(x), BinaryGraph.from_matrix(y)) == 0
    w1 = wasserstein_1d(rng.normal(size=10**5), rng.normal(1.0, 1.0, size=10**5))
    verdict(11, "metric oracles", axioms and equivalence and abs(w1 - 1) <= 0.02,
            f"axioms {'hold' if axioms else 'violated'} on 300 triples; shd_c = 0 on all equivalent pairs "
            f"(d <= 3): {equivalence}; W1(N(0,1), N(1,1)) = {w1:.4f}")
