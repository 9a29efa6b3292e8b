import math

import numpy as np
import pytest
from scipy import stats

from dagvi.sem import Dataset, log_likelihood, n_lower, sample_observational
from dagvi.synthetic import (
    GraphSpec,
    sample_dataset,
    sample_er_dag,
    sample_noise_scales,
    sample_sem,
    sample_weights,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        GraphSpec(3, avg_degree=5)
    with pytest.raises(ValueError):
        GraphSpec(3, weight_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        GraphSpec(3, noise_kind="cauchy")
    assert GraphSpec(2).edge_probability == 1.0


def test_zero_degree_gives_empty_graph(rng):
    for _ in range(20):
        adj, _ = sample_er_dag(GraphSpec(6, avg_degree=0), rng)
        assert not adj.any()


def test_edge_count_matches_binomial(rng):
    spec = GraphSpec(64, avg_degree=1)
    counts = [sample_er_dag(spec, rng)[0].sum() for _ in range(200)]
    p = spec.edge_probability
    k = n_lower(64)
    se = math.sqrt(k * p * (1 - p) / 200)
    assert abs(np.mean(counts) - 32) < 3 * se


def test_d2_always_has_edge(rng):
    assert all(sample_er_dag(GraphSpec(2), rng)[0].sum() == 1 for _ in range(50))


def test_edge_slots_exchangeable(rng):
    spec = GraphSpec(5, avg_degree=1.5)
    rows, cols = np.tril_indices(5, -1)
    totals = np.zeros(len(rows))
    for _ in range(4000):
        totals += sample_er_dag(spec, rng)[0][rows, cols]
    assert stats.chisquare(totals).pvalue > 1e-3


def test_weights_support_and_sign(rng):
    spec = GraphSpec(4)
    full = np.tril(np.ones((4, 4)), -1)
    vals = np.concatenate([sample_weights(full, spec, rng).values for _ in range(2000)])
    assert np.all((np.abs(vals) >= 0.5) & (np.abs(vals) <= 2.0))
    frac = np.mean(vals > 0)
    assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / vals.size)
    assert not sample_weights(np.zeros((4, 4)), spec, rng).values.any()


def test_noise_scales(rng):
    eq = sample_noise_scales(GraphSpec(4), rng)
    assert eq.equal_variance and np.all(eq.log_sigma == 0)
    ne = sample_noise_scales(GraphSpec(4, variance_mode="nonequal"), rng)
    assert not ne.equal_variance and np.all((ne.sigma >= 0.5) & (ne.sigma <= 2))


def test_gaussian_dataset_delegates_to_sem_sampler():
    spec = GraphSpec(5)
    data = sample_dataset(spec, 50, np.random.default_rng(3))
    rng = np.random.default_rng(3)
    params = sample_sem(spec, rng)
    again = sample_observational(params, 50, rng)
    assert np.array_equal(data.values, again.values)


def test_gumbel_moments():
    spec = GraphSpec(1, noise_kind="gumbel")
    x = sample_dataset(spec, 100000, np.random.default_rng(0)).values[:, 0]
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1) < 0.05
    assert abs(stats.skew(x) - 1.1395) < 0.05


def test_truth_beats_empty_graph():
    for seed in range(10):
        data = sample_dataset(GraphSpec(6, avg_degree=1.5), 60, np.random.default_rng(seed))
        truth = data.truth
        if not truth.adjacency().any():
            continue
        assert log_likelihood(data, truth.adjacency(), truth.noise) > log_likelihood(
            data, np.zeros((6, 6)), truth.noise)
