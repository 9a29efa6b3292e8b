"""Experiment orchestration: per-seed jobs, metrics and result rows."""

from __future__ import annotations

import csv
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Optional

import jax
import numpy as np

from dagvi import __version__
from dagvi.config import ABLATIONS, ExperimentConfig, dump_config
from dagvi.dataio import ingest_csv
from dagvi.metrics import (
    BinaryGraph,
    classification_rates,
    shd,
    shd_c,
    threshold_edges,
    wasserstein_1d,
)
from dagvi.priors import Priors, eta_rule_of_thumb
from dagvi.sem import Dataset, SemParams, propagate
from dagvi.synthetic import GraphSpec, sample_dataset, sample_noise
from dagvi.trainer import sample_kl_diagnostic, train
from dagvi.variational import VariationalState, sample_posterior

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    variant: str
    seed: int
    d: int
    n: int
    degree: float
    noise: str
    metric: str
    value: float
    runtime: float
    threshold: float
    config_hash: str
    code_version: str


ROW_FIELDS = [f.name for f in fields(ResultRow)]


class ResultWriter:
    """Serialised, append-only writer for ``results.csv``."""

    def __init__(self, path: Path, buffered: bool = False):
        self.path = Path(path)
        self.buffered = buffered
        self._lock = threading.Lock()
        self._pending: List[tuple] = []
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(ROW_FIELDS)

    def write(self, rows: List[ResultRow], order=0) -> None:
        with self._lock:
            if self.buffered:
                self._pending.append((order, rows))
            else:
                self._append(rows)

    def flush(self) -> None:
        with self._lock:
            for _, rows in sorted(self._pending, key=lambda item: item[0]):
                self._append(rows)
            self._pending = []

    def _append(self, rows):
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh)
            for row in rows:
                writer.writerow([getattr(row, k) for k in ROW_FIELDS])


def read_rows(path) -> List[ResultRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(ResultRow(
                rec["experiment"], rec["variant"], int(rec["seed"]), int(rec["d"]), int(rec["n"]),
                float(rec["degree"]), rec["noise"], rec["metric"], float(rec["value"]),
                float(rec["runtime"]), float(rec["threshold"]), rec["config_hash"], rec["code_version"],
            ))
    return out


# --------------------------------------------------------------------------
# variants
# --------------------------------------------------------------------------

def variant_settings(config: ExperimentConfig, variant: str, d: int, n: int):
    """``(TrainConfig, Priors)`` for one method variant."""
    pc = config.prior
    priors = Priors(weight=pc.weight, eta=eta_rule_of_thumb(pc.rho, d, n),
                    laplace_scale=pc.laplace_scale, nu=pc.nu, log_sigma_std=pc.log_sigma_std)
    tc = replace(config.train, equal_variance=config.equal_variance)
    if variant == "mean-field":
        tc = replace(tc, mean_field=True)
    elif variant == "laplace":
        priors = replace(priors, weight="laplace")
    elif variant == "sinkhorn-100":
        tc = replace(tc, sinkhorn_max_iters=100)
    elif variant != "full":
        raise ValueError(f"unknown variant {variant!r}")
    return tc, priors


def variants_for(config: ExperimentConfig):
    return ABLATIONS if config.kind == "ablation" else ("full",)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def posterior_structure_metrics(draws: List[SemParams], truth: BinaryGraph, threshold: float) -> dict:
    graphs = [threshold_edges(s.adjacency(), threshold) for s in draws]
    rates = np.array([classification_rates(g, truth) for g in graphs])
    return {
        "expected_shd": float(np.mean([shd(g, truth) for g in graphs])),
        "expected_shd_c": float(np.mean([shd_c(g, truth) for g in graphs])),
        "tpr": float(rates[:, 0].mean()),
        "fpr": float(rates[:, 1].mean()),
        "fdr": float(rates[:, 2].mean()),
    }


def null_structure_metrics(truth: BinaryGraph) -> dict:
    empty = BinaryGraph(truth.d)
    tpr, fpr, fdr = classification_rates(empty, truth)
    return {"expected_shd": float(shd(empty, truth)), "expected_shd_c": float(shd_c(empty, truth)),
            "tpr": tpr, "fpr": fpr, "fdr": fdr}


def intervention_targets(truth: SemParams, count: int, rng: np.random.Generator):
    """Up to ``count`` distinct random edges ``(i, j)`` of the true graph."""
    edges = np.argwhere(truth.adjacency() != 0)
    if len(edges) == 0:
        return []
    pick = rng.choice(len(edges), size=min(count, len(edges)), replace=False)
    return [tuple(int(v) for v in edges[k]) for k in pick]


def true_interventional(truth: SemParams, spec: GraphSpec, node: int, value: float, size: int,
                        rng: np.random.Generator) -> np.ndarray:
    eps = sample_noise(spec, truth.noise, size, rng)
    return propagate(truth, eps, clamp={node: value})


def posterior_interventional(draws: List[SemParams], node: int, value: float, size: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Samples from the posterior-averaged interventional distribution: one
    fresh SEM draw (cycled from ``draws``) per output row."""
    counts = np.bincount(np.arange(size) % len(draws), minlength=len(draws))
    out = []
    for params, count in zip(draws, counts):
        eps = rng.standard_normal((count, params.d)) * params.noise.sigma
        out.append(propagate(params, eps, clamp={node: value}))
    return np.concatenate(out)


def intervention_metrics(data: Dataset, draws: List[SemParams], spec: GraphSpec,
                         config: ExperimentConfig, rng: np.random.Generator) -> dict:
    truth = data.truth
    model, null = [], []
    null_sd = data.values.std(axis=0)
    size = config.intervention_samples
    for i, j in intervention_targets(truth, config.interventions, rng):
        a = float(rng.uniform(-config.intervention_range, config.intervention_range))
        target = true_interventional(truth, spec, i, a, size, rng)[:, j]
        predicted = posterior_interventional(draws, i, a, size, rng)[:, j]
        model.append(wasserstein_1d(predicted, target))
        # the empty graph leaves x_j at its observational marginal
        null.append(wasserstein_1d(rng.standard_normal(size) * null_sd[j], target))
    if not model:
        return {}, {}
    return {"wasserstein": float(np.mean(model))}, {"wasserstein": float(np.mean(null))}


# --------------------------------------------------------------------------
# jobs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    variant: str
    seed: int
    d: int
    n: int
    order: int


def graph_spec(config: ExperimentConfig, d: int) -> GraphSpec:
    g = config.graph
    return GraphSpec(
        d=d, avg_degree=g.avg_degree, weight_range=(g.weight_low, g.weight_high), noise_kind=g.noise,
        variance_mode="equal" if config.equal_variance else "nonequal",
        noise_scale_range=(g.noise_scale_low, g.noise_scale_high), sigma=g.sigma,
    )


def job_dataset(config: ExperimentConfig, job: Job) -> Dataset:
    if config.kind == "fit-external":
        return ingest_csv(config.data, center=config.center)
    return sample_dataset(graph_spec(config, job.d), job.n, np.random.default_rng(job.seed))


def run_job(config: ExperimentConfig, job: Job, out_dir: Path) -> List[ResultRow]:
    start = time.perf_counter()
    data = job_dataset(config, job)
    d, n = data.d, data.n
    tc, priors = variant_settings(config, job.variant, d, n)
    tc = replace(tc, seed=job.seed)
    run_dir = out_dir / "runs" / f"{job.variant}_d{d}_n{n}_seed{job.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    result = train(tc, data, priors, trace_path=run_dir / "trace.csv",
                   checkpoint_path=run_dir / "checkpoint.bin")
    runtime = time.perf_counter() - start
    key = jax.random.key(job.seed + 1_000_003)
    draws = sample_posterior(result.state, key, config.posterior_samples)
    rng = np.random.default_rng([job.seed, 7])

    def row(variant, metric, value, rt=runtime):
        return ResultRow(config.kind, variant, job.seed, d, n, config.graph.avg_degree, config.graph.noise,
                         metric, float(value), rt, config.threshold, config.config_hash(), __version__)

    rows = [row(job.variant, "final_elbo", result.trace[-1]["elbo"] if result.trace else float("nan")),
            row(job.variant, "steps", result.steps),
            row(job.variant, "sample_kl", sample_kl_diagnostic(data, result.state, 20, key))]
    if config.kind == "fit-external":
        probs = np.mean([threshold_edges(s.adjacency(), config.threshold).matrix() for s in draws], axis=0)
        np.savetxt(run_dir / "edge_probabilities.csv", probs, delimiter=",", fmt="%.6f")
        return rows

    truth = threshold_edges(data.truth.adjacency(), 0.0)
    for name, value in posterior_structure_metrics(draws, truth, config.threshold).items():
        rows.append(row(job.variant, name, value))
    if job.variant == variants_for(config)[0]:
        for name, value in null_structure_metrics(truth).items():
            rows.append(row("null", name, value, 0.0))
        rows.append(row("null", "true_edges", len(truth), 0.0))
    if config.kind == "intervention":
        model, null = intervention_metrics(data, draws, graph_spec(config, d), config, rng)
        for name, value in model.items():
            rows.append(row(job.variant, name, value))
        for name, value in null.items():
            rows.append(row("null", name, value, 0.0))
    return rows


def build_jobs(config: ExperimentConfig) -> List[Job]:
    jobs = []
    dims = (0,) if config.kind == "fit-external" else config.dims
    ns = (0,) if config.kind == "fit-external" else config.ns
    for d in dims:
        for n in ns:
            for seed in config.seeds:
                for variant in variants_for(config):
                    jobs.append(Job(variant, seed, d, n, len(jobs)))
    return jobs


@dataclass
class ExperimentOutcome:
    out_dir: Path
    rows: List[ResultRow]
    failures: List[tuple]


def run_experiment(config: ExperimentConfig, out_dir: Optional[Path] = None) -> ExperimentOutcome:
    """Run every ``(d, n, seed, variant)`` job; failed jobs are logged and skipped."""
    out_dir = Path(out_dir or config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / "config.ini")
    writer = ResultWriter(out_dir / "results.csv", buffered=config.reproducible)
    all_rows: List[ResultRow] = []
    failures = []

    def work(job: Job):
        try:
            rows = run_job(config, job, out_dir)
        except Exception as exc:  # a failing seed must not sink the experiment
            log.exception("job %s failed", job)
            failures.append((job, repr(exc)))
            return
        writer.write(rows, job.order)
        all_rows.extend(rows)

    jobs = build_jobs(config)
    if config.threads == 1:
        for job in jobs:
            work(job)
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(work, jobs))
    writer.flush()
    if all_rows:
        from dagvi.report import plot_results

        plot_results(read_rows(out_dir / "results.csv"), out_dir)
    if failures:
        with open(out_dir / "failures.txt", "w") as fh:
            for job, err in failures:
                fh.write(f"{asdict(job)}\t{err}\n")
    return ExperimentOutcome(out_dir, all_rows, failures)


def fit_dataset(data: Dataset, config: ExperimentConfig, seed: int, out_dir: Path) -> VariationalState:
    tc, priors = variant_settings(config, "full", data.d, data.n)
    result = train(replace(tc, seed=seed), data, priors, trace_path=out_dir / "trace.csv",
                   checkpoint_path=out_dir / "checkpoint.bin")
    log.info("fit finished: %s after %d steps", result.status, result.steps)
    return result.state

