"""Command-line entry point: ``dagvi generate|fit|eval|experiment|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import jax
import numpy as np

from dagvi.config import OUT_ENV, default_out, load_config
from dagvi.dataio import export_csv, ingest_csv
from dagvi.metrics import threshold_edges

log = logging.getLogger("dagvi")


def _common(p: argparse.ArgumentParser, seeds: bool = True) -> None:
    p.add_argument("--config", type=Path, help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./dagvi-out)")
    if seeds:
        p.add_argument("--seed", dest="seeds", type=int, action="append", help="random seed (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagvi", description="Variational posteriors over linear-Gaussian DAGs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic dataset and its ground truth")
    _common(g)
    g.add_argument("--d", type=int, default=None, help="number of variables")
    g.add_argument("--n", type=int, default=None, help="number of samples")

    f = sub.add_parser("fit", help="fit the posterior to a CSV dataset")
    _common(f)
    f.add_argument("data", type=Path, help="comma-separated data file")
    f.add_argument("--no-center", action="store_true", help="do not subtract column means")

    e = sub.add_parser("eval", help="score a fitted checkpoint against a ground-truth adjacency")
    _common(e)
    e.add_argument("checkpoint", type=Path)
    e.add_argument("truth", type=Path, help="CSV adjacency matrix, W[i, j] = weight of i -> j")
    e.add_argument("--data", type=Path, help="data CSV for the sample-KL diagnostic")
    e.add_argument("--samples", type=int, default=100)

    x = sub.add_parser("experiment", help="run a configured experiment over seeds")
    _common(x)
    x.add_argument("--kind", help="synthetic-ev | synthetic-nv | intervention | ablation | fit-external")
    x.add_argument("--threads", type=int, help="worker pool size")
    x.add_argument("--reproducible", action="store_true", default=None,
                   help="write results in a fixed order independent of worker timing")

    r = sub.add_parser("report", help="summarise results.csv across seeds")
    r.add_argument("directory", type=Path, nargs="?")
    return parser


def _config(args, **direct):
    out = str(args.out) if getattr(args, "out", None) else None
    return load_config(args.config, args.overrides, seeds=getattr(args, "seeds", None), out=out, **direct)


def cmd_generate(args) -> int:
    from dagvi.experiments import graph_spec
    from dagvi.synthetic import sample_dataset

    config = _config(args)
    d = args.d or config.dims[0]
    n = args.n or config.ns[0]
    spec = graph_spec(config, d)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in config.seeds:
        data = sample_dataset(spec, n, np.random.default_rng(seed))
        stem = out / f"synthetic_d{d}_n{n}_seed{seed}"
        export_csv(data, f"{stem}.csv", names=[f"x{j}" for j in range(d)])
        np.savetxt(f"{stem}_truth.csv", data.truth.adjacency(), delimiter=",", fmt="%.17g")
        np.savetxt(f"{stem}_sigma.csv", data.truth.noise.sigma[None, :], delimiter=",", fmt="%.17g")
        print(f"{stem}.csv  ({n} x {d}, {int(np.count_nonzero(data.truth.adjacency()))} edges)")
    return 0


def cmd_fit(args) -> int:
    from dagvi.experiments import fit_dataset
    from dagvi.variational import posterior_adjacencies

    config = _config(args)
    data = ingest_csv(args.data, center=not args.no_center)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = config.seeds[0]
    state = fit_dataset(data, config, seed, out)
    draws = posterior_adjacencies(state, jax.random.key(seed + 1), config.posterior_samples)
    probs = np.mean(np.abs(draws) > config.threshold, axis=0)
    np.savetxt(out / "edge_probabilities.csv", probs, delimiter=",", fmt="%.6f")
    np.savetxt(out / "mean_adjacency.csv", draws.mean(axis=0), delimiter=",", fmt="%.6f")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    print(f"edge probabilities (threshold {config.threshold}): {out / 'edge_probabilities.csv'}")
    return 0


def cmd_eval(args) -> int:
    from dagvi.experiments import posterior_structure_metrics
    from dagvi.trainer import sample_kl_diagnostic
    from dagvi.variational import load_checkpoint, sample_posterior

    config = _config(args)
    state = load_checkpoint(args.checkpoint)
    w = np.loadtxt(args.truth, delimiter=",", ndmin=2)
    if w.shape != (state.d, state.d):
        raise ValueError(f"truth is {w.shape}, checkpoint has d={state.d}")
    truth = threshold_edges(w, 0.0)
    seed = config.seeds[0]
    draws = sample_posterior(state, jax.random.key(seed), args.samples)
    metrics = posterior_structure_metrics(draws, truth, config.threshold)
    metrics["null_shd"] = float(len(truth))
    if args.data is not None:
        data = ingest_csv(args.data)
        metrics["sample_kl"] = sample_kl_diagnostic(data, state, 20, jax.random.key(seed))
    for k, v in metrics.items():
        print(f"{k:>16}  {v:.4f}")
    return 0


def cmd_experiment(args) -> int:
    from dagvi.experiments import run_experiment
    from dagvi.report import format_table, report

    direct = {}
    if args.kind:
        direct["kind"] = args.kind
    if args.threads:
        direct["threads"] = args.threads
    if args.reproducible:
        direct["reproducible"] = True
    config = _config(args, **direct)
    outcome = run_experiment(config)
    for job, err in outcome.failures:
        print(f"failed: {job} {err}", file=sys.stderr)
    if not outcome.rows:
        print("all jobs failed", file=sys.stderr)
        return 1
    print(format_table(report(outcome.out_dir)), end="")
    print(f"results: {outcome.out_dir / 'results.csv'}")
    return 0


def cmd_report(args) -> int:
    from dagvi.report import format_table, report

    directory = args.directory or Path(default_out())
    print(format_table(report(directory)), end="")
    return 0


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "eval": cmd_eval,
            "experiment": cmd_experiment, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"dagvi: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
