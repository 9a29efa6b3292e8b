import csv
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dagvi.cli import main
from dagvi.config import ExperimentConfig, dump_config, load_config, parse_overrides
from dagvi.dataio import CsvFormatError, export_csv, ingest_csv
from dagvi.experiments import ResultRow, ResultWriter, read_rows, run_experiment
from dagvi.report import line_plot_svg, mean_std, report, summarize

FAST = ["train.max_steps=40", "train.log_every=10", "experiment.posterior_samples=10"]


def write(path, text):
    path.write_text(text)
    return path


# ----------------------------------------------------------------- ingestion

def test_ingest_centers_columns(tmp_path):
    data = ingest_csv(write(tmp_path / "a.csv", "1,2\n3,4\n5,6\n"))
    assert data.values.shape == (3, 2)
    assert np.array_equal(data.values.mean(axis=0), [0.0, 0.0])
    raw = ingest_csv(tmp_path / "a.csv", center=False)
    assert np.array_equal(raw.values, [[1, 2], [3, 4], [5, 6]])


def test_ingest_header_detection(tmp_path):
    data = ingest_csv(write(tmp_path / "h.csv", "a, b\n1,2\n3,4\n"), center=False)
    assert data.meta["columns"] == ["a", "b"] and data.n == 2
    forced = ingest_csv(write(tmp_path / "n.csv", "7,8\n1,2\n"), center=False, header=True)
    assert forced.meta["columns"] == ["7", "8"] and forced.n == 1


def test_ingest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        ingest_csv(tmp_path / "missing.csv")
    with pytest.raises(CsvFormatError, match="line 3 has 1 fields"):
        ingest_csv(write(tmp_path / "r.csv", "1,2\n3,4\n5\n"))
    with pytest.raises(CsvFormatError, match="line 2, column 2"):
        ingest_csv(write(tmp_path / "x.csv", "1,2\n3,oops\n"))
    with pytest.raises(CsvFormatError):
        ingest_csv(write(tmp_path / "e.csv", "\n\n"))


def test_export_ingest_round_trip(tmp_path, rng):
    x = rng.normal(size=(20, 4)) * 10 ** rng.uniform(-6, 6, size=4)
    export_csv(x, tmp_path / "r.csv", names=["p", "q", "r", "s"])
    back = ingest_csv(tmp_path / "r.csv", center=False)
    assert np.abs(back.values - x).max() <= 1e-12 * np.abs(x).max()


# ------------------------------------------------------------------- config

def test_config_file_and_overrides(tmp_path):
    path = write(tmp_path / "c.ini", "[experiment]\nkind = ablation  # all variants\nseeds = 3, 4\n"
                                     "dims = 4, 6\n[train]\nmax_steps = 77\n[prior]\nrho = 3\n")
    config = load_config(path, ["train.step_size=0.01"])
    assert config.kind == "ablation" and config.seeds == (3, 4) and config.dims == (4, 6)
    assert config.train.max_steps == 77 and config.train.step_size == 0.01 and config.prior.rho == 3.0
    dump_config(config, tmp_path / "back.ini")
    assert load_config(tmp_path / "back.ini").config_hash() == config.config_hash()


def test_config_errors(tmp_path):
    with pytest.raises(KeyError):
        load_config(None, ["train.nonsense=1"])
    with pytest.raises(KeyError):
        load_config(None, ["train.seed=1"])
    with pytest.raises(ValueError):
        parse_overrides(["max_steps=3"])
    with pytest.raises(ValueError):
        load_config(None, ["experiment.kind=bogus"])
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(FileNotFoundError):
        ExperimentConfig(kind="fit-external", data=str(tmp_path / "none.csv"))
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.ini")


def test_config_hash_stability(tmp_path):
    path = write(tmp_path / "c.ini", "[train]\nmax_steps = 50\n")
    a, b = load_config(path), load_config(path)
    assert a.config_hash() == b.config_hash()
    assert load_config(path, seeds=[9], out="elsewhere").config_hash() == a.config_hash()
    assert load_config(path, ["train.step_size=0.5"]).config_hash() != a.config_hash()


def test_output_dir_environment(monkeypatch):
    monkeypatch.setenv("DAGVI_OUTPUT_DIR", "/tmp/somewhere")
    assert ExperimentConfig().out == "/tmp/somewhere"


# ------------------------------------------------------------------- report

def fake_row(metric, value, seed=0, variant="full"):
    return ResultRow("synthetic-ev", variant, seed, 8, 100, 1.0, "gaussian", metric, value, 1.0, 0.3, "h", "0")


def test_mean_std_arithmetic():
    assert mean_std([4.2]) == (4.2, 0.0)
    assert mean_std([2.0] * 5) == (2.0, 0.0)
    mean, std = mean_std([1, 2, 3, 4, 5])
    assert mean == 3.0 and std == pytest.approx(math.sqrt(2.5), abs=1e-15)
    with pytest.raises(ValueError):
        mean_std([])


def test_summarize_groups_by_metric():
    rows = [fake_row("expected_shd", v, seed=v) for v in (1, 2, 3, 4, 5)] + [fake_row("tpr", 0.5)]
    table = {t["metric"]: t for t in summarize(rows)}
    assert table["expected_shd"]["count"] == 5 and table["expected_shd"]["mean"] == 3.0
    assert table["tpr"]["std"] == 0.0


def test_report_files_and_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        report(tmp_path)
    writer = ResultWriter(tmp_path / "results.csv")
    with pytest.raises(ValueError):
        report(tmp_path)
    writer.write([fake_row("expected_shd", v, seed=v) for v in (1, 2, 3, 4, 5)])
    table = report(tmp_path)
    assert table[0]["mean"] == 3.0
    with open(tmp_path / "summary.csv") as fh:
        assert next(csv.DictReader(fh))["count"] == "5"
    assert "expected_shd" in (tmp_path / "summary.txt").read_text()


def test_buffered_writer_orders_by_job(tmp_path):
    writer = ResultWriter(tmp_path / "results.csv", buffered=True)
    writer.write([fake_row("m", 2.0)], order=2)
    writer.write([fake_row("m", 0.0)], order=0)
    writer.write([fake_row("m", 1.0)], order=1)
    writer.flush()
    assert [r.value for r in read_rows(tmp_path / "results.csv")] == [0.0, 1.0, 2.0]


def test_svg_is_well_formed(tmp_path):
    svg = line_plot_svg({"full": [(4, 1.0, 0.2), (8, 2.5, 0.5)], "null <&>": [(4, 3.0, 0.0), (8, 6.0, 0.0)]},
                        "d", "expected SHD", "SHD vs d")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert "null &lt;&amp;&gt;" in svg


# ------------------------------------------------------------- experiments

def test_experiment_rows_and_null_baseline(tmp_path):
    config = load_config(None, FAST + ["experiment.dims=3"], seeds=[0, 1], out=str(tmp_path / "run"))
    outcome = run_experiment(config)
    assert not outcome.failures
    rows = read_rows(tmp_path / "run" / "results.csv")
    assert {r.config_hash for r in rows} == {config.config_hash()}
    for seed in (0, 1):
        got = {(r.variant, r.metric): r.value for r in rows if r.seed == seed}
        assert got[("null", "expected_shd")] == got[("null", "true_edges")]
        assert {"expected_shd", "expected_shd_c", "tpr", "fpr", "fdr", "sample_kl", "final_elbo"} <= {
            m for v, m in got if v == "full"}
    assert (tmp_path / "run" / "runs" / "full_d3_n100_seed0" / "trace.csv").is_file()
    assert (tmp_path / "run" / "runs" / "full_d3_n100_seed1" / "checkpoint.bin").is_file()
    svgs = list((tmp_path / "run").glob("*.svg"))
    assert svgs and all(ET.parse(p).getroot().tag.endswith("svg") for p in svgs)


def test_reproducible_rerun_is_bit_exact(tmp_path):
    outs = []
    for name in ("a", "b"):
        config = load_config(None, FAST + ["experiment.dims=3", "experiment.threads=2",
                                           "experiment.reproducible=true"],
                             seeds=[0, 1], out=str(tmp_path / name))
        run_experiment(config)
        rows = read_rows(tmp_path / name / "results.csv")
        outs.append([(r.variant, r.seed, r.metric, r.value) for r in rows])
    assert outs[0] == outs[1]


def test_ablation_variants_share_data(tmp_path):
    config = load_config(None, FAST + ["experiment.dims=3", "experiment.kind=ablation"], seeds=[0],
                         out=str(tmp_path))
    rows = run_experiment(config).rows
    assert {r.variant for r in rows} == {"full", "mean-field", "laplace", "sinkhorn-100", "null"}
    assert len({r.value for r in rows if r.metric == "true_edges"}) == 1


def test_intervention_rows(tmp_path):
    config = load_config(None, FAST + ["experiment.dims=3", "experiment.kind=intervention",
                                       "experiment.intervention_samples=200"], seeds=[0], out=str(tmp_path))
    rows = run_experiment(config).rows
    w = {r.variant: r.value for r in rows if r.metric == "wasserstein"}
    assert set(w) == {"full", "null"} and all(v >= 0 for v in w.values())


# --------------------------------------------------------------------- verbs

def test_cli_verbs_end_to_end(tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["generate", "--d", "3", "--n", "40", "--seed", "2", "--out", str(out)]) == 0
    data, truth = out / "synthetic_d3_n40_seed2.csv", out / "synthetic_d3_n40_seed2_truth.csv"
    assert data.is_file() and truth.is_file()
    fit = tmp_path / "fit"
    assert main(["fit", str(data), "--out", str(fit)] + [f"--set={s}" for s in FAST]) == 0
    probs = np.loadtxt(fit / "edge_probabilities.csv", delimiter=",")
    assert probs.shape == (3, 3) and np.all((probs >= 0) & (probs <= 1))
    assert main(["eval", str(fit / "checkpoint.bin"), str(truth), "--data", str(data), "--samples", "20"]) == 0
    text = capsys.readouterr().out
    assert "expected_shd" in text and "null_shd" in text and "sample_kl" in text

    exp = tmp_path / "exp"
    assert main(["experiment", "--seed", "0", "--out", str(exp), "--set", "experiment.dims=3"]
                + [a for s in FAST for a in ("--set", s)]) == 0
    assert main(["report", str(exp)]) == 0
    assert "expected_shd" in capsys.readouterr().out


def test_cli_error_codes(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 2
    assert main(["experiment", "--config", str(tmp_path / "none.ini")]) == 2
    assert main(["experiment", "--set", "train.bogus=1"]) == 2
    bad = write(tmp_path / "bad.csv", "1,2\n3\n")
    assert main(["experiment", "--kind", "fit-external", "--set", f"experiment.data={bad}",
                 "--out", str(tmp_path / "o")]) == 1
    assert "all jobs failed" in capsys.readouterr().err
    assert (tmp_path / "o" / "failures.txt").is_file()
