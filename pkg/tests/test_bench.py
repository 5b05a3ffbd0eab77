import math

import numpy as np
import pytest

from qsysid.bench import (
    ExperimentConfig,
    FitReport,
    RunRecord,
    binary_experiment,
    ceil_experiment,
    fit_score,
    plot_fit_boxes,
    read_fits_csv,
    run_experiment,
    summarize,
    write_fits_csv,
    write_summary_csv,
)
from qsysid.inference import EmConfig
from qsysid.sampler import GibbsConfig

# the deliberately starved EM budget below trips the non-convergence warning
pytestmark = pytest.mark.filterwarnings("ignore:EM did not converge")

TINY_EM = EmConfig(
    max_iters=4,
    gibbs_em=GibbsConfig(n_samples=15, burn_in=5),
    gibbs_final=GibbsConfig(n_samples=20, burn_in=5),
    beta_grid=30,
)


def tiny_config(**overrides):
    base = dict(
        kind="binary",
        n_runs=2,
        n_data=50,
        m=6,
        estimators=("kb-st", "kb-or", "kb-gs-1", "ml-gs", "map-gs"),
        master_seed=5,
        em=TINY_EM,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# ------------------------------------------------------ fit metric


def test_fit_score_exact_recovery():
    g = np.array([1.0, -2.0, 0.5])
    assert fit_score(g, g) == 1.0


def test_fit_score_zero_estimate():
    g = np.array([3.0, 4.0])
    assert fit_score(g, np.zeros(2)) == 0.0


def test_fit_score_double_estimate():
    g = np.array([3.0, 4.0])
    assert fit_score(g, 2.0 * g) == pytest.approx(0.0)


def test_fit_score_rejects_zero_truth():
    with pytest.raises(ValueError):
        fit_score(np.zeros(2), np.ones(2))


# ------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(kind="other")
    with pytest.raises(ValueError):
        ExperimentConfig(estimators=("kb-st", "bogus"))
    with pytest.raises(ValueError):
        ExperimentConfig(n_runs=0)
    with pytest.raises(ValueError):
        ExperimentConfig(workers=0)


def test_experiment_factories():
    b = binary_experiment()
    assert b.kind == "binary" and b.n_data == 500 and b.sigma2_discard == 2.0
    c = ceil_experiment()
    assert c.kind == "ceil" and c.n_data == 200 and c.sigma2_discard is None
    assert binary_experiment(n_runs=3).n_runs == 3


# ------------------------------------------------------ experiments


def test_run_experiment_row_layout():
    cfg = tiny_config()
    report = run_experiment(cfg)
    assert len(report.rows) == cfg.n_runs * len(cfg.estimators)
    for run in range(cfg.n_runs):
        names = [r.estimator for r in report.rows if r.run_index == run]
        assert names == list(cfg.estimators)
    for row in report.rows:
        assert math.isfinite(row.fit)
        assert row.sigma2_true > 0


def test_run_experiment_deterministic_bytes(tmp_path):
    cfg = tiny_config()
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_fits_csv(run_experiment(cfg), p1)
    write_fits_csv(run_experiment(cfg), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_run_experiment_parallel_matches_sequential():
    cfg = tiny_config()
    seq = run_experiment(cfg)
    par = run_experiment(tiny_config(workers=2))
    assert [(r.run_index, r.estimator, r.fit) for r in seq.rows] == [
        (r.run_index, r.estimator, r.fit) for r in par.rows
    ]


def test_discard_rule_redraws_noisy_systems():
    # a tiny threshold forces redraws; accepted runs must satisfy the bound
    cfg = tiny_config(estimators=("kb-st",), sigma2_discard=0.9, n_runs=4)
    report = run_experiment(cfg)
    assert all(r.sigma2_true <= 0.9 for r in report.rows)
    assert any(r.discards > 0 for r in report.rows)


def test_discard_rule_gives_up_after_cap():
    cfg = tiny_config(estimators=("kb-st",), sigma2_discard=1e-9, redraw_cap=5)
    with pytest.raises(RuntimeError):
        run_experiment(cfg)


def test_ceil_kind_runs():
    cfg = tiny_config(kind="ceil", estimators=("kb-st", "kb-gs-2"), n_runs=1)
    report = run_experiment(cfg)
    assert len(report.rows) == 2
    assert all(math.isfinite(r.fit) for r in report.rows)


def test_estimator_failure_is_isolated(monkeypatch):
    import qsysid.bench as bench_mod

    def boom(*args, **kwargs):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(bench_mod, "ml_gs", boom)
    cfg = tiny_config(estimators=("kb-st", "ml-gs"), n_runs=1)
    with pytest.warns(UserWarning, match="failed"):
        report = run_experiment(cfg)
    by_name = {r.estimator: r for r in report.rows}
    assert math.isfinite(by_name["kb-st"].fit)
    assert math.isnan(by_name["ml-gs"].fit)


# ------------------------------------------------------ summaries


def quantile_oracle(xs, p):
    """Linear interpolation between order statistics, the numpy default."""
    xs = sorted(xs)
    h = (len(xs) - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def _stub_report(fits_by_name):
    names = tuple(fits_by_name)
    n_runs = len(next(iter(fits_by_name.values())))
    cfg = ExperimentConfig(n_runs=n_runs, estimators=names, em=TINY_EM)
    rows = [
        RunRecord(
            run_index=i,
            estimator=name,
            fit=fits_by_name[name][i],
            iterations=1,
            converged=True,
            sigma2_true=0.5,
            discards=0,
        )
        for i in range(n_runs)
        for name in names
    ]
    return FitReport(config=cfg, rows=rows)


def test_summarize_matches_quantile_oracle():
    rng = np.random.default_rng(0)
    fits = list(rng.uniform(0.0, 1.0, size=11))
    report = _stub_report({"kb-st": fits})
    (entry,) = summarize(report)
    assert entry["n"] == 11 and entry["failed"] == 0
    for key, p in [("min", 0.0), ("q1", 0.25), ("median", 0.5), ("q3", 0.75), ("max", 1.0)]:
        assert entry[key] == pytest.approx(quantile_oracle(fits, p), rel=1e-12)


def test_summarize_excludes_failures():
    fits = [0.2, math.nan, 0.6, 0.4]
    report = _stub_report({"kb-st": fits})
    (entry,) = summarize(report)
    assert entry["n"] == 3 and entry["failed"] == 1
    assert entry["median"] == pytest.approx(0.4)


def test_summarize_all_failed():
    report = _stub_report({"kb-st": [math.nan, math.nan]})
    (entry,) = summarize(report)
    assert entry["n"] == 0 and math.isnan(entry["median"])


# ------------------------------------------------------ files


def test_fits_csv_roundtrip(tmp_path):
    cfg = tiny_config(estimators=("kb-st",), n_runs=2)
    report = run_experiment(cfg)
    path = tmp_path / "fits.csv"
    write_fits_csv(report, path)
    rows = read_fits_csv(path)
    assert len(rows) == len(report.rows)
    for got, exp in zip(rows, report.rows):
        assert got["run_index"] == exp.run_index
        assert got["estimator"] == exp.estimator
        assert got["fit"] == exp.fit
        assert got["converged"] == exp.converged
        assert got["discards"] == exp.discards


def test_read_fits_csv_rejects_other_schemas(tmp_path):
    path = tmp_path / "junk.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_fits_csv(path)


def test_summary_csv(tmp_path):
    report = _stub_report({"kb-st": [0.1, 0.5, 0.9]})
    path = tmp_path / "summary.csv"
    write_summary_csv(summarize(report), path)
    text = path.read_text().splitlines()
    assert text[0] == "estimator,n,failed,min,q1,median,q3,max"
    assert len(text) == 2


def test_plot_writes_figure(tmp_path):
    report = _stub_report({"kb-st": [0.1, 0.5, 0.9], "ml-gs": [0.2, 0.3, 0.4]})
    path = tmp_path / "boxes.pdf"
    plot_fit_boxes(report, path)
    assert path.exists() and path.stat().st_size > 500
