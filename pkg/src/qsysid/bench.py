"""Monte Carlo benchmark: random systems, competing estimators, FIT reports.

Each run draws a fresh random system and input, calibrates the noise to the
configured signal-to-noise ratio, quantizes the output and scores every
configured estimator with

    FIT = 1 - ||g - g_hat|| / ||g||.

All randomness is derived from (master_seed, run_index, stream), so a report
is a pure function of its configuration: rerunning a config reproduces the
CSV byte for byte, and runs can be farmed out to worker processes without
changing the result.
"""

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import kb_standard, map_gs, ml_gs
from .inference import EmConfig, em_identify
from .signal import (
    Dataset,
    binary_quantizer,
    calibrate_noise,
    ceil_quantizer,
    impulse_response,
    quantize,
    sample_random_system,
    simulate,
)

__all__ = [
    "ESTIMATORS",
    "ExperimentConfig",
    "FitReport",
    "RunRecord",
    "binary_experiment",
    "ceil_experiment",
    "fit_score",
    "plot_fit_boxes",
    "run_experiment",
    "summarize",
    "write_fits_csv",
    "read_fits_csv",
    "write_summary_csv",
]

ESTIMATORS = ("kb-st", "kb-or", "kb-gs-1", "kb-gs-2", "ml-gs", "map-gs")

# Fixed substream ids so adding or dropping an estimator never shifts the
# randomness of the others.
_DATA_STREAM = 0
_EST_STREAMS = {
    "kb-st": 10,
    "kb-or": 11,
    "kb-gs-1": 12,
    "kb-gs-2": 13,
    "ml-gs": 14,
    "map-gs": 15,
}

CSV_COLUMNS = (
    "run_index",
    "estimator",
    "fit",
    "iterations",
    "converged",
    "sigma2_true",
    "discards",
)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "binary"
    n_runs: int = 20
    n_data: int = 500
    m: int = 50
    snr: float = 10.0
    binary_threshold: float = 1.0
    sigma2_discard: float | None = 2.0
    estimators: tuple[str, ...] = ESTIMATORS
    master_seed: int = 0
    em: EmConfig = field(default_factory=EmConfig)
    workers: int = 1
    redraw_cap: int = 100

    def __post_init__(self):
        if self.kind not in ("binary", "ceil"):
            raise ValueError(f"kind must be 'binary' or 'ceil', got {self.kind!r}")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        if self.n_runs < 1 or self.n_data < 1 or self.m < 1:
            raise ValueError("n_runs, n_data and m must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def binary_experiment(**overrides) -> ExperimentConfig:
    """Threshold-detector study: N = 500, discard systems with sigma2 > 2."""
    defaults = dict(kind="binary", n_data=500, sigma2_discard=2.0)
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def ceil_experiment(**overrides) -> ExperimentConfig:
    """Integer-rounding study: N = 200, no discard rule."""
    defaults = dict(kind="ceil", n_data=200, sigma2_discard=None)
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


@dataclass(frozen=True)
class RunRecord:
    run_index: int
    estimator: str
    fit: float
    iterations: int
    converged: bool
    sigma2_true: float
    discards: int


@dataclass
class FitReport:
    config: ExperimentConfig
    rows: list[RunRecord]

    def fits(self, estimator: str) -> np.ndarray:
        vals = [r.fit for r in self.rows if r.estimator == estimator]
        return np.array(vals)


def fit_score(g_true: np.ndarray, g_hat: np.ndarray) -> float:
    """FIT = 1 - ||g - g_hat|| / ||g||; 1 is exact recovery, <= 0 is useless."""
    g_true = np.asarray(g_true, dtype=float)
    g_hat = np.asarray(g_hat, dtype=float)
    if g_true.shape != g_hat.shape:
        raise ValueError(f"shape mismatch: {g_true.shape} vs {g_hat.shape}")
    norm = float(np.linalg.norm(g_true))
    if norm == 0.0:
        raise ValueError("g_true has zero norm; FIT is undefined")
    return 1.0 - float(np.linalg.norm(g_true - g_hat)) / norm


def _generate_run(cfg: ExperimentConfig, run_index: int) -> tuple[Dataset, int]:
    """Draw one dataset, redrawing the whole system while the discard rule
    fires (sigma2 above the cap), up to cfg.redraw_cap attempts."""
    discards = 0
    for attempt in range(cfg.redraw_cap):
        rng = np.random.default_rng(
            [cfg.master_seed, run_index, _DATA_STREAM, attempt]
        )
        sys = sample_random_system(rng, m=cfg.m)
        g = impulse_response(sys, cfg.m)
        u = rng.standard_normal(cfg.n_data)
        sigma2 = calibrate_noise(g, u, cfg.snr)
        if cfg.sigma2_discard is not None and sigma2 > cfg.sigma2_discard:
            discards += 1
            continue
        z = simulate(g, u, sigma2, rng)
        if cfg.kind == "binary":
            q = binary_quantizer(cfg.binary_threshold)
        else:
            lo = int(math.ceil(float(np.min(z))))
            hi = int(math.ceil(float(np.max(z))))
            q = ceil_quantizer(lo, hi)
        y = quantize(q, z)
        ds = Dataset(
            u=u,
            y=y,
            quantizer=q,
            sigma2_true=sigma2,
            z_latent=z,
            g_true=g,
            seed=run_index,
        )
        return ds, discards
    raise RuntimeError(
        f"run {run_index}: discard rule rejected {cfg.redraw_cap} candidate systems"
    )


def _run_one(cfg: ExperimentConfig, run_index: int) -> list[RunRecord]:
    ds, discards = _generate_run(cfg, run_index)
    m = cfg.m
    q = ds.quantizer
    kb_or_result = None

    def est_rng(name: str) -> np.random.Generator:
        return np.random.default_rng(
            [cfg.master_seed, run_index, _EST_STREAMS[name]]
        )

    rows: list[RunRecord] = []
    for name in cfg.estimators:
        try:
            if name == "kb-st":
                res = kb_standard(ds.u, ds.y, m)
            elif name == "kb-or":
                if kb_or_result is None:
                    kb_or_result = kb_standard(ds.u, ds.z_latent, m)
                res = kb_or_result
            elif name == "kb-gs-1":
                g_hat, _, trace = em_identify(ds, q, cfg.em, "joint", est_rng(name), m=m)
                res = _as_result(g_hat, trace)
            elif name == "kb-gs-2":
                g_hat, _, trace = em_identify(
                    ds, q, cfg.em, "marginal", est_rng(name), m=m
                )
                res = _as_result(g_hat, trace)
            elif name == "ml-gs":
                res = ml_gs(ds.u, ds.y, q, m, cfg.em, est_rng(name))
            elif name == "map-gs":
                if kb_or_result is None:
                    kb_or_result = kb_standard(ds.u, ds.z_latent, m)
                res = map_gs(
                    ds.u, ds.y, q, m, kb_or_result.eta_hat, cfg.em, est_rng(name)
                )
            else:  # pragma: no cover  (config validation rejects this)
                raise ValueError(name)
            fit = fit_score(ds.g_true, res.g_hat)
            rows.append(
                RunRecord(
                    run_index=run_index,
                    estimator=name,
                    fit=fit,
                    iterations=res.iterations,
                    converged=res.converged,
                    sigma2_true=ds.sigma2_true,
                    discards=discards,
                )
            )
        except Exception as exc:  # noqa: BLE001  (one failure must not sink the run)
            warnings.warn(f"run {run_index}, {name} failed: {exc}", stacklevel=2)
            rows.append(
                RunRecord(
                    run_index=run_index,
                    estimator=name,
                    fit=math.nan,
                    iterations=0,
                    converged=False,
                    sigma2_true=ds.sigma2_true,
                    discards=discards,
                )
            )
    return rows


@dataclass
class _AsResult:
    g_hat: np.ndarray
    iterations: int
    converged: bool


def _as_result(g_hat, trace) -> _AsResult:
    return _AsResult(g_hat=g_hat, iterations=trace.n_iters, converged=trace.converged)


def run_experiment(cfg: ExperimentConfig, progress=None) -> FitReport:
    """Execute all runs (in order, or on a process pool) and collect records."""
    indices = list(range(cfg.n_runs))
    if cfg.workers == 1:
        per_run = []
        for idx in indices:
            per_run.append(_run_one(cfg, idx))
            if progress is not None:
                progress(idx)
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_run = list(pool.map(_run_one, [cfg] * len(indices), indices))
    rows = [row for chunk in per_run for row in chunk]
    return FitReport(config=cfg, rows=rows)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def summarize(report: FitReport) -> list[dict]:
    """Five-number summary (min, q1, median, q3, max) of FIT per estimator.

    Failed runs (NaN fit) are excluded from the quantiles and counted.
    """
    out = []
    for name in report.config.estimators:
        vals = report.fits(name)
        ok = vals[~np.isnan(vals)]
        entry = {"estimator": name, "n": int(ok.size), "failed": int(vals.size - ok.size)}
        if ok.size:
            qs = np.quantile(ok, [0.0, 0.25, 0.5, 0.75, 1.0])
            entry.update(
                min=float(qs[0]),
                q1=float(qs[1]),
                median=float(qs[2]),
                q3=float(qs[3]),
                max=float(qs[4]),
            )
        else:
            entry.update(min=math.nan, q1=math.nan, median=math.nan, q3=math.nan, max=math.nan)
        out.append(entry)
    return out


def _fmt_cell(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_fits_csv(report: FitReport, path) -> None:
    """One row per (run, estimator); floats use shortest round-trip repr so a
    rerun of the same config is byte-identical."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in report.rows:
        writer.writerow(
            [
                r.run_index,
                r.estimator,
                _fmt_cell(r.fit),
                r.iterations,
                _fmt_cell(r.converged),
                _fmt_cell(r.sigma2_true),
                r.discards,
            ]
        )
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_fits_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path} does not have the expected columns {CSV_COLUMNS}")
        rows = []
        for rec in reader:
            rows.append(
                {
                    "run_index": int(rec["run_index"]),
                    "estimator": rec["estimator"],
                    "fit": float(rec["fit"]),
                    "iterations": int(rec["iterations"]),
                    "converged": rec["converged"] == "true",
                    "sigma2_true": float(rec["sigma2_true"]),
                    "discards": int(rec["discards"]),
                }
            )
        return rows


def write_summary_csv(summary: list[dict], path) -> None:
    cols = ["estimator", "n", "failed", "min", "q1", "median", "q3", "max"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for entry in summary:
        writer.writerow([_fmt_cell(entry[c]) for c in cols])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def plot_fit_boxes(report: FitReport, path, title: str | None = None) -> None:
    """Render per-estimator FIT box plots to a figure file (format by suffix)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.config.estimators)
    data = []
    for name in names:
        vals = report.fits(name)
        data.append(vals[~np.isnan(vals)])
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 4))
    ax.boxplot(data, tick_labels=[n.upper() for n in names])
    ax.set_ylabel("FIT")
    ax.grid(True, axis="y", alpha=0.3)
    if title is None:
        title = f"{report.config.kind} quantizer, {report.config.n_runs} runs"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
