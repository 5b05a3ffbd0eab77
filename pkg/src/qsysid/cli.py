"""Command-line front end.

Subcommands:
    simulate    draw datasets and write them as text files
    identify    run one estimator on one dataset file
    bench       full Monte Carlo study -> CSV + summary + box-plot figure
    summarize   recompute summary + figure from an existing fits CSV

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract here is 1 for
    # anything wrong with the configuration.
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="qsysid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate benchmark datasets")
    p_sim.add_argument("--kind", choices=["binary", "ceil"], default="binary")
    p_sim.add_argument("--runs", type=int, default=1)
    p_sim.add_argument("--n", type=int, default=None, help="samples per run")
    p_sim.add_argument("--m", type=int, default=50)
    p_sim.add_argument("--snr", type=float, default=10.0)
    p_sim.add_argument("--threshold", type=float, default=1.0)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", type=Path, default=Path("."))

    p_id = sub.add_parser("identify", help="estimate g from one dataset file")
    p_id.add_argument("dataset", type=Path)
    p_id.add_argument(
        "--estimator",
        choices=["kb-gs", "kb-st", "ml-gs"],
        default="kb-gs",
    )
    p_id.add_argument("--method", choices=["joint", "marginal"], default="joint")
    p_id.add_argument("--m", type=int, default=None)
    p_id.add_argument("--seed", type=int, default=0)
    p_id.add_argument("--trace", action="store_true")
    p_id.add_argument("--out", type=Path, default=None)

    p_bench = sub.add_parser("bench", help="Monte Carlo benchmark")
    p_bench.add_argument("--config", type=Path, default=None, help="JSON config file")
    p_bench.add_argument("--kind", choices=["binary", "ceil"], default=None)
    p_bench.add_argument("--runs", type=int, default=None)
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument(
        "--method",
        choices=["joint", "marginal"],
        default=None,
        help="restrict the Gibbs estimator to one chain",
    )
    p_bench.add_argument(
        "--full-scale",
        action="store_true",
        help="100 runs instead of the 20-run default (hours of compute)",
    )
    p_bench.add_argument("--workers", type=int, default=None)
    p_bench.add_argument("--trace", action="store_true")
    p_bench.add_argument("--out", type=Path, default=Path("bench-out"))

    p_sum = sub.add_parser("summarize", help="summary + figure from a fits CSV")
    p_sum.add_argument("fits", type=Path)
    p_sum.add_argument("--out", type=Path, default=None)
    return parser


def _cmd_simulate(args) -> int:
    from .bench import binary_experiment, ceil_experiment, _generate_run
    from .signal import save_dataset

    overrides = dict(master_seed=args.seed, n_runs=args.runs, m=args.m, snr=args.snr)
    if args.n is not None:
        overrides["n_data"] = args.n
    if args.kind == "binary":
        overrides["binary_threshold"] = args.threshold
        cfg = binary_experiment(**overrides)
    else:
        cfg = ceil_experiment(**overrides)
    args.out.mkdir(parents=True, exist_ok=True)
    for run in range(cfg.n_runs):
        ds, discards = _generate_run(cfg, run)
        path = args.out / f"{cfg.kind}-run{run:03d}.txt"
        save_dataset(ds, path)
        print(f"wrote {path} (sigma2_true={ds.sigma2_true:.4g}, discards={discards})")
    return 0


def _cmd_identify(args) -> int:
    from .bench import fit_score
    from .baselines import ml_gs
    from .inference import EmConfig, em_identify, write_em_trace
    from .signal import load_dataset

    ds = load_dataset(args.dataset)
    m = args.m if args.m is not None else (len(ds.g_true) if ds.g_true is not None else None)
    if m is None:
        raise ConfigError("--m is required for datasets without stored g_true")
    rng = np.random.default_rng(args.seed)
    cfg = EmConfig()
    out_dir = args.out
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if args.estimator == "kb-gs":
        g_hat, eta, trace = em_identify(ds, ds.quantizer, cfg, args.method, rng, m=m)
        print(
            f"eta_hat: lam={eta.lam:.6g} beta={eta.beta:.6g} sigma2={eta.sigma2:.6g} "
            f"({'converged' if trace.converged else 'not converged'} "
            f"in {trace.n_iters} iterations)"
        )
        if args.trace:
            trace_path = (out_dir or args.dataset.parent) / (
                args.dataset.stem + f".em-{args.method}.trace"
            )
            write_em_trace(trace, trace_path)
            print(f"wrote {trace_path}")
    elif args.estimator == "kb-st":
        from .baselines import kb_standard

        res = kb_standard(ds.u, ds.y, m)
        g_hat = res.g_hat
        eta = res.eta_hat
        print(f"eta_hat: lam={eta.lam:.6g} beta={eta.beta:.6g} sigma2={eta.sigma2:.6g}")
    else:
        res = ml_gs(ds.u, ds.y, ds.quantizer, m, EmConfig(), rng)
        g_hat = res.g_hat
        print(f"ml-gs: {res.iterations} iterations, converged={res.converged}")

    print("g_hat: " + " ".join(f"{x:.6g}" for x in g_hat))
    if ds.g_true is not None:
        print(f"fit: {fit_score(ds.g_true, g_hat):.4f}")
    if out_dir is not None:
        np.savetxt(out_dir / (args.dataset.stem + ".g_hat.txt"), g_hat)
    return 0


def _bench_config(args):
    from .bench import ESTIMATORS, binary_experiment, ceil_experiment
    from .inference import EmConfig
    from .sampler import GibbsConfig

    raw = {}
    if args.config is not None:
        try:
            raw = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")

    em_raw = raw.pop("em", {})
    gibbs_em = em_raw.pop("gibbs_em", {})
    gibbs_final = em_raw.pop("gibbs_final", {})
    try:
        em = EmConfig(
            gibbs_em=GibbsConfig(**gibbs_em),
            gibbs_final=GibbsConfig(**gibbs_final),
            **em_raw,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad em config: {exc}") from exc

    kind = args.kind or raw.pop("kind", "binary")
    overrides = dict(raw)
    overrides["em"] = em
    if args.runs is not None:
        overrides["n_runs"] = args.runs
    elif args.full_scale:
        overrides["n_runs"] = 100
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.method is not None:
        drop = "kb-gs-2" if args.method == "joint" else "kb-gs-1"
        base = tuple(overrides.get("estimators", ESTIMATORS))
        overrides["estimators"] = tuple(e for e in base if e != drop)
    if "estimators" in overrides:
        overrides["estimators"] = tuple(overrides["estimators"])
    factory = binary_experiment if kind == "binary" else ceil_experiment
    try:
        return factory(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc


def _cmd_bench(args) -> int:
    from .bench import (
        plot_fit_boxes,
        run_experiment,
        summarize,
        write_fits_csv,
        write_summary_csv,
    )

    cfg = _bench_config(args)
    args.out.mkdir(parents=True, exist_ok=True)

    def progress(idx):
        print(f"run {idx + 1}/{cfg.n_runs} done", flush=True)

    report = run_experiment(cfg, progress=progress if cfg.workers == 1 else None)
    fits_path = args.out / "fits.csv"
    write_fits_csv(report, fits_path)
    summary = summarize(report)
    write_summary_csv(summary, args.out / "summary.csv")
    plot_fit_boxes(report, args.out / "fit-boxplot.pdf")
    for entry in summary:
        med = entry["median"]
        med_txt = "nan" if isinstance(med, float) and math.isnan(med) else f"{med:.4f}"
        print(f"{entry['estimator']:8s} median FIT {med_txt} (n={entry['n']})")
    print(f"wrote {fits_path}, summary.csv and fit-boxplot.pdf in {args.out}")
    return 0


def _cmd_summarize(args) -> int:
    from .bench import (
        ExperimentConfig,
        FitReport,
        RunRecord,
        plot_fit_boxes,
        read_fits_csv,
        summarize,
        write_summary_csv,
    )

    rows = read_fits_csv(args.fits)
    if not rows:
        raise ConfigError(f"{args.fits} holds no rows")
    names = tuple(dict.fromkeys(r["estimator"] for r in rows))
    n_runs = len({r["run_index"] for r in rows})
    cfg = ExperimentConfig(n_runs=n_runs, estimators=names)
    report = FitReport(
        config=cfg,
        rows=[RunRecord(**r) for r in rows],
    )
    out = args.out or args.fits.parent
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(report)
    write_summary_csv(summary, out / "summary.csv")
    plot_fit_boxes(report, out / "fit-boxplot.pdf", title=f"{args.fits.name}")
    for entry in summary:
        print(f"{entry['estimator']:8s} median FIT {entry['median']:.4f} (n={entry['n']})")
    print(f"wrote summary.csv and fit-boxplot.pdf in {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "simulate": _cmd_simulate,
        "identify": _cmd_identify,
        "bench": _cmd_bench,
        "summarize": _cmd_summarize,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"qsysid: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (CLI boundary)
        print(f"qsysid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
