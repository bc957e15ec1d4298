"""Command line interface: ``kbo <subcommand> ...``.

Exit codes: 0 success, 1 check failed or bad input, 2 ``solve`` stopped at
``max_iter``, 3 ``solve`` stopped on a line-search failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from kbo._rng import make_rng
from kbo.config import RunConfig, format_config, load_config
from kbo.errors import KboError
from kbo.experiments import (
    METRICS,
    aggregate,
    build_study_oracle,
    derive_seed,
    diagonal_fraction,
    heatmap_pairs,
    initial_point,
    iv_instance,
    metric_slope,
    read_report_csv,
    run_generalization_study,
)
from kbo.optimizer import Termination, gd_run

GRAD_CHECK_TOL = 1e-4
EQUIV_CHECK_TOL = 1e-6
_PROBE_KEY = 0x70726F6265

log = logging.getLogger("kbo")


def _parse_vector(text: str, d: int) -> np.ndarray:
    try:
        vec = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise KboError(f"--omega0 must be comma separated numbers: {exc}") from None
    if vec.shape != (d,) or not np.all(np.isfinite(vec)):
        raise KboError(f"--omega0 needs {d} finite entries, got {text!r}")
    return vec


def _fmt_vec(v) -> str:
    return "[" + ", ".join(f"{x:.10g}" for x in v) + "]"


def cmd_solve(args, cfg: RunConfig) -> int:
    st = cfg.study
    problem, _ = iv_instance(st, cfg.data_n, cfg.data_m, cfg.data_seed)
    if args.omega0 is not None:
        omega0 = _parse_vector(args.omega0, st.d)
    else:
        omega0 = initial_point(st.base_seed, cfg.data_n, cfg.data_m, cfg.data_seed, st.d)
    traj = gd_run(omega0, problem.grad, problem.value, tol=st.tol, max_iter=st.max_iter)
    if args.trajectory:
        with open(args.trajectory, "w", newline="") as fh:
            traj.write_csv(fh)
    print(f"omega       {_fmt_vec(traj.final)}")
    print(f"F_hat       {traj.values[-1]:.12g}")
    print(f"grad_norm   {traj.grad_norms[-1]:.6e}")
    print(f"iterations  {traj.iterations}")
    print(f"termination {traj.termination.value}")
    return {Termination.TOLERANCE: 0, Termination.MAX_ITER: 2}.get(traj.termination, 3)


def _probe_points(cfg: RunConfig, count: int) -> list[np.ndarray]:
    rng = make_rng(cfg.data_seed, _PROBE_KEY)
    return [rng.uniform(0.0, 1.0, cfg.study.d) for _ in range(count)]


def central_difference(fn, omega, step: float) -> np.ndarray:
    g = np.empty_like(omega)
    for k in range(len(omega)):
        e = np.zeros_like(omega)
        e[k] = step
        g[k] = (fn(omega + e) - fn(omega - e)) / (2 * step)
    return g


def cmd_grad_check(args, cfg: RunConfig) -> int:
    problem, _ = iv_instance(cfg.study, cfg.data_n, cfg.data_m, cfg.data_seed,
                             closed_form=not args.newton)
    worst = 0.0
    print(f"{'probe':>5} {'|grad|':>12} {'rel_err_implicit':>17} {'rel_err_plugin':>15}")
    for i, omega in enumerate(_probe_points(cfg, args.probes)):
        res = problem.evaluate(omega, both=True)
        fd = central_difference(problem.value, omega, args.step)
        scale = float(np.linalg.norm(fd))
        if scale < args.critical:
            print(f"{i:>5} {scale:12.4e} {'near-critical, skipped':>33}")
            continue
        e_imp = float(np.linalg.norm(res.grad - fd)) / scale
        e_plug = float(np.linalg.norm(res.grad_plugin - fd)) / scale
        worst = max(worst, e_imp, e_plug)
        print(f"{i:>5} {scale:12.4e} {e_imp:17.3e} {e_plug:15.3e}")
    ok = worst <= GRAD_CHECK_TOL
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRAD_CHECK_TOL:g})")
    return 0 if ok else 1


def cmd_equiv_check(args, cfg: RunConfig) -> int:
    st = cfg.study
    worst = 0.0
    for trial in range(args.trials):
        seed = derive_seed(cfg.data_seed, trial)
        problem, _ = iv_instance(st, cfg.data_n, cfg.data_m, seed, closed_form=not args.newton)
        omega = make_rng(seed, _PROBE_KEY).uniform(0.0, 1.0, st.d)
        res = problem.evaluate(omega, both=True)
        gap = res.estimator_gap / (1.0 + float(np.linalg.norm(res.grad)))
        worst = max(worst, gap)
        log.info("trial %d gap %.3e adjoint residual %.3e", trial, gap, res.adjoint_residual)
    ok = worst <= EQUIV_CHECK_TOL
    print(f"trials {args.trials}  max implicit-vs-plugin gap {worst:.3e} "
          f"({'ok' if ok else 'FAILED'}, tolerance {EQUIV_CHECK_TOL:g})")
    return 0 if ok else 1


def _write_report(report, cfg: RunConfig, path: str) -> None:
    report.notes.extend("config " + line for line in format_config(cfg).splitlines())
    with open(path, "w") as fh:
        report.write_csv(fh)


def cmd_experiment(args, cfg: RunConfig) -> int:
    report = run_generalization_study(cfg.study)
    _write_report(report, cfg, args.out)
    failed = len(report.rows) - len(report.ok_rows())
    print(f"wrote {len(report.rows)} rows to {args.out} ({failed} failed)")
    return 0


def cmd_slope(args, _cfg=None) -> int:
    with open(args.inp) as fh:
        rows = read_report_csv(fh)
    metrics = METRICS if args.metric == "all" else (args.metric,)
    print(f"{'metric':<16} {'slope':>9} {'stderr':>9} {'ci95_lo':>9} {'ci95_hi':>9}")
    for metric in metrics:
        fit = metric_slope(rows, metric)
        lo, hi = fit.interval()
        print(f"{metric:<16} {fit.slope:9.4f} {fit.stderr:9.4f} {lo:9.4f} {hi:9.4f}")
    return 0


def cmd_plot_data(args, _cfg=None) -> int:
    """Whitespace columns ``n m mean lo hi`` for gnuplot."""
    with open(args.inp) as fh:
        rows = read_report_csv(fh)
    print(f"# n m {args.metric}_mean ci95_lo ci95_hi count")
    for cell in aggregate(rows, args.metric).values():
        print(f"{cell.n} {cell.m} {cell.mean!r} {cell.lo!r} {cell.hi!r} {cell.count}")
    return 0


def cmd_heatmap(args, cfg: RunConfig) -> int:
    st = cfg.study
    report = run_generalization_study(st, pairs=heatmap_pairs(st))
    if args.rows:
        _write_report(report, cfg, args.rows)
    cells = {metric: aggregate(report.rows, metric) for metric in METRICS}
    keys = sorted(cells[METRICS[0]])
    with open(args.out, "w") as fh:
        fh.write(f"# kbo heatmap: mean over {st.seeds} seeds per cell\n")
        fh.write("n,m,count," + ",".join(f"{k}_mean,{k}_lo,{k}_hi" for k in METRICS) + "\n")
        for key in keys:
            parts = [str(key[0]), str(key[1]), str(cells[METRICS[0]][key].count)]
            for metric in METRICS:
                c = cells[metric].get(key)
                parts += ["nan"] * 3 if c is None else [repr(c.mean), repr(c.lo), repr(c.hi)]
            fh.write(",".join(parts) + "\n")
    print(f"wrote {len(keys)} cells to {args.out}")
    if sorted({k[0] for k in keys}) == sorted({k[1] for k in keys}):
        for metric in METRICS:
            frac, _ = diagonal_fraction(report.rows, metric)
            print(f"{metric:<16} minimum on/next to diagonal for {100 * frac:.0f}% of budgets")
    return 0


def cmd_build_oracle(args, cfg: RunConfig) -> int:
    if not cfg.study.oracle_cache:
        raise KboError("set oracle.cache in the config to say where the snapshot goes")
    build_study_oracle(cfg.study)
    print(f"oracle snapshot at {cfg.study.oracle_cache}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kbo", description="Kernel bilevel optimization toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="flat key = value config file")
        return p

    p = with_config("solve", "gradient descent on one empirical IV instance")
    p.add_argument("--omega0", help="comma separated starting point (default: seeded uniform(0,1)^d)")
    p.add_argument("--trajectory", help="write the iterate log (iter,f_value,grad_norm,step_size) here")
    p.set_defaults(func=cmd_solve)

    p = with_config("grad-check", "finite-difference check of both hypergradient estimators")
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--critical", type=float, default=1e-6, help="skip probes with smaller gradient norm")
    p.add_argument("--newton", action="store_true", help="solve the inner problem by damped Newton")
    p.set_defaults(func=cmd_grad_check)

    p = with_config("equiv-check", "implicit vs adjoint-plugin gradient gap over random instances")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--newton", action="store_true", help="solve the inner problem by damped Newton")
    p.set_defaults(func=cmd_equiv_check)

    p = with_config("experiment", "generalization-rate study (m = n grid)")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("slope", help="log-log slope fit from a report CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--metric", default="all", choices=("all",) + METRICS)
    p.set_defaults(func=cmd_slope, needs_config=False)

    p = sub.add_parser("plot-data", help="gnuplot-ready columns from a report CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--metric", default="val_err", choices=METRICS)
    p.set_defaults(func=cmd_plot_data, needs_config=False)

    p = with_config("heatmap", "(n, m) grid study")
    p.add_argument("--out", required=True, help="per-cell summary CSV")
    p.add_argument("--rows", help="also write the per-run report CSV here")
    p.set_defaults(func=cmd_heatmap)

    p = with_config("build-oracle", "build the RFF oracle snapshot named by oracle.cache")
    p.set_defaults(func=cmd_build_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if getattr(args, "needs_config", True) else None
        for name in ("probes", "trials"):
            if getattr(args, name, 1) < 1:
                raise KboError(f"--{name} must be positive")
        return args.func(args, cfg)
    except (KboError, OSError) as exc:
        print(f"kbo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
