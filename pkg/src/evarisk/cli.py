"""
Command-line entry point.

    evarisk <subcommand> [options]

Options can also come from a flat ``key = value`` config file passed with
``--config``; command-line flags win over the file, the file wins over
built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import FAMILIES, BacktestError, VarModelSpec, run_backtest
from .data_io import (AlignedDataset, DataError, ReturnSeries, align_exogenous, load_exogenous,
                      load_price_series, load_return_series, to_log_returns, write_report,
                      write_series_csv)
from .expectile import (STANDARD_TAUS, ExpectileError, calibrate_tau, expectile_regression,
                        lagged_design, sample_expectile, violation_rate)
from .regime_threshold import (EvtError, RegimeError, ThresholdError, default_grid,
                               fit_regime_switching_expectile, mean_excess_curve,
                               parameter_stability, threshold_expectile_grid_search,
                               tsay_threshold_test)
from .stats_core import StatsError, summary_table
from .volatility import GarchError, GarchParams, care_fit, garch_fit, garch_simulate

log = logging.getLogger("evarisk")

WORKERS_ENV = "EVARISK_WORKERS"
EXIT_USAGE = 1
EXIT_PARTIAL = 2

_ERRORS = (DataError, StatsError, ExpectileError, GarchError, ThresholdError, RegimeError,
           EvtError, BacktestError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors exit with status 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# --- input helpers --------------------------------------------------------------

def _add_input(p):
    p.add_argument("--input", "-i", required=True, help="CSV with a date column and prices or returns")
    p.add_argument("--kind", choices=("prices", "returns"), default="prices",
                   help="whether the value column holds prices (log returns are taken) or returns")
    p.add_argument("--date-col", default="date", help="date column name")
    p.add_argument("--value-col", default=None,
                   help="value column name (default: close for prices, return for returns)")
    p.add_argument("--start", default=None, help="first date to keep (ISO-8601)")
    p.add_argument("--end", default=None, help="last date to keep (ISO-8601)")


def _add_output(p, formats=("csv", "json"), default="csv"):
    p.add_argument("--output", "-o", default=None, help="output file (default: standard output)")
    p.add_argument("--format", choices=formats, default=default, help="output format")


def _load_returns(args) -> ReturnSeries:
    if args.kind == "prices":
        cols = {"date": args.date_col, "price": args.value_col or "close"}
        r = to_log_returns(load_price_series(args.input, cols))
    else:
        cols = {"date": args.date_col, "return": args.value_col or "return"}
        r = load_return_series(args.input, cols)
    r = r.between(args.start, args.end)
    if len(r) == 0:
        raise DataError("no observations in the selected date range")
    return r


def _emit(text: str, args):
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- subcommands ---------------------------------------------------------------

def cmd_stats(args):
    r = _load_returns(args)
    rows = summary_table(r, args.adf_lags, args.arch_lags)
    if args.format == "csv":
        _emit(_csv_text(["statistic", "value"], rows), args)
    else:
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v:>14.6g}" if isinstance(v, float) else f"{k:<{width}}  {v:>14}"
                 for k, v in rows]
        _emit("\n".join(lines) + "\n", args)
    return 0


def cmd_fit_expectile(args):
    r = _load_returns(args)
    exog, names = None, []
    data = AlignedDataset.from_returns(r)
    if args.exog:
        panel = load_exogenous(args.exog, args.date_col, args.exog_cols)
        data = align_exogenous(r, panel)
        names = list(data.exog)
    cols = [data.exog[n] for n in names]
    if args.garch_variance:
        g = garch_fit(data.returns, dist="normal")
        cols.append(g.cond_variance)
        names.append("garch_var")
    if cols:
        exog = np.column_stack(cols)
    X, y, labels, _ = lagged_design(data.returns, args.lags, exog, names, exog_lag=1)
    fits = [expectile_regression(X, y, t, names=labels) for t in args.taus]
    rows = [[lab, *(float(f.coefficients[i]) for f in fits)] for i, lab in enumerate(labels)]
    rows.append(["loss", *(float(f.loss) for f in fits)])
    rows.append(["n_obs", *(int(y.size) for _ in fits)])
    rows.append(["iterations", *(f.iterations for f in fits)])
    rows.append(["converged", *(f.converged for f in fits)])
    _emit(_csv_text(["parameter", *(f"tau={t!r}" for t in args.taus)], rows), args)
    return 0


def _garch_dict(g):
    p = g.params
    return {"omega": p.omega, "alpha": p.alpha_g, "beta": p.beta_g, "mu": p.mean_mu,
            "nu": p.nu, "dist": g.innovation_dist, "log_likelihood": g.log_likelihood,
            "persistence": p.persistence, "at_boundary": g.at_boundary, "n_obs": g.nobs}


def cmd_fit_garch(args):
    r = _load_returns(args)
    g = garch_fit(r, dist=args.dist)
    out = _garch_dict(g)
    if args.format == "json":
        _emit(_json_text(out), args)
    else:
        _emit(_csv_text(["parameter", "value"], [[k, v] for k, v in out.items()]), args)
    if args.paths:
        write_series_csv(args.paths, r.dates, {"return": r.returns, "cond_variance": g.cond_variance,
                                               "std_residual": g.std_residuals})
    return 0


def cmd_fit_care(args):
    r = _load_returns(args)
    if (args.tau is None) == (args.alpha is None):
        raise UsageError("give exactly one of --tau or --alpha")
    c = care_fit(r, tau=args.tau, alpha=args.alpha, dist=args.dist)
    out = _garch_dict(c.garch)
    out.update({"tau": c.tau, "xi_tau": c.xi_tau, "alpha_target": args.alpha,
                "in_sample_violation_rate": float(np.mean(r.returns < c.evar_path)),
                "next_evar": float(c.forecast(1)[0])})
    if args.format == "json":
        _emit(_json_text(out), args)
    else:
        _emit(_csv_text(["parameter", "value"], [[k, v] for k, v in out.items()]), args)
    if args.paths:
        write_series_csv(args.paths, r.dates, {"return": r.returns, "evar": c.evar_path})
    return 0


def cmd_threshold(args):
    r = _load_returns(args)
    if args.mode == "tsay":
        res = tsay_threshold_test(r, args.delay, args.lags)
        rows = [["statistic", res.statistic], ["p_value", res.p_value],
                ["df_num", res.df[0]], ["df_den", res.df[1]],
                ["reject_5pct", res.decision_at_5pct]]
        _emit(_csv_text(["field", "value"], rows), args)
    elif args.mode == "grid":
        if args.grid_min is not None and args.grid_max is not None:
            grid = np.arange(args.grid_min, args.grid_max + 0.5 * args.grid_step, args.grid_step)
        else:
            grid = default_grid(r, args.delay, args.lags)
        m = threshold_expectile_grid_search(r, args.tau, args.delay, args.lags, grid)
        rows = [[g, a, g == m.gamma] for g, a in m.candidates]
        text = _csv_text(["gamma", "aic", "selected"], rows)
        _emit(text, args)
        log.info("selected gamma=%r aic=%r linear_aic=%r", m.gamma, m.aic, m.linear_aic)
    elif args.mode == "regime":
        m = fit_regime_switching_expectile(r, args.regimes, args.tau, args.lags)
        rows = []
        for j in range(m.k_regimes):
            rows.append([j, *m.coefficients[j].tolist(), *m.transition[j].tolist(),
                         float(m.smoothed_probs[:, j].mean())])
        header = (["regime", "intercept", *(f"lag{i}" for i in range(1, args.lags + 1))]
                  + [f"p_to_{k}" for k in range(m.k_regimes)] + ["mean_prob"])
        _emit(_csv_text(header, rows), args)
    else:
        losses = -r.returns if args.tail == "lower" else r.returns
        if args.thresholds:
            thresholds = np.asarray(args.thresholds)
        else:
            thresholds = np.quantile(losses, np.linspace(0.80, 0.98, 19))
        me = mean_excess_curve(losses, thresholds)
        stab = {row[0]: row for row in parameter_stability(losses, thresholds)}
        rows = []
        for pt in me:
            s = stab.get(pt.threshold)
            rows.append([pt.threshold, pt.mean_excess, pt.count, pt.flagged,
                         s[1] if s else "", s[2] if s else "", s[3] if s else ""])
        _emit(_csv_text(["threshold", "mean_excess", "count", "flagged", "gpd_xi",
                         "gpd_sigma", "modified_scale"], rows), args)
    return 0


def cmd_calibrate(args):
    r = _load_returns(args)
    if args.standardize:
        resid = garch_fit(r, dist="normal").std_residuals
    else:
        resid = r.returns
    rows = []
    for a in args.alphas:
        t = calibrate_tau(resid, a)
        e = sample_expectile(resid, t)
        rows.append([a, t, e, violation_rate(resid, e)])
    _emit(_csv_text(["alpha", "tau", "expectile", "violation_rate"], rows), args)
    return 0


def cmd_simulate(args):
    params = GarchParams(args.omega, args.alpha_g, args.beta_g, args.mu,
                         args.nu if args.dist == "student_t" else None)
    try:
        params.validate()
    except GarchError as exc:
        raise UsageError(str(exc))
    r = garch_simulate(params, args.n, args.dist, seed=args.seed)
    dates = np.busday_offset(np.datetime64(args.start_date, "D"), np.arange(args.n + 1), roll="forward")
    if args.output is None:
        raise UsageError("--output is required for simulate")
    if args.as_prices:
        prices = args.initial_price * np.exp(np.concatenate([[0.0], np.cumsum(r)]))
        write_series_csv(args.output, dates, {"close": prices})
    else:
        write_series_csv(args.output, dates[1:], {"return": r})
    return 0


def cmd_backtest(args):
    r = _load_returns(args)
    data = AlignedDataset.from_returns(r)
    if args.eval_last is not None:
        if args.eval_last >= len(r):
            raise DataError("--eval-last exceeds the sample length")
        eval_range = (r.dates[-args.eval_last], r.dates[-1])
    else:
        eval_range = (args.eval_start, args.eval_end)
        if eval_range == (None, None):
            eval_range = None
    specs = []
    for fam in args.models:
        if fam not in FAMILIES:
            raise UsageError(f"unknown model {fam!r}; choose from {', '.join(FAMILIES)}")
        window = args.hs_window if fam == "historical_sim" else args.window
        variance = args.variance if fam in ("parametric_normal", "filtered_hs", "evar") else "garch"
        specs.append(VarModelSpec(fam, window=window, refit_every=args.refit_every, variance=variance))
    meta = {"seed": args.seed, "input": os.path.basename(args.input), "models": args.models,
            "alphas": args.alphas, "window": args.window, "hs_window": args.hs_window,
            "refit_every": args.refit_every, "variance": args.variance,
            "eval_start": None if eval_range is None else str(eval_range[0]),
            "eval_end": None if eval_range is None else str(eval_range[1])}
    report = run_backtest(data, specs, args.alphas, eval_range, dq_lags=args.dq_lags,
                          workers=args.workers, meta=meta)
    if args.output is None:
        raise UsageError("--output is required for backtest")
    write_report(report, args.output, args.format)
    for c in report.cells:
        log.info("%-18s alpha=%.3f violations=%d rate=%.4f uc_p=%.3f cc_p=%.3f dq_p=%.3f",
                 c.model_id, c.alpha, c.n_violations, c.violation_rate,
                 c.tests["uc"]["p_value"], c.tests["cc"]["p_value"], c.tests["dq"]["p_value"])
    return EXIT_PARTIAL if report.failures else 0


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="flat key = value config file")
    common.add_argument("--verbose", "-v", action="count", default=0, help="more logging")

    parser = _Parser(prog="evarisk", description="Expectile-based VaR estimation and backtesting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="subcommand")

    p = sub.add_parser("stats", parents=[common], help="descriptive statistics and diagnostics")
    _add_input(p)
    p.add_argument("--adf-lags", type=int, default=1, help="lagged differences in the ADF regression")
    p.add_argument("--arch-lags", type=int, default=5, help="lags in the ARCH-LM regression")
    _add_output(p, ("csv", "text"), "text")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit-expectile", parents=[common], help="expectile regression across levels")
    _add_input(p)
    p.add_argument("--taus", type=_floats, default=list(STANDARD_TAUS),
                   help="comma-separated expectile levels")
    p.add_argument("--lags", type=int, default=2, help="autoregressive order p")
    p.add_argument("--exog", default=None, help="CSV of exogenous columns (entered at lag 1)")
    p.add_argument("--exog-cols", type=_names, default=None, help="comma-separated exogenous columns")
    p.add_argument("--garch-variance", action="store_true",
                   help="add the lagged GARCH(1,1) conditional variance as a regressor")
    _add_output(p, ("csv",))
    p.set_defaults(func=cmd_fit_expectile)

    for name, func, helptext in (("fit-garch", cmd_fit_garch, "GARCH(1,1) maximum likelihood"),
                                 ("fit-care", cmd_fit_care, "CARE expectile model on GARCH")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _add_input(p)
        p.add_argument("--dist", choices=("normal", "student_t"), default="normal",
                       help="innovation distribution")
        p.add_argument("--paths", default=None, help="also write fitted paths to this CSV")
        if name == "fit-care":
            p.add_argument("--tau", type=float, default=None, help="expectile level")
            p.add_argument("--alpha", type=float, default=None,
                           help="confidence level; tau is calibrated to it")
        _add_output(p, ("csv", "json"), "json")
        p.set_defaults(func=func)

    p = sub.add_parser("threshold", parents=[common], help="threshold, regime and tail analysis")
    _add_input(p)
    p.add_argument("--mode", choices=("tsay", "grid", "regime", "evt"), default="tsay",
                   help="tsay test, AIC grid search, regime-switching fit or EVT tables")
    p.add_argument("--delay", type=int, default=1, help="threshold delay d")
    p.add_argument("--lags", type=int, default=1, help="autoregressive order p")
    p.add_argument("--tau", type=float, default=0.05, help="expectile level for grid/regime modes")
    p.add_argument("--regimes", type=int, default=3, help="number of regimes K")
    p.add_argument("--grid-min", type=float, default=None, help="smallest candidate threshold")
    p.add_argument("--grid-max", type=float, default=None, help="largest candidate threshold")
    p.add_argument("--grid-step", type=float, default=0.001, help="candidate spacing")
    p.add_argument("--tail", choices=("lower", "upper"), default="lower",
                   help="evt: lower tail analyses losses = -returns")
    p.add_argument("--thresholds", type=_floats, default=None,
                   help="evt: comma-separated thresholds on the loss scale")
    _add_output(p, ("csv",))
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("calibrate", parents=[common], help="expectile level for a confidence level")
    _add_input(p)
    p.add_argument("--alphas", type=_floats, default=[0.90, 0.95, 0.975, 0.99],
                   help="comma-separated confidence levels")
    p.add_argument("--standardize", action="store_true",
                   help="calibrate on GARCH standardized residuals instead of raw returns")
    _add_output(p, ("csv",))
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", parents=[common], help="simulate a GARCH(1,1) series")
    p.add_argument("--omega", type=float, default=2e-6, help="variance intercept")
    p.add_argument("--alpha-g", type=float, default=0.08, help="ARCH coefficient")
    p.add_argument("--beta-g", type=float, default=0.90, help="GARCH coefficient")
    p.add_argument("--mu", type=float, default=0.0, help="constant mean")
    p.add_argument("--dist", choices=("normal", "student_t"), default="normal",
                   help="innovation distribution")
    p.add_argument("--nu", type=float, default=5.0, help="student-t degrees of freedom")
    p.add_argument("--n", type=int, default=5000, help="number of returns")
    p.add_argument("--start-date", default="2004-01-01", help="first (price) date; business days")
    p.add_argument("--as-prices", action="store_true", help="write a close-price path instead of returns")
    p.add_argument("--initial-price", type=float, default=100.0, help="first price with --as-prices")
    p.add_argument("--output", "-o", default=None, help="output CSV")
    p.add_argument("--seed", type=int, required=True, help="random seed (mandatory)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("backtest", parents=[common], help="rolling VaR backtest")
    _add_input(p)
    p.add_argument("--models", type=_names, default=list(FAMILIES),
                   help=f"comma-separated model families from {', '.join(FAMILIES)}")
    p.add_argument("--alphas", type=_floats, default=[0.95, 0.99], help="comma-separated confidence levels")
    p.add_argument("--window", type=int, default=1000, help="GARCH estimation window")
    p.add_argument("--hs-window", type=int, default=250, help="historical simulation window")
    p.add_argument("--refit-every", type=int, default=25,
                   help="re-estimate GARCH every N forecasts (1 = full rolling refit)")
    p.add_argument("--variance", choices=("garch", "constant"), default="garch",
                   help="variance model for the normal-based families (constant = GARCH with alpha=beta=0)")
    p.add_argument("--eval-start", default=None, help="first evaluation date")
    p.add_argument("--eval-end", default=None, help="last evaluation date")
    p.add_argument("--eval-last", type=int, default=None, help="evaluate the last N observations")
    p.add_argument("--dq-lags", type=int, default=4, help="hit lags in the DQ test")
    p.add_argument("--workers", type=int, default=int(os.environ.get(WORKERS_ENV, "1")),
                   help=f"worker processes across model cells (env {WORKERS_ENV})")
    p.add_argument("--seed", type=int, default=0, help="seed recorded in the report (default 0)")
    _add_output(p, ("json", "csv"), "json")
    p.set_defaults(func=cmd_backtest)
    return parser


def _scan(argv, commands):
    """Subcommand and ``--config`` path, found without a full parse."""
    command = next((a for a in argv if a in commands), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def _parse(parser, argv):
    """Parse, with config-file values installed as subparser defaults first."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command, path = _scan(argv, sub.choices)
    if command is not None and path is not None:
        try:
            cfg = read_config(path)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
        subparser = sub.choices[command]
        known = {a.dest: a for a in subparser._actions}
        converted = {}
        for key, value in cfg.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {command}")
            action = known[key]
            try:
                if isinstance(action, argparse._StoreTrueAction):
                    converted[key] = value.lower() in ("1", "true", "yes", "on")
                elif action.type is not None:
                    converted[key] = action.type(value)
                else:
                    converted[key] = value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad config value for {key!r}: {exc}")
            if action.choices is not None and converted[key] not in action.choices:
                raise UsageError(f"bad config value for {key!r}: {value!r}")
            # a config value satisfies a required flag
            action.required = False
        subparser.set_defaults(**converted)
    return parser.parse_args(argv)


def _resolved(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(f"evarisk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help, --version and argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    print("config: " + json.dumps(_resolved(args), sort_keys=True, default=str), file=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evarisk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (*_ERRORS, OSError) as exc:
        print(f"evarisk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
