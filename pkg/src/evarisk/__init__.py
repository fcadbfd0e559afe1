"""Expectile-based Value-at-Risk: estimation, volatility and regime models, backtesting."""

__version__ = "0.1.0"

from .data_io import (AlignedDataset, DataError, ExogenousPanel, PriceSeries, ReturnSeries,
                      align_exogenous, load_exogenous, load_price_series, load_return_series,
                      read_report, to_log_returns, write_report)
from .expectile import (ExpectileFit, asymmetric_squared_loss, calibrate_tau, check_coherence,
                        expectile_regression, sample_expectile)
from .stats_core import TestResult, adf_test, arch_lm_test, descriptive_stats, jarque_bera
from .volatility import CareFit, GarchFit, GarchParams, care_fit, garch_fit, garch_simulate
from .backtest import BacktestReport, VarModelSpec, forecast_var, run_backtest
