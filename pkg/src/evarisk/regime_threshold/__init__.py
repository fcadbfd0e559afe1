from .evt import (EvtError, GpdFit, MeanExcessPoint, fit_tail, gpd_fit, gpd_loglik,
                  mean_excess_curve, parameter_stability)
from .recursions import (AdaptiveThresholdPath, DynamicTauParams, adaptive_threshold_path,
                         dynamic_tau_path)
from .regime import RegimeError, RegimeModel, fit_regime_switching_expectile, simulate_regime_ar
from .threshold import (ThresholdError, ThresholdModel, default_grid, expectile_aic,
                        threshold_expectile_grid_search, threshold_f_statistic,
                        tsay_threshold_test)
