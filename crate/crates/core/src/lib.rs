//! Conformal predictive portfolio selection.
//!
//! For each candidate portfolio this library forecasts the next-period
//! portfolio return, builds a full-conformal prediction interval valid under
//! dependent data, and selects a portfolio by the high-return-from-low-risk
//! rule: shortlist the candidates with the largest interval lower bounds,
//! then take the shortlist member with the largest upper bound. A rolling
//! backtest harness compares the conformal strategies against sample-mean,
//! AR, and uniform baselines.
//!
//! Modules:
//! - [`market_data`]: price ingestion, monthly simple returns, lag features.
//! - [`portfolio`]: simplex weight vectors and candidate-set generation.
//! - [`forecast`]: AR(p) by OLS and a seeded feedforward network.
//! - [`conformal`]: blocking permutations, nonconformity scores, p-values,
//!   and prediction intervals over a hypothesis grid.
//! - [`selection`]: HR-LR and point-forecast selection rules.
//! - [`backtest`]: the strategy-comparison harness and Monte Carlo coverage
//!   experiments on synthetic data.

pub mod backtest;
pub mod conformal;
pub mod forecast;
pub mod market_data;
pub mod portfolio;
pub mod selection;

pub use backtest::{
    baseline_forecast, coverage_experiment, cumulative_returns, run_backtest, BacktestConfig,
    BacktestError, BacktestResult, CoverageConfig, CoverageReport, StrategyKind,
    SyntheticMarketSpec, SyntheticProcess,
};
pub use conformal::{
    augment, blocking_permutation, conformal_pvalue, nonconformity_score, prediction_interval,
    ConformalError, HypothesisGrid, PredictionInterval,
};
pub use forecast::{
    finite_difference_gradient_check, fit_ar, fit_nn, ForecastError, ModelKind, ModelSpec,
    TrainedModel,
};
pub use market_data::{
    build_lag_features, load_prices, to_monthly_returns, MarketDataError, Month, PriceTable,
    ReturnSeries,
};
pub use portfolio::{
    simplex_grid, uniform_portfolio, CandidateSet, Portfolio, PortfolioError,
};
pub use selection::{
    hr_lr_select, point_forecast_select, IntervalTable, SelectionError, SelectionOutcome,
    ShortlistRule,
};
