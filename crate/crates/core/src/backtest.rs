//! Rolling backtest harness: train window, sequential re-estimation,
//! per-period selection for every strategy, realized returns, cumulative
//! paths, and a synthetic-data coverage experiment.
//!
//! Periods execute sequentially; within a period, candidate-portfolio
//! conformal evaluations run in parallel with order-preserving collection,
//! so results are independent of worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    lagged_dataset, prediction_interval, ConformalError, HypothesisGrid,
};
use crate::forecast::{fit_ar, ArTrainer, ForecastError, ModelKind, ModelSpec, NnTrainer, Trainer};
use crate::market_data::{MarketDataError, Month, ReturnSeries};
use crate::portfolio::{
    portfolio_return_series, uniform_portfolio, CandidateSet, Portfolio, PortfolioError,
};
use crate::selection::{
    hr_lr_select, point_forecast_select, IntervalEntry, IntervalTable, SelectionError,
    ShortlistRule,
};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("strategy {strategy} at period {period}: needs {needed} periods of history, has {got}")]
    InsufficientHistory {
        strategy: String,
        period: usize,
        needed: usize,
        got: usize,
    },
    #[error("strategy {strategy} failed at period {period}: {source}")]
    Conformal {
        strategy: String,
        period: usize,
        source: ConformalError,
    },
    #[error("strategy {strategy} failed at period {period}: {source}")]
    Selection {
        strategy: String,
        period: usize,
        source: SelectionError,
    },
    #[error("strategy {strategy} failed at period {period}: {source}")]
    Forecast {
        strategy: String,
        period: usize,
        source: ForecastError,
    },
    #[error("return {value} at position {position} is not a finite value > -1")]
    ReturnOutOfRange { position: usize, value: f64 },
    #[error("coverage experiment needs at least 50 trials, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Portfolio(#[from] PortfolioError),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
}

/// Deterministic seed splitting: one top-level seed fans out per
/// (strategy, period, purpose) through a splitmix64-style mixer.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &part in parts {
        state = state.wrapping_add(part).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// One portfolio-selection strategy in the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    CppsAr,
    CppsNn,
    Mean1,
    Mean3,
    Ar1,
    Ar2,
    Ar3,
    Uniform,
}

impl StrategyKind {
    pub fn id(self) -> &'static str {
        match self {
            Self::CppsAr => "cpps_ar",
            Self::CppsNn => "cpps_nn",
            Self::Mean1 => "mean1",
            Self::Mean3 => "mean3",
            Self::Ar1 => "ar1",
            Self::Ar2 => "ar2",
            Self::Ar3 => "ar3",
            Self::Uniform => "uniform",
        }
    }

    pub fn all() -> Vec<Self> {
        vec![
            Self::CppsAr,
            Self::CppsNn,
            Self::Mean1,
            Self::Mean3,
            Self::Ar1,
            Self::Ar2,
            Self::Ar3,
            Self::Uniform,
        ]
    }

    fn seed_tag(self) -> u64 {
        match self {
            Self::CppsAr => 1,
            Self::CppsNn => 2,
            Self::Mean1 => 3,
            Self::Mean3 => 4,
            Self::Ar1 => 5,
            Self::Ar2 => 6,
            Self::Ar3 => 7,
            Self::Uniform => 8,
        }
    }
}

/// Training-window convention for the CPPS strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Window grows from `train_start` as the test advances.
    Expanding,
    /// Fixed number of trailing months.
    Rolling(usize),
}

/// How cumulative paths are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CumulativeMode {
    #[default]
    Compounded,
    Additive,
}

/// Trailing-window lengths of the baseline rules, in months.
const MEAN_WINDOW_MONTHS_PER_YEAR: usize = 12;
const AR_BASELINE_WINDOW: usize = 36;

/// Full description of one backtest run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestConfig {
    /// 1-based period where CPPS training data begins.
    pub train_start: usize,
    /// First 1-based period that is traded.
    pub test_start: usize,
    /// Last 1-based period that is traded (inclusive).
    pub test_end: usize,
    pub strategies: Vec<StrategyKind>,
    pub candidates: CandidateSet,
    pub grid: HypothesisGrid,
    pub alpha: f64,
    /// HR-LR shortlist size; defaults to ceil(|candidates| / 10).
    pub shortlist_size: Option<usize>,
    pub shortlist_rule: ShortlistRule,
    pub cpps_window: WindowKind,
    /// AR order of the CPPS-AR strategy.
    pub cpps_ar_order: usize,
    pub cpps_ar_refit: bool,
    /// Network architecture of the CPPS-NN strategy; its seed field is
    /// ignored (seeds are derived per strategy/period/candidate).
    pub cpps_nn: ModelSpec,
    pub cpps_nn_refit: bool,
    pub cumulative: CumulativeMode,
    /// Record every (candidate, hypothesis) p-value for the CPPS strategies.
    pub interval_diagnostics: bool,
    pub seed: u64,
}

impl BacktestConfig {
    /// Sensible defaults around a candidate set; dates still to be set.
    pub fn new(candidates: CandidateSet) -> Self {
        Self {
            train_start: 1,
            test_start: 37,
            test_end: 120,
            strategies: StrategyKind::all(),
            candidates,
            grid: HypothesisGrid::default(),
            alpha: 0.2,
            shortlist_size: None,
            shortlist_rule: ShortlistRule::HighestLower,
            cpps_window: WindowKind::Expanding,
            cpps_ar_order: 3,
            cpps_ar_refit: true,
            cpps_nn: ModelSpec::nn(vec![1, 2, 4], 100, 500, 0.01, 0),
            cpps_nn_refit: false,
            cumulative: CumulativeMode::Compounded,
            interval_diagnostics: false,
            seed: 0,
        }
    }

    pub fn resolved_shortlist_size(&self) -> usize {
        self.shortlist_size
            .unwrap_or_else(|| self.candidates.len().div_ceil(10))
            .max(1)
    }

    fn validate(&self, data: &ReturnSeries) -> Result<(), BacktestError> {
        if self.train_start < 1 || self.train_start >= self.test_start {
            return Err(BacktestError::InvalidConfig(format!(
                "train_start {} must be at least 1 and precede test_start {}",
                self.train_start, self.test_start
            )));
        }
        if self.test_start > self.test_end {
            return Err(BacktestError::InvalidConfig(format!(
                "test_start {} must not exceed test_end {}",
                self.test_start, self.test_end
            )));
        }
        if self.test_end > data.period_count() {
            return Err(BacktestError::InvalidConfig(format!(
                "test_end {} exceeds available periods {}",
                self.test_end,
                data.period_count()
            )));
        }
        if self.strategies.is_empty() {
            return Err(BacktestError::InvalidConfig("no strategies".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(BacktestError::InvalidConfig(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.candidates.asset_count() != data.asset_count() {
            return Err(BacktestError::InvalidConfig(format!(
                "candidate set has {} assets, data has {}",
                self.candidates.asset_count(),
                data.asset_count()
            )));
        }
        let m = self.resolved_shortlist_size();
        if m > self.candidates.len() {
            return Err(BacktestError::InvalidConfig(format!(
                "shortlist size {m} exceeds candidate count {}",
                self.candidates.len()
            )));
        }
        if self.cpps_ar_order == 0 {
            return Err(BacktestError::InvalidConfig("cpps_ar_order is 0".into()));
        }
        if self.strategies.contains(&StrategyKind::CppsNn) {
            if self.cpps_nn.kind != ModelKind::Nn {
                return Err(BacktestError::InvalidConfig(
                    "cpps_nn spec must have kind = nn".into(),
                ));
            }
            self.cpps_nn
                .validate()
                .map_err(|e| BacktestError::InvalidConfig(e.to_string()))?;
        }
        for &strategy in &self.strategies {
            let needed = self.min_history(strategy);
            let available = match strategy {
                // an expanding CPPS window only reaches back to train_start
                StrategyKind::CppsAr | StrategyKind::CppsNn
                    if matches!(self.cpps_window, WindowKind::Expanding) =>
                {
                    self.test_start - self.train_start
                }
                _ => self.test_start - 1,
            };
            if available < needed {
                return Err(BacktestError::InsufficientHistory {
                    strategy: strategy.id().to_string(),
                    period: self.test_start,
                    needed,
                    got: available,
                });
            }
        }
        Ok(())
    }

    /// Periods of window a strategy needs before its first trade.
    fn min_history(&self, strategy: StrategyKind) -> usize {
        // a CPPS window must yield max_lag features plus at least two pairs
        let cpps_needed = |max_lag: usize| match self.cpps_window {
            WindowKind::Expanding => max_lag + 2,
            WindowKind::Rolling(n) => n.max(max_lag + 2),
        };
        match strategy {
            StrategyKind::CppsAr => cpps_needed(self.cpps_ar_order),
            StrategyKind::CppsNn => cpps_needed(self.cpps_nn.max_lag()),
            StrategyKind::Mean1 => MEAN_WINDOW_MONTHS_PER_YEAR,
            StrategyKind::Mean3 => 3 * MEAN_WINDOW_MONTHS_PER_YEAR,
            StrategyKind::Ar1 | StrategyKind::Ar2 | StrategyKind::Ar3 => AR_BASELINE_WINDOW,
            StrategyKind::Uniform => 0,
        }
    }
}

/// One traded period of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    /// 1-based period index into the return series.
    pub period: usize,
    pub month: Month,
    pub strategy: String,
    pub weights: Vec<f64>,
    /// Interval bounds of the chosen candidate (point forecast repeated for
    /// the baselines; absent for Uniform).
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Chosen candidate's interval was an empty-set fallback singleton.
    pub fallback: bool,
    /// Candidate indices of the HR-LR shortlist (empty for non-CPPS rules).
    pub shortlist: Vec<usize>,
    pub realized: f64,
}

/// All periods of one strategy plus its cumulative path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPath {
    pub strategy: String,
    pub records: Vec<PeriodRecord>,
    pub cumulative: Vec<f64>,
    /// Count of (period, candidate) conformal intervals that used the
    /// empty-set fallback.
    pub fallback_count: usize,
}

/// One conformal p-value evaluation, kept when interval diagnostics are on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalDiagnostic {
    pub period: usize,
    pub strategy: String,
    pub candidate_index: usize,
    pub hypothesis: f64,
    pub p_value: f64,
    pub retained: bool,
    pub fallback: bool,
}

/// Output of [`run_backtest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    /// Traded 1-based periods, chronological.
    pub periods: Vec<usize>,
    pub months: Vec<Month>,
    pub strategies: Vec<StrategyPath>,
    /// Per-(candidate, hypothesis) p-values of the CPPS strategies; empty
    /// unless `interval_diagnostics` was set.
    pub diagnostics: Vec<IntervalDiagnostic>,
    pub seed: u64,
}

impl BacktestResult {
    pub fn strategy(&self, id: &str) -> Option<&StrategyPath> {
        self.strategies.iter().find(|s| s.strategy == id)
    }
}

/// Compounded cumulative returns: element t is Π_{s≤t}(1+R_s) - 1.
pub fn cumulative_returns(realized: &[f64]) -> Result<Vec<f64>, BacktestError> {
    let mut path = Vec::with_capacity(realized.len());
    let mut growth = 1.0;
    for (position, &r) in realized.iter().enumerate() {
        if !r.is_finite() || r <= -1.0 {
            return Err(BacktestError::ReturnOutOfRange {
                position,
                value: r,
            });
        }
        growth *= 1.0 + r;
        path.push(growth - 1.0);
    }
    Ok(path)
}

/// Additive cumulative sums, for comparison plots.
pub fn cumulative_sums(realized: &[f64]) -> Vec<f64> {
    let mut path = Vec::with_capacity(realized.len());
    let mut total = 0.0;
    for &r in realized {
        total += r;
        path.push(total);
    }
    path
}

/// Baseline forecasting rules applied to a portfolio-return history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineRule {
    /// Arithmetic mean of the last `years` * 12 monthly returns.
    Mean { years: usize },
    /// One-step-ahead forecast of an AR(p) fit on the last 36 returns.
    Ar { order: usize },
}

/// Point forecast of the next portfolio return from trailing history.
pub fn baseline_forecast(rule: BaselineRule, window: &[f64]) -> Result<f64, ForecastError> {
    match rule {
        BaselineRule::Mean { years } => {
            let needed = years * MEAN_WINDOW_MONTHS_PER_YEAR;
            if window.len() < needed {
                return Err(ForecastError::InsufficientLength {
                    needed,
                    got: window.len(),
                });
            }
            let tail = &window[window.len() - needed..];
            Ok(tail.iter().sum::<f64>() / needed as f64)
        }
        BaselineRule::Ar { order } => {
            if window.len() < AR_BASELINE_WINDOW {
                return Err(ForecastError::InsufficientLength {
                    needed: AR_BASELINE_WINDOW,
                    got: window.len(),
                });
            }
            let tail = &window[window.len() - AR_BASELINE_WINDOW..];
            let model = fit_ar(tail, order)?;
            let features: Vec<f64> = (1..=order).map(|lag| tail[tail.len() - lag]).collect();
            model.predict(&features)
        }
    }
}

/// Runs the full strategy comparison over the configured test span.
///
/// Each period's selections see only rows strictly before that period (plus
/// the lag features of the period itself, which are made of past values), so
/// look-ahead is excluded structurally.
pub fn run_backtest(
    config: &BacktestConfig,
    data: &ReturnSeries,
) -> Result<BacktestResult, BacktestError> {
    config.validate(data)?;
    let m = config.resolved_shortlist_size();
    let periods: Vec<usize> = (config.test_start..=config.test_end).collect();
    let months: Vec<Month> = periods.iter().map(|&t| data.months()[t - 1]).collect();

    let mut paths: Vec<StrategyPath> = config
        .strategies
        .iter()
        .map(|&s| StrategyPath {
            strategy: s.id().to_string(),
            records: Vec::with_capacity(periods.len()),
            cumulative: Vec::new(),
            fallback_count: 0,
        })
        .collect();
    let mut diagnostics = Vec::new();

    for &t in &periods {
        for (slot, &strategy) in config.strategies.iter().enumerate() {
            let mut selection = select_one_period(config, data, strategy, t, m)?;
            paths[slot].fallback_count += selection.fallback_count;
            paths[slot].records.push(selection.record);
            diagnostics.append(&mut selection.diagnostics);
        }
    }

    for path in &mut paths {
        let realized: Vec<f64> = path.records.iter().map(|r| r.realized).collect();
        path.cumulative = match config.cumulative {
            CumulativeMode::Compounded => cumulative_returns(&realized)?,
            CumulativeMode::Additive => cumulative_sums(&realized),
        };
    }

    Ok(BacktestResult {
        periods,
        months,
        strategies: paths,
        diagnostics,
        seed: config.seed,
    })
}

/// History rows for periods start..=t-1 (0-based slice of the return matrix).
fn history_rows(data: &ReturnSeries, start: usize, t: usize) -> &[Vec<f64>] {
    &data.rows()[start - 1..t - 1]
}

struct PeriodSelection {
    record: PeriodRecord,
    fallback_count: usize,
    diagnostics: Vec<IntervalDiagnostic>,
}

fn select_one_period(
    config: &BacktestConfig,
    data: &ReturnSeries,
    strategy: StrategyKind,
    t: usize,
    m: usize,
) -> Result<PeriodSelection, BacktestError> {
    let month = data.months()[t - 1];
    let realized_row = data.row(t);

    let selected = match strategy {
        StrategyKind::Uniform => Selected {
            portfolio: uniform_portfolio(data.asset_count())?,
            lower: None,
            upper: None,
            fallback: false,
            shortlist: Vec::new(),
            fallback_count: 0,
            diagnostics: Vec::new(),
        },
        StrategyKind::Mean1 | StrategyKind::Mean3 => {
            let years = if strategy == StrategyKind::Mean1 { 1 } else { 3 };
            let needed = years * MEAN_WINDOW_MONTHS_PER_YEAR;
            let start = window_start(strategy, t, needed)?;
            let window = history_rows(data, start, t);
            baseline_select(config, window, BaselineRule::Mean { years })
                .map_err(|e| annotate(e, strategy, t))?
        }
        StrategyKind::Ar1 | StrategyKind::Ar2 | StrategyKind::Ar3 => {
            let order = match strategy {
                StrategyKind::Ar1 => 1,
                StrategyKind::Ar2 => 2,
                _ => 3,
            };
            let start = window_start(strategy, t, AR_BASELINE_WINDOW)?;
            let window = history_rows(data, start, t);
            baseline_select(config, window, BaselineRule::Ar { order })
                .map_err(|e| annotate(e, strategy, t))?
        }
        StrategyKind::CppsAr | StrategyKind::CppsNn => {
            let start = match config.cpps_window {
                WindowKind::Expanding => config.train_start,
                WindowKind::Rolling(n) => window_start(strategy, t, n)?,
            };
            let window = history_rows(data, start, t);
            cpps_select(config, window, strategy, t, m)?
        }
    };

    let realized = selected.portfolio.portfolio_return(realized_row)?;
    Ok(PeriodSelection {
        record: PeriodRecord {
            period: t,
            month,
            strategy: strategy.id().to_string(),
            weights: selected.portfolio.weights().to_vec(),
            lower: selected.lower,
            upper: selected.upper,
            fallback: selected.fallback,
            shortlist: selected.shortlist,
            realized,
        },
        fallback_count: selected.fallback_count,
        diagnostics: selected.diagnostics,
    })
}

fn window_start(strategy: StrategyKind, t: usize, length: usize) -> Result<usize, BacktestError> {
    if t <= length {
        return Err(BacktestError::InsufficientHistory {
            strategy: strategy.id().to_string(),
            period: t,
            needed: length,
            got: t - 1,
        });
    }
    Ok(t - length)
}

struct Selected {
    portfolio: Portfolio,
    lower: Option<f64>,
    upper: Option<f64>,
    fallback: bool,
    shortlist: Vec<usize>,
    fallback_count: usize,
    diagnostics: Vec<IntervalDiagnostic>,
}

enum StrategyFailure {
    Forecast(ForecastError),
    Selection(SelectionError),
    Conformal(ConformalError),
    Portfolio(PortfolioError),
}

fn annotate(failure: StrategyFailure, strategy: StrategyKind, period: usize) -> BacktestError {
    let strategy = strategy.id().to_string();
    match failure {
        StrategyFailure::Forecast(source) => BacktestError::Forecast {
            strategy,
            period,
            source,
        },
        StrategyFailure::Selection(source) => BacktestError::Selection {
            strategy,
            period,
            source,
        },
        StrategyFailure::Conformal(source) => BacktestError::Conformal {
            strategy,
            period,
            source,
        },
        StrategyFailure::Portfolio(source) => BacktestError::Portfolio(source),
    }
}

fn baseline_select(
    config: &BacktestConfig,
    window: &[Vec<f64>],
    rule: BaselineRule,
) -> Result<Selected, StrategyFailure> {
    // two-stage collect keeps the first error deterministic across schedules
    let forecasts: Vec<f64> = config
        .candidates
        .portfolios()
        .par_iter()
        .map(|w| {
            let series =
                portfolio_return_series(w, window).map_err(StrategyFailure::Portfolio)?;
            baseline_forecast(rule, &series).map_err(StrategyFailure::Forecast)
        })
        .collect::<Vec<Result<f64, StrategyFailure>>>()
        .into_iter()
        .collect::<Result<_, _>>()?;
    let outcome = point_forecast_select(&forecasts).map_err(StrategyFailure::Selection)?;
    let chosen = config
        .candidates
        .get(outcome.chosen)
        .expect("selection index in range")
        .clone();
    let f = forecasts[outcome.chosen];
    Ok(Selected {
        portfolio: chosen,
        lower: Some(f),
        upper: Some(f),
        fallback: false,
        shortlist: Vec::new(),
        fallback_count: 0,
        diagnostics: Vec::new(),
    })
}

fn cpps_select(
    config: &BacktestConfig,
    window: &[Vec<f64>],
    strategy: StrategyKind,
    t: usize,
    m: usize,
) -> Result<Selected, BacktestError> {
    let refit = match strategy {
        StrategyKind::CppsAr => config.cpps_ar_refit,
        _ => config.cpps_nn_refit,
    };
    type Evaluated = (IntervalEntry, bool, Option<crate::conformal::PredictionInterval>);
    let keep_diagnostics = config.interval_diagnostics;
    let evaluated: Vec<Evaluated> = config
        .candidates
        .portfolios()
        .par_iter()
        .enumerate()
        .map(|(i, w)| -> Result<Evaluated, StrategyFailure> {
            let series =
                portfolio_return_series(w, window).map_err(StrategyFailure::Portfolio)?;
            let interval = match strategy {
                StrategyKind::CppsAr => {
                    let trainer = ArTrainer::new(config.cpps_ar_order);
                    let ds = lagged_dataset(&series, trainer.lags())
                        .map_err(StrategyFailure::Conformal)?;
                    prediction_interval(
                        &ds.targets,
                        &ds.features,
                        &config.grid,
                        config.alpha,
                        &trainer,
                        refit,
                    )
                    .map_err(StrategyFailure::Conformal)?
                }
                _ => {
                    let mut spec = config.cpps_nn.clone();
                    spec.seed = derive_seed(
                        config.seed,
                        &[strategy.seed_tag(), t as u64, i as u64],
                    );
                    let ds = lagged_dataset(&series, &spec.lags)
                        .map_err(StrategyFailure::Conformal)?;
                    let trainer = NnTrainer::new(spec).map_err(StrategyFailure::Forecast)?;
                    prediction_interval(
                        &ds.targets,
                        &ds.features,
                        &config.grid,
                        config.alpha,
                        &trainer,
                        refit,
                    )
                    .map_err(StrategyFailure::Conformal)?
                }
            };
            let entry = IntervalEntry {
                candidate_index: i,
                lower: interval.lower,
                upper: interval.upper,
            };
            let fallback = interval.fallback;
            Ok((entry, fallback, keep_diagnostics.then_some(interval)))
        })
        .collect::<Vec<Result<Evaluated, StrategyFailure>>>()
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| annotate(e, strategy, t))?;

    let fallbacks = evaluated.iter().filter(|(_, f, _)| *f).count();
    let entries: Vec<IntervalEntry> = evaluated.iter().map(|(e, _, _)| *e).collect();
    let table = IntervalTable::new(entries)
        .map_err(|e| annotate(StrategyFailure::Selection(e), strategy, t))?;
    let outcome = hr_lr_select(&table, m, config.shortlist_rule)
        .map_err(|e| annotate(StrategyFailure::Selection(e), strategy, t))?;
    let chosen_entry = evaluated[outcome.chosen].0;
    let chosen_fallback = evaluated[outcome.chosen].1;
    let chosen = config
        .candidates
        .get(outcome.chosen)
        .expect("selection index in range")
        .clone();
    let mut diagnostics = Vec::new();
    if keep_diagnostics {
        for (entry, fallback, interval) in &evaluated {
            let interval = interval.as_ref().expect("kept when diagnostics are on");
            for &(hypothesis, p_value) in &interval.p_values {
                diagnostics.push(IntervalDiagnostic {
                    period: t,
                    strategy: strategy.id().to_string(),
                    candidate_index: entry.candidate_index,
                    hypothesis,
                    p_value,
                    retained: p_value > config.alpha,
                    fallback: *fallback,
                });
            }
        }
    }
    Ok(Selected {
        portfolio: chosen,
        lower: Some(chosen_entry.lower),
        upper: Some(chosen_entry.upper),
        fallback: chosen_fallback,
        shortlist: outcome.shortlist,
        fallback_count: fallbacks,
        diagnostics,
    })
}

/// Synthetic univariate return processes for coverage runs and fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticProcess {
    Constant { value: f64 },
    IidGaussian { mean: f64, sd: f64 },
    Ar1 { coef: f64, noise_sd: f64 },
}

impl SyntheticProcess {
    /// Generates `len` values; AR(1) burns in 50 steps from zero.
    pub fn generate(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            SyntheticProcess::Constant { value } => vec![value; len],
            SyntheticProcess::IidGaussian { mean, sd } => {
                let normal = Normal::new(mean, sd).expect("valid normal");
                (0..len).map(|_| normal.sample(rng)).collect()
            }
            SyntheticProcess::Ar1 { coef, noise_sd } => {
                let normal = Normal::new(0.0, noise_sd).expect("valid normal");
                let burn = 50;
                let mut value = 0.0;
                let mut out = Vec::with_capacity(len);
                for i in 0..burn + len {
                    value = coef * value + normal.sample(rng);
                    if i >= burn {
                        out.push(value);
                    }
                }
                out
            }
        }
    }
}

/// Configuration of a Monte Carlo coverage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub process: SyntheticProcess,
    pub trials: usize,
    /// Number of observed pairs T handed to the conformal engine per trial.
    pub series_length: usize,
    pub alpha: f64,
    pub grid: HypothesisGrid,
    /// AR order of the predictive model.
    pub model_order: usize,
    pub refit_per_permutation: bool,
    pub seed: u64,
}

/// One Monte Carlo trial of the coverage experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTrial {
    pub trial: usize,
    pub realized: f64,
    pub lower: f64,
    pub upper: f64,
    pub fallback: bool,
    pub covered: bool,
}

/// Aggregate coverage outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rate: f64,
    pub nominal: f64,
    pub trials: Vec<CoverageTrial>,
}

/// Fraction of trials whose realized next value lies inside the conformal
/// interval built from the preceding synthetic history.
pub fn coverage_experiment(config: &CoverageConfig) -> Result<CoverageReport, BacktestError> {
    if config.trials < 50 {
        return Err(BacktestError::TooFewTrials(config.trials));
    }
    if config.series_length < 3 {
        return Err(BacktestError::InvalidConfig(format!(
            "series_length {} too short",
            config.series_length
        )));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(BacktestError::InvalidConfig(format!(
            "alpha {} outside (0, 1)",
            config.alpha
        )));
    }
    let order = config.model_order.max(1);
    let trainer = ArTrainer::new(order);
    let raw_len = config.series_length + order + 1;

    let trials: Vec<CoverageTrial> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<CoverageTrial, BacktestError> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xC0FE, trial as u64]));
            let raw = config.process.generate(raw_len, &mut rng);
            let observed = &raw[..raw_len - 1];
            let realized = raw[raw_len - 1];
            let ds = lagged_dataset(observed, trainer.lags()).map_err(|source| {
                BacktestError::Conformal {
                    strategy: "coverage".into(),
                    period: trial,
                    source,
                }
            })?;
            let interval = prediction_interval(
                &ds.targets,
                &ds.features,
                &config.grid,
                config.alpha,
                &trainer,
                config.refit_per_permutation,
            )
            .map_err(|source| BacktestError::Conformal {
                strategy: "coverage".into(),
                period: trial,
                source,
            })?;
            Ok(CoverageTrial {
                trial,
                realized,
                lower: interval.lower,
                upper: interval.upper,
                fallback: interval.fallback,
                covered: interval.contains(realized),
            })
        })
        .collect::<Result<_, _>>()?;

    let covered = trials.iter().filter(|t| t.covered).count();
    Ok(CoverageReport {
        rate: covered as f64 / config.trials as f64,
        nominal: 1.0 - config.alpha,
        trials,
    })
}

/// A synthetic K-asset market: one process per asset, independent draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarketSpec {
    pub assets: Vec<SyntheticProcess>,
}

/// Generates a monthly [`ReturnSeries`] from independent per-asset processes,
/// with months labeled from the given start.
pub fn synthetic_market(
    spec: &SyntheticMarketSpec,
    periods: usize,
    start_month: Month,
    seed: u64,
) -> Result<ReturnSeries, MarketDataError> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(spec.assets.len());
    for (a, process) in spec.assets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xA55E7, a as u64]));
        let mut column = process.generate(periods, &mut rng);
        // clamp returns into valid simple-return territory
        for value in &mut column {
            if *value <= -0.95 {
                *value = -0.95;
            }
        }
        columns.push(column);
    }
    let asset_ids: Vec<String> = (1..=spec.assets.len())
        .map(|i| format!("A{i}"))
        .collect();
    let mut months = Vec::with_capacity(periods);
    let mut month = start_month;
    for _ in 0..periods {
        months.push(month);
        month = month.next();
    }
    let rows: Vec<Vec<f64>> = (0..periods)
        .map(|t| columns.iter().map(|c| c[t]).collect())
        .collect();
    ReturnSeries::new(asset_ids, months, rows)
}

/// Turns a return series into a wide month-end price CSV (base price 100),
/// so synthetic fixtures can exercise the ingestion path.
pub fn returns_to_price_csv(series: &ReturnSeries) -> String {
    let mut out = String::from("date");
    for asset in series.asset_ids() {
        out.push(',');
        out.push_str(asset);
    }
    out.push('\n');
    let k = series.asset_count();
    let mut prices = vec![100.0f64; k];
    // base month precedes the first return month
    let first = series.months()[0];
    let base = if first.month == 1 {
        Month::new(first.year - 1, 12)
    } else {
        Month::new(first.year, first.month - 1)
    };
    let write_row = |month: Month, prices: &[f64], out: &mut String| {
        out.push_str(&format!("{month}-28"));
        for p in prices {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    };
    write_row(base, &prices, &mut out);
    for (t, month) in series.months().iter().enumerate() {
        for (a, p) in prices.iter_mut().enumerate() {
            *p *= 1.0 + series.rows()[t][a];
        }
        write_row(*month, &prices, &mut out);
    }
    out
}
