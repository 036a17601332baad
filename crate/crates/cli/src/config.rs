//! Declarative run configuration: one TOML file defines the whole
//! experiment; command-line flags override individual values; the resolved
//! merge is what run_meta records.
//!
//! Unknown keys anywhere in the tree are hard errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cpps_core::backtest::{
    BacktestConfig, CoverageConfig, CumulativeMode, StrategyKind, SyntheticProcess, WindowKind,
};
use cpps_core::conformal::HypothesisGrid;
use cpps_core::forecast::{ModelKind, ModelSpec};
use cpps_core::market_data::{ColumnMapping, CsvFormat, CsvLayout, Month, ReturnSeries};
use cpps_core::portfolio::CandidateSet;
use cpps_core::selection::ShortlistRule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Engine parallelism cap. A runtime knob, not part of the experiment
    /// definition: results are identical for every worker count, so it is
    /// left out of the run_meta echo.
    #[serde(default = "default_workers", skip_serializing)]
    pub workers: usize,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub candidates: CandidatesSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub backtest: Option<BacktestSection>,
    #[serde(default)]
    pub coverage: Option<CoverageSection>,
}

fn default_workers() -> usize {
    0 // 0 = rayon default
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub prices: PathBuf,
    #[serde(default)]
    pub layout: CsvLayout,
    #[serde(default)]
    pub columns: ColumnMapping,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidatesSection {
    /// Simplex grid resolution G when no file is given.
    pub resolution: u32,
    /// CSV of hand-picked portfolios, one weight column per asset.
    pub file: Option<PathBuf>,
}

impl Default for CandidatesSection {
    fn default() -> Self {
        Self {
            resolution: 10,
            file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            min: -0.3,
            max: 0.3,
            step: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub alpha: f64,
    /// 0 selects the default ceil(|candidates| / 10).
    pub shortlist_size: usize,
    pub shortlist_rule: ShortlistRule,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            shortlist_size: 0,
            shortlist_rule: ShortlistRule::HighestLower,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub ar: ArSection,
    pub nn: NnSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArSection {
    pub order: usize,
    pub refit_per_permutation: bool,
}

impl Default for ArSection {
    fn default() -> Self {
        Self {
            order: 3,
            refit_per_permutation: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NnSection {
    pub lags: Vec<usize>,
    pub hidden_units: usize,
    pub training_epochs: usize,
    pub learning_rate: f64,
    pub refit_per_permutation: bool,
}

impl Default for NnSection {
    fn default() -> Self {
        Self {
            lags: vec![1, 2, 4],
            hidden_units: 100,
            training_epochs: 500,
            learning_rate: 0.01,
            refit_per_permutation: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestSection {
    /// Calendar months, "YYYY-MM".
    pub train_start: String,
    pub test_start: String,
    pub test_end: String,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub window: WindowChoice,
    #[serde(default = "default_rolling_months")]
    pub rolling_months: usize,
    #[serde(default)]
    pub cumulative: CumulativeMode,
    /// Dump every (candidate, hypothesis) p-value to intervals.csv.
    #[serde(default)]
    pub diagnostics: bool,
}

fn all_strategies() -> Vec<StrategyKind> {
    StrategyKind::all()
}

fn default_rolling_months() -> usize {
    48
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowChoice {
    #[default]
    Expanding,
    Rolling,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageSection {
    pub process: ProcessChoice,
    pub coef: f64,
    pub noise_sd: f64,
    pub mean: f64,
    pub sd: f64,
    pub value: f64,
    pub trials: usize,
    pub series_length: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub model_order: usize,
    pub refit_per_permutation: bool,
}

impl Default for CoverageSection {
    fn default() -> Self {
        Self {
            process: ProcessChoice::Ar1,
            coef: 0.5,
            noise_sd: 1.0,
            mean: 0.0,
            sd: 1.0,
            value: 0.0,
            trials: 200,
            series_length: 60,
            grid_min: -5.0,
            grid_max: 5.0,
            grid_step: 0.1,
            model_order: 1,
            refit_per_permutation: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessChoice {
    Constant,
    IidGaussian,
    #[default]
    Ar1,
}

/// Flag-level overrides; flags beat config-file values.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub alpha: Option<f64>,
    pub shortlist_size: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(workers) = overrides.workers {
            config.workers = workers;
        }
        if let Some(alpha) = overrides.alpha {
            config.selection.alpha = alpha;
        }
        if let Some(m) = overrides.shortlist_size {
            config.selection.shortlist_size = m;
        }
        Ok(config)
    }

    /// The resolved configuration as TOML, for run_meta.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing resolved config")
    }

    pub fn data_section(&self) -> Result<&DataSection> {
        self.data
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config has no [data] section"))
    }

    pub fn csv_format(&self) -> Result<CsvFormat> {
        let data = self.data_section()?;
        Ok(CsvFormat {
            layout: data.layout,
            columns: data.columns.clone(),
        })
    }

    pub fn build_candidates(&self, asset_count: usize) -> Result<CandidateSet> {
        let set = match &self.candidates.file {
            Some(path) => CandidateSet::import_csv_path(path)
                .with_context(|| format!("importing candidates from {}", path.display()))?,
            None => cpps_core::portfolio::simplex_grid(asset_count, self.candidates.resolution)
                .context("generating simplex grid")?,
        };
        if set.asset_count() != asset_count {
            bail!(
                "candidate set has {} assets but the data has {asset_count}",
                set.asset_count()
            );
        }
        Ok(set)
    }

    pub fn build_grid(&self) -> Result<HypothesisGrid> {
        HypothesisGrid::from_range(self.grid.min, self.grid.max, self.grid.step)
            .context("building hypothesis grid")
    }

    pub fn nn_spec(&self) -> ModelSpec {
        let nn = &self.models.nn;
        ModelSpec {
            kind: ModelKind::Nn,
            lags: nn.lags.clone(),
            hidden_units: nn.hidden_units,
            training_epochs: nn.training_epochs,
            learning_rate: nn.learning_rate,
            seed: 0,
        }
    }

    fn resolve_month(&self, data: &ReturnSeries, text: &str, what: &str) -> Result<usize> {
        let month = Month::parse(text)
            .ok_or_else(|| anyhow::anyhow!("{what} {text:?} is not a YYYY-MM month"))?;
        data.period_of_month(month).ok_or_else(|| {
            anyhow::anyhow!(
                "{what} {month} is outside the data span {}..{}",
                data.months().first().map(ToString::to_string).unwrap_or_default(),
                data.months().last().map(ToString::to_string).unwrap_or_default()
            )
        })
    }

    pub fn build_backtest_config(&self, data: &ReturnSeries) -> Result<BacktestConfig> {
        let section = self
            .backtest
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config has no [backtest] section"))?;
        let train_start = self.resolve_month(data, &section.train_start, "train_start")?;
        let test_start = self.resolve_month(data, &section.test_start, "test_start")?;
        let test_end = self.resolve_month(data, &section.test_end, "test_end")?;
        let candidates = self.build_candidates(data.asset_count())?;
        let shortlist_size = if self.selection.shortlist_size == 0 {
            None
        } else {
            Some(self.selection.shortlist_size)
        };
        Ok(BacktestConfig {
            train_start,
            test_start,
            test_end,
            strategies: section.strategies.clone(),
            candidates,
            grid: self.build_grid()?,
            alpha: self.selection.alpha,
            shortlist_size,
            shortlist_rule: self.selection.shortlist_rule,
            cpps_window: match section.window {
                WindowChoice::Expanding => WindowKind::Expanding,
                WindowChoice::Rolling => WindowKind::Rolling(section.rolling_months),
            },
            cpps_ar_order: self.models.ar.order,
            cpps_ar_refit: self.models.ar.refit_per_permutation,
            cpps_nn: self.nn_spec(),
            cpps_nn_refit: self.models.nn.refit_per_permutation,
            cumulative: section.cumulative,
            interval_diagnostics: section.diagnostics,
            seed: self.seed,
        })
    }

    pub fn build_coverage_config(&self) -> Result<CoverageConfig> {
        let section = self.coverage.clone().unwrap_or_default();
        let process = match section.process {
            ProcessChoice::Constant => SyntheticProcess::Constant {
                value: section.value,
            },
            ProcessChoice::IidGaussian => SyntheticProcess::IidGaussian {
                mean: section.mean,
                sd: section.sd,
            },
            ProcessChoice::Ar1 => SyntheticProcess::Ar1 {
                coef: section.coef,
                noise_sd: section.noise_sd,
            },
        };
        if section.trials == 0 {
            bail!("coverage trials must be positive");
        }
        Ok(CoverageConfig {
            process,
            trials: section.trials,
            series_length: section.series_length,
            alpha: self.selection.alpha,
            grid: HypothesisGrid::from_range(
                section.grid_min,
                section.grid_max,
                section.grid_step,
            )
            .context("building coverage grid")?,
            model_order: section.model_order,
            refit_per_permutation: section.refit_per_permutation,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config: RunConfig = toml::from_str("seed = 5\n").unwrap();
        assert_eq!(config.seed, 5);
        assert_eq!(config.candidates.resolution, 10);
        assert_eq!(config.selection.alpha, 0.2);
        assert_eq!(config.models.nn.lags, vec![1, 2, 4]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = toml::from_str::<RunConfig>("mystery = 1\n").unwrap_err();
        assert!(err.to_string().contains("mystery"));
        let nested = "[selection]\nalpha = 0.2\ntypo_key = 3\n";
        assert!(toml::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn overrides_beat_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[selection]\nalpha = 0.1\n").unwrap();
        let config = RunConfig::load(
            &path,
            &Overrides {
                seed: Some(9),
                alpha: Some(0.3),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.selection.alpha, 0.3);
    }

    #[test]
    fn resolved_toml_omits_workers() {
        let config: RunConfig = toml::from_str("workers = 7\n").unwrap();
        assert_eq!(config.workers, 7);
        let echoed = config.resolved_toml().unwrap();
        assert!(!echoed.contains("workers"));
    }
}
