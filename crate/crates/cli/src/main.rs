//! Command-line front end: configuration loading, the backtest / interval /
//! coverage subcommands, and CSV report emission.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};
use cpps_core::backtest::{run_backtest, BacktestResult, CoverageReport};
use cpps_core::conformal::{lagged_dataset, prediction_interval};
use cpps_core::forecast::{ArTrainer, NnTrainer, Trainer};
use cpps_core::market_data::{load_prices, to_monthly_returns, Month, ReturnSeries};
use cpps_core::portfolio::{portfolio_return_series, CandidateSet, Portfolio};

#[derive(Parser)]
#[command(
    name = "cpps",
    about = "Conformal predictive portfolio selection: intervals, HR-LR selection, and backtests"
)]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "cpps.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps engine parallelism; results are identical for every value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the conformal error rate.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Overrides the HR-LR shortlist size.
    #[arg(long = "m", global = true)]
    shortlist_size: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Prints per-hypothesis detail where applicable.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the full strategy comparison and writes the report files.
    Backtest,
    /// Prints the conformal prediction interval of one portfolio.
    Interval {
        /// Comma-separated portfolio weights, e.g. 0.2,0.3,0.5.
        #[arg(long)]
        weights: String,
        /// Month to forecast, "YYYY-MM"; selection uses data before it.
        #[arg(long)]
        as_of: String,
        /// Predictive model: ar or nn.
        #[arg(long, default_value = "ar")]
        model: String,
    },
    /// Runs the synthetic-data coverage experiment.
    Coverage,
    /// Candidate-set utilities.
    Candidates {
        #[command(subcommand)]
        action: CandidatesAction,
    },
}

#[derive(Subcommand)]
enum CandidatesAction {
    /// Writes a simplex-grid candidate set to CSV.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        assets: usize,
        #[arg(long)]
        resolution: u32,
    },
    /// Validates a candidate CSV and reports its size.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        alpha: cli.alpha,
        shortlist_size: cli.shortlist_size,
    };

    // candidates export needs no config file
    if let Command::Candidates {
        action: CandidatesAction::Export {
            out,
            assets,
            resolution,
        },
    } = &cli.command
    {
        let set = cpps_core::portfolio::simplex_grid(*assets, *resolution)?;
        set.export_csv_path(out)?;
        println!("wrote {} candidates to {}", set.len(), out.display());
        return Ok(());
    }
    if let Command::Candidates {
        action: CandidatesAction::Import { file },
    } = &cli.command
    {
        let set = CandidateSet::import_csv_path(file)?;
        println!(
            "{} candidates over {} assets, provenance {:?}",
            set.len(),
            set.asset_count(),
            set.provenance()
        );
        return Ok(());
    }

    let config = RunConfig::load(&cli.config, &overrides)?;
    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .context("building worker pool")?;
    }

    match &cli.command {
        Command::Backtest => cmd_backtest(&config, &cli.out_dir),
        Command::Interval {
            weights,
            as_of,
            model,
        } => cmd_interval(&config, weights, as_of, model, cli.verbose),
        Command::Coverage => cmd_coverage(&config, &cli.out_dir),
        Command::Candidates { .. } => unreachable!("handled above"),
    }
}

fn load_return_series(config: &RunConfig) -> Result<ReturnSeries> {
    let data = config.data_section()?;
    let table = load_prices(&data.prices, &config.csv_format()?)
        .with_context(|| format!("loading prices from {}", data.prices.display()))?;
    let series = to_monthly_returns(&table).context("building monthly returns")?;
    Ok(series)
}

fn cmd_backtest(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let data = load_return_series(config)?;
    let backtest_config = config.build_backtest_config(&data)?;
    let result = run_backtest(&backtest_config, &data).context("backtest failed")?;

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    write_cumulative_csv(&result, &out_dir.join("cumulative_returns.csv"))?;
    write_selections_csv(&result, &out_dir.join("selections.csv"))?;
    write_run_meta(config, "backtest", &out_dir.join("run_meta.txt"))?;
    let mut written = vec!["cumulative_returns.csv", "selections.csv", "run_meta.txt"];
    if !result.diagnostics.is_empty() {
        write_intervals_csv(&result, &out_dir.join("intervals.csv"))?;
        written.push("intervals.csv");
    }

    for path in &result.strategies {
        let terminal = path.cumulative.last().copied().unwrap_or(0.0);
        println!(
            "{:<8} terminal cumulative {:+.4}  (fallback intervals: {})",
            path.strategy, terminal, path.fallback_count
        );
    }
    println!("wrote {} to {}", written.join(", "), out_dir.display());
    Ok(())
}

fn write_intervals_csv(result: &BacktestResult, path: &Path) -> Result<()> {
    let mut out = String::from("period,strategy,portfolio_id,r,p_value,retained,fallback\n");
    for d in &result.diagnostics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.period, d.strategy, d.candidate_index, d.hypothesis, d.p_value, d.retained,
            d.fallback
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_cumulative_csv(result: &BacktestResult, path: &Path) -> Result<()> {
    let mut out = String::from("period,month");
    for s in &result.strategies {
        write!(out, ",{}", s.strategy)?;
    }
    out.push('\n');
    for (i, (&period, month)) in result.periods.iter().zip(&result.months).enumerate() {
        write!(out, "{period},{month}")?;
        for s in &result.strategies {
            write!(out, ",{}", s.cumulative[i])?;
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_selections_csv(result: &BacktestResult, path: &Path) -> Result<()> {
    let weight_count = result
        .strategies
        .first()
        .and_then(|s| s.records.first())
        .map_or(0, |r| r.weights.len());
    let mut out = String::from("period,month,strategy");
    for i in 1..=weight_count {
        write!(out, ",w{i}")?;
    }
    out.push_str(",lower,upper,fallback,shortlist\n");
    for i in 0..result.periods.len() {
        for s in &result.strategies {
            let record = &s.records[i];
            write!(out, "{},{},{}", record.period, record.month, record.strategy)?;
            for w in &record.weights {
                write!(out, ",{w}")?;
            }
            let bound = |b: Option<f64>| b.map(|v| v.to_string()).unwrap_or_default();
            let shortlist = record
                .shortlist
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";");
            writeln!(
                out,
                ",{},{},{},{}",
                bound(record.lower),
                bound(record.upper),
                record.fallback,
                shortlist
            )?;
        }
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_run_meta(config: &RunConfig, command: &str, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "command: {command}")?;
    writeln!(out, "seed: {}", config.seed)?;
    writeln!(out, "resolved configuration:")?;
    out.push_str(&config.resolved_toml()?);
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_interval(
    config: &RunConfig,
    weights: &str,
    as_of: &str,
    model: &str,
    verbose: bool,
) -> Result<()> {
    let data = load_return_series(config)?;
    let parsed: Vec<f64> = weights
        .split(',')
        .map(|w| {
            w.trim()
                .parse::<f64>()
                .with_context(|| format!("weight {w:?} is not a number"))
        })
        .collect::<Result<_>>()?;
    let portfolio = Portfolio::new(parsed).context("invalid portfolio weights")?;
    if portfolio.asset_count() != data.asset_count() {
        bail!(
            "portfolio has {} weights but the data has {} assets",
            portfolio.asset_count(),
            data.asset_count()
        );
    }
    let as_of_month = Month::parse(as_of)
        .ok_or_else(|| anyhow::anyhow!("as-of {as_of:?} is not a YYYY-MM month"))?;
    let t = data
        .period_of_month(as_of_month)
        .ok_or_else(|| anyhow::anyhow!("as-of {as_of_month} is outside the data span"))?;
    if t < 2 {
        bail!("no history before {as_of_month}");
    }

    let series = portfolio_return_series(&portfolio, &data.rows()[..t - 1])?;
    let grid = config.build_grid()?;
    let alpha = config.selection.alpha;
    let interval = match model {
        "ar" => {
            let trainer = ArTrainer::new(config.models.ar.order);
            let ds = lagged_dataset(&series, trainer.lags())
                .context("insufficient history for the lag layout")?;
            prediction_interval(
                &ds.targets,
                &ds.features,
                &grid,
                alpha,
                &trainer,
                config.models.ar.refit_per_permutation,
            )?
        }
        "nn" => {
            let mut spec = config.nn_spec();
            spec.seed = config.seed;
            let ds = lagged_dataset(&series, &spec.lags)
                .context("insufficient history for the lag layout")?;
            let trainer = NnTrainer::new(spec)?;
            prediction_interval(
                &ds.targets,
                &ds.features,
                &grid,
                alpha,
                &trainer,
                config.models.nn.refit_per_permutation,
            )?
        }
        other => bail!("unknown model {other:?}, expected ar or nn"),
    };

    println!(
        "portfolio [{}] forecasting {as_of_month} at alpha {alpha}",
        portfolio
            .weights()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!(
        "interval [{}, {}]{}",
        interval.lower,
        interval.upper,
        if interval.fallback {
            " (empty prediction set: fallback to argmax p-value)"
        } else {
            ""
        }
    );
    println!(
        "retained {} of {} grid values",
        interval.retained.len(),
        interval.p_values.len()
    );
    if verbose {
        println!("r,p_value,retained");
        for (r, p) in &interval.p_values {
            println!("{r},{p},{}", *p > alpha);
        }
    }
    Ok(())
}

fn cmd_coverage(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let coverage_config = config.build_coverage_config()?;
    let report = cpps_core::backtest::coverage_experiment(&coverage_config)
        .context("coverage experiment failed")?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    write_coverage_csv(&report, &out_dir.join("coverage.csv"))?;
    write_run_meta(config, "coverage", &out_dir.join("run_meta.txt"))?;
    println!(
        "empirical coverage {:.4} over {} trials (nominal {:.4})",
        report.rate,
        report.trials.len(),
        report.nominal
    );
    println!("wrote coverage.csv, run_meta.txt to {}", out_dir.display());
    Ok(())
}

fn write_coverage_csv(report: &CoverageReport, path: &Path) -> Result<()> {
    let mut out = String::from("trial,realized,lower,upper,fallback,covered\n");
    for t in &report.trials {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            t.trial, t.realized, t.lower, t.upper, t.fallback, t.covered
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
