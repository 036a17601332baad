//! Price ingestion, monthly simple returns, and lagged-feature construction.
//!
//! Ingestion is strict by design: gaps and malformed rows are hard errors,
//! never imputed, so a backtest is reproducible from its inputs alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("price file not found: {0}")]
    MissingFile(String),
    #[error("line {line}: {message}")]
    UnparseableRow { line: usize, message: String },
    #[error("non-positive price {price} at line {line}")]
    NonPositivePrice { line: usize, price: f64 },
    #[error("duplicate (date, asset) pair at line {line}: {date} {asset}")]
    DuplicateObservation {
        line: usize,
        date: NaiveDate,
        asset: String,
    },
    #[error("missing column {0:?} in header")]
    MissingColumn(String),
    #[error("asset {asset} has no price in month {month}")]
    GapMonth { asset: String, month: Month },
    #[error("need at least two months of prices, got {0}")]
    TooFewMonths(usize),
    #[error("empty price table")]
    EmptyTable,
    #[error("series length {length} does not exceed max lag {max_lag}")]
    InsufficientHistory { length: usize, max_lag: usize },
    #[error("lags must be non-empty positive integers")]
    InvalidLags,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A calendar month, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month out of range");
        Self { year, month }
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self::new(self.year + 1, 1)
        } else {
            Self::new(self.year, self.month + 1)
        }
    }

    /// Parses "YYYY-MM" (or a full "YYYY-MM-DD", ignoring the day).
    pub fn parse(text: &str) -> Option<Self> {
        let mut parts = text.splitn(3, '-');
        let year: i32 = parts.next()?.parse().ok()?;
        let month: u32 = parts.next()?.parse().ok()?;
        if (1..=12).contains(&month) {
            Some(Self { year, month })
        } else {
            None
        }
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// One validated price observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceRow {
    pub date: NaiveDate,
    pub asset: String,
    pub price: f64,
}

/// Validated price observations, normalized to (asset, date) order.
#[derive(Debug, Clone)]
pub struct PriceTable {
    rows: Vec<PriceRow>,
    assets: Vec<String>,
}

impl PriceTable {
    /// Validates raw rows: positive prices, unique (date, asset) pairs.
    pub fn new(mut rows: Vec<(usize, PriceRow)>) -> Result<Self, MarketDataError> {
        if rows.is_empty() {
            return Err(MarketDataError::EmptyTable);
        }
        for (line, row) in &rows {
            if !(row.price > 0.0) || !row.price.is_finite() {
                return Err(MarketDataError::NonPositivePrice {
                    line: *line,
                    price: row.price,
                });
            }
        }
        rows.sort_by(|(_, a), (_, b)| (&a.asset, a.date).cmp(&(&b.asset, b.date)));
        for pair in rows.windows(2) {
            let (_, a) = &pair[0];
            let (line, b) = &pair[1];
            if a.asset == b.asset && a.date == b.date {
                return Err(MarketDataError::DuplicateObservation {
                    line: *line,
                    date: b.date,
                    asset: b.asset.clone(),
                });
            }
        }
        let mut assets: Vec<String> = rows.iter().map(|(_, r)| r.asset.clone()).collect();
        assets.dedup();
        Ok(Self {
            rows: rows.into_iter().map(|(_, r)| r).collect(),
            assets,
        })
    }

    pub fn rows(&self) -> &[PriceRow] {
        &self.rows
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }
}

/// CSV layout of the input price file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvLayout {
    /// Decide from the header: exactly the three mapped long columns means
    /// long format, anything else is treated as wide.
    #[default]
    Auto,
    /// One observation per row: `date,asset,price`.
    Long,
    /// One date per row, one column per asset: `date,AAPL,MSFT,...`.
    Wide,
}

/// Column mapping for the long layout (and the date column of the wide one).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub date: String,
    pub asset: String,
    pub price: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            date: "date".into(),
            asset: "asset".into(),
            price: "price".into(),
        }
    }
}

/// Input format description for [`load_prices`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvFormat {
    pub layout: CsvLayout,
    pub columns: ColumnMapping,
}

/// Loads and validates a UTF-8 price CSV with a header row.
pub fn load_prices(path: &Path, format: &CsvFormat) -> Result<PriceTable, MarketDataError> {
    if !path.exists() {
        return Err(MarketDataError::MissingFile(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    load_prices_from(file, format)
}

/// Same as [`load_prices`] but over any reader.
pub fn load_prices_from<R: Read>(
    reader: R,
    format: &CsvFormat,
) -> Result<PriceTable, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let cols = &format.columns;
    let find = |name: &str| headers.iter().position(|h| h == name);

    let layout = match format.layout {
        CsvLayout::Auto => {
            let is_long = headers.len() == 3
                && find(&cols.date).is_some()
                && find(&cols.asset).is_some()
                && find(&cols.price).is_some();
            if is_long {
                CsvLayout::Long
            } else {
                CsvLayout::Wide
            }
        }
        fixed => fixed,
    };

    let mut rows = Vec::new();
    match layout {
        CsvLayout::Long => {
            let date_idx = find(&cols.date)
                .ok_or_else(|| MarketDataError::MissingColumn(cols.date.clone()))?;
            let asset_idx = find(&cols.asset)
                .ok_or_else(|| MarketDataError::MissingColumn(cols.asset.clone()))?;
            let price_idx = find(&cols.price)
                .ok_or_else(|| MarketDataError::MissingColumn(cols.price.clone()))?;
            for (i, record) in rdr.records().enumerate() {
                let line = i + 2;
                let record = record?;
                let date = parse_date(record.get(date_idx).unwrap_or(""), line)?;
                let asset = record.get(asset_idx).unwrap_or("").to_string();
                if asset.is_empty() {
                    return Err(MarketDataError::UnparseableRow {
                        line,
                        message: "empty asset id".into(),
                    });
                }
                let price = parse_price(record.get(price_idx).unwrap_or(""), line)?;
                rows.push((line, PriceRow { date, asset, price }));
            }
        }
        CsvLayout::Wide => {
            let date_idx = find(&cols.date)
                .ok_or_else(|| MarketDataError::MissingColumn(cols.date.clone()))?;
            let asset_columns: Vec<(usize, String)> = headers
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != date_idx)
                .map(|(i, h)| (i, h.clone()))
                .collect();
            if asset_columns.is_empty() {
                return Err(MarketDataError::MissingColumn("any asset column".into()));
            }
            for (i, record) in rdr.records().enumerate() {
                let line = i + 2;
                let record = record?;
                let date = parse_date(record.get(date_idx).unwrap_or(""), line)?;
                for (idx, asset) in &asset_columns {
                    let price = parse_price(record.get(*idx).unwrap_or(""), line)?;
                    rows.push((
                        line,
                        PriceRow {
                            date,
                            asset: asset.clone(),
                            price,
                        },
                    ));
                }
            }
        }
        CsvLayout::Auto => unreachable!("resolved above"),
    }
    PriceTable::new(rows)
}

fn parse_date(field: &str, line: usize) -> Result<NaiveDate, MarketDataError> {
    NaiveDate::parse_from_str(field, "%Y-%m-%d").map_err(|_| MarketDataError::UnparseableRow {
        line,
        message: format!("unparseable ISO-8601 date {field:?}"),
    })
}

fn parse_price(field: &str, line: usize) -> Result<f64, MarketDataError> {
    let price: f64 = field
        .parse()
        .map_err(|_| MarketDataError::UnparseableRow {
            line,
            message: format!("unparseable price {field:?}"),
        })?;
    if !(price > 0.0) || !price.is_finite() {
        return Err(MarketDataError::NonPositivePrice { line, price });
    }
    Ok(price)
}

/// Per-asset monthly simple returns over a contiguous span of months.
///
/// Periods are indexed 1..=T. Row t holds the K asset returns for period t;
/// `months()[t-1]` names the calendar month the row belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    asset_ids: Vec<String>,
    months: Vec<Month>,
    returns: Vec<Vec<f64>>,
}

impl ReturnSeries {
    pub fn new(
        asset_ids: Vec<String>,
        months: Vec<Month>,
        returns: Vec<Vec<f64>>,
    ) -> Result<Self, MarketDataError> {
        if returns.len() != months.len() {
            return Err(MarketDataError::UnparseableRow {
                line: 0,
                message: "months/returns length mismatch".into(),
            });
        }
        for row in &returns {
            if row.len() != asset_ids.len() {
                return Err(MarketDataError::UnparseableRow {
                    line: 0,
                    message: "ragged return row".into(),
                });
            }
            for &r in row {
                if !r.is_finite() || r <= -1.0 {
                    return Err(MarketDataError::UnparseableRow {
                        line: 0,
                        message: format!("return {r} is not a finite value > -1"),
                    });
                }
            }
        }
        Ok(Self {
            asset_ids,
            months,
            returns,
        })
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn asset_count(&self) -> usize {
        self.asset_ids.len()
    }

    /// Number of periods T.
    pub fn period_count(&self) -> usize {
        self.returns.len()
    }

    pub fn months(&self) -> &[Month] {
        &self.months
    }

    /// Asset returns for 1-based period t.
    pub fn row(&self, period: usize) -> &[f64] {
        &self.returns[period - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.returns
    }

    /// 1-based period index of the given month, if present.
    pub fn period_of_month(&self, month: Month) -> Option<usize> {
        self.months.iter().position(|&m| m == month).map(|i| i + 1)
    }
}

/// Month-end prices to monthly simple returns.
///
/// The last available trading-day price of each calendar month defines the
/// month price; every asset must have at least one observation in every month
/// of the table's span, otherwise the gap is a hard error.
pub fn to_monthly_returns(prices: &PriceTable) -> Result<ReturnSeries, MarketDataError> {
    // last observation per (asset, month); rows are sorted by (asset, date)
    let mut by_asset: BTreeMap<&str, BTreeMap<Month, f64>> = BTreeMap::new();
    for row in prices.rows() {
        by_asset
            .entry(row.asset.as_str())
            .or_default()
            .insert(Month::from_date(row.date), row.price);
    }
    let span_start = *by_asset
        .values()
        .flat_map(|m| m.keys())
        .min()
        .ok_or(MarketDataError::EmptyTable)?;
    let span_end = *by_asset
        .values()
        .flat_map(|m| m.keys())
        .max()
        .ok_or(MarketDataError::EmptyTable)?;

    let mut months = Vec::new();
    let mut m = span_start;
    loop {
        months.push(m);
        if m == span_end {
            break;
        }
        m = m.next();
    }
    if months.len() < 2 {
        return Err(MarketDataError::TooFewMonths(months.len()));
    }

    let asset_ids: Vec<String> = prices.assets().to_vec();
    for asset in &asset_ids {
        let asset_months = &by_asset[asset.as_str()];
        for &month in &months {
            if !asset_months.contains_key(&month) {
                return Err(MarketDataError::GapMonth {
                    asset: asset.clone(),
                    month,
                });
            }
        }
    }

    // first month is the base: T = #months - 1 return rows
    let mut returns = Vec::with_capacity(months.len() - 1);
    for window in months.windows(2) {
        let (prev, cur) = (window[0], window[1]);
        let row: Vec<f64> = asset_ids
            .iter()
            .map(|asset| {
                let series = &by_asset[asset.as_str()];
                series[&cur] / series[&prev] - 1.0
            })
            .collect();
        returns.push(row);
    }
    ReturnSeries::new(asset_ids, months[1..].to_vec(), returns)
}

/// Lagged values of one target series, one row per usable period.
///
/// Row for 1-based period t exists iff t > max(lags) and holds
/// `series[t - lags[i]]` in lag order.
#[derive(Debug, Clone, PartialEq)]
pub struct LagFeatureMatrix {
    lags: Vec<usize>,
    rows: Vec<Vec<f64>>,
    first_period: usize,
}

impl LagFeatureMatrix {
    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// 1-based period index of the first row (= max lag + 1).
    pub fn first_period(&self) -> usize {
        self.first_period
    }

    /// Feature row for 1-based period t.
    pub fn row_for_period(&self, period: usize) -> Option<&[f64]> {
        period
            .checked_sub(self.first_period)
            .and_then(|i| self.rows.get(i))
            .map(Vec::as_slice)
    }
}

/// Builds the lag-feature matrix of a series for the given positive lags.
pub fn build_lag_features(
    series: &[f64],
    lags: &[usize],
) -> Result<LagFeatureMatrix, MarketDataError> {
    if lags.is_empty() || lags.contains(&0) {
        return Err(MarketDataError::InvalidLags);
    }
    let max_lag = *lags.iter().max().expect("non-empty");
    if series.len() <= max_lag {
        return Err(MarketDataError::InsufficientHistory {
            length: series.len(),
            max_lag,
        });
    }
    // 1-based period t maps to series[t-1]; the value at period t - lag is
    // series[t - lag - 1]
    let rows = (max_lag + 1..=series.len())
        .map(|t| lags.iter().map(|&lag| series[t - lag - 1]).collect())
        .collect();
    Ok(LagFeatureMatrix {
        lags: lags.to_vec(),
        rows,
        first_period: max_lag + 1,
    })
}
