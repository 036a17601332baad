//! Portfolio weight vectors, candidate-set generation on the simplex, and
//! realized portfolio-return computation.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for the weights-sum-to-one invariant.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("portfolio must have at least one asset")]
    Empty,
    #[error("weight {value} at position {index} is outside [0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },
    #[error("weights sum to {sum}, expected 1 within {tolerance}")]
    WeightSum { sum: f64, tolerance: f64 },
    #[error("dimension mismatch: portfolio has {expected} assets, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("candidate set is empty")]
    EmptyCandidateSet,
    #[error("duplicate portfolio at row {row}")]
    DuplicatePortfolio { row: usize },
    #[error("grid resolution must be at least 1")]
    InvalidResolution,
    #[error("candidate CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("candidate CSV row {row}: {message}")]
    InvalidRow { row: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A weight vector on the K-asset simplex: entries in [0, 1] summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    weights: Vec<f64>,
}

impl Portfolio {
    /// Validates and wraps a weight vector.
    pub fn new(weights: Vec<f64>) -> Result<Self, PortfolioError> {
        if weights.is_empty() {
            return Err(PortfolioError::Empty);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(PortfolioError::WeightOutOfRange { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(PortfolioError::WeightSum {
                sum,
                tolerance: WEIGHT_SUM_TOLERANCE,
            });
        }
        Ok(Self { weights })
    }

    /// Builds a portfolio from exact grid coordinates `coords[i]/resolution`.
    ///
    /// The coordinates must sum to `resolution` exactly; this is checked in
    /// integer arithmetic, so grid portfolios satisfy the simplex invariant
    /// without any floating-point slack.
    pub fn from_grid_coords(coords: &[u32], resolution: u32) -> Result<Self, PortfolioError> {
        if resolution == 0 {
            return Err(PortfolioError::InvalidResolution);
        }
        if coords.is_empty() {
            return Err(PortfolioError::Empty);
        }
        let total: u64 = coords.iter().map(|&c| u64::from(c)).sum();
        if total != u64::from(resolution) {
            return Err(PortfolioError::WeightSum {
                sum: total as f64 / f64::from(resolution),
                tolerance: 0.0,
            });
        }
        let weights = coords
            .iter()
            .map(|&c| f64::from(c) / f64::from(resolution))
            .collect();
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of assets K.
    pub fn asset_count(&self) -> usize {
        self.weights.len()
    }

    /// Realized portfolio return for one period: the dot product w · y.
    pub fn portfolio_return(&self, asset_returns: &[f64]) -> Result<f64, PortfolioError> {
        if asset_returns.len() != self.weights.len() {
            return Err(PortfolioError::DimensionMismatch {
                expected: self.weights.len(),
                actual: asset_returns.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(asset_returns)
            .map(|(w, y)| w * y)
            .sum())
    }
}

/// The uniform 1/K allocation.
pub fn uniform_portfolio(asset_count: usize) -> Result<Portfolio, PortfolioError> {
    if asset_count == 0 {
        return Err(PortfolioError::Empty);
    }
    let w = 1.0 / asset_count as f64;
    Portfolio::new(vec![w; asset_count])
}

/// Per-period returns of one portfolio across a T×K return matrix.
///
/// Row t of `returns` holds the K asset returns for period t; element t of
/// the output is the dot product of the weights with that row.
pub fn portfolio_return_series(
    portfolio: &Portfolio,
    returns: &[Vec<f64>],
) -> Result<Vec<f64>, PortfolioError> {
    returns
        .iter()
        .map(|row| portfolio.portfolio_return(row))
        .collect()
}

/// How a candidate set came to be, echoed in run metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Grid { assets: usize, resolution: u32 },
    Imported,
}

/// A finite ordered collection of candidate portfolios.
///
/// Iteration order is deterministic: lexicographic in the weight vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    portfolios: Vec<Portfolio>,
    provenance: Provenance,
}

impl CandidateSet {
    pub fn portfolios(&self) -> &[Portfolio] {
        &self.portfolios
    }

    pub fn len(&self) -> usize {
        self.portfolios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.portfolios.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Portfolio> {
        self.portfolios.get(index)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn asset_count(&self) -> usize {
        self.portfolios.first().map_or(0, Portfolio::asset_count)
    }

    /// Builds a candidate set from explicit portfolios: sorts lexicographically
    /// by weights and rejects duplicates.
    pub fn from_portfolios(
        mut portfolios: Vec<Portfolio>,
        provenance: Provenance,
    ) -> Result<Self, PortfolioError> {
        if portfolios.is_empty() {
            return Err(PortfolioError::EmptyCandidateSet);
        }
        let k = portfolios[0].asset_count();
        for p in &portfolios {
            if p.asset_count() != k {
                return Err(PortfolioError::DimensionMismatch {
                    expected: k,
                    actual: p.asset_count(),
                });
            }
        }
        portfolios.sort_by(|a, b| {
            a.weights
                .partial_cmp(&b.weights)
                .expect("weights are finite")
        });
        for (i, pair) in portfolios.windows(2).enumerate() {
            if pair[0].weights == pair[1].weights {
                return Err(PortfolioError::DuplicatePortfolio { row: i + 1 });
            }
        }
        Ok(Self {
            portfolios,
            provenance,
        })
    }

    /// Writes one row per portfolio, one column per asset weight.
    pub fn export_csv<W: Write>(&self, writer: W) -> Result<(), PortfolioError> {
        let mut out = csv::Writer::from_writer(writer);
        let k = self.asset_count();
        out.write_record((1..=k).map(|i| format!("w{i}")))?;
        for p in &self.portfolios {
            out.write_record(p.weights().iter().map(|w| w.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn export_csv_path(&self, path: &Path) -> Result<(), PortfolioError> {
        let file = std::fs::File::create(path)?;
        self.export_csv(file)
    }

    /// Reads a candidate set previously exported with [`export_csv`], or any
    /// CSV with one weight column per asset.
    pub fn import_csv<R: Read>(reader: R) -> Result<Self, PortfolioError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut portfolios = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let row = i + 2; // header is line 1
            let weights = record
                .iter()
                .map(|field| {
                    field.trim().parse::<f64>().map_err(|_| PortfolioError::InvalidRow {
                        row,
                        message: format!("unparseable weight {field:?}"),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let portfolio = Portfolio::new(weights).map_err(|e| PortfolioError::InvalidRow {
                row,
                message: e.to_string(),
            })?;
            portfolios.push(portfolio);
        }
        Self::from_portfolios(portfolios, Provenance::Imported)
    }

    pub fn import_csv_path(path: &Path) -> Result<Self, PortfolioError> {
        let file = std::fs::File::open(path)?;
        Self::import_csv(file)
    }
}

/// All weight vectors with components in {0, 1/G, ..., 1} summing to 1.
///
/// Enumerates integer compositions of `resolution` into `asset_count` parts in
/// lexicographic order, giving C(G+K-1, K-1) portfolios.
pub fn simplex_grid(asset_count: usize, resolution: u32) -> Result<CandidateSet, PortfolioError> {
    if asset_count == 0 {
        return Err(PortfolioError::Empty);
    }
    if resolution == 0 {
        return Err(PortfolioError::InvalidResolution);
    }
    let mut portfolios = Vec::new();
    let mut coords = vec![0u32; asset_count];
    enumerate_compositions(resolution, 0, &mut coords, &mut portfolios, resolution)?;
    Ok(CandidateSet {
        portfolios,
        provenance: Provenance::Grid {
            assets: asset_count,
            resolution,
        },
    })
}

fn enumerate_compositions(
    remaining: u32,
    position: usize,
    coords: &mut Vec<u32>,
    out: &mut Vec<Portfolio>,
    resolution: u32,
) -> Result<(), PortfolioError> {
    if position == coords.len() - 1 {
        coords[position] = remaining;
        out.push(Portfolio::from_grid_coords(coords, resolution)?);
        return Ok(());
    }
    for c in 0..=remaining {
        coords[position] = c;
        enumerate_compositions(remaining - c, position + 1, coords, out, resolution)?;
    }
    Ok(())
}

/// Binomial coefficient, used to cross-check grid cardinality.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result = 1u64;
    for i in 0..k {
        result = result * (n - i) / (i + 1);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_weight_returns_single_asset() {
        let w = Portfolio::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(w.portfolio_return(&[0.05, -0.2, 0.3]).unwrap(), 0.05);
    }

    #[test]
    fn symmetric_weights_cancel() {
        let w = Portfolio::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(w.portfolio_return(&[0.1, -0.1]).unwrap(), 0.0);
    }

    #[test]
    fn hand_dot_product() {
        let w = Portfolio::new(vec![0.2, 0.3, 0.5]).unwrap();
        let r = w.portfolio_return(&[0.1, 0.0, -0.1]).unwrap();
        assert!((r - (-0.03)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let w = Portfolio::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            w.portfolio_return(&[0.1]),
            Err(PortfolioError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(Portfolio::new(vec![]).is_err());
        assert!(Portfolio::new(vec![0.5, 0.6]).is_err());
        assert!(Portfolio::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn return_series_matches_per_row_dot() {
        let w = Portfolio::new(vec![0.5, 0.5]).unwrap();
        let rows = vec![vec![0.1, -0.1], vec![0.2, 0.0]];
        let series = portfolio_return_series(&w, &rows).unwrap();
        assert_eq!(series, vec![0.0, 0.1]);
    }

    #[test]
    fn random_series_matches_per_row_oracle() {
        let rows = vec![
            vec![0.031, -0.012, 0.044],
            vec![-0.025, 0.017, 0.002],
            vec![0.008, 0.051, -0.033],
            vec![-0.041, -0.006, 0.019],
            vec![0.014, 0.028, -0.009],
        ];
        let w = Portfolio::new(vec![0.2, 0.3, 0.5]).unwrap();
        let series = portfolio_return_series(&w, &rows).unwrap();
        for (t, row) in rows.iter().enumerate() {
            let oracle = 0.2 * row[0] + 0.3 * row[1] + 0.5 * row[2];
            assert_eq!(series[t], oracle, "row {t}");
        }
    }

    #[test]
    fn first_asset_series_verbatim() {
        let w = Portfolio::new(vec![1.0, 0.0]).unwrap();
        let rows = vec![vec![0.3, 9.0], vec![-0.2, 5.0]];
        assert_eq!(portfolio_return_series(&w, &rows).unwrap(), vec![0.3, -0.2]);
    }

    #[test]
    fn single_asset_grid_is_trivial() {
        let set = simplex_grid(1, 7).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.portfolios()[0].weights(), &[1.0]);
    }

    #[test]
    fn two_asset_grid_matches_enumeration() {
        let set = simplex_grid(2, 2).unwrap();
        let weights: Vec<&[f64]> = set.portfolios().iter().map(|p| p.weights()).collect();
        assert_eq!(weights, vec![&[0.0, 1.0][..], &[0.5, 0.5], &[1.0, 0.0]]);
    }

    #[test]
    fn grid_cardinality_is_stars_and_bars() {
        let set = simplex_grid(3, 4).unwrap();
        assert_eq!(set.len(), 15);
        assert_eq!(binomial(6, 2), 15);
    }

    #[test]
    fn uniform_portfolio_examples() {
        assert_eq!(uniform_portfolio(1).unwrap().weights(), &[1.0]);
        let u3 = uniform_portfolio(3).unwrap();
        for w in u3.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let u4 = uniform_portfolio(4).unwrap();
        let sum: f64 = u4.weights().iter().sum();
        assert_eq!(sum, 1.0);
    }

    #[test]
    fn csv_round_trip_preserves_set() {
        let set = simplex_grid(3, 4).unwrap();
        let mut buf = Vec::new();
        set.export_csv(&mut buf).unwrap();
        let imported = CandidateSet::import_csv(buf.as_slice()).unwrap();
        assert_eq!(imported.len(), set.len());
        for (a, b) in imported.portfolios().iter().zip(set.portfolios()) {
            assert_eq!(a.weights(), b.weights());
        }
    }

    #[test]
    fn import_rejects_duplicates() {
        let csv = "w1,w2\n0.5,0.5\n0.5,0.5\n";
        assert!(matches!(
            CandidateSet::import_csv(csv.as_bytes()),
            Err(PortfolioError::DuplicatePortfolio { .. })
        ));
    }

    #[test]
    fn import_rejects_bad_weights() {
        let csv = "w1,w2\n0.7,0.7\n";
        assert!(CandidateSet::import_csv(csv.as_bytes()).is_err());
    }
}
