//! Full conformal prediction for a univariate dependent series: dataset
//! augmentation, blocking permutations, nonconformity scores, p-values, and
//! prediction sets over a hypothesis grid.
//!
//! The augmented sample consists of the T observed (target, lag-feature)
//! pairs plus one hypothesis pair (r, X_{T+1}). The permutation family is the
//! T cyclic rotations of the T+1 augmented slots (shifts 0..T-1, identity
//! included), so |Π| = T and every p-value has floor 1/T. Pairs travel
//! together under rotation; the hypothesis value never appears in any
//! feature row.
//!
//! With `refit_per_permutation` the model is retrained on the first T slots
//! of each rotation — a leave-one-pair-out refit in which the hypothesis pair
//! enters training for every non-identity rotation — and the score is the
//! mean squared error over all T+1 pairs. Without refitting, the
//! identity-trained model is fixed and the score of a rotation is the squared
//! residual of the pair occupying the final slot, giving the classic
//! residual-rank p-value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{ForecastError, Trainer};
use crate::market_data::{build_lag_features, MarketDataError};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("permutation index {j} out of range 1..={t}")]
    PermutationIndex { j: usize, t: usize },
    #[error("series has {targets} targets but {features} feature rows; expected targets + 1")]
    LengthMismatch { targets: usize, features: usize },
    #[error("ordering is not a bijection of the {expected} dataset slots")]
    InvalidOrdering { expected: usize },
    #[error("alpha {0} must lie in (0, 1)")]
    InvalidAlpha(f64),
    #[error("hypothesis grid must hold at least two strictly increasing finite values")]
    InvalidGrid,
    #[error("hypothesis value {0} is not finite")]
    NonFiniteHypothesis(f64),
    #[error("need at least {needed} observed pairs, got {got}")]
    InsufficientHistory { needed: usize, got: usize },
    #[error("trainer failed on permutation {permutation}: {source}")]
    Trainer {
        permutation: usize,
        source: ForecastError,
    },
    #[error(transparent)]
    Features(#[from] MarketDataError),
}

/// Blocking permutation π_j of {1..T}: the cyclic shift by j-1 that maps
/// t to t+(j-1) when t ≤ T-(j-1) and wraps to t+(j-1)-T otherwise.
///
/// Returned 0-based: entry i holds π_j(i+1) - 1. π_1 is the identity.
pub fn blocking_permutation(j: usize, t: usize) -> Result<Vec<usize>, ConformalError> {
    if j < 1 || j > t {
        return Err(ConformalError::PermutationIndex { j, t });
    }
    Ok((0..t).map(|i| (i + j - 1) % t).collect())
}

/// Finite strictly increasing hypothesis values ℋ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGrid {
    values: Vec<f64>,
}

impl HypothesisGrid {
    pub fn new(values: Vec<f64>) -> Result<Self, ConformalError> {
        if values.len() < 2 || values.iter().any(|v| !v.is_finite()) {
            return Err(ConformalError::InvalidGrid);
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConformalError::InvalidGrid);
        }
        Ok(Self { values })
    }

    /// Evenly spaced grid over [min, max] with the given step.
    pub fn from_range(min: f64, max: f64, step: f64) -> Result<Self, ConformalError> {
        if !(step > 0.0) || !min.is_finite() || !max.is_finite() || max <= min {
            return Err(ConformalError::InvalidGrid);
        }
        let count = ((max - min) / step).round() as usize + 1;
        let values: Vec<f64> = (0..count).map(|i| min + i as f64 * step).collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for HypothesisGrid {
    /// 61 evenly spaced points on [-0.3, 0.3].
    fn default() -> Self {
        Self::from_range(-0.3, 0.3, 0.01).expect("valid default grid")
    }
}

/// The observed targets plus one hypothesis pair.
///
/// Targets hold (R_1, ..., R_T, r); feature row t is the fixed lag-feature
/// vector X_t, with row T+1 built from observed periods only.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    targets: Vec<f64>,
    features: Vec<Vec<f64>>,
}

impl AugmentedDataset {
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Total number of slots T+1.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn hypothesis(&self) -> f64 {
        *self.targets.last().expect("non-empty by construction")
    }
}

/// Appends the hypothesis r to the observed series: targets (R_1..R_T, r).
pub fn augment(
    series: &[f64],
    features: &[Vec<f64>],
    hypothesis: f64,
) -> Result<AugmentedDataset, ConformalError> {
    if features.len() != series.len() + 1 {
        return Err(ConformalError::LengthMismatch {
            targets: series.len(),
            features: features.len(),
        });
    }
    if !hypothesis.is_finite() {
        return Err(ConformalError::NonFiniteHypothesis(hypothesis));
    }
    let mut targets = Vec::with_capacity(series.len() + 1);
    targets.extend_from_slice(series);
    targets.push(hypothesis);
    Ok(AugmentedDataset {
        targets,
        features: features.to_vec(),
    })
}

/// Mean squared error of the model over all T+1 pairs, visited in the given
/// ordering: (1/(T+1)) Σ_t (R̃_{π(t)} - f(X_{π(t)}))².
///
/// The model is expected to have been trained on the first T entries of the
/// same ordering.
pub fn nonconformity_score(
    model: &crate::forecast::TrainedModel,
    data: &AugmentedDataset,
    ordering: &[usize],
) -> Result<f64, ConformalError> {
    let n = data.len();
    validate_ordering(ordering, n)?;
    let mut sum = 0.0;
    for &slot in ordering {
        let pred = model
            .predict(&data.features[slot])
            .map_err(|source| ConformalError::Trainer {
                permutation: 0,
                source,
            })?;
        let err = data.targets[slot] - pred;
        sum += err * err;
    }
    Ok(sum / n as f64)
}

fn validate_ordering(ordering: &[usize], n: usize) -> Result<(), ConformalError> {
    if ordering.len() != n {
        return Err(ConformalError::InvalidOrdering { expected: n });
    }
    let mut seen = vec![false; n];
    for &slot in ordering {
        if slot >= n || seen[slot] {
            return Err(ConformalError::InvalidOrdering { expected: n });
        }
        seen[slot] = true;
    }
    Ok(())
}

fn gather_pairs<'a>(
    data: &'a AugmentedDataset,
    slots: &[usize],
) -> (Vec<&'a [f64]>, Vec<f64>) {
    let features = slots
        .iter()
        .map(|&s| data.features[s].as_slice())
        .collect();
    let targets = slots.iter().map(|&s| data.targets[s]).collect();
    (features, targets)
}

/// Conformal p-value for one hypothesis value.
///
/// `series` holds the T observed targets; `features` holds T+1 fixed lag
/// rows (the last one for the forecast period). With
/// `refit_per_permutation`, each rotation's score comes from a model refit
/// on that rotation's first T slots; otherwise the identity-trained model
/// scores every rotation.
pub fn conformal_pvalue(
    series: &[f64],
    features: &[Vec<f64>],
    hypothesis: f64,
    trainer: &dyn Trainer,
    refit_per_permutation: bool,
) -> Result<f64, ConformalError> {
    if refit_per_permutation {
        let data = augment(series, features, hypothesis)?;
        pvalue_refit(&data, trainer)
    } else {
        let scorer = FixedModelScorer::fit(series, features, trainer)?;
        if !hypothesis.is_finite() {
            return Err(ConformalError::NonFiniteHypothesis(hypothesis));
        }
        Ok(scorer.pvalue(hypothesis))
    }
}

fn pvalue_refit(data: &AugmentedDataset, trainer: &dyn Trainer) -> Result<f64, ConformalError> {
    let t = data.len() - 1;
    if t < 2 {
        return Err(ConformalError::InsufficientHistory { needed: 2, got: t });
    }
    let scores = if let Some(linear) = trainer.as_linear() {
        refit_scores_linear(data, linear, trainer)?
    } else {
        refit_scores_generic(data, trainer)?
    };
    let identity_score = scores[0];
    let count = scores.iter().filter(|&&s| s >= identity_score).count();
    Ok(count as f64 / t as f64)
}

/// Rotation j leaves exactly one pair out of training: the hypothesis pair
/// under the identity, otherwise observed pair j-2 (0-based), which the
/// rotation moves into the final slot.
fn excluded_slot(j: usize, n: usize) -> usize {
    if j == 1 {
        n - 1
    } else {
        j - 2
    }
}

fn refit_scores_generic(
    data: &AugmentedDataset,
    trainer: &dyn Trainer,
) -> Result<Vec<f64>, ConformalError> {
    let t = data.len() - 1;
    let mut scores = Vec::with_capacity(t);
    for j in 1..=t {
        let ordering = blocking_permutation(j, t + 1)?;
        let (feats, targets) = gather_pairs(data, &ordering[..t]);
        let model = trainer
            .fit_pairs(&feats, &targets)
            .map_err(|source| ConformalError::Trainer {
                permutation: j,
                source,
            })?;
        scores.push(nonconformity_score(&model, data, &ordering)?);
    }
    Ok(scores)
}

/// OLS leave-one-out refits through Gram downdates: the per-rotation
/// training set is the full pair set minus one pair, so each refit costs
/// O(p^3) instead of a fresh O(T p^2) fit. Ill-conditioned downdates fall
/// back to the trainer's robust minimum-norm path.
fn refit_scores_linear(
    data: &AugmentedDataset,
    linear: &crate::forecast::ArTrainer,
    trainer: &dyn Trainer,
) -> Result<Vec<f64>, ConformalError> {
    let t = data.len() - 1;
    let n = t + 1;
    let p = linear.order();
    let cols = p + 1;
    for row in data.features() {
        if row.len() != p {
            return Err(ConformalError::Trainer {
                permutation: 1,
                source: crate::forecast::ForecastError::DimensionMismatch {
                    expected: p,
                    actual: row.len(),
                },
            });
        }
    }

    let mut gram_full = vec![0.0; cols * cols];
    let mut rhs_full = vec![0.0; cols];
    let mut design = vec![0.0; cols];
    let mut target_scale: f64 = 0.0;
    for (row, &y) in data.features().iter().zip(data.targets()) {
        design[0] = 1.0;
        design[1..].copy_from_slice(row);
        for i in 0..cols {
            for k in 0..cols {
                gram_full[i * cols + k] += design[i] * design[k];
            }
            rhs_full[i] += design[i] * y;
        }
        target_scale = target_scale.max(y.abs());
    }

    let mut gram = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols];
    let mut scores = Vec::with_capacity(t);
    for j in 1..=t {
        let e = excluded_slot(j, n);
        design[0] = 1.0;
        design[1..].copy_from_slice(&data.features()[e]);
        let y_e = data.targets()[e];
        for i in 0..cols {
            for k in 0..cols {
                gram[i * cols + k] = gram_full[i * cols + k] - design[i] * design[k];
            }
            rhs[i] = rhs_full[i] - design[i] * y_e;
        }
        let beta = match crate::forecast::solve_normal_equations(&gram, &rhs, cols, target_scale)
        {
            Some(beta) => beta,
            None => {
                let ordering = blocking_permutation(j, n)?;
                let (feats, targets) = gather_pairs(data, &ordering[..t]);
                let model = trainer
                    .fit_pairs(&feats, &targets)
                    .map_err(|source| ConformalError::Trainer {
                        permutation: j,
                        source,
                    })?;
                match model.params() {
                    crate::forecast::ModelParams::Ar {
                        intercept,
                        coefficients,
                    } => {
                        let mut beta = Vec::with_capacity(cols);
                        beta.push(*intercept);
                        beta.extend_from_slice(coefficients);
                        beta
                    }
                    _ => unreachable!("linear trainer fits AR parameters"),
                }
            }
        };
        let mut sum = 0.0;
        for (row, &y) in data.features().iter().zip(data.targets()) {
            let mut pred = beta[0];
            for (c, &x) in beta[1..].iter().zip(row) {
                pred += c * x;
            }
            let err = y - pred;
            sum += err * err;
        }
        scores.push(sum / n as f64);
    }
    Ok(scores)
}

/// Identity-trained model with cached residuals, shared across a grid.
struct FixedModelScorer {
    /// Squared residuals of the observed pairs, slot order.
    observed_resid_sq: Vec<f64>,
    /// Point forecast at the hypothesis feature row.
    forecast: f64,
    t: usize,
}

impl FixedModelScorer {
    fn fit(
        series: &[f64],
        features: &[Vec<f64>],
        trainer: &dyn Trainer,
    ) -> Result<Self, ConformalError> {
        let t = series.len();
        if features.len() != t + 1 {
            return Err(ConformalError::LengthMismatch {
                targets: t,
                features: features.len(),
            });
        }
        if t < 2 {
            return Err(ConformalError::InsufficientHistory { needed: 2, got: t });
        }
        let feats: Vec<&[f64]> = features[..t].iter().map(Vec::as_slice).collect();
        let model = trainer
            .fit_pairs(&feats, series)
            .map_err(|source| ConformalError::Trainer {
                permutation: 1,
                source,
            })?;
        let mut observed_resid_sq = Vec::with_capacity(t);
        for (row, &y) in feats.iter().zip(series) {
            let err = y
                - model
                    .predict(row)
                    .map_err(|source| ConformalError::Trainer {
                        permutation: 1,
                        source,
                    })?;
            observed_resid_sq.push(err * err);
        }
        let forecast =
            model
                .predict(&features[t])
                .map_err(|source| ConformalError::Trainer {
                    permutation: 1,
                    source,
                })?;
        Ok(Self {
            observed_resid_sq,
            forecast,
            t,
        })
    }

    /// Rotation j ≥ 2 places observed pair j-1 in the final slot, so the
    /// hypothesis residual is ranked against pairs 1..T-1.
    fn pvalue(&self, hypothesis: f64) -> f64 {
        let err = hypothesis - self.forecast;
        let hypothesis_score = err * err;
        let count = 1 + self.observed_resid_sq[..self.t - 1]
            .iter()
            .filter(|&&s| s >= hypothesis_score)
            .count();
        count as f64 / self.t as f64
    }
}

/// The subset of a hypothesis grid retained by the conformal p-value test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub alpha: f64,
    /// Whether scores were produced by per-permutation refits.
    pub refit_per_permutation: bool,
    /// (grid value, p̂) for every hypothesis, in grid order.
    pub p_values: Vec<(f64, f64)>,
    /// Grid values with p̂ > alpha, in grid order.
    pub retained: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    /// Set when the retained set was empty and the interval fell back to the
    /// singleton argmax of p̂.
    pub fallback: bool,
}

impl PredictionInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Runs the conformal test over the whole hypothesis grid.
///
/// Grid values are evaluated independently (in parallel when a rayon pool is
/// configured); results do not depend on scheduling. An empty retained set
/// falls back to the singleton at the first argmax of p̂ and is flagged.
pub fn prediction_interval(
    series: &[f64],
    features: &[Vec<f64>],
    grid: &HypothesisGrid,
    alpha: f64,
    trainer: &dyn Trainer,
    refit_per_permutation: bool,
) -> Result<PredictionInterval, ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    let p_values: Vec<(f64, f64)> = if refit_per_permutation {
        grid.values()
            .par_iter()
            .map(|&r| conformal_pvalue(series, features, r, trainer, true).map(|p| (r, p)))
            .collect::<Result<_, _>>()?
    } else {
        let scorer = FixedModelScorer::fit(series, features, trainer)?;
        grid.values()
            .iter()
            .map(|&r| {
                if !r.is_finite() {
                    return Err(ConformalError::NonFiniteHypothesis(r));
                }
                Ok((r, scorer.pvalue(r)))
            })
            .collect::<Result<_, _>>()?
    };

    let retained: Vec<f64> = p_values
        .iter()
        .filter(|(_, p)| *p > alpha)
        .map(|(r, _)| *r)
        .collect();
    let (lower, upper, fallback) = if retained.is_empty() {
        let (best_r, _) = p_values
            .iter()
            .fold((f64::NAN, f64::NEG_INFINITY), |(br, bp), &(r, p)| {
                if p > bp {
                    (r, p)
                } else {
                    (br, bp)
                }
            });
        (best_r, best_r, true)
    } else {
        (retained[0], *retained.last().expect("non-empty"), false)
    };
    Ok(PredictionInterval {
        alpha,
        refit_per_permutation,
        p_values,
        retained,
        lower,
        upper,
        fallback,
    })
}

/// Effective conformal inputs derived from a raw series and lag layout:
/// targets for every period with complete lags, plus T+1 feature rows (the
/// last row holds the lags of the still-unobserved next period).
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDataset {
    pub targets: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

/// Builds the effective (target, feature) pairs of a raw series under the
/// given lags, including the feature row of the next (forecast) period.
pub fn lagged_dataset(raw_series: &[f64], lags: &[usize]) -> Result<LaggedDataset, ConformalError> {
    let matrix = build_lag_features(raw_series, lags)?;
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    let targets = raw_series[max_lag..].to_vec();
    let mut features: Vec<Vec<f64>> = matrix.rows().to_vec();
    let next_row: Vec<f64> = lags
        .iter()
        .map(|&lag| raw_series[raw_series.len() - lag])
        .collect();
    features.push(next_row);
    Ok(LaggedDataset { targets, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{ArTrainer, ModelParams, ModelSpec, TrainedModel};

    fn constant_model(value: f64) -> TrainedModel {
        TrainedModel::from_parts(
            ModelSpec::ar(1),
            ModelParams::Ar {
                intercept: value,
                coefficients: vec![0.0],
            },
        )
    }

    #[test]
    fn identity_permutation() {
        assert_eq!(blocking_permutation(1, 5).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shift_two_of_five() {
        // 1-based (2,3,4,5,1)
        assert_eq!(blocking_permutation(2, 5).unwrap(), vec![1, 2, 3, 4, 0]);
    }

    #[test]
    fn shift_three_of_four() {
        // 1-based (3,4,1,2)
        assert_eq!(blocking_permutation(3, 4).unwrap(), vec![2, 3, 0, 1]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(blocking_permutation(0, 4).is_err());
        assert!(blocking_permutation(5, 4).is_err());
    }

    #[test]
    fn augment_appends_hypothesis() {
        let features = vec![vec![0.0], vec![0.1], vec![0.2]];
        let data = augment(&[0.1, 0.2], &features, 0.0).unwrap();
        assert_eq!(data.targets(), &[0.1, 0.2, 0.0]);
        assert_eq!(data.hypothesis(), 0.0);
    }

    #[test]
    fn augment_prefix_is_bitwise_input() {
        let series = [0.123456789, -0.987654321, 0.5];
        let features = vec![vec![0.0]; 4];
        let data = augment(&series, &features, 0.25).unwrap();
        for (a, b) in data.targets()[..3].iter().zip(series.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn augment_rejects_length_mismatch() {
        let features = vec![vec![0.0]; 2];
        assert!(matches!(
            augment(&[0.1, 0.2], &features, 0.0),
            Err(ConformalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn perfect_model_scores_zero() {
        // model predicting every target exactly: constant model on a
        // constant dataset
        let features = vec![vec![0.5]; 4];
        let data = augment(&[0.5, 0.5, 0.5], &features, 0.5).unwrap();
        let model = constant_model(0.5);
        let ordering = blocking_permutation(1, 4).unwrap();
        assert_eq!(nonconformity_score(&model, &data, &ordering).unwrap(), 0.0);
    }

    #[test]
    fn constant_zero_model_hand_mse() {
        let features = vec![vec![0.0]; 3];
        let data = augment(&[0.1, -0.1], &features, 0.0).unwrap();
        let model = constant_model(0.0);
        let ordering = blocking_permutation(1, 3).unwrap();
        let score = nonconformity_score(&model, &data, &ordering).unwrap();
        assert!((score - (0.01 + 0.01 + 0.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn score_is_ordering_invariant_setwise() {
        let features = vec![vec![0.3], vec![0.1], vec![-0.2], vec![0.4]];
        let data = augment(&[0.1, -0.2, 0.4], &features, 0.05).unwrap();
        let model = constant_model(0.02);
        let identity = blocking_permutation(1, 4).unwrap();
        let rotated = blocking_permutation(3, 4).unwrap();
        let a = nonconformity_score(&model, &data, &identity).unwrap();
        let b = nonconformity_score(&model, &data, &rotated).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    fn toy_dataset(t: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        // AR(1)-flavored toy pairs with lag-1 features
        let mut raw = vec![0.05];
        for i in 1..=t {
            raw.push(0.5 * raw[i - 1] + if i % 2 == 0 { 0.02 } else { -0.015 });
        }
        let ds = lagged_dataset(&raw, &[1]).unwrap();
        (ds.targets, ds.features)
    }

    #[test]
    fn constant_series_pvalue_is_one() {
        let series = vec![0.04; 8];
        let features = vec![vec![0.04]; 9];
        let trainer = ArTrainer::new(1);
        let p = conformal_pvalue(&series, &features, 0.04, &trainer, true).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn pvalue_floor_holds() {
        let (series, features) = toy_dataset(10);
        let trainer = ArTrainer::new(1);
        let t = series.len() as f64;
        for &r in &[-0.5, 0.0, 0.3, 5.0] {
            for refit in [true, false] {
                let p = conformal_pvalue(&series, &features, r, &trainer, refit).unwrap();
                assert!(p >= 1.0 / t - 1e-15, "p={p} below floor for r={r}");
                assert!(p <= 1.0);
            }
        }
    }

    #[test]
    fn extreme_hypotheses_are_rejected() {
        let (series, features) = toy_dataset(24);
        let trainer = ArTrainer::new(1);
        let t = series.len() as f64;
        for refit in [true, false] {
            let p = conformal_pvalue(&series, &features, 50.0, &trainer, refit).unwrap();
            assert!(
                (p - 1.0 / t).abs() < 1e-12,
                "refit={refit}: extreme hypothesis got p={p}"
            );
        }
    }

    #[test]
    fn low_alpha_retains_entire_grid() {
        let (series, features) = toy_dataset(10);
        let trainer = ArTrainer::new(1);
        let grid = HypothesisGrid::from_range(-0.2, 0.2, 0.05).unwrap();
        let t = series.len() as f64;
        let interval =
            prediction_interval(&series, &features, &grid, 0.5 / t, &trainer, true).unwrap();
        assert_eq!(interval.retained.len(), grid.len());
        assert!(!interval.fallback);
        assert_eq!(interval.lower, -0.2);
        assert!((interval.upper - 0.2).abs() < 1e-12);
    }

    #[test]
    fn high_alpha_falls_back_to_argmax() {
        let (series, features) = toy_dataset(10);
        let trainer = ArTrainer::new(1);
        // grid far away from the data so every p-value sits at the floor
        let grid = HypothesisGrid::from_range(40.0, 50.0, 5.0).unwrap();
        let interval =
            prediction_interval(&series, &features, &grid, 0.9, &trainer, true).unwrap();
        assert!(interval.fallback);
        assert!(interval.retained.is_empty());
        assert_eq!(interval.lower, interval.upper);
        assert!(grid.values().contains(&interval.lower));
    }

    #[test]
    fn alpha_nesting_is_monotone() {
        let (series, features) = toy_dataset(12);
        let trainer = ArTrainer::new(1);
        let grid = HypothesisGrid::from_range(-0.3, 0.3, 0.02).unwrap();
        let loose =
            prediction_interval(&series, &features, &grid, 0.1, &trainer, true).unwrap();
        let tight =
            prediction_interval(&series, &features, &grid, 0.4, &trainer, true).unwrap();
        for r in &tight.retained {
            assert!(loose.retained.contains(r), "{r} retained at 0.4 but not 0.1");
        }
    }

    #[test]
    fn interval_is_deterministic() {
        let (series, features) = toy_dataset(12);
        let trainer = ArTrainer::new(1);
        let grid = HypothesisGrid::default();
        let a = prediction_interval(&series, &features, &grid, 0.2, &trainer, true).unwrap();
        let b = prediction_interval(&series, &features, &grid, 0.2, &trainer, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_validation() {
        assert!(HypothesisGrid::new(vec![0.0]).is_err());
        assert!(HypothesisGrid::new(vec![0.1, 0.1]).is_err());
        assert!(HypothesisGrid::new(vec![0.2, 0.1]).is_err());
        assert_eq!(HypothesisGrid::default().len(), 61);
    }

    /// Delegates to an [`ArTrainer`] but hides the linear hook, forcing the
    /// generic per-permutation refit path.
    struct OpaqueArTrainer(ArTrainer);

    impl crate::forecast::Trainer for OpaqueArTrainer {
        fn lags(&self) -> &[usize] {
            self.0.lags()
        }

        fn fit_pairs(
            &self,
            features: &[&[f64]],
            targets: &[f64],
        ) -> Result<TrainedModel, crate::forecast::ForecastError> {
            self.0.fit_pairs(features, targets)
        }
    }

    #[test]
    fn linear_fast_path_matches_generic_refit() {
        let (series, features) = toy_dataset(12);
        let fast = ArTrainer::new(1);
        let generic = OpaqueArTrainer(ArTrainer::new(1));
        for &r in &[-0.2, -0.05, 0.0, 0.04, 0.15, 2.0] {
            let a = conformal_pvalue(&series, &features, r, &fast, true).unwrap();
            let b = conformal_pvalue(&series, &features, r, &generic, true).unwrap();
            assert_eq!(a, b, "fast and generic refits disagree at r={r}");
        }
    }

    #[test]
    fn nn_trainer_refit_per_permutation_runs() {
        use crate::forecast::{ModelSpec, NnTrainer};
        let raw: Vec<f64> = (0..11).map(|i| ((i * 13 % 7) as f64 - 3.0) / 40.0).collect();
        let ds = lagged_dataset(&raw, &[1]).unwrap();
        let trainer = NnTrainer::new(ModelSpec::nn(vec![1], 2, 30, 0.05, 9)).unwrap();
        let grid = HypothesisGrid::from_range(-0.2, 0.2, 0.1).unwrap();
        let t = ds.targets.len() as f64;
        let a = prediction_interval(&ds.targets, &ds.features, &grid, 0.3, &trainer, true).unwrap();
        let b = prediction_interval(&ds.targets, &ds.features, &grid, 0.3, &trainer, true).unwrap();
        assert_eq!(a, b);
        for (_, p) in &a.p_values {
            assert!(*p >= 1.0 / t && *p <= 1.0);
        }
    }

    /// Trainer that always produces the all-zero model, for pinning the
    /// p-value against a by-hand enumeration.
    struct ZeroTrainer;

    impl crate::forecast::Trainer for ZeroTrainer {
        fn lags(&self) -> &[usize] {
            &[1]
        }

        fn fit_pairs(
            &self,
            _features: &[&[f64]],
            _targets: &[f64],
        ) -> Result<TrainedModel, crate::forecast::ForecastError> {
            Ok(constant_model(0.0))
        }
    }

    #[test]
    fn t4_constant_zero_model_matches_hand_enumeration() {
        // T=4 observed pairs plus the hypothesis pair; the fixed zero model
        // scores each rotation by the squared value in its final slot
        let series = [0.10, -0.05, 0.20, 0.01];
        let features = vec![vec![0.0]; 5];
        let r = 0.12;
        let p = conformal_pvalue(&series, &features, r, &ZeroTrainer, false).unwrap();

        // rotations j=1..4 place (r, R_1, R_2, R_3) in the final slot
        let final_slot_values = [r, series[0], series[1], series[2]];
        let hand_count = final_slot_values
            .iter()
            .filter(|&&v| v * v >= r * r)
            .count();
        assert_eq!(p, hand_count as f64 / 4.0);
        // identity slot (0.12^2) and the R_3 slot (0.20^2) meet the bar
        assert_eq!(p, 0.5);
    }

    #[test]
    fn lagged_dataset_layout() {
        let raw = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ds = lagged_dataset(&raw, &[1, 2]).unwrap();
        assert_eq!(ds.targets, vec![3.0, 4.0, 5.0]);
        assert_eq!(
            ds.features,
            vec![vec![2.0, 1.0], vec![3.0, 2.0], vec![4.0, 3.0], vec![5.0, 4.0]]
        );
    }
}
