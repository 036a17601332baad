//! Univariate predictive models for portfolio-return series: AR(p) via
//! ordinary least squares and a single-hidden-layer feedforward network,
//! behind one trainer contract consumed by the conformal engine.
//!
//! Both trainers are deterministic: the AR fit is closed-form and the network
//! is trained by seeded full-batch gradient descent, so identical inputs give
//! bit-identical parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::build_lag_features;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("series of length {got} is too short, need at least {needed}")]
    InsufficientLength { needed: usize, got: usize },
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in training data")]
    NonFiniteInput,
}

/// Which predictive model family a spec describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ar,
    Nn,
}

/// Declarative description of a predictive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Ordered positive lags; for AR these must be contiguous 1..=p.
    pub lags: Vec<usize>,
    pub hidden_units: usize,
    pub training_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ModelSpec {
    /// AR(p) spec with lags 1..=p.
    pub fn ar(order: usize) -> Self {
        Self {
            kind: ModelKind::Ar,
            lags: (1..=order).collect(),
            hidden_units: 0,
            training_epochs: 0,
            learning_rate: 0.0,
            seed: 0,
        }
    }

    /// Feedforward-network spec.
    pub fn nn(
        lags: Vec<usize>,
        hidden_units: usize,
        training_epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: ModelKind::Nn,
            lags,
            hidden_units,
            training_epochs,
            learning_rate,
            seed,
        }
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        if self.lags.is_empty() || self.lags.contains(&0) {
            return Err(ForecastError::InvalidSpec(
                "lags must be non-empty positive integers".into(),
            ));
        }
        match self.kind {
            ModelKind::Ar => {
                let expected: Vec<usize> = (1..=self.lags.len()).collect();
                if self.lags != expected {
                    return Err(ForecastError::InvalidSpec(
                        "AR lags must be contiguous 1..=p".into(),
                    ));
                }
            }
            ModelKind::Nn => {
                if self.hidden_units == 0 {
                    return Err(ForecastError::InvalidSpec(
                        "hidden_units must be positive".into(),
                    ));
                }
                if self.training_epochs == 0 {
                    return Err(ForecastError::InvalidSpec(
                        "training_epochs must be positive".into(),
                    ));
                }
                if !(self.learning_rate > 0.0) {
                    return Err(ForecastError::InvalidSpec(
                        "learning_rate must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Fitted parameters of a predictive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelParams {
    Ar {
        intercept: f64,
        coefficients: Vec<f64>,
    },
    Nn(NnParams),
}

/// Weights of the single-hidden-layer network plus the feature
/// standardization captured from its training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnParams {
    /// Hidden-layer weights, row-major `hidden x input`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Output weights, one per hidden unit.
    pub w2: Vec<f64>,
    pub b2: f64,
    pub feat_mean: Vec<f64>,
    pub feat_scale: Vec<f64>,
}

/// A trained predictor: a pure function of (parameters, features).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    spec: ModelSpec,
    params: ModelParams,
    /// 1-based period range of the targets used for fitting, when the model
    /// was fit from a series.
    training_window: Option<(usize, usize)>,
}

impl TrainedModel {
    /// Assembles a model from explicit parameters, e.g. for scoring fixed
    /// reference predictors in tests and diagnostics.
    pub fn from_parts(spec: ModelSpec, params: ModelParams) -> Self {
        Self {
            spec,
            params,
            training_window: None,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn training_window(&self) -> Option<(usize, usize)> {
        self.training_window
    }

    /// Point forecast from a lag-value feature vector.
    pub fn predict(&self, features: &[f64]) -> Result<f64, ForecastError> {
        if features.len() != self.spec.lags.len() {
            return Err(ForecastError::DimensionMismatch {
                expected: self.spec.lags.len(),
                actual: features.len(),
            });
        }
        match &self.params {
            ModelParams::Ar {
                intercept,
                coefficients,
            } => Ok(intercept
                + coefficients
                    .iter()
                    .zip(features)
                    .map(|(c, x)| c * x)
                    .sum::<f64>()),
            ModelParams::Nn(p) => Ok(nn_forward(p, features)),
        }
    }
}

fn nn_forward(p: &NnParams, features: &[f64]) -> f64 {
    let input = p.feat_mean.len();
    let hidden = p.b1.len();
    let mut out = p.b2;
    for h in 0..hidden {
        let mut a = p.b1[h];
        for i in 0..input {
            let z = (features[i] - p.feat_mean[i]) / p.feat_scale[i];
            a += p.w1[h * input + i] * z;
        }
        if a > 0.0 {
            out += p.w2[h] * a;
        }
    }
    out
}

/// Fits a model on explicit (feature row, target) pairs.
///
/// The conformal engine retrains on pair subsets chosen by permutations, so
/// trainers operate on pairs; the series-level entry points [`fit_ar`] and
/// [`fit_nn`] build the lag pairs and delegate here.
pub trait Trainer: Sync {
    fn lags(&self) -> &[usize];

    fn fit_pairs(
        &self,
        features: &[&[f64]],
        targets: &[f64],
    ) -> Result<TrainedModel, ForecastError>;

    /// Linear-model hook: trainers whose fit is ordinary least squares
    /// expose themselves so callers can run leave-one-out refits through
    /// Gram downdates instead of full refits.
    fn as_linear(&self) -> Option<&ArTrainer> {
        None
    }
}

/// OLS autoregression of a given order.
#[derive(Debug, Clone)]
pub struct ArTrainer {
    lags: Vec<usize>,
}

impl ArTrainer {
    pub fn new(order: usize) -> Self {
        Self {
            lags: (1..=order).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.lags.len()
    }
}

impl Trainer for ArTrainer {
    fn lags(&self) -> &[usize] {
        &self.lags
    }

    fn fit_pairs(
        &self,
        features: &[&[f64]],
        targets: &[f64],
    ) -> Result<TrainedModel, ForecastError> {
        let beta = least_squares_min_norm(features, targets, self.order())?;
        Ok(TrainedModel {
            spec: ModelSpec::ar(self.order()),
            params: ModelParams::Ar {
                intercept: beta[0],
                coefficients: beta[1..].to_vec(),
            },
            training_window: None,
        })
    }

    fn as_linear(&self) -> Option<&ArTrainer> {
        Some(self)
    }
}

/// Solves `gram * beta = rhs` in place by unpivoted Cholesky-style Gaussian
/// elimination, with the same acceptance checks as [`ArTrainer::fit_pairs`]:
/// the solution must satisfy the normal equations and stay of sane magnitude.
/// Returns `None` when the system is too ill-conditioned, in which case the
/// caller falls back to the SVD minimum-norm fit.
pub(crate) fn solve_normal_equations(
    gram: &[f64],
    rhs: &[f64],
    cols: usize,
    target_scale: f64,
) -> Option<Vec<f64>> {
    let mut a = gram.to_vec();
    let mut beta = rhs.to_vec();
    // forward elimination with partial pivoting
    let mut perm: Vec<usize> = (0..cols).collect();
    for k in 0..cols {
        let mut pivot_row = k;
        let mut pivot_val = a[perm[k] * cols + k].abs();
        for r in k + 1..cols {
            let v = a[perm[r] * cols + k].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if !(pivot_val > 0.0) || !pivot_val.is_finite() {
            return None;
        }
        perm.swap(k, pivot_row);
        let pk = perm[k];
        for r in k + 1..cols {
            let pr = perm[r];
            let factor = a[pr * cols + k] / a[pk * cols + k];
            for c in k..cols {
                a[pr * cols + c] -= factor * a[pk * cols + c];
            }
            beta[pr] -= factor * beta[pk];
        }
    }
    let mut solution = vec![0.0; cols];
    for k in (0..cols).rev() {
        let pk = perm[k];
        let mut value = beta[pk];
        for c in k + 1..cols {
            value -= a[pk * cols + c] * solution[c];
        }
        solution[k] = value / a[pk * cols + k];
    }
    if solution.iter().any(|v| !v.is_finite()) {
        return None;
    }
    // acceptance checks mirroring fit_pairs
    let mut residual: f64 = 0.0;
    let mut gram_max: f64 = 0.0;
    let mut rhs_max: f64 = 0.0;
    let mut beta_max: f64 = 0.0;
    for i in 0..cols {
        let mut row_dot = 0.0;
        for j in 0..cols {
            row_dot += gram[i * cols + j] * solution[j];
            gram_max = gram_max.max(gram[i * cols + j].abs());
        }
        residual = residual.max((row_dot - rhs[i]).abs());
        rhs_max = rhs_max.max(rhs[i].abs());
        beta_max = beta_max.max(solution[i].abs());
    }
    let scale = gram_max * beta_max + rhs_max;
    if residual <= 1e-8 * scale.max(f64::MIN_POSITIVE) && beta_max <= 1e6 * (1.0 + target_scale) {
        Some(solution)
    } else {
        None
    }
}

/// Seeded feedforward-network trainer.
#[derive(Debug, Clone)]
pub struct NnTrainer {
    spec: ModelSpec,
}

impl NnTrainer {
    pub fn new(spec: ModelSpec) -> Result<Self, ForecastError> {
        if spec.kind != ModelKind::Nn {
            return Err(ForecastError::InvalidSpec("expected an NN spec".into()));
        }
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl Trainer for NnTrainer {
    fn lags(&self) -> &[usize] {
        &self.spec.lags
    }

    fn fit_pairs(
        &self,
        features: &[&[f64]],
        targets: &[f64],
    ) -> Result<TrainedModel, ForecastError> {
        let params = train_nn_pairs(&self.spec, features, targets)?;
        Ok(TrainedModel {
            spec: self.spec.clone(),
            params: ModelParams::Nn(params),
            training_window: None,
        })
    }
}

/// Intercept + coefficients minimizing squared error; minimum-norm solution
/// when the normal equations are singular.
fn least_squares_min_norm(
    features: &[&[f64]],
    targets: &[f64],
    dim: usize,
) -> Result<Vec<f64>, ForecastError> {
    let n = targets.len();
    if n == 0 {
        return Err(ForecastError::InsufficientLength { needed: 1, got: 0 });
    }
    let cols = dim + 1;
    for row in features {
        if row.len() != dim {
            return Err(ForecastError::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
    }
    // normal equations with a Cholesky solve; fall back to an SVD
    // pseudoinverse of the design matrix on rank deficiency
    let mut gram = DMatrix::<f64>::zeros(cols, cols);
    let mut rhs = DVector::<f64>::zeros(cols);
    let mut design_row = vec![0.0; cols];
    for (row, &y) in features.iter().zip(targets) {
        if !y.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(ForecastError::NonFiniteInput);
        }
        design_row[0] = 1.0;
        design_row[1..].copy_from_slice(row);
        for i in 0..cols {
            for j in i..cols {
                gram[(i, j)] += design_row[i] * design_row[j];
            }
            rhs[i] += design_row[i] * y;
        }
    }
    for i in 0..cols {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let target_scale = targets.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if let Some(chol) = gram.clone().cholesky() {
        let beta = chol.solve(&rhs);
        if beta.iter().all(|v| v.is_finite()) {
            // accept only solves that satisfy the normal equations with a
            // solution of sane magnitude; nearly collinear designs (constant
            // augmented series occur in conformal grids) fall through to the
            // SVD minimum-norm path
            let residual = (&gram * &beta - &rhs).amax();
            let scale = gram.amax() * beta.amax() + rhs.amax();
            if residual <= 1e-8 * scale.max(f64::MIN_POSITIVE)
                && beta.amax() <= 1e6 * (1.0 + target_scale)
            {
                return Ok(beta.as_slice().to_vec());
            }
        }
    }
    let mut design = DMatrix::<f64>::zeros(n, cols);
    for (r, row) in features.iter().enumerate() {
        design[(r, 0)] = 1.0;
        for (c, &v) in row.iter().enumerate() {
            design[(r, c + 1)] = v;
        }
    }
    let y = DVector::from_column_slice(targets);
    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * (n.max(cols) as f64) * f64::EPSILON;
    let beta = svd
        .solve(&y, eps)
        .map_err(|e| ForecastError::InvalidSpec(e.to_string()))?;
    Ok(beta.as_slice().to_vec())
}

/// Fits an AR(p) model on a series by OLS.
pub fn fit_ar(series: &[f64], order: usize) -> Result<TrainedModel, ForecastError> {
    if order == 0 {
        return Err(ForecastError::InvalidSpec("order must be positive".into()));
    }
    if series.len() < order + 2 {
        return Err(ForecastError::InsufficientLength {
            needed: order + 2,
            got: series.len(),
        });
    }
    let lags: Vec<usize> = (1..=order).collect();
    let matrix = build_lag_features(series, &lags).map_err(|_| {
        ForecastError::InsufficientLength {
            needed: order + 2,
            got: series.len(),
        }
    })?;
    let rows: Vec<&[f64]> = matrix.rows().iter().map(Vec::as_slice).collect();
    let targets = &series[order..];
    let mut model = ArTrainer::new(order).fit_pairs(&rows, targets)?;
    model.training_window = Some((order + 1, series.len()));
    Ok(model)
}

/// Trains the feedforward network on a series.
pub fn fit_nn(series: &[f64], spec: &ModelSpec) -> Result<TrainedModel, ForecastError> {
    spec.validate()?;
    if spec.kind != ModelKind::Nn {
        return Err(ForecastError::InvalidSpec("expected an NN spec".into()));
    }
    let max_lag = spec.max_lag();
    if series.len() < max_lag + 2 {
        return Err(ForecastError::InsufficientLength {
            needed: max_lag + 2,
            got: series.len(),
        });
    }
    let matrix = build_lag_features(series, &spec.lags).map_err(|_| {
        ForecastError::InsufficientLength {
            needed: max_lag + 2,
            got: series.len(),
        }
    })?;
    let rows: Vec<&[f64]> = matrix.rows().iter().map(Vec::as_slice).collect();
    let targets = &series[max_lag..];
    let mut model = NnTrainer::new(spec.clone())?.fit_pairs(&rows, targets)?;
    model.training_window = Some((max_lag + 1, series.len()));
    Ok(model)
}

/// Network state during training; standardized inputs are materialized once.
struct NnWorkspace {
    input: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    n: usize,
}

impl NnWorkspace {
    fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    fn get_param(&self, idx: usize) -> f64 {
        let nw1 = self.w1.len();
        let nb1 = self.b1.len();
        let nw2 = self.w2.len();
        if idx < nw1 {
            self.w1[idx]
        } else if idx < nw1 + nb1 {
            self.b1[idx - nw1]
        } else if idx < nw1 + nb1 + nw2 {
            self.w2[idx - nw1 - nb1]
        } else {
            self.b2
        }
    }

    fn set_param(&mut self, idx: usize, value: f64) {
        let nw1 = self.w1.len();
        let nb1 = self.b1.len();
        let nw2 = self.w2.len();
        if idx < nw1 {
            self.w1[idx] = value;
        } else if idx < nw1 + nb1 {
            self.b1[idx - nw1] = value;
        } else if idx < nw1 + nb1 + nw2 {
            self.w2[idx - nw1 - nb1] = value;
        } else {
            self.b2 = value;
        }
    }

    /// Mean-squared-error loss and its gradient over the full batch.
    ///
    /// Gradient layout matches the parameter indexing: w1, b1, w2, b2.
    fn loss_and_gradient(&self, grad: Option<&mut Vec<f64>>) -> f64 {
        let (input, hidden, n) = (self.input, self.hidden, self.n);
        let mut loss = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut act = vec![0.0; hidden];
        for s in 0..n {
            let z = &self.inputs[s * input..(s + 1) * input];
            let mut pred = self.b2;
            for h in 0..hidden {
                let mut a = self.b1[h];
                for i in 0..input {
                    a += self.w1[h * input + i] * z[i];
                }
                act[h] = a;
                if a > 0.0 {
                    pred += self.w2[h] * a;
                }
            }
            let err = pred - self.targets[s];
            loss += err * err;
            if let Some(g) = g.as_deref_mut() {
                let nw1 = self.w1.len();
                let nb1 = self.b1.len();
                let dpred = 2.0 * err / n as f64;
                g[nw1 + nb1 + hidden] += dpred; // b2
                for h in 0..hidden {
                    if act[h] > 0.0 {
                        g[nw1 + nb1 + h] += dpred * act[h]; // w2
                        let da = dpred * self.w2[h];
                        g[nw1 + h] += da; // b1
                        for i in 0..input {
                            g[h * input + i] += da * z[i]; // w1
                        }
                    }
                }
            }
        }
        loss / n as f64
    }
}

fn build_workspace(
    spec: &ModelSpec,
    features: &[&[f64]],
    targets: &[f64],
) -> Result<NnWorkspace, ForecastError> {
    let n = targets.len();
    let input = spec.lags.len();
    if n == 0 {
        return Err(ForecastError::InsufficientLength { needed: 1, got: 0 });
    }
    for row in features {
        if row.len() != input {
            return Err(ForecastError::DimensionMismatch {
                expected: input,
                actual: row.len(),
            });
        }
    }
    if targets.iter().any(|v| !v.is_finite())
        || features.iter().any(|r| r.iter().any(|v| !v.is_finite()))
    {
        return Err(ForecastError::NonFiniteInput);
    }

    let (mean, scale) = feature_standardization(features, input);
    let mut inputs = vec![0.0; n * input];
    for (s, row) in features.iter().enumerate() {
        for i in 0..input {
            inputs[s * input + i] = (row[i] - mean[i]) / scale[i];
        }
    }

    let hidden = spec.hidden_units;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s1 = 1.0 / (input as f64).sqrt();
    let s2 = 1.0 / (hidden as f64).sqrt();
    let w1: Vec<f64> = (0..hidden * input)
        .map(|_| rng.gen_range(-s1..=s1))
        .collect();
    let w2: Vec<f64> = (0..hidden).map(|_| rng.gen_range(-s2..=s2)).collect();

    Ok(NnWorkspace {
        input,
        hidden,
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: 0.0,
        inputs,
        targets: targets.to_vec(),
        n,
    })
}

fn feature_standardization(features: &[&[f64]], input: usize) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let mut mean = vec![0.0; input];
    for row in features {
        for i in 0..input {
            mean[i] += row[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; input];
    for row in features {
        for i in 0..input {
            let d = row[i] - mean[i];
            var[i] += d * d;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn train_nn_pairs(
    spec: &ModelSpec,
    features: &[&[f64]],
    targets: &[f64],
) -> Result<NnParams, ForecastError> {
    let mut ws = build_workspace(spec, features, targets)?;
    let mut grad = vec![0.0; ws.param_count()];
    for epoch in 1..=spec.training_epochs {
        let loss = ws.loss_and_gradient(Some(&mut grad));
        if !loss.is_finite() {
            return Err(ForecastError::NonFiniteLoss { epoch });
        }
        let lr = spec.learning_rate;
        for (idx, &g) in grad.iter().enumerate() {
            let updated = ws.get_param(idx) - lr * g;
            ws.set_param(idx, updated);
        }
    }
    let final_loss = ws.loss_and_gradient(None);
    if !final_loss.is_finite() {
        return Err(ForecastError::NonFiniteLoss {
            epoch: spec.training_epochs,
        });
    }
    let (mean, scale) = feature_standardization(features, spec.lags.len());
    Ok(NnParams {
        w1: ws.w1,
        b1: ws.b1,
        w2: ws.w2,
        b2: ws.b2,
        feat_mean: mean,
        feat_scale: scale,
    })
}

/// Compares the analytic network gradient against central finite differences
/// at the seeded initialization; returns the max relative discrepancy.
pub fn finite_difference_gradient_check(
    spec: &ModelSpec,
    series: &[f64],
) -> Result<f64, ForecastError> {
    spec.validate()?;
    if spec.kind != ModelKind::Nn {
        return Err(ForecastError::InvalidSpec("expected an NN spec".into()));
    }
    let max_lag = spec.max_lag();
    if series.len() < max_lag + 2 {
        return Err(ForecastError::InsufficientLength {
            needed: max_lag + 2,
            got: series.len(),
        });
    }
    let matrix = build_lag_features(series, &spec.lags)
        .map_err(|_| ForecastError::InsufficientLength {
            needed: max_lag + 2,
            got: series.len(),
        })?;
    let rows: Vec<&[f64]> = matrix.rows().iter().map(Vec::as_slice).collect();
    let targets = &series[max_lag..];
    let ws = build_workspace(spec, &rows, targets)?;
    Ok(gradient_check_workspace(ws))
}

fn gradient_check_workspace(mut ws: NnWorkspace) -> f64 {
    const EPS: f64 = 1e-5;
    let mut analytic = vec![0.0; ws.param_count()];
    ws.loss_and_gradient(Some(&mut analytic));
    let mut worst: f64 = 0.0;
    for (idx, &expected) in analytic.iter().enumerate() {
        let original = ws.get_param(idx);
        ws.set_param(idx, original + EPS);
        let plus = ws.loss_and_gradient(None);
        ws.set_param(idx, original - EPS);
        let minus = ws.loss_and_gradient(None);
        ws.set_param(idx, original);
        let fd = (plus - minus) / (2.0 * EPS);
        let denom = expected.abs().max(fd.abs()).max(1e-8);
        worst = worst.max((expected - fd).abs() / denom);
    }
    worst
}
