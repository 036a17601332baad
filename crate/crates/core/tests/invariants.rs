//! Property tests for the structural invariants of the library.

use proptest::prelude::*;

use cpps_core::backtest::cumulative_returns;
use cpps_core::conformal::{conformal_pvalue, lagged_dataset};
use cpps_core::forecast::ArTrainer;
use cpps_core::market_data::build_lag_features;
use cpps_core::portfolio::{simplex_grid, Portfolio};
use cpps_core::selection::{hr_lr_select, IntervalEntry, IntervalTable, ShortlistRule};

fn simplex_weights(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, k).prop_map(|raw| {
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
        // pin the exact sum so the constructor's tolerance is met
        let drift: f64 = weights.iter().sum::<f64>() - 1.0;
        weights[0] -= drift;
        weights
    })
}

proptest! {
    // portfolio_return is linear in the asset returns
    #[test]
    fn portfolio_return_is_linear(
        weights in simplex_weights(4),
        returns in proptest::collection::vec(-0.5f64..0.5, 4),
        scale in -3.0f64..3.0,
    ) {
        let portfolio = Portfolio::new(weights).unwrap();
        let scaled: Vec<f64> = returns.iter().map(|r| r * scale).collect();
        let direct = portfolio.portfolio_return(&scaled).unwrap();
        let factored = scale * portfolio.portfolio_return(&returns).unwrap();
        prop_assert!((direct - factored).abs() <= 1e-12);
    }

    // every generated grid portfolio sits exactly on the simplex
    #[test]
    fn grid_portfolios_satisfy_simplex(k in 1usize..=4, g in 1u32..=9) {
        let set = simplex_grid(k, g).unwrap();
        for p in set.portfolios() {
            let sum: f64 = p.weights().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(p.weights().iter().all(|w| (0.0..=1.0).contains(w)));
        }
        // no duplicates under exact comparison
        let mut seen: Vec<&[f64]> = set.portfolios().iter().map(|p| p.weights()).collect();
        seen.dedup();
        prop_assert_eq!(seen.len(), set.len());
    }

    // reading lag rows reproduces the source values bitwise
    #[test]
    fn lag_features_round_trip(
        series in proptest::collection::vec(-1.0f64..1.0, 6..40),
        lag_a in 1usize..=3,
        lag_b in 4usize..=5,
    ) {
        let lags = vec![lag_a, lag_b];
        let matrix = build_lag_features(&series, &lags).unwrap();
        for t in matrix.first_period()..=series.len() {
            let row = matrix.row_for_period(t).unwrap();
            for (i, &lag) in lags.iter().enumerate() {
                prop_assert_eq!(row[i].to_bits(), series[t - lag - 1].to_bits());
            }
        }
    }

    // p-values stay inside [1/T, 1] for arbitrary data and hypotheses
    #[test]
    fn pvalue_bounds(
        raw in proptest::collection::vec(-0.3f64..0.3, 6..20),
        hypothesis in -1.0f64..1.0,
        refit in proptest::bool::ANY,
    ) {
        let ds = lagged_dataset(&raw, &[1]).unwrap();
        let t = ds.targets.len() as f64;
        let trainer = ArTrainer::new(1);
        let p = conformal_pvalue(&ds.targets, &ds.features, hypothesis, &trainer, refit).unwrap();
        prop_assert!(p >= 1.0 / t && p <= 1.0);
    }

    // HR-LR is invariant under permutation of the table rows
    #[test]
    fn hr_lr_table_order_invariant(
        bounds in proptest::collection::vec((-0.5f64..0.5, 0.0f64..0.5), 1..15),
        rotation in 0usize..15,
    ) {
        let entries: Vec<IntervalEntry> = bounds
            .iter()
            .enumerate()
            .map(|(i, &(lower, width))| IntervalEntry {
                candidate_index: i,
                lower,
                upper: lower + width,
            })
            .collect();
        let m = 1 + rotation % entries.len();
        let mut rotated = entries.clone();
        rotated.rotate_left(rotation % entries.len());
        let a = hr_lr_select(&IntervalTable::new(entries).unwrap(), m, ShortlistRule::HighestLower).unwrap();
        let b = hr_lr_select(&IntervalTable::new(rotated).unwrap(), m, ShortlistRule::HighestLower).unwrap();
        prop_assert_eq!(a.chosen, b.chosen);
        prop_assert_eq!(a.shortlist, b.shortlist);
    }

    // recomputing the cumulative path from its own returns is bitwise stable
    #[test]
    fn cumulative_path_recompute_is_bitwise(
        returns in proptest::collection::vec(-0.5f64..0.5, 1..60),
    ) {
        let a = cumulative_returns(&returns).unwrap();
        let b = cumulative_returns(&returns).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    // retained sets are nested as alpha grows
    #[test]
    fn alpha_nesting(
        raw in proptest::collection::vec(-0.2f64..0.2, 8..16),
        alpha_lo in 0.05f64..0.4,
        bump in 0.05f64..0.4,
    ) {
        use cpps_core::conformal::{prediction_interval, HypothesisGrid};
        let ds = lagged_dataset(&raw, &[1]).unwrap();
        let trainer = ArTrainer::new(1);
        let grid = HypothesisGrid::from_range(-0.25, 0.25, 0.05).unwrap();
        let alpha_hi = (alpha_lo + bump).min(0.95);
        let loose = prediction_interval(&ds.targets, &ds.features, &grid, alpha_lo, &trainer, false).unwrap();
        let tight = prediction_interval(&ds.targets, &ds.features, &grid, alpha_hi, &trainer, false).unwrap();
        for r in &tight.retained {
            prop_assert!(loose.retained.contains(r));
        }
    }
}
