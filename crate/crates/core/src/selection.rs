//! Portfolio choice rules: HR-LR two-stage selection from prediction
//! intervals, point-forecast argmax selection for baselines, and the uniform
//! portfolio (re-exported from the portfolio module).

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::portfolio::uniform_portfolio;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("interval table is empty")]
    EmptyTable,
    #[error("shortlist size {m} out of range 1..={candidates}")]
    ShortlistSize { m: usize, candidates: usize },
    #[error("candidate {index} has a non-finite bound or forecast")]
    NonFiniteValue { index: usize },
    #[error("duplicate candidate index {0}")]
    DuplicateIndex(usize),
}

/// Lower/upper interval bounds of one candidate portfolio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEntry {
    pub candidate_index: usize,
    pub lower: f64,
    pub upper: f64,
}

/// One prediction interval per candidate portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTable {
    entries: Vec<IntervalEntry>,
}

impl IntervalTable {
    pub fn new(entries: Vec<IntervalEntry>) -> Result<Self, SelectionError> {
        if entries.is_empty() {
            return Err(SelectionError::EmptyTable);
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !e.lower.is_finite() || !e.upper.is_finite() {
                return Err(SelectionError::NonFiniteValue {
                    index: e.candidate_index,
                });
            }
            if !seen.insert(e.candidate_index) {
                return Err(SelectionError::DuplicateIndex(e.candidate_index));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[IntervalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which bound ranking the first HR-LR stage uses.
///
/// `HighestLower` shortlists the m candidates with the largest interval lower
/// bounds; `LowestLower` reproduces the literal low-end reading and
/// shortlists the smallest ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortlistRule {
    #[default]
    HighestLower,
    LowestLower,
}

/// The outcome of one selection rule at one decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    /// Candidate index of the chosen portfolio; always a member of
    /// `shortlist`.
    pub chosen: usize,
    /// Candidate indices of the first-stage shortlist.
    pub shortlist: Vec<usize>,
    /// Per-candidate (index, lower, upper) bounds the rule saw.
    pub rationale: Vec<(usize, f64, f64)>,
    pub rule_id: String,
}

/// Two-stage HR-LR selection.
///
/// Stage one keeps the m candidates ranked by interval lower bound (ties by
/// larger upper bound, then smaller candidate index); stage two picks the
/// shortlist member with the largest upper bound (ties by larger lower
/// bound, then smaller candidate index).
pub fn hr_lr_select(
    table: &IntervalTable,
    m: usize,
    rule: ShortlistRule,
) -> Result<SelectionOutcome, SelectionError> {
    let candidates = table.len();
    if m < 1 || m > candidates {
        return Err(SelectionError::ShortlistSize { m, candidates });
    }
    let mut ranked: Vec<&IntervalEntry> = table.entries().iter().collect();
    ranked.sort_by(|a, b| match rule {
        ShortlistRule::HighestLower => b
            .lower
            .partial_cmp(&a.lower)
            .expect("finite bounds")
            .then(b.upper.partial_cmp(&a.upper).expect("finite bounds"))
            .then(a.candidate_index.cmp(&b.candidate_index)),
        ShortlistRule::LowestLower => a
            .lower
            .partial_cmp(&b.lower)
            .expect("finite bounds")
            .then(b.upper.partial_cmp(&a.upper).expect("finite bounds"))
            .then(a.candidate_index.cmp(&b.candidate_index)),
    });
    let shortlist_entries = &ranked[..m];
    let chosen = shortlist_entries
        .iter()
        .max_by(|a, b| {
            a.upper
                .partial_cmp(&b.upper)
                .expect("finite bounds")
                .then(a.lower.partial_cmp(&b.lower).expect("finite bounds"))
                .then(b.candidate_index.cmp(&a.candidate_index))
        })
        .expect("shortlist non-empty")
        .candidate_index;
    let mut shortlist: Vec<usize> = shortlist_entries
        .iter()
        .map(|e| e.candidate_index)
        .collect();
    shortlist.sort_unstable();
    Ok(SelectionOutcome {
        chosen,
        shortlist,
        rationale: table
            .entries()
            .iter()
            .map(|e| (e.candidate_index, e.lower, e.upper))
            .collect(),
        rule_id: match rule {
            ShortlistRule::HighestLower => "hr-lr".to_string(),
            ShortlistRule::LowestLower => "hr-lr-lowest".to_string(),
        },
    })
}

/// Argmax over per-candidate point forecasts; ties go to the smaller index.
pub fn point_forecast_select(forecasts: &[f64]) -> Result<SelectionOutcome, SelectionError> {
    if forecasts.is_empty() {
        return Err(SelectionError::EmptyTable);
    }
    let mut best = 0usize;
    for (i, &f) in forecasts.iter().enumerate() {
        if !f.is_finite() {
            return Err(SelectionError::NonFiniteValue { index: i });
        }
        if f > forecasts[best] {
            best = i;
        }
    }
    Ok(SelectionOutcome {
        chosen: best,
        shortlist: vec![best],
        rationale: forecasts
            .iter()
            .enumerate()
            .map(|(i, &f)| (i, f, f))
            .collect(),
        rule_id: "point-forecast".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(bounds: &[(f64, f64)]) -> IntervalTable {
        IntervalTable::new(
            bounds
                .iter()
                .enumerate()
                .map(|(i, &(lower, upper))| IntervalEntry {
                    candidate_index: i,
                    lower,
                    upper,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_stage_hand_example() {
        // A:[0.1,0.2], B:[0.0,0.5], C:[-0.1,0.6], m=2 -> shortlist {A,B}, chosen B
        let t = table(&[(0.1, 0.2), (0.0, 0.5), (-0.1, 0.6)]);
        let outcome = hr_lr_select(&t, 2, ShortlistRule::HighestLower).unwrap();
        assert_eq!(outcome.shortlist, vec![0, 1]);
        assert_eq!(outcome.chosen, 1);
    }

    #[test]
    fn m_one_takes_largest_lower() {
        let t = table(&[(0.1, 0.2), (0.0, 0.5), (-0.1, 0.6)]);
        let outcome = hr_lr_select(&t, 1, ShortlistRule::HighestLower).unwrap();
        assert_eq!(outcome.shortlist, vec![0]);
        assert_eq!(outcome.chosen, 0);
    }

    #[test]
    fn m_full_takes_global_upper_argmax() {
        let t = table(&[(0.1, 0.2), (0.0, 0.5), (-0.1, 0.6)]);
        let outcome = hr_lr_select(&t, 3, ShortlistRule::HighestLower).unwrap();
        assert_eq!(outcome.chosen, 2);
    }

    #[test]
    fn lowest_lower_switch_flips_stage_one() {
        let t = table(&[(0.1, 0.2), (0.0, 0.5), (-0.1, 0.6)]);
        let outcome = hr_lr_select(&t, 2, ShortlistRule::LowestLower).unwrap();
        assert_eq!(outcome.shortlist, vec![1, 2]);
        assert_eq!(outcome.chosen, 2);
    }

    #[test]
    fn dominating_interval_wins_for_every_m() {
        let t = table(&[(0.2, 0.9), (0.1, 0.5), (0.0, 0.4), (-0.2, 0.3)]);
        for m in 1..=4 {
            let outcome = hr_lr_select(&t, m, ShortlistRule::HighestLower).unwrap();
            assert_eq!(outcome.chosen, 0, "m={m}");
        }
    }

    #[test]
    fn chosen_is_member_of_shortlist() {
        let t = table(&[(0.0, 0.1), (0.05, 0.07), (-0.3, 0.9), (0.02, 0.03)]);
        for m in 1..=4 {
            let outcome = hr_lr_select(&t, m, ShortlistRule::HighestLower).unwrap();
            assert_eq!(outcome.shortlist.len(), m);
            assert!(outcome.shortlist.contains(&outcome.chosen));
        }
    }

    #[test]
    fn shortlist_size_bounds_checked() {
        let t = table(&[(0.0, 0.1)]);
        assert!(matches!(
            hr_lr_select(&t, 0, ShortlistRule::HighestLower),
            Err(SelectionError::ShortlistSize { .. })
        ));
        assert!(matches!(
            hr_lr_select(&t, 2, ShortlistRule::HighestLower),
            Err(SelectionError::ShortlistSize { .. })
        ));
    }

    #[test]
    fn table_ordering_does_not_matter() {
        let forward = table(&[(0.1, 0.2), (0.0, 0.5), (-0.1, 0.6)]);
        let reversed = IntervalTable::new(
            forward.entries().iter().rev().cloned().collect(),
        )
        .unwrap();
        let a = hr_lr_select(&forward, 2, ShortlistRule::HighestLower).unwrap();
        let b = hr_lr_select(&reversed, 2, ShortlistRule::HighestLower).unwrap();
        assert_eq!(a.chosen, b.chosen);
        assert_eq!(a.shortlist, b.shortlist);
    }

    #[test]
    fn point_forecast_argmax() {
        let outcome = point_forecast_select(&[0.01, 0.05, 0.02]).unwrap();
        assert_eq!(outcome.chosen, 1);
    }

    #[test]
    fn point_forecast_tie_takes_first() {
        let outcome = point_forecast_select(&[0.02, 0.02, 0.02]).unwrap();
        assert_eq!(outcome.chosen, 0);
    }

    #[test]
    fn point_forecast_rejects_nan() {
        assert!(matches!(
            point_forecast_select(&[0.01, f64::NAN]),
            Err(SelectionError::NonFiniteValue { index: 1 })
        ));
    }

    #[test]
    fn interval_table_rejects_duplicates_and_nan() {
        let dup = vec![
            IntervalEntry {
                candidate_index: 0,
                lower: 0.0,
                upper: 0.1,
            },
            IntervalEntry {
                candidate_index: 0,
                lower: 0.1,
                upper: 0.2,
            },
        ];
        assert!(matches!(
            IntervalTable::new(dup),
            Err(SelectionError::DuplicateIndex(0))
        ));
        let nan = vec![IntervalEntry {
            candidate_index: 0,
            lower: f64::NAN,
            upper: 0.1,
        }];
        assert!(matches!(
            IntervalTable::new(nan),
            Err(SelectionError::NonFiniteValue { .. })
        ));
    }
}
