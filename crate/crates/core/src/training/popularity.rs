//! Smoothed item sampling probabilities for the logQ correction.

use std::collections::BTreeMap;

use crate::data::{ItemId, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    pub q: BTreeMap<ItemId, f64>,
    pub smoothing_eps: f64,
}

impl PopularityTable {
    pub fn get(&self, item: ItemId) -> Option<f64> {
        self.q.get(&item).copied()
    }

    pub fn log_q(&self, item: ItemId) -> Result<f64> {
        self.get(item)
            .map(f64::ln)
            .ok_or_else(|| Error::invalid(format!("item {item} has no popularity estimate")))
    }
}

/// `Q(i) = (count(i) + ε) / Σ_j (count(j) + ε)` over `vocab` plus every
/// item seen in `sequences`. Counts include history items unless
/// `targets_only` is set.
pub fn estimate_popularity(
    sequences: &[UserSequence],
    vocab: impl IntoIterator<Item = ItemId>,
    eps: f64,
    targets_only: bool,
) -> Result<PopularityTable> {
    if eps.is_nan() || eps < 0.0 || !eps.is_finite() {
        return Err(Error::invalid("popularity smoothing must be a finite non-negative number"));
    }
    let mut counts: BTreeMap<ItemId, f64> = vocab.into_iter().map(|i| (i, 0.0)).collect();
    let mut interactions = 0u64;
    for s in sequences {
        let history: &[ItemId] = if targets_only { &[] } else { &s.history };
        for &i in history.iter().chain(s.target.iter()) {
            *counts.entry(i).or_insert(0.0) += 1.0;
            interactions += 1;
        }
    }
    if interactions == 0 {
        return Err(Error::Empty("no interactions to estimate popularity from"));
    }
    let total: f64 = counts.values().map(|c| c + eps).sum();
    let q = counts.into_iter().map(|(i, c)| (i, (c + eps) / total)).collect();
    Ok(PopularityTable { q, smoothing_eps: eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(history: &[u64], target: u64) -> UserSequence {
        UserSequence {
            user_id: 0,
            history: history.to_vec(),
            target: Some(target),
        }
    }

    #[test]
    fn single_item_has_probability_one() {
        let t = estimate_popularity(&[seq(&[4, 4], 4)], [4], 1.0, false).unwrap();
        assert_eq!(t.get(4), Some(1.0));
    }

    #[test]
    fn equal_counts_are_symmetric() {
        let t = estimate_popularity(&[seq(&[1, 1, 1, 1, 1, 2, 2, 2, 2], 2)], [], 1e-12, false).unwrap();
        assert!((t.get(1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn direct_ratio_without_smoothing() {
        let t = estimate_popularity(&[seq(&[1, 1, 2], 1)], [], 0.0, false).unwrap();
        assert_eq!(t.get(1), Some(0.75));
    }

    #[test]
    fn sums_to_one_and_smoothing_keeps_unseen_positive() {
        let t = estimate_popularity(&[seq(&[1, 2, 3], 1), seq(&[5], 3)], 0..10, 1.0, false).unwrap();
        let s: f64 = t.q.values().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.q.values().all(|&q| q > 0.0));
        assert_eq!(t.q.len(), 10);
    }

    #[test]
    fn targets_only_ignores_history() {
        let t = estimate_popularity(&[seq(&[1, 1, 1], 2)], [], 0.0, true).unwrap();
        assert_eq!(t.get(2), Some(1.0));
        assert_eq!(t.get(1), None);
    }

    #[test]
    fn no_interactions_is_an_error() {
        assert!(estimate_popularity(&[], [1], 1.0, false).is_err());
    }
}
