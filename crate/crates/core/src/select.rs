//! Selection policies over a ranked candidate list.
//!
//! A policy keeps `n = min(floor(ratio * |C|), cap)` candidates, with `n`
//! forced up to one whenever the floor hits zero on a non-empty candidate
//! set — a ratio-based budget that spends less where the map is sparse
//! without ever starving localization outright. `all` keeps everything,
//! `random` is the seeded uniform baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::coobs::Score;
use crate::rng::{stream_rng, STREAM_SELECTION};
use crate::world::LandmarkId;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("selection ratio over an empty candidate set is undefined")]
    EmptyCandidates,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Ranked,
    Random,
    All,
}

impl SelectionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionKind::Ranked => "ranked",
            SelectionKind::Random => "random",
            SelectionKind::All => "all",
        }
    }
}

/// The policy triple (kind, ratio, cap), plus the shuffle seed for the
/// random baseline. `cap: None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub kind: SelectionKind,
    pub ratio: f64,
    pub cap: Option<u64>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SelectionPolicy {
    pub fn ranked(ratio: f64, cap: Option<u64>) -> Self {
        SelectionPolicy { kind: SelectionKind::Ranked, ratio, cap, rng_seed: 0 }
    }

    pub fn random(ratio: f64, cap: Option<u64>, rng_seed: u64) -> Self {
        SelectionPolicy { kind: SelectionKind::Random, ratio, cap, rng_seed }
    }

    pub fn all() -> Self {
        SelectionPolicy { kind: SelectionKind::All, ratio: 1.0, cap: None, rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(SelectError::InvalidPolicy(format!(
                "ratio {} outside [0, 1]",
                self.ratio
            )));
        }
        if self.cap == Some(0) {
            return Err(SelectError::InvalidPolicy("cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Short label used in CSV artifacts and file names.
    pub fn label(&self) -> String {
        match self.kind {
            SelectionKind::All => "all".into(),
            _ => {
                let cap = match self.cap {
                    Some(m) => m.to_string(),
                    None => "inf".into(),
                };
                format!("{}_r{}_m{}", self.kind.as_str(), self.ratio, cap)
            }
        }
    }
}

/// Number of candidates a ranked/random policy keeps out of `candidates`.
pub fn selection_count(ratio: f64, cap: Option<u64>, candidates: usize) -> usize {
    let floor = (ratio * candidates as f64).floor() as usize;
    let n = floor.max(1.min(candidates));
    let n = match cap {
        Some(m) => n.min(m as usize),
        None => n,
    };
    n.min(candidates)
}

/// Policy application over one ranked candidate list. Holds the shuffle
/// stream for the random baseline so repeated calls within a traversal keep
/// advancing it; create one per traversal.
#[derive(Debug, Clone)]
pub struct Selector {
    policy: SelectionPolicy,
    rng: ChaCha8Rng,
}

impl Selector {
    pub fn new(policy: SelectionPolicy) -> Self {
        let rng = stream_rng(policy.rng_seed, STREAM_SELECTION);
        Selector { policy, rng }
    }

    pub fn policy(&self) -> &SelectionPolicy {
        &self.policy
    }

    /// Apply the policy to candidates ranked per the co-observability order.
    /// For `ranked` the result is a prefix of the input; `all` returns the
    /// input order in full; `random` shuffles with its own seeded stream and
    /// ignores scores entirely.
    pub fn select(&mut self, ranked: &[(LandmarkId, Score)]) -> Vec<LandmarkId> {
        match self.policy.kind {
            SelectionKind::All => ranked.iter().map(|(l, _)| *l).collect(),
            SelectionKind::Ranked => {
                let n = selection_count(self.policy.ratio, self.policy.cap, ranked.len());
                ranked[..n].iter().map(|(l, _)| *l).collect()
            }
            SelectionKind::Random => {
                let n = selection_count(self.policy.ratio, self.policy.cap, ranked.len());
                let mut ids: Vec<LandmarkId> = ranked.iter().map(|(l, _)| *l).collect();
                ids.shuffle(&mut self.rng);
                ids.truncate(n);
                ids
            }
        }
    }

    /// True when the cap (rather than the ratio) bound the selection size.
    pub fn truncated_by_cap(&self, candidates: usize, selected: usize) -> bool {
        match (self.policy.kind, self.policy.cap) {
            (SelectionKind::All, _) | (_, None) => false,
            (_, Some(m)) => {
                selected == m as usize
                    && selection_count(self.policy.ratio, None, candidates) > selected
            }
        }
    }
}

/// `|selected| / |candidates|`; undefined over an empty candidate set.
pub fn selection_ratio(selected: usize, candidates: usize) -> Result<f64, SelectError> {
    if candidates == 0 {
        return Err(SelectError::EmptyCandidates);
    }
    Ok(selected as f64 / candidates as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranked_list(n: usize) -> Vec<(LandmarkId, Score)> {
        (0..n)
            .map(|i| {
                (
                    LandmarkId(i as u64),
                    Score { votes: (n - i) as u64, traversals: 1 },
                )
            })
            .collect()
    }

    #[test]
    fn policy_arithmetic_from_reported_configuration() {
        // ratio 0.3, cap 1800 over ten candidates keeps three.
        assert_eq!(selection_count(0.3, Some(1800), 10), 3);
        let mut sel = Selector::new(SelectionPolicy::ranked(0.3, Some(1800)));
        let picked = sel.select(&ranked_list(10));
        assert_eq!(picked.len(), 3);
        assert_eq!(picked, vec![LandmarkId(0), LandmarkId(1), LandmarkId(2)]);
    }

    #[test]
    fn ratio_one_unbounded_selects_everything() {
        let mut sel = Selector::new(SelectionPolicy::ranked(1.0, None));
        assert_eq!(sel.select(&ranked_list(25)).len(), 25);
        let mut all = Selector::new(SelectionPolicy::all());
        assert_eq!(all.select(&ranked_list(25)).len(), 25);
    }

    #[test]
    fn floor_zero_guard_keeps_one() {
        assert_eq!(selection_count(0.1, None, 3), 1);
        let mut sel = Selector::new(SelectionPolicy::ranked(0.1, None));
        let picked = sel.select(&ranked_list(3));
        assert_eq!(picked, vec![LandmarkId(0)]);
        // ... but an empty candidate set stays empty.
        assert_eq!(selection_count(0.1, None, 0), 0);
    }

    #[test]
    fn cap_binds_and_reports_truncation() {
        let sel = Selector::new(SelectionPolicy::ranked(0.5, Some(4)));
        assert_eq!(selection_count(0.5, Some(4), 20), 4);
        assert!(sel.truncated_by_cap(20, 4));
        assert!(!sel.truncated_by_cap(8, 4));
    }

    #[test]
    fn random_fixed_seed_is_deterministic() {
        let policy = SelectionPolicy::random(0.5, None, 77);
        let a: Vec<_> = {
            let mut s = Selector::new(policy);
            (0..5).map(|_| s.select(&ranked_list(12))).collect()
        };
        let b: Vec<_> = {
            let mut s = Selector::new(policy);
            (0..5).map(|_| s.select(&ranked_list(12))).collect()
        };
        assert_eq!(a, b);
        // The stream advances between calls within one selector.
        assert!(a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn random_inclusion_frequency_across_seeds() {
        let candidates = ranked_list(20);
        let trials = 1000;
        let mut inclusion = vec![0usize; 20];
        for seed in 0..trials {
            let mut s = Selector::new(SelectionPolicy::random(0.5, None, seed));
            for id in s.select(&candidates) {
                inclusion[id.0 as usize] += 1;
            }
        }
        let p = 0.5;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &count) in inclusion.iter().enumerate() {
            let freq = count as f64 / trials as f64;
            assert!(
                (freq - p).abs() < 3.0 * sigma,
                "candidate {i} included with frequency {freq}"
            );
        }
    }

    #[test]
    fn selection_ratio_examples() {
        assert_eq!(selection_ratio(3, 10).unwrap(), 0.3);
        assert_eq!(selection_ratio(10, 10).unwrap(), 1.0);
        assert!(matches!(selection_ratio(0, 0), Err(SelectError::EmptyCandidates)));
    }

    #[test]
    fn policy_validation() {
        assert!(SelectionPolicy::ranked(1.2, None).validate().is_err());
        assert!(SelectionPolicy::ranked(-0.1, None).validate().is_err());
        assert!(SelectionPolicy::ranked(0.5, Some(0)).validate().is_err());
        assert!(SelectionPolicy::ranked(0.5, Some(1)).validate().is_ok());
    }

    proptest! {
        #[test]
        fn prop_selected_size_formula(
            len in 0usize..200,
            ratio in 0.0f64..=1.0,
            cap in proptest::option::of(1u64..100),
            kind in prop_oneof![Just(SelectionKind::Ranked), Just(SelectionKind::Random)],
        ) {
            let policy = SelectionPolicy { kind, ratio, cap, rng_seed: 5 };
            let mut sel = Selector::new(policy);
            let picked = sel.select(&ranked_list(len));
            let floor = (ratio * len as f64).floor() as usize;
            let mut expected = floor.max(1.min(len));
            if let Some(m) = cap {
                expected = expected.min(m as usize);
            }
            expected = expected.min(len);
            prop_assert_eq!(picked.len(), expected);
        }

        #[test]
        fn prop_ranked_output_is_prefix(
            len in 0usize..100,
            ratio in 0.0f64..=1.0,
        ) {
            let mut sel = Selector::new(SelectionPolicy::ranked(ratio, None));
            let ranked = ranked_list(len);
            let picked = sel.select(&ranked);
            let prefix: Vec<LandmarkId> =
                ranked[..picked.len()].iter().map(|(l, _)| *l).collect();
            prop_assert_eq!(picked, prefix);
        }

        #[test]
        fn prop_scaling_scores_leaves_selection_unchanged(
            votes in proptest::collection::vec(0u64..50, 1..40),
            ratio in 0.0f64..=1.0,
            scale in 1u64..9,
        ) {
            // Build a rank-ordered list, scale every score by the same
            // positive constant, re-sort with the same tie-break: the
            // selected prefix is the same set.
            let mut base: Vec<(LandmarkId, Score)> = votes
                .iter()
                .enumerate()
                .map(|(i, &v)| (LandmarkId(i as u64), Score { votes: v, traversals: 1 }))
                .collect();
            base.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut scaled: Vec<(LandmarkId, Score)> = base
                .iter()
                .map(|(l, s)| (*l, Score { votes: s.votes * scale, traversals: s.traversals }))
                .collect();
            scaled.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

            let mut sel_a = Selector::new(SelectionPolicy::ranked(ratio, None));
            let mut sel_b = Selector::new(SelectionPolicy::ranked(ratio, None));
            let a: std::collections::BTreeSet<LandmarkId> =
                sel_a.select(&base).into_iter().collect();
            let b: std::collections::BTreeSet<LandmarkId> =
                sel_b.select(&scaled).into_iter().collect();
            prop_assert_eq!(a, b);
        }
    }
}
