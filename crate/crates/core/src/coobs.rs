//! Localization history, co-observability statistics and the ranking
//! function.
//!
//! A landmark counts as observed in a traversal if it was observed at least
//! once anywhere along it, so the store only keeps per-traversal observed
//! sets plus an inverted index landmark -> traversals for scoring. The score
//! of a candidate `l` against the recently observed set `V` is
//!
//! ```text
//!     score(l) = (1 / |Z'|) * sum over z in Z' of |V ∩ observed(z)|
//! ```
//!
//! where `Z'` are the traversals that observed `l`. The constant `|V|`
//! normalizer is dropped since it is shared by every candidate and cannot
//! change the ranking. Scores are kept as exact integer pairs and compared
//! as rationals so that the id tie-break is unambiguous.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{ConditionId, LandmarkId, TraversalId};

#[derive(Debug, Error)]
pub enum CoobsError {
    #[error("traversal {0} already recorded")]
    DuplicateTraversal(TraversalId),
    #[error("traversal {0} has an empty observed set")]
    EmptyTraversal(TraversalId),
    #[error("store text line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One element of the localization history: the set of landmarks a traversal
/// observed at least once. The condition tag is simulator bookkeeping and is
/// never read by scoring (and not persisted by the text format).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalRecord {
    pub traversal_id: TraversalId,
    pub observed: BTreeSet<LandmarkId>,
    pub condition_tag: Option<ConditionId>,
}

/// Recently observed landmark ids (the appearance cue). May be empty and may
/// contain appearance-outliers; the ranking is built to tolerate both.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecentObservations {
    pub ids: BTreeSet<LandmarkId>,
}

impl RecentObservations {
    pub fn new(ids: BTreeSet<LandmarkId>) -> Self {
        RecentObservations { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl FromIterator<LandmarkId> for RecentObservations {
    fn from_iter<T: IntoIterator<Item = LandmarkId>>(iter: T) -> Self {
        RecentObservations { ids: iter.into_iter().collect() }
    }
}

/// Exact ranking score: `votes / traversals`, with the empty-history case
/// pinned to zero. Ordering is rational comparison by cross-multiplication,
/// so `0/5` and `0/1` compare equal and never depend on float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    /// Sum over the candidate's traversals of `|V ∩ observed(z)|`.
    pub votes: u64,
    /// `|Z'|`: how many traversals observed the candidate.
    pub traversals: u64,
}

impl Score {
    pub const ZERO: Score = Score { votes: 0, traversals: 0 };

    fn as_ratio(&self) -> (u128, u128) {
        if self.traversals == 0 {
            (0, 1)
        } else {
            (self.votes as u128, self.traversals as u128)
        }
    }

    pub fn to_f64(&self) -> f64 {
        let (n, d) = self.as_ratio();
        n as f64 / d as f64
    }
}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let (an, ad) = self.as_ratio();
        let (bn, bd) = other.as_ratio();
        (an * bd).cmp(&(bn * ad))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.votes, self.traversals)
    }
}

/// The localization history `Z` with its inverted index.
///
/// Reads (`score`, `rank`) take `&self` and may run concurrently; writes go
/// through `record_traversal` on `&mut self` (callers serialize writers, e.g.
/// behind an `RwLock`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoObservabilityStore {
    by_landmark: BTreeMap<LandmarkId, BTreeSet<TraversalId>>,
    traversals: BTreeMap<TraversalId, TraversalRecord>,
}

impl CoObservabilityStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.traversals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traversals.is_empty()
    }

    pub fn traversal(&self, id: TraversalId) -> Option<&TraversalRecord> {
        self.traversals.get(&id)
    }

    pub fn traversals(&self) -> impl Iterator<Item = &TraversalRecord> {
        self.traversals.values()
    }

    /// Traversals that observed `l` (the candidate's `Z'`).
    pub fn observed_in(&self, l: LandmarkId) -> Option<&BTreeSet<TraversalId>> {
        self.by_landmark.get(&l)
    }

    /// Every landmark id that appears in at least one record.
    pub fn known_landmarks(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.by_landmark.keys().copied()
    }

    pub fn record_traversal(&mut self, rec: TraversalRecord) -> Result<(), CoobsError> {
        if self.traversals.contains_key(&rec.traversal_id) {
            return Err(CoobsError::DuplicateTraversal(rec.traversal_id));
        }
        if rec.observed.is_empty() {
            return Err(CoobsError::EmptyTraversal(rec.traversal_id));
        }
        for &l in &rec.observed {
            self.by_landmark.entry(l).or_default().insert(rec.traversal_id);
        }
        self.traversals.insert(rec.traversal_id, rec);
        Ok(())
    }

    /// Ranking score of one candidate against the recent observations.
    ///
    /// Total over all inputs: a candidate with no history scores zero.
    pub fn score(&self, candidate: LandmarkId, recent: &RecentObservations) -> Score {
        let Some(zs) = self.by_landmark.get(&candidate) else {
            return Score::ZERO;
        };
        let mut votes = 0u64;
        for z in zs {
            let observed = &self.traversals[z].observed;
            // Intersection size, walking the smaller set.
            if recent.ids.len() <= observed.len() {
                votes += recent.ids.iter().filter(|v| observed.contains(v)).count() as u64;
            } else {
                votes += observed.iter().filter(|o| recent.ids.contains(o)).count() as u64;
            }
        }
        Score { votes, traversals: zs.len() as u64 }
    }

    /// Rank candidates descending by score, ties broken by ascending id.
    /// The output is a permutation of `candidates`.
    pub fn rank(
        &self,
        candidates: &BTreeSet<LandmarkId>,
        recent: &RecentObservations,
    ) -> Vec<(LandmarkId, Score)> {
        let mut ranked: Vec<(LandmarkId, Score)> = candidates
            .iter()
            .map(|&l| (l, self.score(l, recent)))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    /// Rebuild the inverted index from the records; used to check index
    /// consistency.
    pub fn rebuilt_index(&self) -> BTreeMap<LandmarkId, BTreeSet<TraversalId>> {
        let mut index: BTreeMap<LandmarkId, BTreeSet<TraversalId>> = BTreeMap::new();
        for rec in self.traversals.values() {
            for &l in &rec.observed {
                index.entry(l).or_default().insert(rec.traversal_id);
            }
        }
        index
    }

    pub fn index_consistent(&self) -> bool {
        self.by_landmark == self.rebuilt_index()
    }

    /// Canonical line-oriented text form: one line per traversal,
    /// `traversal_id: id id id ...`, traversals ascending, ids ascending.
    /// Writing then parsing then writing again is byte-identical.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for rec in self.traversals.values() {
            out.push_str(&rec.traversal_id.to_string());
            out.push(':');
            for id in &rec.observed {
                out.push(' ');
                out.push_str(&id.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parse the text form. Id order within a line is not required; the
    /// canonical writer always sorts.
    pub fn from_text(text: &str) -> Result<Self, CoobsError> {
        let mut store = CoObservabilityStore::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (tid_text, ids_text) = line.split_once(':').ok_or(CoobsError::Parse {
                line: line_no,
                reason: "missing ':' separator".into(),
            })?;
            let traversal_id = TraversalId(tid_text.trim().parse().map_err(|_| {
                CoobsError::Parse { line: line_no, reason: format!("bad traversal id {tid_text:?}") }
            })?);
            let mut observed = BTreeSet::new();
            for token in ids_text.split_whitespace() {
                let id = LandmarkId(token.parse().map_err(|_| CoobsError::Parse {
                    line: line_no,
                    reason: format!("bad landmark id {token:?}"),
                })?);
                observed.insert(id);
            }
            store
                .record_traversal(TraversalRecord { traversal_id, observed, condition_tag: None })
                .map_err(|e| CoobsError::Parse { line: line_no, reason: e.to_string() })?;
        }
        Ok(store)
    }
}
