//! Appearance-independent candidate retrieval.
//!
//! The index remembers, for every landmark, the poses it was observed from
//! during mapping. A query returns each landmark observed from within the
//! given radius of the pose guess — a uniform spatial prior over previously
//! productive viewpoints, with no appearance information at all. Distance is
//! planar Euclidean on (x, y); heading is ignored and the boundary is
//! inclusive, which makes the result monotone in the radius.
//!
//! Entry poses are bucketed into a uniform grid so queries touch only nearby
//! cells. The grid is an accelerator: its result is checked against a
//! linear scan of the entries in tests.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::world::{LandmarkId, Pose2};

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("query radius must be non-negative, got {0}")]
    NegativeRadius(f64),
}

/// Immutable after build; safe for unrestricted concurrent queries.
#[derive(Debug, Clone)]
pub struct ObservedFromIndex {
    entries: HashMap<LandmarkId, Vec<Pose2>>,
    /// cell coordinates -> (landmark, entry pose) pairs in that cell
    grid: HashMap<(i64, i64), Vec<(LandmarkId, [f64; 2])>>,
    cell_size: f64,
}

impl ObservedFromIndex {
    /// Build from per-pose mapping observations. `radius_hint` sets the grid
    /// cell size and should be close to the radius later used for queries;
    /// correctness does not depend on it.
    pub fn build(
        observations: &[(Pose2, BTreeSet<LandmarkId>)],
        radius_hint: f64,
    ) -> ObservedFromIndex {
        let cell_size = if radius_hint.is_finite() && radius_hint > 0.0 {
            radius_hint
        } else {
            1.0
        };
        let mut entries: HashMap<LandmarkId, Vec<Pose2>> = HashMap::new();
        let mut grid: HashMap<(i64, i64), Vec<(LandmarkId, [f64; 2])>> = HashMap::new();
        for (pose, observed) in observations {
            for &l in observed {
                entries.entry(l).or_default().push(*pose);
                grid.entry(cell_of(pose.x, pose.y, cell_size))
                    .or_default()
                    .push((l, [pose.x, pose.y]));
            }
        }
        ObservedFromIndex { entries, grid, cell_size }
    }

    pub fn entry_poses(&self, l: LandmarkId) -> Option<&[Pose2]> {
        self.entries.get(&l).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The candidate set: landmarks observed from within `radius` of the
    /// guess (inclusive boundary, heading ignored).
    pub fn candidates(
        &self,
        pose_guess: &Pose2,
        radius: f64,
    ) -> Result<BTreeSet<LandmarkId>, SpatialError> {
        if radius < 0.0 || radius.is_nan() {
            return Err(SpatialError::NegativeRadius(radius));
        }
        let mut result = BTreeSet::new();
        let (cx0, cy0) = cell_of(pose_guess.x - radius, pose_guess.y - radius, self.cell_size);
        let (cx1, cy1) = cell_of(pose_guess.x + radius, pose_guess.y + radius, self.cell_size);
        let r2 = radius * radius;
        for cx in cx0..=cx1 {
            for cy in cy0..=cy1 {
                let Some(bucket) = self.grid.get(&(cx, cy)) else { continue };
                for (l, p) in bucket {
                    if result.contains(l) {
                        continue;
                    }
                    let dx = p[0] - pose_guess.x;
                    let dy = p[1] - pose_guess.y;
                    if dx * dx + dy * dy <= r2 {
                        result.insert(*l);
                    }
                }
            }
        }
        Ok(result)
    }

    /// Reference implementation: walk every entry of every landmark.
    pub fn candidates_linear(
        &self,
        pose_guess: &Pose2,
        radius: f64,
    ) -> Result<BTreeSet<LandmarkId>, SpatialError> {
        if radius < 0.0 || radius.is_nan() {
            return Err(SpatialError::NegativeRadius(radius));
        }
        let mut result = BTreeSet::new();
        for (l, poses) in &self.entries {
            if poses.iter().any(|p| p.distance_xy(pose_guess) <= radius) {
                result.insert(*l);
            }
        }
        Ok(result)
    }
}

fn cell_of(x: f64, y: f64, cell_size: f64) -> (i64, i64) {
    ((x / cell_size).floor() as i64, (y / cell_size).floor() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(x: f64, y: f64) -> Pose2 {
        Pose2::new(x, y, 0.0)
    }

    fn obs(items: &[(f64, f64, &[u64])]) -> Vec<(Pose2, BTreeSet<LandmarkId>)> {
        items
            .iter()
            .map(|(x, y, ids)| (pose(*x, *y), ids.iter().map(|&i| LandmarkId(i)).collect()))
            .collect()
    }

    #[test]
    fn single_pair_builds_single_entry() {
        let index = ObservedFromIndex::build(&obs(&[(1.0, 2.0, &[7])]), 5.0);
        assert_eq!(index.entry_poses(LandmarkId(7)).unwrap().len(), 1);
        assert_eq!(index.len(), 1);
    }

    #[test]
    fn landmark_observed_from_three_poses_has_three_entries() {
        let index = ObservedFromIndex::build(
            &obs(&[(0.0, 0.0, &[7]), (1.0, 0.0, &[7]), (2.0, 0.0, &[7])]),
            5.0,
        );
        assert_eq!(index.entry_poses(LandmarkId(7)).unwrap().len(), 3);
    }

    #[test]
    fn zero_radius_boundary_is_inclusive() {
        let index = ObservedFromIndex::build(&obs(&[(3.0, 4.0, &[1])]), 5.0);
        let c = index.candidates(&pose(3.0, 4.0), 0.0).unwrap();
        assert_eq!(c, BTreeSet::from([LandmarkId(1)]));
    }

    #[test]
    fn radius_below_nearest_entry_yields_empty() {
        let index = ObservedFromIndex::build(&obs(&[(10.0, 0.0, &[1])]), 5.0);
        assert!(index.candidates(&pose(0.0, 0.0), 9.99).unwrap().is_empty());
    }

    #[test]
    fn negative_radius_rejected() {
        let index = ObservedFromIndex::build(&obs(&[(0.0, 0.0, &[1])]), 5.0);
        assert!(matches!(
            index.candidates(&pose(0.0, 0.0), -1.0),
            Err(SpatialError::NegativeRadius(_))
        ));
    }

    #[test]
    fn grid_matches_linear_scan_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let observations: Vec<(Pose2, BTreeSet<LandmarkId>)> = (0..400)
            .map(|_| {
                let p = pose(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
                let ids: BTreeSet<LandmarkId> = (0..rng.random_range(1..6))
                    .map(|_| LandmarkId(rng.random_range(0..1000)))
                    .collect();
                (p, ids)
            })
            .collect();
        let index = ObservedFromIndex::build(&observations, 15.0);
        for _ in 0..100 {
            let q = pose(rng.random_range(-120.0..120.0), rng.random_range(-120.0..120.0));
            let r = rng.random_range(0.0..40.0);
            assert_eq!(
                index.candidates(&q, r).unwrap(),
                index.candidates_linear(&q, r).unwrap()
            );
        }
        // Radius 15 specifically, per the documented regime.
        let q = pose(3.0, -8.0);
        assert_eq!(
            index.candidates(&q, 15.0).unwrap(),
            index.candidates_linear(&q, 15.0).unwrap()
        );
    }

    proptest! {
        #[test]
        fn prop_grid_equals_linear_and_monotone_in_radius(
            points in proptest::collection::vec(
                ((-50.0f64..50.0), (-50.0f64..50.0), 0u64..50),
                1..60
            ),
            qx in -60.0f64..60.0,
            qy in -60.0f64..60.0,
            r1 in 0.0f64..40.0,
            r2 in 0.0f64..40.0,
        ) {
            let observations: Vec<(Pose2, BTreeSet<LandmarkId>)> = points
                .iter()
                .map(|(x, y, id)| (pose(*x, *y), BTreeSet::from([LandmarkId(*id)])))
                .collect();
            let index = ObservedFromIndex::build(&observations, 10.0);
            let q = pose(qx, qy);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let at_lo = index.candidates(&q, lo).unwrap();
            let at_hi = index.candidates(&q, hi).unwrap();
            prop_assert!(at_lo.is_subset(&at_hi));
            prop_assert_eq!(&at_lo, &index.candidates_linear(&q, lo).unwrap());
            prop_assert_eq!(&at_hi, &index.candidates_linear(&q, hi).unwrap());
        }
    }
}
