//! The iterative localization loop and the planar pose estimator.
//!
//! Each step propagates the previous visual estimate through a noisy
//! odometry increment, retrieves and selects landmarks around the guess,
//! observes the world through the selection gate, and refines the pose from
//! the observed correspondences. The transform between the odometry guess
//! and the visual estimate is the drift correction whose RMS magnitude is
//! the accuracy proxy reported by the experiments.
//!
//! The estimator is the closed-form 2D rigid least-squares alignment
//! (centroid subtraction plus an atan2 over cross/dot accumulators), which
//! is exactly optimal for the isotropic Gaussian measurement model used by
//! the simulation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::coobs::{CoObservabilityStore, RecentObservations, Score};
use crate::rng::{stream_rng, STREAM_MEASUREMENT, STREAM_OBSERVATION, STREAM_ODOMETRY};
use crate::select::{SelectionKind, SelectionPolicy, Selector};
use crate::spatial::{ObservedFromIndex, SpatialError};
use crate::world::{angle_difference, ConditionId, LandmarkId, Pose2, World, WorldError};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("pose estimation needs at least two non-coincident correspondences")]
    DegenerateGeometry,
    #[error("metric undefined over an empty step list")]
    EmptyMetric,
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("selection resolution failed at step {step}: {reason}")]
    Resolve { step: usize, reason: String },
}

/// One landmark correspondence: the mapped world position and the noisy
/// body-frame measurement of the same point.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub world: [f64; 2],
    pub body: [f64; 2],
}

/// Closed-form planar rigid alignment minimizing
/// `sum ||R(theta) * body_i + t - world_i||^2`.
///
/// Correspondences are accumulated in a canonical sorted order so the result
/// is bit-for-bit invariant under permutation of the input.
pub fn estimate_pose(correspondences: &[Correspondence]) -> Result<Pose2, LocalizeError> {
    if correspondences.len() < 2 {
        return Err(LocalizeError::DegenerateGeometry);
    }
    let mut sorted: Vec<Correspondence> = correspondences.to_vec();
    sorted.sort_by(|a, b| {
        a.world[0]
            .total_cmp(&b.world[0])
            .then(a.world[1].total_cmp(&b.world[1]))
            .then(a.body[0].total_cmp(&b.body[0]))
            .then(a.body[1].total_cmp(&b.body[1]))
    });

    let all_equal = |pick: fn(&Correspondence) -> [f64; 2]| {
        let first = pick(&sorted[0]);
        sorted.iter().all(|c| pick(c) == first)
    };
    if all_equal(|c| c.body) || all_equal(|c| c.world) {
        return Err(LocalizeError::DegenerateGeometry);
    }

    let n = sorted.len() as f64;
    let mut wc = [0.0f64; 2];
    let mut bc = [0.0f64; 2];
    for c in &sorted {
        wc[0] += c.world[0];
        wc[1] += c.world[1];
        bc[0] += c.body[0];
        bc[1] += c.body[1];
    }
    wc[0] /= n;
    wc[1] /= n;
    bc[0] /= n;
    bc[1] /= n;

    let mut dot = 0.0f64;
    let mut cross = 0.0f64;
    for c in &sorted {
        let bw = [c.body[0] - bc[0], c.body[1] - bc[1]];
        let ww = [c.world[0] - wc[0], c.world[1] - wc[1]];
        dot += bw[0] * ww[0] + bw[1] * ww[1];
        cross += bw[0] * ww[1] - bw[1] * ww[0];
    }
    let theta = cross.atan2(dot);
    let (s, c) = theta.sin_cos();
    let tx = wc[0] - (c * bc[0] - s * bc[1]);
    let ty = wc[1] - (s * bc[0] + c * bc[1]);
    Ok(Pose2::new(tx, ty, theta))
}

/// Additive noise on the per-step odometry increment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OdometryModel {
    /// Std-dev of the translation noise per step, meters.
    pub noise_trans: f64,
    /// Std-dev of the rotation noise per step, radians.
    pub noise_rot: f64,
    pub seed: u64,
}

pub const FLAG_EMPTY_OBSERVATION: u8 = 1;
pub const FLAG_FALLBACK_ESTIMATE: u8 = 2;
pub const FLAG_RESOLVE_ERROR: u8 = 4;

/// Everything the pipeline produced at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub k: usize,
    /// Odometry-propagated guess.
    pub pose_guess: Pose2,
    /// Refined visual estimate (equals the guess on fallback steps).
    pub pose_estimate: Pose2,
    pub n_candidates: usize,
    /// Selected landmarks in selection order; observation is gated on this.
    pub selected: Vec<LandmarkId>,
    /// Landmarks actually observed this step; always a subset of `selected`.
    pub observed: BTreeSet<LandmarkId>,
    /// Norm of the translation part of the drift correction, meters.
    pub correction_t: f64,
    /// Absolute rotation part of the drift correction, radians.
    pub correction_r: f64,
    pub flags: u8,
}

pub const STEP_CSV_HEADER: &str = "k,guess_x,guess_y,guess_theta,est_x,est_y,est_theta,\
n_candidates,n_selected,n_observed,correction_t,correction_r,flags";

impl StepResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.pose_guess.x,
            self.pose_guess.y,
            self.pose_guess.theta,
            self.pose_estimate.x,
            self.pose_estimate.y,
            self.pose_estimate.theta,
            self.n_candidates,
            self.selected.len(),
            self.observed.len(),
            self.correction_t,
            self.correction_r,
            self.flags
        )
    }
}

/// Union of observed landmarks over a whole traversal — the payload of its
/// co-observability record.
pub fn observed_union(steps: &[StepResult]) -> BTreeSet<LandmarkId> {
    steps.iter().flat_map(|s| s.observed.iter().copied()).collect()
}

/// Root-mean-square drift correction over a traversal.
pub fn rms_errors(steps: &[StepResult]) -> Result<(f64, f64), LocalizeError> {
    if steps.is_empty() {
        return Err(LocalizeError::EmptyMetric);
    }
    let n = steps.len() as f64;
    let t = steps.iter().map(|s| s.correction_t * s.correction_t).sum::<f64>() / n;
    let r = steps.iter().map(|s| s.correction_r * s.correction_r).sum::<f64>() / n;
    Ok((t.sqrt(), r.sqrt()))
}

/// Per-traversal pipeline configuration.
#[derive(Debug, Clone)]
pub struct TraversalParams {
    pub condition: ConditionId,
    pub policy: SelectionPolicy,
    /// Candidate retrieval radius around the pose guess, meters.
    pub radius: f64,
    /// Seeds the observation and measurement streams of this traversal.
    pub seed: u64,
    pub odometry: OdometryModel,
    /// Std-dev of the body-frame measurement noise, meters.
    pub meas_sigma: f64,
    /// Perturbation of the known start pose (translation / rotation).
    pub bootstrap_trans: f64,
    pub bootstrap_rot: f64,
    /// How many previous steps feed the recent-observation set.
    pub recent_window: usize,
}

/// What the selection side (local or remote) answered for one step.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub n_candidates: usize,
    /// Selected landmarks in selection order, with their world positions.
    pub selected: Vec<(LandmarkId, [f64; 2])>,
    pub truncated: bool,
}

/// One normal variate via Box-Muller; always consumes exactly two uniforms
/// so paired runs stay stream-aligned.
fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    sigma * (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Drive the full iterative loop, resolving each step's selection through
/// `resolve` — locally against a store and index, or remotely through a map
/// server connection. A resolution error does not abort the traversal: the
/// step coasts on odometry and is flagged.
pub fn run_traversal_with<F>(
    world: &World,
    params: &TraversalParams,
    mut resolve: F,
) -> Result<Vec<StepResult>, LocalizeError>
where
    F: FnMut(usize, &Pose2, &RecentObservations) -> Result<SelectionOutcome, LocalizeError>,
{
    if world.trajectory.is_empty() {
        return Err(LocalizeError::EmptyMetric);
    }
    if world.condition(params.condition).is_none() {
        return Err(WorldError::UnknownCondition(params.condition).into());
    }

    let mut obs_rng = stream_rng(params.seed, STREAM_OBSERVATION);
    let mut meas_rng = stream_rng(params.seed, STREAM_MEASUREMENT);
    let mut odo_rng = stream_rng(params.odometry.seed, STREAM_ODOMETRY);

    let mut steps: Vec<StepResult> = Vec::with_capacity(world.trajectory.len());
    let mut recent_window: Vec<BTreeSet<LandmarkId>> = Vec::new();
    let mut prev_estimate = Pose2::new(0.0, 0.0, 0.0);

    for (k, true_pose) in world.trajectory.iter().enumerate() {
        let pose_guess = if k == 0 {
            let dx = gaussian(&mut odo_rng, params.bootstrap_trans);
            let dy = gaussian(&mut odo_rng, params.bootstrap_trans);
            let dtheta = gaussian(&mut odo_rng, params.bootstrap_rot);
            Pose2::new(true_pose.x + dx, true_pose.y + dy, true_pose.theta + dtheta)
        } else {
            let delta = world.trajectory[k - 1].between(true_pose);
            let noisy = Pose2::new(
                delta.x + gaussian(&mut odo_rng, params.odometry.noise_trans),
                delta.y + gaussian(&mut odo_rng, params.odometry.noise_trans),
                delta.theta + gaussian(&mut odo_rng, params.odometry.noise_rot),
            );
            prev_estimate.compose(&noisy)
        };

        let recent = RecentObservations::new(
            recent_window.iter().flat_map(|s| s.iter().copied()).collect(),
        );

        let mut flags = 0u8;
        let outcome = match resolve(k, &pose_guess, &recent) {
            Ok(outcome) => outcome,
            Err(_) => {
                flags |= FLAG_RESOLVE_ERROR;
                SelectionOutcome { n_candidates: 0, selected: Vec::new(), truncated: false }
            }
        };

        // The observation draw covers every in-range landmark regardless of
        // the selection, so paired runs with different policies consume the
        // stream identically; the selection then gates what survives.
        let observed_full = world.observe(true_pose, params.condition, &mut obs_rng)?;
        let selected_ids: BTreeSet<LandmarkId> =
            outcome.selected.iter().map(|(l, _)| *l).collect();
        let observed: BTreeSet<LandmarkId> =
            observed_full.intersection(&selected_ids).copied().collect();

        let positions: HashMap<LandmarkId, [f64; 2]> = outcome.selected.iter().copied().collect();
        let mut correspondences = Vec::with_capacity(observed.len());
        for &id in &observed {
            let wpos = positions[&id];
            let body = true_pose.world_to_body(wpos);
            correspondences.push(Correspondence {
                world: wpos,
                body: [
                    body[0] + gaussian(&mut meas_rng, params.meas_sigma),
                    body[1] + gaussian(&mut meas_rng, params.meas_sigma),
                ],
            });
        }

        if observed.is_empty() {
            flags |= FLAG_EMPTY_OBSERVATION;
        }
        let pose_estimate = match estimate_pose(&correspondences) {
            Ok(pose) => pose,
            Err(LocalizeError::DegenerateGeometry) => {
                flags |= FLAG_FALLBACK_ESTIMATE;
                pose_guess
            }
            Err(other) => return Err(other),
        };

        let correction_t = pose_estimate.distance_xy(&pose_guess);
        let correction_r = angle_difference(pose_estimate.theta, pose_guess.theta);

        recent_window.push(observed.clone());
        let window = params.recent_window.max(1);
        while recent_window.len() > window {
            recent_window.remove(0);
        }
        prev_estimate = pose_estimate;

        steps.push(StepResult {
            k,
            pose_guess,
            pose_estimate,
            n_candidates: outcome.n_candidates,
            selected: outcome.selected.iter().map(|(l, _)| *l).collect(),
            observed,
            correction_t,
            correction_r,
            flags,
        });
    }
    Ok(steps)
}

/// In-process traversal: candidates from the index, ranking from the store,
/// selection by the policy. This is the serverless twin of the networked
/// pipeline and must stay step-for-step equivalent to it.
pub fn run_traversal(
    world: &World,
    store: &CoObservabilityStore,
    index: &ObservedFromIndex,
    params: &TraversalParams,
) -> Result<Vec<StepResult>, LocalizeError> {
    let positions: HashMap<LandmarkId, [f64; 2]> =
        world.landmarks.iter().map(|l| (l.id, l.position)).collect();
    let mut selector = Selector::new(params.policy);
    let radius = params.radius;
    let kind = params.policy.kind;
    run_traversal_with(world, params, move |_k, guess, recent| {
        let candidates = index.candidates(guess, radius)?;
        // Scoring only matters for the ranked policy; random shuffles and
        // select-all keeps everything, both from the ascending-id order.
        let ranked: Vec<(LandmarkId, Score)> = match kind {
            SelectionKind::Ranked => store.rank(&candidates, recent),
            SelectionKind::Random | SelectionKind::All => {
                candidates.iter().map(|&l| (l, Score::ZERO)).collect()
            }
        };
        let picked = selector.select(&ranked);
        debug_assert!(picked.iter().all(|l| candidates.contains(l)));
        let truncated = selector.truncated_by_cap(candidates.len(), picked.len());
        Ok(SelectionOutcome {
            n_candidates: candidates.len(),
            selected: picked.into_iter().map(|l| (l, positions[&l])).collect(),
            truncated,
        })
    })
}
