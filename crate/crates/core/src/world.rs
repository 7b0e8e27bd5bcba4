//! Synthetic multi-condition worlds and the stochastic observation model.
//!
//! A [`World`] holds landmarks with hidden per-condition observability
//! parameters, the appearance conditions themselves, and the closed loop the
//! vehicle drives on every traversal. [`World::observe`] stands in for the
//! whole camera/matching pipeline: a landmark is observed iff it lies within
//! sensor range of the true pose and an independent Bernoulli draw with its
//! condition affinity succeeds. The affinity map is simulation-only state;
//! nothing on the ranking or serving path ever reads it.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Snapshot schema version written by [`World::to_snapshot_json`].
pub const WORLD_SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("unknown appearance condition {0}")]
    UnknownCondition(ConditionId),
    #[error("world snapshot version {found} unsupported (expected {expected})")]
    SnapshotVersion { found: u32, expected: u32 },
    #[error("malformed world snapshot: {0}")]
    Snapshot(#[from] serde_json::Error),
}

/// Unique landmark identifier.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct LandmarkId(pub u64);

impl fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Unique traversal identifier within a co-observability store.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TraversalId(pub u64);

impl fmt::Display for TraversalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Appearance condition identifier (latent; visible to the simulator only).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct ConditionId(pub u16);

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A planar pose: position in meters, heading normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// Euclidean distance between the positions, ignoring heading.
    pub fn distance_xy(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Compose with a body-frame delta: `self ⊕ delta`.
    pub fn compose(&self, delta: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            self.theta + delta.theta,
        )
    }

    /// Relative transform taking `self` to `other`: `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Map a world-frame point into this pose's body frame.
    pub fn world_to_body(&self, point: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let dx = point[0] - self.x;
        let dy = point[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Normalize an angle to `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

/// Absolute smallest rotation between two headings.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// A mapped landmark: world position, opaque descriptor payload, and the
/// hidden per-condition observation probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: LandmarkId,
    pub position: [f64; 2],
    #[serde(with = "hex_bytes")]
    pub descriptor: Vec<u8>,
    /// Observation probability per condition; missing key means probability 0.
    /// Simulation-only: never exposed to the ranking or serving path.
    pub affinity: BTreeMap<ConditionId, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppearanceCondition {
    pub id: ConditionId,
    pub label: String,
}

/// Immutable after generation; safe to share across concurrent readers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub landmarks: Vec<Landmark>,
    pub conditions: Vec<AppearanceCondition>,
    /// The loop driven on every traversal.
    pub trajectory: Vec<Pose2>,
    pub sensor_range: f64,
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct WorldSnapshot {
    version: u32,
    world: World,
}

impl World {
    pub fn condition(&self, id: ConditionId) -> Option<&AppearanceCondition> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&Landmark> {
        // Generation emits landmarks with ids 0..n in order; fall back to a
        // scan for hand-built worlds.
        match self.landmarks.get(id.0 as usize) {
            Some(l) if l.id == id => Some(l),
            _ => self.landmarks.iter().find(|l| l.id == id),
        }
    }

    /// Landmark ids within sensor range of `pose`, before any appearance
    /// draw. The observation result is always a subset of this.
    pub fn in_range(&self, pose: &Pose2) -> BTreeSet<LandmarkId> {
        self.landmarks
            .iter()
            .filter(|l| distance_to(pose, l.position) <= self.sensor_range)
            .map(|l| l.id)
            .collect()
    }

    /// Stochastic observation at `pose` under `condition`.
    ///
    /// Draws one uniform variate per in-range landmark, in landmark order,
    /// whether or not its affinity is zero — the draw protocol is part of the
    /// reproducibility contract (paired runs must consume the stream
    /// identically). A landmark is observed iff `u < affinity[condition]`.
    pub fn observe(
        &self,
        pose: &Pose2,
        condition: ConditionId,
        rng: &mut ChaCha8Rng,
    ) -> Result<BTreeSet<LandmarkId>, WorldError> {
        if self.condition(condition).is_none() {
            return Err(WorldError::UnknownCondition(condition));
        }
        let mut observed = BTreeSet::new();
        for l in &self.landmarks {
            if distance_to(pose, l.position) > self.sensor_range {
                continue;
            }
            let u: f64 = rng.random();
            let p = l.affinity.get(&condition).copied().unwrap_or(0.0);
            if u < p {
                observed.insert(l.id);
            }
        }
        Ok(observed)
    }

    /// Per-trajectory-pose geometric visibility: every landmark in sensor
    /// range, with no appearance draw. This is the synthesized analog of the
    /// observed-from data a mapping pipeline would produce, and seeds the
    /// candidate index for the first mapping session.
    pub fn visibility_observations(&self) -> Vec<(Pose2, BTreeSet<LandmarkId>)> {
        self.trajectory
            .iter()
            .map(|pose| (*pose, self.in_range(pose)))
            .collect()
    }

    /// Versioned JSON snapshot; byte-identical for identical worlds.
    pub fn to_snapshot_json(&self) -> String {
        let snap = WorldSnapshot {
            version: WORLD_SNAPSHOT_VERSION,
            world: self.clone(),
        };
        serde_json::to_string(&snap).expect("world serializes")
    }

    pub fn from_snapshot_json(text: &str) -> Result<World, WorldError> {
        let snap: WorldSnapshot = serde_json::from_str(text)?;
        if snap.version != WORLD_SNAPSHOT_VERSION {
            return Err(WorldError::SnapshotVersion {
                found: snap.version,
                expected: WORLD_SNAPSHOT_VERSION,
            });
        }
        Ok(snap.world)
    }
}

fn distance_to(pose: &Pose2, point: [f64; 2]) -> f64 {
    (pose.x - point[0]).hypot(pose.y - point[1])
}

/// Where generated landmarks are scattered.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScatterSpec {
    /// Uniform over the centered square `[-half_extent, half_extent]²`.
    Box { half_extent: f64 },
    /// Uniform by area over the annulus `inner <= r <= outer`.
    Ring { inner: f64, outer: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Closed circular loop of `steps` poses, headings tangent to the circle.
    Circle { radius: f64, steps: usize },
    /// Straight segment from `start` to `end` in `steps` poses.
    Line { start: [f64; 2], end: [f64; 2], steps: usize },
}

/// Per-condition slice of the affinity profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub label: String,
    /// Fraction of all landmarks exclusive to this condition.
    pub exclusive_fraction: f64,
    /// Observation probability of those exclusive landmarks.
    pub observe_prob: f64,
}

/// Landmarks observable under every condition.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SharedSpec {
    pub fraction: f64,
    pub observe_prob: f64,
}

fn default_descriptor_len() -> usize {
    64
}

/// Declarative description of a synthetic world (TOML-friendly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub landmarks: usize,
    #[serde(default = "default_descriptor_len")]
    pub descriptor_len: usize,
    pub sensor_range: f64,
    pub seed: u64,
    pub scatter: ScatterSpec,
    pub trajectory: TrajectorySpec,
    pub conditions: Vec<ConditionSpec>,
    #[serde(default)]
    pub shared: SharedSpec,
}

impl WorldSpec {
    pub fn from_toml(text: &str) -> Result<WorldSpec, WorldError> {
        toml::from_str(text).map_err(|e| WorldError::InvalidSpec(e.to_string()))
    }

    fn validate(&self) -> Result<(), WorldError> {
        if self.landmarks == 0 {
            return Err(WorldError::InvalidSpec("landmark count must be >= 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(WorldError::InvalidSpec("at least one condition required".into()));
        }
        if !(self.sensor_range > 0.0) {
            return Err(WorldError::InvalidSpec("sensor_range must be > 0".into()));
        }
        let mut total = self.shared.fraction;
        for (i, c) in self.conditions.iter().enumerate() {
            if c.exclusive_fraction < 0.0 {
                return Err(WorldError::InvalidSpec(format!(
                    "condition {i}: negative exclusive_fraction"
                )));
            }
            if !(0.0..=1.0).contains(&c.observe_prob) {
                return Err(WorldError::InvalidSpec(format!(
                    "condition {i}: observe_prob outside [0, 1]"
                )));
            }
            total += c.exclusive_fraction;
        }
        if self.shared.fraction < 0.0 {
            return Err(WorldError::InvalidSpec("negative shared fraction".into()));
        }
        if !(0.0..=1.0).contains(&self.shared.observe_prob) && self.shared.fraction > 0.0 {
            return Err(WorldError::InvalidSpec("shared observe_prob outside [0, 1]".into()));
        }
        if total > 1.0 + 1e-9 {
            return Err(WorldError::InvalidSpec(format!(
                "affinity fractions sum to {total}, above 1"
            )));
        }
        let steps = match &self.trajectory {
            TrajectorySpec::Circle { steps, .. } => *steps,
            TrajectorySpec::Line { steps, .. } => *steps,
        };
        if steps == 0 {
            return Err(WorldError::InvalidSpec("trajectory must be non-empty".into()));
        }
        Ok(())
    }
}

/// Generate a world deterministically from its spec.
///
/// Landmark ids are assigned `0..n` and affinities partitioned in id order:
/// one exclusive block per condition, then the shared block, then any
/// remainder is left unobservable. Block sizes are rounded per fraction, so
/// counts land within one landmark of the requested split.
pub fn generate_world(spec: &WorldSpec) -> Result<World, WorldError> {
    spec.validate()?;
    let mut rng = crate::rng::stream_rng(spec.seed, crate::rng::STREAM_OBSERVATION);

    let n = spec.landmarks;
    let mut block_sizes: Vec<usize> = spec
        .conditions
        .iter()
        .map(|c| (c.exclusive_fraction * n as f64).round() as usize)
        .collect();
    block_sizes.push((spec.shared.fraction * n as f64).round() as usize);
    // Rounding may overshoot n by a landmark or two; trim from the end.
    let mut assigned: usize = block_sizes.iter().sum();
    for size in block_sizes.iter_mut().rev() {
        if assigned <= n {
            break;
        }
        let cut = (assigned - n).min(*size);
        *size -= cut;
        assigned -= cut;
    }

    let conditions: Vec<AppearanceCondition> = spec
        .conditions
        .iter()
        .enumerate()
        .map(|(i, c)| AppearanceCondition {
            id: ConditionId(i as u16),
            label: c.label.clone(),
        })
        .collect();

    let mut landmarks = Vec::with_capacity(n);
    for i in 0..n {
        let position = match spec.scatter {
            ScatterSpec::Box { half_extent } => [
                rng.random_range(-half_extent..=half_extent),
                rng.random_range(-half_extent..=half_extent),
            ],
            ScatterSpec::Ring { inner, outer } => {
                let u: f64 = rng.random();
                let r = (inner * inner + u * (outer * outer - inner * inner)).sqrt();
                let phi = rng.random_range(0.0..TAU);
                [r * phi.cos(), r * phi.sin()]
            }
        };
        let mut descriptor = vec![0u8; spec.descriptor_len];
        rng.fill(descriptor.as_mut_slice());

        let mut affinity = BTreeMap::new();
        let mut offset = 0usize;
        for (c, size) in block_sizes[..spec.conditions.len()].iter().enumerate() {
            if i >= offset && i < offset + size {
                affinity.insert(ConditionId(c as u16), spec.conditions[c].observe_prob);
            }
            offset += size;
        }
        if i >= offset && i < offset + block_sizes[spec.conditions.len()] {
            for c in &conditions {
                affinity.insert(c.id, spec.shared.observe_prob);
            }
        }

        landmarks.push(Landmark {
            id: LandmarkId(i as u64),
            position,
            descriptor,
            affinity,
        });
    }

    let trajectory = match &spec.trajectory {
        TrajectorySpec::Circle { radius, steps } => (0..*steps)
            .map(|k| {
                let phi = TAU * k as f64 / *steps as f64;
                Pose2::new(radius * phi.cos(), radius * phi.sin(), phi + PI / 2.0)
            })
            .collect(),
        TrajectorySpec::Line { start, end, steps } => (0..*steps)
            .map(|k| {
                let t = if *steps == 1 { 0.0 } else { k as f64 / (*steps - 1) as f64 };
                let x = start[0] + t * (end[0] - start[0]);
                let y = start[1] + t * (end[1] - start[1]);
                Pose2::new(x, y, (end[1] - start[1]).atan2(end[0] - start[0]))
            })
            .collect(),
    };

    Ok(World {
        landmarks,
        conditions,
        trajectory,
        sensor_range: spec.sensor_range,
        rng_seed: spec.seed,
    })
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(de)?;
        hex::decode(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_OBSERVATION};

    fn two_condition_spec() -> WorldSpec {
        WorldSpec {
            landmarks: 2000,
            descriptor_len: 8,
            sensor_range: 10.0,
            seed: 7,
            scatter: ScatterSpec::Box { half_extent: 50.0 },
            trajectory: TrajectorySpec::Circle { radius: 30.0, steps: 12 },
            conditions: vec![
                ConditionSpec {
                    label: "day".into(),
                    exclusive_fraction: 0.8,
                    observe_prob: 0.9,
                },
                ConditionSpec {
                    label: "night".into(),
                    exclusive_fraction: 0.2,
                    observe_prob: 0.9,
                },
            ],
            shared: SharedSpec::default(),
        }
    }

    #[test]
    fn exclusive_partition_counts() {
        let world = generate_world(&two_condition_spec()).unwrap();
        let only_c0 = world
            .landmarks
            .iter()
            .filter(|l| l.affinity.len() == 1 && l.affinity.contains_key(&ConditionId(0)))
            .count();
        let only_c1 = world
            .landmarks
            .iter()
            .filter(|l| l.affinity.len() == 1 && l.affinity.contains_key(&ConditionId(1)))
            .count();
        assert_eq!(only_c0, 1600);
        assert_eq!(only_c1, 400);
    }

    #[test]
    fn single_landmark_single_condition() {
        let spec = WorldSpec {
            landmarks: 1,
            conditions: vec![ConditionSpec {
                label: "only".into(),
                exclusive_fraction: 1.0,
                observe_prob: 1.0,
            }],
            ..two_condition_spec()
        };
        let world = generate_world(&spec).unwrap();
        assert_eq!(world.landmarks[0].affinity.len(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&two_condition_spec()).unwrap();
        let b = generate_world(&two_condition_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_snapshot_json(), b.to_snapshot_json());
    }

    #[test]
    fn invalid_fractions_rejected() {
        let mut spec = two_condition_spec();
        spec.conditions[0].exclusive_fraction = 0.9;
        spec.conditions[1].exclusive_fraction = 0.3;
        assert!(matches!(generate_world(&spec), Err(WorldError::InvalidSpec(_))));
        let mut spec = two_condition_spec();
        spec.conditions[0].exclusive_fraction = -0.1;
        assert!(generate_world(&spec).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let world = generate_world(&two_condition_spec()).unwrap();
        let json = world.to_snapshot_json();
        let back = World::from_snapshot_json(&json).unwrap();
        assert_eq!(world, back);
    }

    #[test]
    fn observe_obeys_range_gate() {
        let world = World {
            landmarks: vec![Landmark {
                id: LandmarkId(0),
                position: [11.0, 0.0],
                descriptor: vec![],
                affinity: BTreeMap::from([(ConditionId(0), 1.0)]),
            }],
            conditions: vec![AppearanceCondition { id: ConditionId(0), label: "c".into() }],
            trajectory: vec![Pose2::new(0.0, 0.0, 0.0)],
            sensor_range: 10.0,
            rng_seed: 0,
        };
        let mut rng = stream_rng(1, STREAM_OBSERVATION);
        for _ in 0..100 {
            let obs = world
                .observe(&Pose2::new(0.0, 0.0, 0.0), ConditionId(0), &mut rng)
                .unwrap();
            assert!(obs.is_empty());
        }
    }

    #[test]
    fn observe_zero_affinity_is_empty() {
        let mut spec = two_condition_spec();
        spec.conditions[0].observe_prob = 0.0;
        spec.conditions[1].observe_prob = 0.0;
        let world = generate_world(&spec).unwrap();
        let mut rng = stream_rng(3, STREAM_OBSERVATION);
        let pose = world.trajectory[0];
        let obs = world.observe(&pose, ConditionId(0), &mut rng).unwrap();
        assert!(obs.is_empty());
    }

    #[test]
    fn observe_unknown_condition_errors() {
        let world = generate_world(&two_condition_spec()).unwrap();
        let mut rng = stream_rng(3, STREAM_OBSERVATION);
        let pose = world.trajectory[0];
        let err = world.observe(&pose, ConditionId(9), &mut rng);
        assert!(matches!(err, Err(WorldError::UnknownCondition(_))));
    }

    /// Independent reimplementation of the documented draw protocol.
    #[test]
    fn observe_matches_draw_loop_oracle() {
        let spec = WorldSpec {
            landmarks: 100,
            conditions: vec![ConditionSpec {
                label: "c".into(),
                exclusive_fraction: 1.0,
                observe_prob: 0.5,
            }],
            scatter: ScatterSpec::Box { half_extent: 5.0 },
            sensor_range: 100.0,
            ..two_condition_spec()
        };
        let world = generate_world(&spec).unwrap();
        let pose = Pose2::new(0.0, 0.0, 0.0);

        let mut rng = stream_rng(99, STREAM_OBSERVATION);
        let got = world.observe(&pose, ConditionId(0), &mut rng).unwrap();

        let mut oracle_rng = stream_rng(99, STREAM_OBSERVATION);
        let mut expected = BTreeSet::new();
        for l in &world.landmarks {
            let d = (pose.x - l.position[0]).hypot(pose.y - l.position[1]);
            if d > world.sensor_range {
                continue;
            }
            let u: f64 = oracle_rng.random();
            if u < l.affinity.get(&ConditionId(0)).copied().unwrap_or(0.0) {
                expected.insert(l.id);
            }
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn observation_frequency_within_three_sigma() {
        let spec = WorldSpec {
            landmarks: 1,
            conditions: vec![ConditionSpec {
                label: "c".into(),
                exclusive_fraction: 1.0,
                observe_prob: 0.37,
            }],
            scatter: ScatterSpec::Box { half_extent: 0.1 },
            sensor_range: 100.0,
            ..two_condition_spec()
        };
        let world = generate_world(&spec).unwrap();
        let pose = Pose2::new(0.0, 0.0, 0.0);
        let mut rng = stream_rng(5, STREAM_OBSERVATION);
        let trials = 10_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            if !world.observe(&pose, ConditionId(0), &mut rng).unwrap().is_empty() {
                hits += 1;
            }
        }
        let p = 0.37;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let freq = hits as f64 / trials as f64;
        assert!(
            (freq - p).abs() < 3.0 * sigma,
            "frequency {freq} not within 3 sigma of {p}"
        );
    }

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        for k in -10..=10 {
            let t = normalize_angle(0.3 + k as f64 * TAU);
            assert!((t - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_compose_between_round_trip() {
        let a = Pose2::new(1.0, 2.0, 0.7);
        let b = Pose2::new(-3.0, 0.5, -1.9);
        let delta = a.between(&b);
        let back = a.compose(&delta);
        assert!((back.x - b.x).abs() < 1e-12);
        assert!((back.y - b.y).abs() < 1e-12);
        assert!(angle_difference(back.theta, b.theta) < 1e-12);
    }
}
