//! Appearance-adaptive landmark selection for distributed visual
//! localization, plus the synthetic worlds, wire protocol and experiment
//! harness used to exercise it.
//!
//! The crate is organized around the lifecycle of a localization run:
//!
//! * [`world`] — synthetic multi-condition worlds and the stochastic
//!   observation model standing in for a camera/matching pipeline.
//! * [`coobs`] — the localization history, co-observability statistics and
//!   the ranking function over candidate landmarks.
//! * [`spatial`] — appearance-independent candidate retrieval around a pose
//!   guess.
//! * [`select`] — selection policies (ranked, random baseline, select-all).
//! * [`localize`] — the iterative localization loop and the closed-form
//!   planar pose estimator.
//! * [`protocol`] — the map-server/vehicle-client wire protocol with
//!   per-message byte accounting.
//! * [`eval`] — experiment orchestration and CSV metrics artifacts.

pub mod coobs;
pub mod eval;
pub mod localize;
pub mod protocol;
pub mod rng;
pub mod select;
pub mod spatial;
pub mod world;

//pub use coobs::{CoObservabilityStore, RecentObservations, Score, TraversalRecord};
//pub use localize::{OdometryModel, StepResult};
//pub use select::{SelectionKind, SelectionPolicy};
//pub use world::{AppearanceCondition, ConditionId, Landmark, LandmarkId, Pose2, TraversalId, World};
