//! The distributed localization loop as a concrete wire protocol.
//!
//! The vehicle sends its pose guess plus recently observed landmark IDs; the
//! map server answers with the selected landmark payloads; the vehicle
//! reports its observations back, and an explicit end-of-traversal message
//! commits them into the co-observability store. Raw co-observability data
//! never crosses the wire — ranking runs server-side.
//!
//! Every byte moved in either direction is counted in a [`BandwidthLedger`];
//! the byte layout is fixed by [`codec`] so totals are bit-exact and
//! portable.

pub mod client;
pub mod codec;
pub mod server;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::select::SelectionPolicy;
use crate::spatial::ObservedFromIndex;
use crate::world::{hex_bytes, LandmarkId, Pose2, TraversalId, World};

pub use client::{run_traversal_networked, MapClient};
pub use codec::{decode_message, encode_message, read_frame, write_frame, MAX_FRAME_LEN};
pub use server::{MapServer, ServerState};

/// Map snapshot schema version.
pub const MAP_SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame truncated at byte {offset}")]
    ShortFrame { offset: usize },
    #[error("unknown message tag {tag} at byte {offset}")]
    UnknownTag { tag: u8, offset: usize },
    #[error("list count at byte {offset} overflows the frame")]
    CountOverflow { offset: usize },
    #[error("{what} at byte {offset}")]
    InvalidValue { what: &'static str, offset: usize },
    #[error("trailing bytes after message at byte {offset}")]
    TrailingBytes { offset: usize },
    #[error("frame length {len} exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge { len: usize },
    #[error("connection closed mid-frame")]
    UnexpectedEof,
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("server error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected {got} in reply to {expected}")]
    UnexpectedMessage { expected: &'static str, got: &'static str },
    #[error("response echoes request id {got}, expected {expected}")]
    RequestIdMismatch { expected: u64, got: u64 },
    #[error("map snapshot version {found} unsupported (expected {expected})")]
    SnapshotVersion { found: u32, expected: u32 },
    #[error("malformed map snapshot: {0}")]
    Snapshot(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Malformed = 1,
    UnknownLandmark = 2,
    DuplicateTraversal = 3,
    EmptyTraversal = 4,
    BadRequest = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn from_u8(v: u8) -> Option<ErrorCode> {
        match v {
            1 => Some(ErrorCode::Malformed),
            2 => Some(ErrorCode::UnknownLandmark),
            3 => Some(ErrorCode::DuplicateTraversal),
            4 => Some(ErrorCode::EmptyTraversal),
            5 => Some(ErrorCode::BadRequest),
            6 => Some(ErrorCode::Internal),
            _ => None,
        }
    }
}

/// Pose guess plus recent landmark IDs — everything the server needs to
/// retrieve, rank and select on the vehicle's behalf.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeRequest {
    pub request_id: u64,
    pub pose_guess: Pose2,
    pub recent_ids: Vec<LandmarkId>,
    pub policy: SelectionPolicy,
    pub radius: f64,
}

/// One selected landmark as transmitted: id, world position, descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPayload {
    pub id: LandmarkId,
    pub position: [f64; 2],
    #[serde(with = "hex_bytes")]
    pub descriptor: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeResponse {
    pub request_id: u64,
    /// Size of the candidate set the selection was drawn from.
    pub candidate_count: u32,
    pub landmarks: Vec<LandmarkPayload>,
    /// Set when the cap (not the ratio) bound the selection.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationReport {
    pub traversal_id: TraversalId,
    pub step: u32,
    pub observed_ids: Vec<LandmarkId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndTraversal {
    pub traversal_id: TraversalId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ack {
    pub token: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorResponse {
    pub code: ErrorCode,
    /// Byte offset the fault was detected at, when meaningful.
    pub offset: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    LocalizeRequest(LocalizeRequest),
    LocalizeResponse(LocalizeResponse),
    ObservationReport(ObservationReport),
    EndTraversal(EndTraversal),
    Ack(Ack),
    Error(ErrorResponse),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::LocalizeRequest(_) => codec::TAG_LOCALIZE_REQUEST,
            Message::LocalizeResponse(_) => codec::TAG_LOCALIZE_RESPONSE,
            Message::ObservationReport(_) => codec::TAG_OBSERVATION_REPORT,
            Message::EndTraversal(_) => codec::TAG_END_TRAVERSAL,
            Message::Ack(_) => codec::TAG_ACK,
            Message::Error(_) => codec::TAG_ERROR,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::LocalizeRequest(_) => "localize_request",
            Message::LocalizeResponse(_) => "localize_response",
            Message::ObservationReport(_) => "observation_report",
            Message::EndTraversal(_) => "end_traversal",
            Message::Ack(_) => "ack",
            Message::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ClientToServer => "client_to_server",
            Direction::ServerToClient => "server_to_client",
        }
    }
}

const TAG_SLOTS: usize = 7; // slot 0 collects unparseable frames

/// Monotone per-direction and per-message-type byte/count accounting.
/// Safe to share across server threads.
#[derive(Debug, Default)]
pub struct BandwidthLedger {
    to_server_bytes: AtomicU64,
    to_client_bytes: AtomicU64,
    counts: [[AtomicU64; TAG_SLOTS]; 2],
    bytes: [[AtomicU64; TAG_SLOTS]; 2],
}

impl BandwidthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn dir_index(direction: Direction) -> usize {
        match direction {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1,
        }
    }

    /// Record one full frame. `tag` 0 buckets frames that never parsed.
    pub fn record(&self, direction: Direction, tag: u8, frame_bytes: usize) {
        let d = Self::dir_index(direction);
        let slot = (tag as usize).min(TAG_SLOTS - 1);
        self.counts[d][slot].fetch_add(1, Ordering::Relaxed);
        self.bytes[d][slot].fetch_add(frame_bytes as u64, Ordering::Relaxed);
        match direction {
            Direction::ClientToServer => {
                self.to_server_bytes.fetch_add(frame_bytes as u64, Ordering::Relaxed)
            }
            Direction::ServerToClient => {
                self.to_client_bytes.fetch_add(frame_bytes as u64, Ordering::Relaxed)
            }
        };
    }

    pub fn total_bytes(&self, direction: Direction) -> u64 {
        match direction {
            Direction::ClientToServer => self.to_server_bytes.load(Ordering::Relaxed),
            Direction::ServerToClient => self.to_client_bytes.load(Ordering::Relaxed),
        }
    }

    pub fn message_count(&self, direction: Direction, tag: u8) -> u64 {
        self.counts[Self::dir_index(direction)][(tag as usize).min(TAG_SLOTS - 1)]
            .load(Ordering::Relaxed)
    }

    pub fn message_bytes(&self, direction: Direction, tag: u8) -> u64 {
        self.bytes[Self::dir_index(direction)][(tag as usize).min(TAG_SLOTS - 1)]
            .load(Ordering::Relaxed)
    }

    /// CSV dump: one row per direction and message type plus totals.
    pub fn to_csv(&self) -> String {
        let names = [
            "unparsed",
            "localize_request",
            "localize_response",
            "observation_report",
            "end_traversal",
            "ack",
            "error",
        ];
        let mut out = String::from("direction,message,count,bytes\n");
        for (d, dir) in [Direction::ClientToServer, Direction::ServerToClient]
            .iter()
            .enumerate()
        {
            for (slot, name) in names.iter().enumerate() {
                let count = self.counts[d][slot].load(Ordering::Relaxed);
                let bytes = self.bytes[d][slot].load(Ordering::Relaxed);
                if count > 0 {
                    out.push_str(&format!("{},{},{},{}\n", dir.as_str(), name, count, bytes));
                }
            }
            out.push_str(&format!(
                "{},total,,{}\n",
                dir.as_str(),
                self.total_bytes(*dir)
            ));
        }
        out
    }
}

/// What the vehicle-facing map service knows: landmark payloads and the
/// poses each landmark was observed from during mapping. No appearance
/// state of any kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub version: u32,
    pub descriptor_len: usize,
    pub landmarks: Vec<LandmarkPayload>,
    pub observed_from: Vec<ObservedFromEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedFromEntry {
    pub landmark: LandmarkId,
    pub poses: Vec<Pose2>,
}

impl MapSnapshot {
    /// Assemble the snapshot from the generating world and the per-step
    /// mapping observations. Only landmarks actually observed during mapping
    /// become part of the map.
    pub fn build(world: &World, observations: &[(Pose2, BTreeSet<LandmarkId>)]) -> MapSnapshot {
        let mut entries: std::collections::BTreeMap<LandmarkId, Vec<Pose2>> =
            std::collections::BTreeMap::new();
        for (pose, observed) in observations {
            for &l in observed {
                entries.entry(l).or_default().push(*pose);
            }
        }
        let landmarks = world
            .landmarks
            .iter()
            .filter(|l| entries.contains_key(&l.id))
            .map(|l| LandmarkPayload {
                id: l.id,
                position: l.position,
                descriptor: l.descriptor.clone(),
            })
            .collect();
        MapSnapshot {
            version: MAP_SNAPSHOT_VERSION,
            descriptor_len: world.landmarks.first().map_or(0, |l| l.descriptor.len()),
            landmarks,
            observed_from: entries
                .into_iter()
                .map(|(landmark, poses)| ObservedFromEntry { landmark, poses })
                .collect(),
        }
    }

    /// Rebuild the candidate index; done once at server start.
    pub fn index(&self, radius_hint: f64) -> ObservedFromIndex {
        let pairs: Vec<(Pose2, BTreeSet<LandmarkId>)> = self
            .observed_from
            .iter()
            .flat_map(|e| {
                e.poses
                    .iter()
                    .map(move |p| (*p, BTreeSet::from([e.landmark])))
            })
            .collect();
        ObservedFromIndex::build(&pairs, radius_hint)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("map snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<MapSnapshot, ProtocolError> {
        let snap: MapSnapshot = serde_json::from_str(text)?;
        if snap.version != MAP_SNAPSHOT_VERSION {
            return Err(ProtocolError::SnapshotVersion {
                found: snap.version,
                expected: MAP_SNAPSHOT_VERSION,
            });
        }
        Ok(snap)
    }
}
