//! The map server: candidate retrieval, ranking and selection on behalf of
//! connected vehicles, plus the serialized commit path feeding the
//! co-observability store.
//!
//! Requests are handled concurrently over the read-mostly map and index; the
//! store takes a read lock per ranking and a write lock only on traversal
//! commit. One connection carries one vehicle, so per-connection selector
//! state is enough to keep the random baseline's shuffle stream aligned with
//! an equivalent in-process run.

use std::collections::{BTreeSet, HashMap};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use super::codec::{self, encode_message, read_frame, write_frame};
use super::{
    Ack, BandwidthLedger, Direction, ErrorCode, ErrorResponse, LandmarkPayload, LocalizeRequest,
    LocalizeResponse, MapSnapshot, Message, ProtocolError,
};
use crate::coobs::{CoObservabilityStore, RecentObservations, Score, TraversalRecord};
use crate::select::{SelectionKind, SelectionPolicy, Selector};
use crate::spatial::ObservedFromIndex;
use crate::world::{LandmarkId, TraversalId};

/// Shared server state: immutable map and index, guarded store, pending
/// (uncommitted) traversal buffers, and the byte ledger.
pub struct ServerState {
    landmarks: HashMap<LandmarkId, LandmarkPayload>,
    index: ObservedFromIndex,
    store: RwLock<CoObservabilityStore>,
    pending: Mutex<HashMap<TraversalId, BTreeSet<LandmarkId>>>,
    ledger: BandwidthLedger,
}

impl ServerState {
    pub fn new(snapshot: &MapSnapshot, store: CoObservabilityStore, radius_hint: f64) -> Self {
        ServerState {
            landmarks: snapshot.landmarks.iter().map(|l| (l.id, l.clone())).collect(),
            index: snapshot.index(radius_hint),
            store: RwLock::new(store),
            pending: Mutex::new(HashMap::new()),
            ledger: BandwidthLedger::new(),
        }
    }

    pub fn ledger(&self) -> &BandwidthLedger {
        &self.ledger
    }

    pub fn store_text(&self) -> String {
        self.store.read().expect("store lock").to_text()
    }

    fn error(code: ErrorCode, offset: u64, message: impl Into<String>) -> Message {
        Message::Error(ErrorResponse { code, offset, message: message.into() })
    }

    fn handle_localize(&self, req: &LocalizeRequest, conn: &mut ConnState) -> Message {
        if req.policy.validate().is_err() {
            return Self::error(ErrorCode::BadRequest, 0, "invalid selection policy");
        }
        let candidates = match self.index.candidates(&req.pose_guess, req.radius) {
            Ok(c) => c,
            Err(e) => return Self::error(ErrorCode::BadRequest, 0, e.to_string()),
        };
        let recent = RecentObservations::new(req.recent_ids.iter().copied().collect());

        // Mirror of the in-process pipeline: rank only for the ranked
        // policy, ascending-id identity order otherwise.
        let ranked: Vec<(LandmarkId, Score)> = match req.policy.kind {
            SelectionKind::Ranked => {
                let store = self.store.read().expect("store lock");
                store.rank(&candidates, &recent)
            }
            SelectionKind::Random | SelectionKind::All => {
                candidates.iter().map(|&l| (l, Score::ZERO)).collect()
            }
        };
        let selector = conn.selector_for(req.policy);
        let picked = selector.select(&ranked);
        let truncated = selector.truncated_by_cap(candidates.len(), picked.len());
        let landmarks = picked
            .into_iter()
            .map(|id| self.landmarks[&id].clone())
            .collect();
        Message::LocalizeResponse(LocalizeResponse {
            request_id: req.request_id,
            candidate_count: candidates.len() as u32,
            landmarks,
            truncated,
        })
    }

    fn handle_report(&self, report: &super::ObservationReport) -> Message {
        if let Some(bad) = report.observed_ids.iter().find(|id| !self.landmarks.contains_key(id)) {
            return Self::error(
                ErrorCode::UnknownLandmark,
                0,
                format!("landmark {bad} is not in the map"),
            );
        }
        {
            let store = self.store.read().expect("store lock");
            if store.traversal(report.traversal_id).is_some() {
                return Self::error(
                    ErrorCode::DuplicateTraversal,
                    0,
                    format!("traversal {} already committed", report.traversal_id),
                );
            }
        }
        let mut pending = self.pending.lock().expect("pending lock");
        pending
            .entry(report.traversal_id)
            .or_default()
            .extend(report.observed_ids.iter().copied());
        Message::Ack(Ack { token: report.traversal_id.0 })
    }

    fn handle_end(&self, end: &super::EndTraversal) -> Message {
        let observed = {
            let mut pending = self.pending.lock().expect("pending lock");
            pending.remove(&end.traversal_id).unwrap_or_default()
        };
        if observed.is_empty() {
            return Self::error(
                ErrorCode::EmptyTraversal,
                0,
                format!("traversal {} has no buffered observations", end.traversal_id),
            );
        }
        let record = TraversalRecord {
            traversal_id: end.traversal_id,
            observed,
            condition_tag: None,
        };
        let mut store = self.store.write().expect("store lock");
        match store.record_traversal(record) {
            Ok(()) => Message::Ack(Ack { token: end.traversal_id.0 }),
            Err(crate::coobs::CoobsError::DuplicateTraversal(id)) => {
                Self::error(ErrorCode::DuplicateTraversal, 0, format!("traversal {id}"))
            }
            Err(e) => Self::error(ErrorCode::Internal, 0, e.to_string()),
        }
    }

    /// One request/response step of the protocol state machine.
    pub fn handle_message(&self, msg: &Message, conn: &mut ConnState) -> Message {
        match msg {
            Message::LocalizeRequest(req) => self.handle_localize(req, conn),
            Message::ObservationReport(report) => self.handle_report(report),
            Message::EndTraversal(end) => self.handle_end(end),
            other => Self::error(
                ErrorCode::BadRequest,
                0,
                format!("unexpected {} from client", other.kind_name()),
            ),
        }
    }
}

/// Per-connection protocol state.
#[derive(Default)]
pub struct ConnState {
    selector: Option<(SelectionPolicy, Selector)>,
}

impl ConnState {
    /// The connection's selector, re-seeded whenever the policy changes.
    fn selector_for(&mut self, policy: SelectionPolicy) -> &mut Selector {
        let stale = match &self.selector {
            Some((current, _)) => *current != policy,
            None => true,
        };
        if stale {
            self.selector = Some((policy, Selector::new(policy)));
        }
        &mut self.selector.as_mut().expect("selector just set").1
    }
}

fn serve_connection(state: &ServerState, stream: &mut TcpStream) {
    let mut conn = ConnState::default();
    loop {
        let body = match read_frame(stream) {
            Ok(Some(body)) => body,
            Ok(None) => return,
            Err(ProtocolError::FrameTooLarge { len }) => {
                // The stream cannot be resynced after a bogus length; report
                // and drop the connection.
                let reply = ServerState::error(
                    ErrorCode::Malformed,
                    0,
                    format!("frame length {len} too large"),
                );
                let frame = encode_message(&reply);
                state.ledger.record(Direction::ServerToClient, reply.tag(), frame.len());
                let _ = write_frame(stream, &frame);
                return;
            }
            Err(_) => return,
        };

        let reply = match codec::decode_message(&body) {
            Ok(msg) => {
                state
                    .ledger
                    .record(Direction::ClientToServer, msg.tag(), body.len() + 4);
                state.handle_message(&msg, &mut conn)
            }
            Err(e) => {
                state.ledger.record(Direction::ClientToServer, 0, body.len() + 4);
                let offset = match e {
                    ProtocolError::ShortFrame { offset }
                    | ProtocolError::UnknownTag { offset, .. }
                    | ProtocolError::CountOverflow { offset }
                    | ProtocolError::InvalidValue { offset, .. }
                    | ProtocolError::TrailingBytes { offset } => offset as u64,
                    _ => 0,
                };
                ServerState::error(ErrorCode::Malformed, offset, e.to_string())
            }
        };

        let frame = encode_message(&reply);
        state.ledger.record(Direction::ServerToClient, reply.tag(), frame.len());
        if write_frame(stream, &frame).is_err() {
            return;
        }
    }
}

/// A running accept loop. Connections are handled one thread each; dropping
/// or [`MapServer::shutdown`] stops accepting new ones.
pub struct MapServer {
    state: Arc<ServerState>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<thread::JoinHandle<()>>,
}

impl MapServer {
    /// Bind and start serving. Use port 0 to let the OS pick one.
    pub fn bind<A: ToSocketAddrs>(addr: A, state: Arc<ServerState>) -> io::Result<MapServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let state = Arc::clone(&state);
            let stop = Arc::clone(&stop);
            thread::spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    return;
                }
                match listener.accept() {
                    Ok((mut stream, _peer)) => {
                        stream.set_nonblocking(false).ok();
                        let state = Arc::clone(&state);
                        thread::spawn(move || serve_connection(&state, &mut stream));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => return,
                }
            })
        };
        Ok(MapServer { state, addr: local, stop, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> &Arc<ServerState> {
        &self.state
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for MapServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
    }
}
