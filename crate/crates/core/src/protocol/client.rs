//! Vehicle-side connection to a map server, and the networked twin of the
//! in-process traversal runner.

use std::collections::BTreeSet;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::codec::{encode_message, read_frame, write_frame};
use super::{
    BandwidthLedger, Direction, EndTraversal, LocalizeRequest, LocalizeResponse, Message,
    ObservationReport, ProtocolError,
};
use crate::localize::{run_traversal_with, LocalizeError, SelectionOutcome, StepResult,
    TraversalParams};
use crate::select::SelectionPolicy;
use crate::world::{LandmarkId, Pose2, TraversalId, World};

/// One vehicle connection; one in-flight request at a time.
pub struct MapClient {
    stream: TcpStream,
    next_request_id: u64,
    ledger: BandwidthLedger,
}

impl MapClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<MapClient, ProtocolError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        stream.set_nodelay(true)?;
        Ok(MapClient { stream, next_request_id: 1, ledger: BandwidthLedger::new() })
    }

    pub fn ledger(&self) -> &BandwidthLedger {
        &self.ledger
    }

    /// Send one message and wait for its reply, accounting bytes both ways.
    fn call(&mut self, msg: &Message) -> Result<Message, ProtocolError> {
        let frame = encode_message(msg);
        self.ledger.record(Direction::ClientToServer, msg.tag(), frame.len());
        write_frame(&mut self.stream, &frame)?;
        let body = read_frame(&mut self.stream)?.ok_or(ProtocolError::UnexpectedEof)?;
        let reply = super::codec::decode_message(&body)?;
        self.ledger.record(Direction::ServerToClient, reply.tag(), body.len() + 4);
        Ok(reply)
    }

    /// One localization exchange: pose guess and recent ids up, selected
    /// landmark payloads down.
    pub fn localize(
        &mut self,
        pose_guess: &Pose2,
        recent_ids: &BTreeSet<LandmarkId>,
        policy: SelectionPolicy,
        radius: f64,
    ) -> Result<LocalizeResponse, ProtocolError> {
        let request_id = self.next_request_id;
        self.next_request_id += 1;
        let msg = Message::LocalizeRequest(LocalizeRequest {
            request_id,
            pose_guess: *pose_guess,
            recent_ids: recent_ids.iter().copied().collect(),
            policy,
            radius,
        });
        match self.call(&msg)? {
            Message::LocalizeResponse(resp) => {
                if resp.request_id != request_id {
                    return Err(ProtocolError::RequestIdMismatch {
                        expected: request_id,
                        got: resp.request_id,
                    });
                }
                Ok(resp)
            }
            Message::Error(e) => Err(ProtocolError::Remote { code: e.code, message: e.message }),
            other => Err(ProtocolError::UnexpectedMessage {
                expected: "localize_response",
                got: other.kind_name(),
            }),
        }
    }

    fn expect_ack(&mut self, msg: &Message) -> Result<(), ProtocolError> {
        match self.call(msg)? {
            Message::Ack(_) => Ok(()),
            Message::Error(e) => Err(ProtocolError::Remote { code: e.code, message: e.message }),
            other => Err(ProtocolError::UnexpectedMessage {
                expected: "ack",
                got: other.kind_name(),
            }),
        }
    }

    /// Report landmarks observed at one step; buffered server-side until the
    /// end-of-traversal commit.
    pub fn report(
        &mut self,
        traversal_id: TraversalId,
        step: u32,
        observed: &BTreeSet<LandmarkId>,
    ) -> Result<(), ProtocolError> {
        self.expect_ack(&Message::ObservationReport(ObservationReport {
            traversal_id,
            step,
            observed_ids: observed.iter().copied().collect(),
        }))
    }

    /// Commit every buffered report of the traversal into the store.
    pub fn end_traversal(&mut self, traversal_id: TraversalId) -> Result<(), ProtocolError> {
        self.expect_ack(&Message::EndTraversal(EndTraversal { traversal_id }))
    }

    /// Raw escape hatch used by fault-injection tests.
    pub fn send_raw(&mut self, frame: &[u8]) -> Result<Message, ProtocolError> {
        self.ledger.record(Direction::ClientToServer, 0, frame.len());
        write_frame(&mut self.stream, frame)?;
        let body = read_frame(&mut self.stream)?.ok_or(ProtocolError::UnexpectedEof)?;
        let reply = super::codec::decode_message(&body)?;
        self.ledger.record(Direction::ServerToClient, reply.tag(), body.len() + 4);
        Ok(reply)
    }
}

/// Run a full traversal against a remote map server.
///
/// Selection, ranking and candidate retrieval happen server-side; the
/// vehicle only streams pose guesses and recent ids up and receives selected
/// payloads down, so the step log is step-for-step identical to
/// [`crate::localize::run_traversal`] under the same seeds. Observation
/// reports are flushed after the loop and committed by the final
/// end-of-traversal message.
pub fn run_traversal_networked(
    world: &World,
    client: &mut MapClient,
    traversal_id: TraversalId,
    params: &TraversalParams,
    commit: bool,
) -> Result<Vec<StepResult>, LocalizeError> {
    let policy = params.policy;
    let radius = params.radius;
    let steps = {
        let client = &mut *client;
        run_traversal_with(world, params, move |k, guess, recent| {
            let resp = client
                .localize(guess, &recent.ids, policy, radius)
                .map_err(|e| LocalizeError::Resolve { step: k, reason: e.to_string() })?;
            Ok(SelectionOutcome {
                n_candidates: resp.candidate_count as usize,
                selected: resp.landmarks.iter().map(|l| (l.id, l.position)).collect(),
                truncated: resp.truncated,
            })
        })?
    };
    if commit {
        for step in &steps {
            if !step.observed.is_empty() {
                client
                    .report(traversal_id, step.k as u32, &step.observed)
                    .map_err(|e| LocalizeError::Resolve {
                        step: step.k,
                        reason: e.to_string(),
                    })?;
            }
        }
        client
            .end_traversal(traversal_id)
            .map_err(|e| LocalizeError::Resolve { step: steps.len(), reason: e.to_string() })?;
    }
    Ok(steps)
}
