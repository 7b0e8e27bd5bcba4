//! Canonical binary framing.
//!
//! Frame layout: a 4-byte big-endian length prefix counting everything that
//! follows, a 1-byte message-type tag, then the payload. Within payloads all
//! integers are fixed-width little-endian, floats are 8-byte IEEE-754
//! little-endian, and lists carry a 4-byte element count. Field order
//! matches the message struct declarations.
//!
//! `LocalizeResponse` landmark items are `id (8) | position (16) |
//! descriptor (fixed length)`; the descriptor length is not written per item
//! but recovered on decode from the item block size, so a response frame is
//! exactly `22 + n * (24 + descriptor_len)` bytes on the wire.
//!
//! Decoding is strict: unknown tags, short frames, overflowing counts,
//! duplicate ids and trailing bytes are all errors carrying the byte offset
//! where the fault was found.

use std::io::{Read, Write};

use super::{
    Ack, EndTraversal, ErrorCode, ErrorResponse, LandmarkPayload, LocalizeRequest,
    LocalizeResponse, Message, ObservationReport, ProtocolError,
};
use crate::select::{SelectionKind, SelectionPolicy};
use crate::world::{LandmarkId, Pose2, TraversalId};

pub const TAG_LOCALIZE_REQUEST: u8 = 1;
pub const TAG_LOCALIZE_RESPONSE: u8 = 2;
pub const TAG_OBSERVATION_REPORT: u8 = 3;
pub const TAG_END_TRAVERSAL: u8 = 4;
pub const TAG_ACK: u8 = 5;
pub const TAG_ERROR: u8 = 6;

/// Upper bound on the length prefix; anything larger is rejected before
/// allocation.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

const POLICY_KIND_RANKED: u8 = 0;
const POLICY_KIND_RANDOM: u8 = 1;
const POLICY_KIND_ALL: u8 = 2;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(tag: u8) -> Writer {
        // Length prefix patched in `finish`.
        Writer { buf: vec![0, 0, 0, 0, tag] }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn pose(&mut self, p: &Pose2) {
        self.f64(p.x);
        self.f64(p.y);
        self.f64(p.theta);
    }

    fn ids(&mut self, ids: &[LandmarkId]) {
        self.u32(ids.len() as u32);
        for id in ids {
            self.u64(id.0);
        }
    }

    fn policy(&mut self, p: &SelectionPolicy) {
        self.u8(match p.kind {
            SelectionKind::Ranked => POLICY_KIND_RANKED,
            SelectionKind::Random => POLICY_KIND_RANDOM,
            SelectionKind::All => POLICY_KIND_ALL,
        });
        self.f64(p.ratio);
        // cap 0 encodes "unbounded"; a zero cap is invalid by construction.
        self.u64(p.cap.unwrap_or(0));
        self.u64(p.rng_seed);
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn finish(mut self) -> Vec<u8> {
        let body_len = (self.buf.len() - 4) as u32;
        self.buf[..4].copy_from_slice(&body_len.to_be_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::ShortFrame { offset: self.pos });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn pose(&mut self) -> Result<Pose2, ProtocolError> {
        let x = self.f64()?;
        let y = self.f64()?;
        let theta = self.f64()?;
        Ok(Pose2 { x, y, theta })
    }

    /// Element count for items of `elem_size` bytes, bounds-checked against
    /// the remaining frame.
    fn count(&mut self, elem_size: usize) -> Result<usize, ProtocolError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.checked_mul(elem_size).is_none_or(|total| total > self.remaining()) {
            return Err(ProtocolError::CountOverflow { offset: at });
        }
        Ok(n)
    }

    fn ids(&mut self) -> Result<Vec<LandmarkId>, ProtocolError> {
        let at = self.pos;
        let n = self.count(8)?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(LandmarkId(self.u64()?));
        }
        let distinct: std::collections::HashSet<_> = ids.iter().collect();
        if distinct.len() != ids.len() {
            return Err(ProtocolError::InvalidValue { what: "duplicate landmark id", offset: at });
        }
        Ok(ids)
    }

    fn policy(&mut self) -> Result<SelectionPolicy, ProtocolError> {
        let at = self.pos;
        let kind = match self.u8()? {
            POLICY_KIND_RANKED => SelectionKind::Ranked,
            POLICY_KIND_RANDOM => SelectionKind::Random,
            POLICY_KIND_ALL => SelectionKind::All,
            _ => {
                return Err(ProtocolError::InvalidValue {
                    what: "unknown policy kind",
                    offset: at,
                })
            }
        };
        let ratio = self.f64()?;
        let cap = match self.u64()? {
            0 => None,
            m => Some(m),
        };
        let rng_seed = self.u64()?;
        Ok(SelectionPolicy { kind, ratio, cap, rng_seed })
    }

    fn bool(&mut self) -> Result<bool, ProtocolError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(ProtocolError::InvalidValue { what: "non-boolean flag byte", offset: at }),
        }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn expect_end(&self) -> Result<(), ProtocolError> {
        if self.remaining() != 0 {
            return Err(ProtocolError::TrailingBytes { offset: self.pos });
        }
        Ok(())
    }
}

/// Encode a message into one complete frame (length prefix included).
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut w = Writer::new(msg.tag());
    match msg {
        Message::LocalizeRequest(m) => {
            w.u64(m.request_id);
            w.pose(&m.pose_guess);
            w.ids(&m.recent_ids);
            w.policy(&m.policy);
            w.f64(m.radius);
        }
        Message::LocalizeResponse(m) => {
            w.u64(m.request_id);
            w.u32(m.candidate_count);
            w.u32(m.landmarks.len() as u32);
            for l in &m.landmarks {
                debug_assert_eq!(
                    l.descriptor.len(),
                    m.landmarks[0].descriptor.len(),
                    "landmark descriptors must share one length"
                );
                w.u64(l.id.0);
                w.f64(l.position[0]);
                w.f64(l.position[1]);
                w.bytes(&l.descriptor);
            }
            w.u8(m.truncated as u8);
        }
        Message::ObservationReport(m) => {
            w.u64(m.traversal_id.0);
            w.u32(m.step);
            w.ids(&m.observed_ids);
        }
        Message::EndTraversal(m) => {
            w.u64(m.traversal_id.0);
        }
        Message::Ack(m) => {
            w.u64(m.token);
        }
        Message::Error(m) => {
            w.u8(m.code as u8);
            w.u64(m.offset);
            let bytes = m.message.as_bytes();
            w.u32(bytes.len() as u32);
            w.bytes(bytes);
        }
    }
    w.finish()
}

/// Decode one frame body (tag byte onward, length prefix already consumed).
pub fn decode_message(body: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = Reader::new(body);
    let tag = r.u8()?;
    let msg = match tag {
        TAG_LOCALIZE_REQUEST => {
            let request_id = r.u64()?;
            let pose_guess = r.pose()?;
            let recent_ids = r.ids()?;
            let policy = r.policy()?;
            let radius = r.f64()?;
            Message::LocalizeRequest(LocalizeRequest {
                request_id,
                pose_guess,
                recent_ids,
                policy,
                radius,
            })
        }
        TAG_LOCALIZE_RESPONSE => {
            let request_id = r.u64()?;
            let candidate_count = r.u32()?;
            let count_at = r.pos;
            let n = r.count(24)?;
            // Everything between the count and the trailing flag byte is n
            // fixed-size items; the descriptor length falls out of the math.
            let Some(items_bytes) = r.remaining().checked_sub(1) else {
                return Err(ProtocolError::ShortFrame { offset: r.pos });
            };
            let landmarks = if n == 0 {
                if items_bytes != 0 {
                    return Err(ProtocolError::TrailingBytes { offset: r.pos });
                }
                Vec::new()
            } else {
                if items_bytes % n != 0 || items_bytes / n < 24 {
                    return Err(ProtocolError::InvalidValue {
                        what: "landmark block size not divisible into items",
                        offset: count_at,
                    });
                }
                let descriptor_len = items_bytes / n - 24;
                let mut landmarks = Vec::with_capacity(n);
                for _ in 0..n {
                    let id = LandmarkId(r.u64()?);
                    let position = [r.f64()?, r.f64()?];
                    let descriptor = r.take(descriptor_len)?.to_vec();
                    landmarks.push(LandmarkPayload { id, position, descriptor });
                }
                let distinct: std::collections::HashSet<_> =
                    landmarks.iter().map(|l| l.id).collect();
                if distinct.len() != landmarks.len() {
                    return Err(ProtocolError::InvalidValue {
                        what: "duplicate landmark id",
                        offset: count_at,
                    });
                }
                landmarks
            };
            let truncated = r.bool()?;
            Message::LocalizeResponse(LocalizeResponse {
                request_id,
                candidate_count,
                landmarks,
                truncated,
            })
        }
        TAG_OBSERVATION_REPORT => {
            let traversal_id = TraversalId(r.u64()?);
            let step = r.u32()?;
            let observed_ids = r.ids()?;
            Message::ObservationReport(ObservationReport { traversal_id, step, observed_ids })
        }
        TAG_END_TRAVERSAL => Message::EndTraversal(EndTraversal {
            traversal_id: TraversalId(r.u64()?),
        }),
        TAG_ACK => Message::Ack(Ack { token: r.u64()? }),
        TAG_ERROR => {
            let code_at = r.pos;
            let code = ErrorCode::from_u8(r.u8()?).ok_or(ProtocolError::InvalidValue {
                what: "unknown error code",
                offset: code_at,
            })?;
            let offset = r.u64()?;
            let len = r.count(1)?;
            let text_at = r.pos;
            let message = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| {
                ProtocolError::InvalidValue { what: "error text not utf-8", offset: text_at }
            })?;
            Message::Error(ErrorResponse { code, offset, message })
        }
        other => return Err(ProtocolError::UnknownTag { tag: other, offset: 0 }),
    };
    r.expect_end()?;
    Ok(msg)
}

/// Read one frame body from a stream. `Ok(None)` on clean EOF at a frame
/// boundary.
pub fn read_frame<R: Read>(stream: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge { len });
    }
    if len == 0 {
        return Err(ProtocolError::ShortFrame { offset: 0 });
    }
    let mut body = vec![0u8; len];
    stream
        .read_exact(&mut body)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => ProtocolError::UnexpectedEof,
            _ => ProtocolError::Io(e),
        })?;
    Ok(Some(body))
}

/// Write one already-encoded frame.
pub fn write_frame<W: Write>(stream: &mut W, frame: &[u8]) -> Result<(), ProtocolError> {
    stream.write_all(frame)?;
    stream.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn arbitrary_message(rng: &mut ChaCha8Rng) -> Message {
        let pose = Pose2 {
            x: rng.random_range(-1e3..1e3),
            y: rng.random_range(-1e3..1e3),
            theta: rng.random_range(-3.14..3.14),
        };
        let ids = |rng: &mut ChaCha8Rng, max: usize| -> Vec<LandmarkId> {
            let n = rng.random_range(0..max);
            let mut set = std::collections::BTreeSet::new();
            while set.len() < n {
                set.insert(LandmarkId(rng.random::<u64>() % 10_000));
            }
            set.into_iter().collect()
        };
        match rng.random_range(0..6) {
            0 => Message::LocalizeRequest(LocalizeRequest {
                request_id: rng.random(),
                pose_guess: pose,
                recent_ids: ids(rng, 40),
                policy: SelectionPolicy {
                    kind: match rng.random_range(0..3) {
                        0 => SelectionKind::Ranked,
                        1 => SelectionKind::Random,
                        _ => SelectionKind::All,
                    },
                    ratio: rng.random_range(0.0..=1.0),
                    cap: if rng.random_bool(0.5) { Some(rng.random_range(1..5000)) } else { None },
                    rng_seed: rng.random(),
                },
                radius: rng.random_range(0.0..100.0),
            }),
            1 => {
                let dlen = rng.random_range(0..96usize);
                let landmarks = ids(rng, 30)
                    .into_iter()
                    .map(|id| LandmarkPayload {
                        id,
                        position: [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)],
                        descriptor: (0..dlen).map(|_| rng.random()).collect(),
                    })
                    .collect::<Vec<_>>();
                Message::LocalizeResponse(LocalizeResponse {
                    request_id: rng.random(),
                    candidate_count: rng.random_range(0..100_000),
                    landmarks,
                    truncated: rng.random_bool(0.5),
                })
            }
            2 => Message::ObservationReport(ObservationReport {
                traversal_id: TraversalId(rng.random()),
                step: rng.random_range(0..10_000),
                observed_ids: ids(rng, 60),
            }),
            3 => Message::EndTraversal(EndTraversal { traversal_id: TraversalId(rng.random()) }),
            4 => Message::Ack(Ack { token: rng.random() }),
            _ => Message::Error(ErrorResponse {
                code: ErrorCode::from_u8(rng.random_range(1..=6)).unwrap(),
                offset: rng.random_range(0..1_000_000),
                message: format!("fault {}", rng.random::<u32>()),
            }),
        }
    }

    #[test]
    fn round_trip_randomized_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for i in 0..2000 {
            let msg = arbitrary_message(&mut rng);
            let frame = encode_message(&msg);
            let back = decode_message(&frame[4..]).unwrap_or_else(|e| {
                panic!("round trip {i} failed on {msg:?}: {e}");
            });
            assert_eq!(back, msg, "iteration {i}");
        }
    }

    #[test]
    fn empty_recent_ids_encode_as_four_zero_bytes() {
        let msg = Message::LocalizeRequest(LocalizeRequest {
            request_id: 1,
            pose_guess: Pose2::new(0.0, 0.0, 0.0),
            recent_ids: vec![],
            policy: SelectionPolicy::all(),
            radius: 5.0,
        });
        let frame = encode_message(&msg);
        // 4 length + 1 tag + 8 request id + 24 pose = offset 37.
        assert_eq!(&frame[37..41], &[0, 0, 0, 0]);
    }

    #[test]
    fn response_frame_length_formula() {
        for (n, dlen) in [(0usize, 64usize), (1, 64), (5, 64), (7, 16), (3, 0)] {
            let landmarks: Vec<LandmarkPayload> = (0..n)
                .map(|i| LandmarkPayload {
                    id: LandmarkId(i as u64),
                    position: [i as f64, -(i as f64)],
                    descriptor: vec![0xAB; dlen],
                })
                .collect();
            let msg = Message::LocalizeResponse(LocalizeResponse {
                request_id: 9,
                candidate_count: 42,
                landmarks,
                truncated: false,
            });
            let frame = encode_message(&msg);
            // length prefix + tag + request id + candidate count + item count
            // + items + truncated flag
            assert_eq!(frame.len(), 4 + 1 + 8 + 4 + 4 + n * (8 + 16 + dlen) + 1);
        }
    }

    #[test]
    fn short_frame_reports_offset() {
        let msg = Message::Ack(Ack { token: 7 });
        let frame = encode_message(&msg);
        let err = decode_message(&frame[4..frame.len() - 2]).unwrap_err();
        match err {
            ProtocolError::ShortFrame { offset } => assert_eq!(offset, 1),
            other => panic!("expected short frame, got {other}"),
        }
    }

    #[test]
    fn unknown_tag_rejected() {
        let err = decode_message(&[99, 0, 0]).unwrap_err();
        assert!(matches!(err, ProtocolError::UnknownTag { tag: 99, .. }));
    }

    #[test]
    fn count_overflow_rejected() {
        // Observation report claiming u32::MAX ids in a tiny frame.
        let mut body = vec![TAG_OBSERVATION_REPORT];
        body.extend_from_slice(&7u64.to_le_bytes());
        body.extend_from_slice(&0u32.to_le_bytes());
        body.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_message(&body).unwrap_err();
        assert!(matches!(err, ProtocolError::CountOverflow { offset: 13 }));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut frame = encode_message(&Message::Ack(Ack { token: 1 }));
        frame.push(0);
        let err = decode_message(&frame[4..]).unwrap_err();
        assert!(matches!(err, ProtocolError::TrailingBytes { .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut body = vec![TAG_OBSERVATION_REPORT];
        body.extend_from_slice(&7u64.to_le_bytes());
        body.extend_from_slice(&0u32.to_le_bytes());
        body.extend_from_slice(&2u32.to_le_bytes());
        body.extend_from_slice(&5u64.to_le_bytes());
        body.extend_from_slice(&5u64.to_le_bytes());
        let err = decode_message(&body).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidValue { .. }));
    }

    #[test]
    fn frame_io_round_trip() {
        let msg = Message::EndTraversal(EndTraversal { traversal_id: TraversalId(3) });
        let frame = encode_message(&msg);
        let mut cursor = std::io::Cursor::new(frame.clone());
        let body = read_frame(&mut cursor).unwrap().unwrap();
        assert_eq!(decode_message(&body).unwrap(), msg);
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn oversize_length_prefix_rejected() {
        let mut data = Vec::new();
        data.extend_from_slice(&(MAX_FRAME_LEN as u32 + 1).to_be_bytes());
        data.push(TAG_ACK);
        let mut cursor = std::io::Cursor::new(data);
        assert!(matches!(
            read_frame(&mut cursor),
            Err(ProtocolError::FrameTooLarge { .. })
        ));
    }
}
