//! Byte-exact wire format for replica and client traffic (little-endian).
//!
//! Sent bytes are what traces replay, so encoding must be deterministic.
//! Batch sends on the leader are encoded straight from the arena payload
//! slices to keep the in-process copy count at one per request.

use crate::error::{Error, Result};

const MSG_APPEND_BATCH: u8 = 1;
const MSG_APPEND_ACK: u8 = 2;
const MSG_REQUEST_VOTE: u8 = 3;
const MSG_VOTE: u8 = 4;
const MSG_CLIENT_REQUEST: u8 = 5;
const MSG_CLIENT_REPLY: u8 = 6;

pub const NO_HINT: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireEntry {
    pub term: u64,
    pub index: u64,
    pub kind: u8,
    pub client_id: u64,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ReplyStatus {
    Ok = 0,
    Retryable = 1,
    NotLeader = 2,
    AppError = 3,
    Busy = 4,
}

impl ReplyStatus {
    pub fn from_u8(v: u8) -> Option<ReplyStatus> {
        match v {
            0 => Some(ReplyStatus::Ok),
            1 => Some(ReplyStatus::Retryable),
            2 => Some(ReplyStatus::NotLeader),
            3 => Some(ReplyStatus::AppError),
            4 => Some(ReplyStatus::Busy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RequestKind {
    Update = 1,
    Read = 2,
    /// Leader discovery: replied to with NotLeader + hint (or Ok if leader).
    Probe = 3,
}

impl RequestKind {
    pub fn from_u8(v: u8) -> Option<RequestKind> {
        match v {
            1 => Some(RequestKind::Update),
            2 => Some(RequestKind::Read),
            3 => Some(RequestKind::Probe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    AppendBatch {
        term: u64,
        leader: u64,
        prev_index: u64,
        prev_term: u64,
        commit: u64,
        /// Collection watermark: every peer has acknowledged (and durably
        /// holds) entries up to here, so followers may collect them.
        gc_safe: u64,
        entries: Vec<WireEntry>,
    },
    AppendAck {
        term: u64,
        from: u64,
        success: bool,
        /// On success: last index now matched. On failure: next-index hint.
        last_index: u64,
    },
    RequestVote {
        term: u64,
        candidate: u64,
        last_index: u64,
        last_term: u64,
    },
    Vote {
        term: u64,
        from: u64,
        granted: bool,
    },
    ClientRequest {
        kind: RequestKind,
        client_id: u64,
        request_id: u64,
        payload: Vec<u8>,
    },
    ClientReply {
        status: ReplyStatus,
        leader_hint: u64,
        request_id: u64,
        payload: Vec<u8>,
    },
}

impl Message {
    pub fn is_heartbeat(&self) -> bool {
        matches!(self, Message::AppendBatch { entries, .. } if entries.is_empty())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, at: 0 }
    }

    fn u8(&mut self) -> Result<u8> {
        let v = *self.buf.get(self.at).ok_or(Error::MalformedMessage)?;
        self.at += 1;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.at + 4;
        let s = self.buf.get(self.at..end).ok_or(Error::MalformedMessage)?;
        self.at = end;
        Ok(u32::from_le_bytes(s.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let end = self.at + 8;
        let s = self.buf.get(self.at..end).ok_or(Error::MalformedMessage)?;
        self.at = end;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let end = self.at.checked_add(n).ok_or(Error::MalformedMessage)?;
        let s = self.buf.get(self.at..end).ok_or(Error::MalformedMessage)?;
        self.at = end;
        Ok(s.to_vec())
    }

    fn done(&self) -> Result<()> {
        if self.at == self.buf.len() {
            Ok(())
        } else {
            Err(Error::MalformedMessage)
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    match msg {
        Message::AppendBatch {
            term,
            leader,
            prev_index,
            prev_term,
            commit,
            gc_safe,
            entries,
        } => {
            out.push(MSG_APPEND_BATCH);
            out.extend_from_slice(&term.to_le_bytes());
            out.extend_from_slice(&leader.to_le_bytes());
            out.extend_from_slice(&prev_index.to_le_bytes());
            out.extend_from_slice(&prev_term.to_le_bytes());
            out.extend_from_slice(&commit.to_le_bytes());
            out.extend_from_slice(&gc_safe.to_le_bytes());
            out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
            for e in entries {
                encode_entry_parts(
                    &mut out,
                    e.term,
                    e.index,
                    e.kind,
                    e.client_id,
                    e.request_id,
                    &e.payload,
                );
            }
        }
        Message::AppendAck {
            term,
            from,
            success,
            last_index,
        } => {
            out.push(MSG_APPEND_ACK);
            out.extend_from_slice(&term.to_le_bytes());
            out.extend_from_slice(&from.to_le_bytes());
            out.push(*success as u8);
            out.extend_from_slice(&last_index.to_le_bytes());
        }
        Message::RequestVote {
            term,
            candidate,
            last_index,
            last_term,
        } => {
            out.push(MSG_REQUEST_VOTE);
            out.extend_from_slice(&term.to_le_bytes());
            out.extend_from_slice(&candidate.to_le_bytes());
            out.extend_from_slice(&last_index.to_le_bytes());
            out.extend_from_slice(&last_term.to_le_bytes());
        }
        Message::Vote { term, from, granted } => {
            out.push(MSG_VOTE);
            out.extend_from_slice(&term.to_le_bytes());
            out.extend_from_slice(&from.to_le_bytes());
            out.push(*granted as u8);
        }
        Message::ClientRequest {
            kind,
            client_id,
            request_id,
            payload,
        } => {
            out.push(MSG_CLIENT_REQUEST);
            out.push(*kind as u8);
            out.extend_from_slice(&client_id.to_le_bytes());
            out.extend_from_slice(&request_id.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
        Message::ClientReply {
            status,
            leader_hint,
            request_id,
            payload,
        } => {
            out.push(MSG_CLIENT_REPLY);
            out.push(*status as u8);
            out.extend_from_slice(&leader_hint.to_le_bytes());
            out.extend_from_slice(&request_id.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
    }
    out
}

/// Streaming encoder for batch sends: entry fields come from the arena, the
/// payload is appended straight from its in-place slice.
pub struct BatchEncoder {
    buf: Vec<u8>,
    count: u32,
    count_at: usize,
}

impl BatchEncoder {
    pub fn new(term: u64, leader: u64, prev_index: u64, prev_term: u64, commit: u64, gc_safe: u64) -> Self {
        let mut buf = Vec::with_capacity(256);
        buf.push(MSG_APPEND_BATCH);
        buf.extend_from_slice(&term.to_le_bytes());
        buf.extend_from_slice(&leader.to_le_bytes());
        buf.extend_from_slice(&prev_index.to_le_bytes());
        buf.extend_from_slice(&prev_term.to_le_bytes());
        buf.extend_from_slice(&commit.to_le_bytes());
        buf.extend_from_slice(&gc_safe.to_le_bytes());
        let count_at = buf.len();
        buf.extend_from_slice(&0u32.to_le_bytes());
        BatchEncoder {
            buf,
            count: 0,
            count_at,
        }
    }

    pub fn push_entry(
        &mut self,
        term: u64,
        index: u64,
        kind: u8,
        client_id: u64,
        request_id: u64,
        payload: &[u8],
    ) {
        encode_entry_parts(&mut self.buf, term, index, kind, client_id, request_id, payload);
        self.count += 1;
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.buf[self.count_at..self.count_at + 4].copy_from_slice(&self.count.to_le_bytes());
        self.buf
    }
}

fn encode_entry_parts(
    out: &mut Vec<u8>,
    term: u64,
    index: u64,
    kind: u8,
    client_id: u64,
    request_id: u64,
    payload: &[u8],
) {
    out.extend_from_slice(&term.to_le_bytes());
    out.extend_from_slice(&index.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&client_id.to_le_bytes());
    out.extend_from_slice(&request_id.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn decode(buf: &[u8]) -> Result<Message> {
    let mut r = Reader::new(buf);
    let msg = match r.u8()? {
        MSG_APPEND_BATCH => {
            let term = r.u64()?;
            let leader = r.u64()?;
            let prev_index = r.u64()?;
            let prev_term = r.u64()?;
            let commit = r.u64()?;
            let gc_safe = r.u64()?;
            let n = r.u32()?;
            if n as usize > buf.len() {
                return Err(Error::MalformedMessage);
            }
            let mut entries = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let term = r.u64()?;
                let index = r.u64()?;
                let kind = r.u8()?;
                let client_id = r.u64()?;
                let request_id = r.u64()?;
                let plen = r.u32()?;
                let payload = r.bytes(plen as usize)?;
                entries.push(WireEntry {
                    term,
                    index,
                    kind,
                    client_id,
                    request_id,
                    payload,
                });
            }
            Message::AppendBatch {
                term,
                leader,
                prev_index,
                prev_term,
                commit,
                gc_safe,
                entries,
            }
        }
        MSG_APPEND_ACK => Message::AppendAck {
            term: r.u64()?,
            from: r.u64()?,
            success: r.u8()? != 0,
            last_index: r.u64()?,
        },
        MSG_REQUEST_VOTE => Message::RequestVote {
            term: r.u64()?,
            candidate: r.u64()?,
            last_index: r.u64()?,
            last_term: r.u64()?,
        },
        MSG_VOTE => Message::Vote {
            term: r.u64()?,
            from: r.u64()?,
            granted: r.u8()? != 0,
        },
        MSG_CLIENT_REQUEST => {
            let kind = RequestKind::from_u8(r.u8()?).ok_or(Error::MalformedMessage)?;
            let client_id = r.u64()?;
            let request_id = r.u64()?;
            let plen = r.u32()?;
            let payload = r.bytes(plen as usize)?;
            Message::ClientRequest {
                kind,
                client_id,
                request_id,
                payload,
            }
        }
        MSG_CLIENT_REPLY => {
            let status = ReplyStatus::from_u8(r.u8()?).ok_or(Error::MalformedMessage)?;
            let leader_hint = r.u64()?;
            let request_id = r.u64()?;
            let plen = r.u32()?;
            let payload = r.bytes(plen as usize)?;
            Message::ClientReply {
                status,
                leader_hint,
                request_id,
                payload,
            }
        }
        _ => return Err(Error::MalformedMessage),
    };
    r.done()?;
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_entry() -> impl Strategy<Value = WireEntry> {
        (
            any::<u64>(),
            any::<u64>(),
            1u8..5,
            any::<u64>(),
            any::<u64>(),
            proptest::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(term, index, kind, client_id, request_id, payload)| WireEntry {
                term,
                index,
                kind,
                client_id,
                request_id,
                payload,
            })
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                proptest::collection::vec(arb_entry(), 0..5)
            )
                .prop_map(|(term, leader, prev_index, prev_term, commit, entries)| {
                    Message::AppendBatch {
                        term,
                        leader,
                        prev_index,
                        prev_term,
                        commit,
                        gc_safe: commit / 2,
                        entries,
                    }
                }),
            (any::<u64>(), any::<u64>(), any::<bool>(), any::<u64>()).prop_map(
                |(term, from, success, last_index)| Message::AppendAck {
                    term,
                    from,
                    success,
                    last_index
                }
            ),
            (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(
                |(term, candidate, last_index, last_term)| Message::RequestVote {
                    term,
                    candidate,
                    last_index,
                    last_term
                }
            ),
            (any::<u64>(), any::<u64>(), any::<bool>()).prop_map(|(term, from, granted)| {
                Message::Vote { term, from, granted }
            }),
            (
                prop_oneof![Just(RequestKind::Update), Just(RequestKind::Read), Just(RequestKind::Probe)],
                any::<u64>(),
                any::<u64>(),
                proptest::collection::vec(any::<u8>(), 0..64)
            )
                .prop_map(|(kind, client_id, request_id, payload)| Message::ClientRequest {
                    kind,
                    client_id,
                    request_id,
                    payload
                }),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(msg in arb_message()) {
            let bytes = encode(&msg);
            prop_assert_eq!(decode(&bytes).unwrap(), msg);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }
    }

    #[test]
    fn batch_encoder_matches_owned_encoding() {
        let entries = vec![
            WireEntry {
                term: 2,
                index: 7,
                kind: 1,
                client_id: 9,
                request_id: 1,
                payload: b"abc".to_vec(),
            },
            WireEntry {
                term: 2,
                index: 8,
                kind: 3,
                client_id: 0,
                request_id: 0,
                payload: vec![],
            },
        ];
        let owned = encode(&Message::AppendBatch {
            term: 2,
            leader: 0,
            prev_index: 6,
            prev_term: 1,
            commit: 5,
            gc_safe: 3,
            entries: entries.clone(),
        });
        let mut enc = BatchEncoder::new(2, 0, 6, 1, 5, 3);
        for e in &entries {
            enc.push_entry(e.term, e.index, e.kind, e.client_id, e.request_id, &e.payload);
        }
        assert_eq!(enc.finish(), owned);
    }

    #[test]
    fn truncated_message_is_rejected() {
        let bytes = encode(&Message::AppendAck {
            term: 1,
            from: 2,
            success: true,
            last_index: 3,
        });
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(decode(&extended).is_err());
    }
}
