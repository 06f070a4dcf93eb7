//! Binary request codecs (little-endian, length-prefixed).
//!
//! One tag byte selects the operation; argument layouts are fixed per tag.
//! Decoders borrow from the request blob — parsing costs no copies.

use crate::error::{Error, Result};

fn read_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or(Error::MalformedRequest)
}

fn read_u64(buf: &[u8], at: usize) -> Result<u64> {
    buf.get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
        .ok_or(Error::MalformedRequest)
}

fn read_i64(buf: &[u8], at: usize) -> Result<i64> {
    buf.get(at..at + 8)
        .map(|s| i64::from_le_bytes(s.try_into().unwrap()))
        .ok_or(Error::MalformedRequest)
}

// ---- key-value ----

pub const KV_GET: u8 = 1;
pub const KV_PUT: u8 = 2;
pub const KV_DEL: u8 = 3;

#[derive(Debug, PartialEq, Eq)]
pub enum KvReq<'a> {
    Get(&'a [u8]),
    Put(&'a [u8], &'a [u8]),
    Del(&'a [u8]),
}

impl<'a> KvReq<'a> {
    pub fn key(&self) -> &'a [u8] {
        match self {
            KvReq::Get(k) | KvReq::Put(k, _) | KvReq::Del(k) => k,
        }
    }
}

pub fn kv_get(key: &[u8]) -> Vec<u8> {
    let mut v = vec![KV_GET];
    v.extend_from_slice(&(key.len() as u32).to_le_bytes());
    v.extend_from_slice(key);
    v
}

pub fn kv_put(key: &[u8], val: &[u8]) -> Vec<u8> {
    let mut v = vec![KV_PUT];
    v.extend_from_slice(&(key.len() as u32).to_le_bytes());
    v.extend_from_slice(key);
    v.extend_from_slice(&(val.len() as u32).to_le_bytes());
    v.extend_from_slice(val);
    v
}

pub fn kv_del(key: &[u8]) -> Vec<u8> {
    let mut v = vec![KV_DEL];
    v.extend_from_slice(&(key.len() as u32).to_le_bytes());
    v.extend_from_slice(key);
    v
}

pub fn decode_kv(req: &[u8]) -> Result<KvReq<'_>> {
    let tag = *req.first().ok_or(Error::MalformedRequest)?;
    let klen = read_u32(req, 1)? as usize;
    let key = req.get(5..5 + klen).ok_or(Error::MalformedRequest)?;
    match tag {
        KV_GET | KV_DEL => {
            if req.len() != 5 + klen {
                return Err(Error::MalformedRequest);
            }
            Ok(if tag == KV_GET {
                KvReq::Get(key)
            } else {
                KvReq::Del(key)
            })
        }
        KV_PUT => {
            let vat = 5 + klen;
            let vlen = read_u32(req, vat)? as usize;
            let val = req
                .get(vat + 4..vat + 4 + vlen)
                .ok_or(Error::MalformedRequest)?;
            if req.len() != vat + 4 + vlen {
                return Err(Error::MalformedRequest);
            }
            Ok(KvReq::Put(key, val))
        }
        _ => Err(Error::MalformedRequest),
    }
}

// ---- graph ----

pub const GRAPH_ADD_EDGE: u8 = 1;
pub const GRAPH_DEL_EDGE: u8 = 2;
pub const GRAPH_OUT_DEGREE: u8 = 3;
pub const GRAPH_EDGE_ATTR: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphReq {
    AddEdge { u: u64, v: u64, attr: u64 },
    DelEdge { u: u64, v: u64 },
    OutDegree { v: u64 },
    EdgeAttr { u: u64, v: u64 },
}

impl GraphReq {
    /// Vertices this operation touches (the commutativity footprint).
    pub fn touched(&self) -> [Option<u64>; 2] {
        match self {
            GraphReq::AddEdge { u, v, .. }
            | GraphReq::DelEdge { u, v }
            | GraphReq::EdgeAttr { u, v } => [Some(*u), Some(*v)],
            GraphReq::OutDegree { v } => [Some(*v), None],
        }
    }
}

pub fn graph_add_edge(u: u64, v: u64, attr: u64) -> Vec<u8> {
    let mut b = vec![GRAPH_ADD_EDGE];
    b.extend_from_slice(&u.to_le_bytes());
    b.extend_from_slice(&v.to_le_bytes());
    b.extend_from_slice(&attr.to_le_bytes());
    b
}

pub fn graph_del_edge(u: u64, v: u64) -> Vec<u8> {
    let mut b = vec![GRAPH_DEL_EDGE];
    b.extend_from_slice(&u.to_le_bytes());
    b.extend_from_slice(&v.to_le_bytes());
    b
}

pub fn graph_out_degree(v: u64) -> Vec<u8> {
    let mut b = vec![GRAPH_OUT_DEGREE];
    b.extend_from_slice(&v.to_le_bytes());
    b
}

pub fn graph_edge_attr(u: u64, v: u64) -> Vec<u8> {
    let mut b = vec![GRAPH_EDGE_ATTR];
    b.extend_from_slice(&u.to_le_bytes());
    b.extend_from_slice(&v.to_le_bytes());
    b
}

pub fn decode_graph(req: &[u8]) -> Result<GraphReq> {
    let tag = *req.first().ok_or(Error::MalformedRequest)?;
    let want = |n: usize| {
        if req.len() == 1 + 8 * n {
            Ok(())
        } else {
            Err(Error::MalformedRequest)
        }
    };
    match tag {
        GRAPH_ADD_EDGE => {
            want(3)?;
            Ok(GraphReq::AddEdge {
                u: read_u64(req, 1)?,
                v: read_u64(req, 9)?,
                attr: read_u64(req, 17)?,
            })
        }
        GRAPH_DEL_EDGE => {
            want(2)?;
            Ok(GraphReq::DelEdge {
                u: read_u64(req, 1)?,
                v: read_u64(req, 9)?,
            })
        }
        GRAPH_OUT_DEGREE => {
            want(1)?;
            Ok(GraphReq::OutDegree {
                v: read_u64(req, 1)?,
            })
        }
        GRAPH_EDGE_ATTR => {
            want(2)?;
            Ok(GraphReq::EdgeAttr {
                u: read_u64(req, 1)?,
                v: read_u64(req, 9)?,
            })
        }
        _ => Err(Error::MalformedRequest),
    }
}

// ---- vote / top-K ----

pub const VOTE_SUBMIT: u8 = 1;
pub const VOTE_UPVOTE: u8 = 2;
pub const VOTE_DOWNVOTE: u8 = 3;
pub const VOTE_TOPK: u8 = 4;

#[derive(Debug, PartialEq, Eq)]
pub enum VoteReq<'a> {
    Submit { id: u64, title: &'a [u8] },
    Upvote { id: u64 },
    Downvote { id: u64 },
    TopK,
}

pub fn vote_submit(id: u64, title: &[u8]) -> Vec<u8> {
    let mut b = vec![VOTE_SUBMIT];
    b.extend_from_slice(&id.to_le_bytes());
    b.extend_from_slice(&(title.len() as u32).to_le_bytes());
    b.extend_from_slice(title);
    b
}

pub fn vote_upvote(id: u64) -> Vec<u8> {
    let mut b = vec![VOTE_UPVOTE];
    b.extend_from_slice(&id.to_le_bytes());
    b
}

pub fn vote_downvote(id: u64) -> Vec<u8> {
    let mut b = vec![VOTE_DOWNVOTE];
    b.extend_from_slice(&id.to_le_bytes());
    b
}

pub fn vote_topk() -> Vec<u8> {
    vec![VOTE_TOPK]
}

pub fn decode_vote(req: &[u8]) -> Result<VoteReq<'_>> {
    let tag = *req.first().ok_or(Error::MalformedRequest)?;
    match tag {
        VOTE_SUBMIT => {
            let id = read_u64(req, 1)?;
            let tlen = read_u32(req, 9)? as usize;
            let title = req.get(13..13 + tlen).ok_or(Error::MalformedRequest)?;
            if req.len() != 13 + tlen {
                return Err(Error::MalformedRequest);
            }
            Ok(VoteReq::Submit { id, title })
        }
        VOTE_UPVOTE | VOTE_DOWNVOTE => {
            if req.len() != 9 {
                return Err(Error::MalformedRequest);
            }
            let id = read_u64(req, 1)?;
            Ok(if tag == VOTE_UPVOTE {
                VoteReq::Upvote { id }
            } else {
                VoteReq::Downvote { id }
            })
        }
        VOTE_TOPK => {
            if req.len() != 1 {
                return Err(Error::MalformedRequest);
            }
            Ok(VoteReq::TopK)
        }
        _ => Err(Error::MalformedRequest),
    }
}

/// Decode a TOPK response body: (status, [(id, count)]).
pub fn decode_topk_response(resp: &[u8]) -> Result<(u8, Vec<(u64, i64)>)> {
    let status = *resp.first().ok_or(Error::MalformedRequest)?;
    if status != crate::service::status::OK {
        return Ok((status, vec![]));
    }
    let n = read_u32(resp, 1)? as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let at = 5 + i * 16;
        out.push((read_u64(resp, at)?, read_i64(resp, at + 8)?));
    }
    Ok((status, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kv_roundtrip_examples() {
        assert_eq!(decode_kv(&kv_get(b"k1")).unwrap(), KvReq::Get(b"k1"));
        assert_eq!(
            decode_kv(&kv_put(b"k", b"value")).unwrap(),
            KvReq::Put(b"k", b"value")
        );
        assert_eq!(decode_kv(&kv_del(b"gone")).unwrap(), KvReq::Del(b"gone"));
        assert!(decode_kv(&[]).is_err());
        assert!(decode_kv(&[9, 0, 0, 0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn kv_roundtrip(key in proptest::collection::vec(any::<u8>(), 0..32),
                        val in proptest::collection::vec(any::<u8>(), 0..32)) {
            let put = kv_put(&key, &val);
            prop_assert_eq!(decode_kv(&put).unwrap(), KvReq::Put(&key, &val));
            let get = kv_get(&key);
            prop_assert_eq!(decode_kv(&get).unwrap(), KvReq::Get(&key));
        }

        #[test]
        fn graph_roundtrip(u in any::<u64>(), v in any::<u64>(), attr in any::<u64>()) {
            let add = graph_add_edge(u, v, attr);
            prop_assert_eq!(decode_graph(&add).unwrap(), GraphReq::AddEdge { u, v, attr });
            let deg = graph_out_degree(v);
            prop_assert_eq!(decode_graph(&deg).unwrap(), GraphReq::OutDegree { v });
        }

        #[test]
        fn vote_roundtrip(id in any::<u64>(), title in proptest::collection::vec(any::<u8>(), 0..24)) {
            let submit = vote_submit(id, &title);
            prop_assert_eq!(decode_vote(&submit).unwrap(), VoteReq::Submit { id, title: &title });
            let up = vote_upvote(id);
            prop_assert_eq!(decode_vote(&up).unwrap(), VoteReq::Upvote { id });
            let topk = vote_topk();
            prop_assert_eq!(decode_vote(&topk).unwrap(), VoteReq::TopK);
        }

        #[test]
        fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_kv(&bytes);
            let _ = decode_graph(&bytes);
            let _ = decode_vote(&bytes);
        }
    }
}
