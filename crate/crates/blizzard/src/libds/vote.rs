//! Sharded top-K vote service (news-aggregator backend).
//!
//! Stories are sharded by id hash. Each shard keeps an indexed binary heap
//! pair over `[id u64 | count i64 | article_off u64]` slots: `top` holds the
//! shard's K strongest stories with the *weakest* at its root, `rest` holds
//! the remainder with the *strongest* at its root, so a vote moves at most
//! one story across the boundary in O(log n). Article blocks carry the
//! back-reference (which heap, which slot) plus the submitted title; a
//! per-shard hashmap maps story id to its article block.
//!
//! Ordering is strength = (count, then smaller id wins ties), which makes
//! top-K output deterministic. Vote increments commute with each other
//! unconditionally (per-shard locks serialize the heap surgery); TOPK
//! commutes only with other TOPK reads.

use crate::error::Result;
use crate::pheap::{Arena, PHandle, ROOT_SERVICE};
use crate::service::{status, ExecCtx, LockSet, MutexDelayedLock, RefModel, Service};
use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::codec::{self, VoteReq};
use super::kv::{fnv1a, PHashMap};

const ROOT_K: u64 = 0;
const ROOT_S: u64 = 8;
const ROOT_CAP: u64 = 16;
const ROOT_SHARDS: u64 = 24;

const SHARD_TOP_LEN: u64 = 0;
const SHARD_REST_LEN: u64 = 8;
const SHARD_TOP_ARR: u64 = 16;
const SHARD_REST_ARR: u64 = 24;
const SHARD_MAP: u64 = 32;
const SHARD_BLOCK_LEN: u64 = 40;

const SLOT_ID: u64 = 0;
const SLOT_COUNT: u64 = 8;
const SLOT_ART: u64 = 16;
const SLOT_LEN: u64 = 24;

const ART_LOC: u64 = 0;
const ART_IDX: u64 = 8;
const ART_TLEN: u64 = 16;
const ART_TITLE: u64 = 20;

const LOC_REST: u8 = 0;
const LOC_TOP: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    id: u64,
    count: i64,
    art: u64,
}

/// Strength order: more votes first, smaller id breaking ties.
fn stronger(a: (i64, u64), b: (i64, u64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

pub const DEFAULT_K: u64 = 8;
pub const DEFAULT_SHARDS: u64 = 4;
pub const DEFAULT_SHARD_CAP: u64 = 1 << 14;

pub struct VoteService {
    k: u64,
    shards: u64,
    shard_cap: u64,
    map_buckets: u64,
    locks: Vec<Arc<Mutex<()>>>,
    sample_articles: u64,
}

impl VoteService {
    pub fn new(k: u64, shards: u64, shard_cap: u64) -> VoteService {
        VoteService {
            k,
            shards,
            shard_cap,
            map_buckets: 1 << 10,
            locks: (0..shards).map(|_| Arc::new(Mutex::new(()))).collect(),
            sample_articles: 48,
        }
    }

    pub fn with_sample_articles(mut self, n: u64) -> Self {
        self.sample_articles = n.max(1);
        self
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn shard_of(&self, id: u64) -> u64 {
        fnv1a(&id.to_le_bytes()) % self.shards
    }

    fn root(&self, arena: &Arena) -> Result<PHandle> {
        arena.root(ROOT_SERVICE)
    }

    fn shard_handle(&self, arena: &Arena, s: u64) -> Result<PHandle> {
        let root = self.root(arena)?;
        arena.handle_at(arena.read_u64(root, ROOT_SHARDS + s * 8)?)
    }

    fn shard_map(&self, arena: &Arena, shard: PHandle) -> Result<PHashMap> {
        PHashMap::open(arena, arena.handle_at(arena.read_u64(shard, SHARD_MAP)?)?)
    }

    fn arr_handle(&self, arena: &Arena, shard: PHandle, loc: u8) -> Result<PHandle> {
        let field = if loc == LOC_TOP { SHARD_TOP_ARR } else { SHARD_REST_ARR };
        arena.handle_at(arena.read_u64(shard, field)?)
    }

    fn len_of(&self, arena: &Arena, shard: PHandle, loc: u8) -> Result<u64> {
        let field = if loc == LOC_TOP { SHARD_TOP_LEN } else { SHARD_REST_LEN };
        arena.read_u64(shard, field)
    }

    fn set_len(&self, ctx: &mut ExecCtx<'_>, shard: PHandle, loc: u8, len: u64) -> Result<()> {
        let field = if loc == LOC_TOP { SHARD_TOP_LEN } else { SHARD_REST_LEN };
        ctx.write_u64(shard, field, len)
    }

    fn slot_at(&self, arena: &Arena, arr: PHandle, i: u64) -> Result<Slot> {
        Ok(Slot {
            id: arena.read_u64(arr, i * SLOT_LEN + SLOT_ID)?,
            count: arena.read_u64(arr, i * SLOT_LEN + SLOT_COUNT)? as i64,
            art: arena.read_u64(arr, i * SLOT_LEN + SLOT_ART)?,
        })
    }

    /// Write a slot and fix the article block's back-reference.
    fn place(
        &self,
        ctx: &mut ExecCtx<'_>,
        arr: PHandle,
        loc: u8,
        i: u64,
        slot: Slot,
    ) -> Result<()> {
        let mut buf = [0u8; SLOT_LEN as usize];
        buf[0..8].copy_from_slice(&slot.id.to_le_bytes());
        buf[8..16].copy_from_slice(&(slot.count as u64).to_le_bytes());
        buf[16..24].copy_from_slice(&slot.art.to_le_bytes());
        ctx.write(arr, i * SLOT_LEN, &buf)?;
        let art = ctx.arena.handle_at(slot.art)?;
        ctx.write(art, ART_LOC, &[loc])?;
        ctx.write_u64(art, ART_IDX, i)?;
        Ok(())
    }

    /// True when position `parent` may be above `child` in heap `loc`.
    fn heap_ok(&self, loc: u8, parent: Slot, child: Slot) -> bool {
        let p = (parent.count, parent.id);
        let c = (child.count, child.id);
        if loc == LOC_TOP {
            // weakest at root
            !stronger(p, c)
        } else {
            // strongest at root
            !stronger(c, p)
        }
    }

    fn sift_up(&self, ctx: &mut ExecCtx<'_>, shard: PHandle, loc: u8, mut i: u64) -> Result<u64> {
        let arr = self.arr_handle(ctx.arena, shard, loc)?;
        while i > 0 {
            let p = (i - 1) / 2;
            let parent = self.slot_at(ctx.arena, arr, p)?;
            let me = self.slot_at(ctx.arena, arr, i)?;
            if self.heap_ok(loc, parent, me) {
                break;
            }
            self.place(ctx, arr, loc, p, me)?;
            self.place(ctx, arr, loc, i, parent)?;
            i = p;
        }
        Ok(i)
    }

    fn sift_down(&self, ctx: &mut ExecCtx<'_>, shard: PHandle, loc: u8, mut i: u64) -> Result<u64> {
        let arr = self.arr_handle(ctx.arena, shard, loc)?;
        let len = self.len_of(ctx.arena, shard, loc)?;
        loop {
            let l = 2 * i + 1;
            let r = 2 * i + 2;
            if l >= len {
                break;
            }
            let me = self.slot_at(ctx.arena, arr, i)?;
            let lc = self.slot_at(ctx.arena, arr, l)?;
            let mut best = (l, lc);
            if r < len {
                let rc = self.slot_at(ctx.arena, arr, r)?;
                if !self.heap_ok(loc, lc, rc) {
                    best = (r, rc);
                }
            }
            if self.heap_ok(loc, me, best.1) {
                break;
            }
            self.place(ctx, arr, loc, i, best.1)?;
            self.place(ctx, arr, loc, best.0, me)?;
            i = best.0;
        }
        Ok(i)
    }

    fn heap_push(&self, ctx: &mut ExecCtx<'_>, shard: PHandle, loc: u8, slot: Slot) -> Result<()> {
        let arr = self.arr_handle(ctx.arena, shard, loc)?;
        let len = self.len_of(ctx.arena, shard, loc)?;
        self.place(ctx, arr, loc, len, slot)?;
        self.set_len(ctx, shard, loc, len + 1)?;
        self.sift_up(ctx, shard, loc, len)?;
        Ok(())
    }

    fn heap_remove_at(&self, ctx: &mut ExecCtx<'_>, shard: PHandle, loc: u8, i: u64) -> Result<Slot> {
        let arr = self.arr_handle(ctx.arena, shard, loc)?;
        let len = self.len_of(ctx.arena, shard, loc)?;
        let removed = self.slot_at(ctx.arena, arr, i)?;
        let last = len - 1;
        self.set_len(ctx, shard, loc, last)?;
        if i != last {
            let moved = self.slot_at(ctx.arena, arr, last)?;
            self.place(ctx, arr, loc, i, moved)?;
            let at = self.sift_up(ctx, shard, loc, i)?;
            self.sift_down(ctx, shard, loc, at)?;
        }
        Ok(removed)
    }

    /// Restore the shard invariants after any single change: fill `top` to K
    /// while stories remain, then swap across the boundary while the
    /// strongest bystander beats the weakest member.
    fn rebalance(&self, ctx: &mut ExecCtx<'_>, shard: PHandle, k: u64) -> Result<()> {
        loop {
            let top_len = self.len_of(ctx.arena, shard, LOC_TOP)?;
            let rest_len = self.len_of(ctx.arena, shard, LOC_REST)?;
            if top_len < k && rest_len > 0 {
                let s = self.heap_remove_at(ctx, shard, LOC_REST, 0)?;
                self.heap_push(ctx, shard, LOC_TOP, s)?;
                continue;
            }
            if top_len > 0 && rest_len > 0 {
                let top_arr = self.arr_handle(ctx.arena, shard, LOC_TOP)?;
                let rest_arr = self.arr_handle(ctx.arena, shard, LOC_REST)?;
                let weakest_top = self.slot_at(ctx.arena, top_arr, 0)?;
                let strongest_rest = self.slot_at(ctx.arena, rest_arr, 0)?;
                if stronger(
                    (strongest_rest.count, strongest_rest.id),
                    (weakest_top.count, weakest_top.id),
                ) {
                    let promoted = self.heap_remove_at(ctx, shard, LOC_REST, 0)?;
                    let demoted = self.heap_remove_at(ctx, shard, LOC_TOP, 0)?;
                    self.heap_push(ctx, shard, LOC_TOP, promoted)?;
                    self.heap_push(ctx, shard, LOC_REST, demoted)?;
                    continue;
                }
            }
            return Ok(());
        }
    }

    fn vote(&self, ctx: &mut ExecCtx<'_>, id: u64, delta: i64, response: &mut Vec<u8>) -> Result<()> {
        let shard = self.shard_handle(ctx.arena, self.shard_of(id))?;
        let map = self.shard_map(ctx.arena, shard)?;
        let art_off = match map.get(ctx.arena, &id.to_le_bytes())? {
            Some(v) => u64::from_le_bytes(v.try_into().expect("8-byte article ref")),
            None => {
                response.push(status::UNKNOWN_ARTICLE);
                return Ok(());
            }
        };
        let art = ctx.arena.handle_at(art_off)?;
        let loc = ctx.arena.read_vec(art, ART_LOC, 1)?[0];
        let idx = ctx.arena.read_u64(art, ART_IDX)?;
        let arr = self.arr_handle(ctx.arena, shard, loc)?;
        let mut slot = self.slot_at(ctx.arena, arr, idx)?;
        debug_assert_eq!(slot.id, id, "article back-reference must be exact");
        slot.count += delta;
        self.place(ctx, arr, loc, idx, slot)?;
        let at = self.sift_up(ctx, shard, loc, idx)?;
        self.sift_down(ctx, shard, loc, at)?;
        let k = ctx.arena.read_u64(self.root(ctx.arena)?, ROOT_K)?;
        self.rebalance(ctx, shard, k)?;
        response.push(status::OK);
        Ok(())
    }

    fn top_k(&self, arena: &Arena) -> Result<Vec<(u64, i64)>> {
        let root = self.root(arena)?;
        let k = arena.read_u64(root, ROOT_K)?;
        let s = arena.read_u64(root, ROOT_S)?;
        let mut all: Vec<(u64, i64)> = Vec::new();
        for sh in 0..s {
            let shard = self.shard_handle(arena, sh)?;
            let arr = self.arr_handle(arena, shard, LOC_TOP)?;
            let len = self.len_of(arena, shard, LOC_TOP)?;
            for i in 0..len {
                let slot = self.slot_at(arena, arr, i)?;
                all.push((slot.id, slot.count));
            }
        }
        all.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k as usize);
        Ok(all)
    }
}

impl Default for VoteService {
    fn default() -> Self {
        VoteService::new(DEFAULT_K, DEFAULT_SHARDS, DEFAULT_SHARD_CAP)
    }
}

impl Service for VoteService {
    fn name(&self) -> &'static str {
        "vote"
    }

    fn init(&self, arena: &Arena) -> Result<()> {
        let root = arena.alloc(ROOT_SHARDS + self.shards * 8)?;
        arena.write_u64(root, ROOT_K, self.k)?;
        arena.write_u64(root, ROOT_S, self.shards)?;
        arena.write_u64(root, ROOT_CAP, self.shard_cap)?;
        for s in 0..self.shards {
            let shard = arena.alloc(SHARD_BLOCK_LEN)?;
            let top = arena.alloc(self.shard_cap * SLOT_LEN)?;
            let rest = arena.alloc(self.shard_cap * SLOT_LEN)?;
            let map = PHashMap::create(arena, self.map_buckets)?;
            arena.write_u64(shard, SHARD_TOP_ARR, top.offset())?;
            arena.write_u64(shard, SHARD_REST_ARR, rest.offset())?;
            arena.write_u64(shard, SHARD_MAP, map.root().offset())?;
            arena.flush(shard, 0, SHARD_BLOCK_LEN)?;
            arena.write_u64(root, ROOT_SHARDS + s * 8, shard.offset())?;
        }
        arena.flush(root, 0, ROOT_SHARDS + self.shards * 8)?;
        arena.fence();
        arena.set_root(ROOT_SERVICE, root)
    }

    fn handle(
        &self,
        ctx: &mut ExecCtx<'_>,
        request: &[u8],
        locks: &mut LockSet,
        response: &mut Vec<u8>,
    ) -> Result<()> {
        let req = match codec::decode_vote(request) {
            Ok(r) => r,
            Err(_) => {
                response.push(status::MALFORMED);
                return Ok(());
            }
        };
        match req {
            VoteReq::Submit { id, title } => {
                let sh = self.shard_of(id);
                locks.push(Box::new(MutexDelayedLock::new(
                    self.locks[sh as usize].lock_arc(),
                )));
                let shard = self.shard_handle(ctx.arena, sh)?;
                let map = self.shard_map(ctx.arena, shard)?;
                if map.get(ctx.arena, &id.to_le_bytes())?.is_some() {
                    response.push(status::EXISTS);
                    return Ok(());
                }
                let root = self.root(ctx.arena)?;
                let cap = ctx.arena.read_u64(root, ROOT_CAP)?;
                let used = self.len_of(ctx.arena, shard, LOC_TOP)?
                    + self.len_of(ctx.arena, shard, LOC_REST)?;
                if used >= cap {
                    response.push(status::FAILED);
                    return Ok(());
                }
                let art = ctx.alloc(ART_TITLE + title.len() as u64)?;
                ctx.write_fresh(art, ART_LOC, &[LOC_REST, 0, 0, 0, 0, 0, 0, 0])?;
                ctx.write_fresh(art, ART_TLEN, &(title.len() as u32).to_le_bytes())?;
                ctx.write_fresh(art, ART_TITLE, title)?;
                map.insert(ctx, &id.to_le_bytes(), &art.offset().to_le_bytes())?;
                self.heap_push(
                    ctx,
                    shard,
                    LOC_REST,
                    Slot {
                        id,
                        count: 0,
                        art: art.offset(),
                    },
                )?;
                let k = ctx.arena.read_u64(root, ROOT_K)?;
                self.rebalance(ctx, shard, k)?;
                response.push(status::OK);
            }
            VoteReq::Upvote { id } => {
                let sh = self.shard_of(id);
                locks.push(Box::new(MutexDelayedLock::new(
                    self.locks[sh as usize].lock_arc(),
                )));
                self.vote(ctx, id, 1, response)?;
            }
            VoteReq::Downvote { id } => {
                let sh = self.shard_of(id);
                locks.push(Box::new(MutexDelayedLock::new(
                    self.locks[sh as usize].lock_arc(),
                )));
                self.vote(ctx, id, -1, response)?;
            }
            VoteReq::TopK => {
                // the scheduler never co-schedules TOPK with shard updates,
                // so the merge runs lock-free
                let top = self.top_k(ctx.arena)?;
                response.push(status::OK);
                response.extend_from_slice(&(top.len() as u32).to_le_bytes());
                for (id, count) in top {
                    response.extend_from_slice(&id.to_le_bytes());
                    response.extend_from_slice(&count.to_le_bytes());
                }
            }
        }
        Ok(())
    }

    fn commutes(&self, a: &[u8], b: &[u8]) -> bool {
        let (ra, rb) = match (codec::decode_vote(a), codec::decode_vote(b)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return false,
        };
        match (&ra, &rb) {
            (VoteReq::TopK, VoteReq::TopK) => true,
            (VoteReq::TopK, _) | (_, VoteReq::TopK) => false,
            // vote increments commute unconditionally (results carry no
            // counts); submissions conflict with anything on the same id
            (VoteReq::Submit { id: a, .. }, VoteReq::Submit { id: b, .. }) => a != b,
            (VoteReq::Submit { id: a, .. }, VoteReq::Upvote { id: b })
            | (VoteReq::Submit { id: a, .. }, VoteReq::Downvote { id: b })
            | (VoteReq::Upvote { id: b }, VoteReq::Submit { id: a, .. })
            | (VoteReq::Downvote { id: b }, VoteReq::Submit { id: a, .. }) => a != b,
            _ => true,
        }
    }

    fn is_read(&self, request: &[u8]) -> bool {
        request.first() == Some(&codec::VOTE_TOPK)
    }

    fn sample_request(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let id = rng.random_range(0..self.sample_articles);
        match rng.random_range(0..100u8) {
            0..=19 => codec::vote_submit(id, format!("story-{id}").as_bytes()),
            20..=64 => codec::vote_upvote(id),
            65..=89 => codec::vote_downvote(id),
            _ => codec::vote_topk(),
        }
    }

    fn recover_check(&self, arena: &Arena) -> Result<Vec<String>> {
        let mut violations = Vec::new();
        let root = self.root(arena)?;
        let k = arena.read_u64(root, ROOT_K)?;
        let s = arena.read_u64(root, ROOT_S)?;
        let cap = arena.read_u64(root, ROOT_CAP)?;
        for sh in 0..s {
            let shard = self.shard_handle(arena, sh)?;
            let map = self.shard_map(arena, shard)?;
            violations.extend(map.check(arena)?);
            let top_len = self.len_of(arena, shard, LOC_TOP)?;
            let rest_len = self.len_of(arena, shard, LOC_REST)?;
            if top_len + rest_len > cap {
                violations.push(format!("shard {sh}: lengths exceed capacity"));
                continue;
            }
            let total = top_len + rest_len;
            if top_len != total.min(k) {
                violations.push(format!(
                    "shard {sh}: top holds {top_len} of {total} stories (K={k})"
                ));
            }
            for (loc, len) in [(LOC_TOP, top_len), (LOC_REST, rest_len)] {
                let arr = self.arr_handle(arena, shard, loc)?;
                for i in 0..len {
                    let slot = self.slot_at(arena, arr, i)?;
                    if i > 0 {
                        let parent = self.slot_at(arena, arr, (i - 1) / 2)?;
                        if !self.heap_ok(loc, parent, slot) {
                            violations.push(format!(
                                "shard {sh} heap {loc}: property broken at {i}"
                            ));
                        }
                    }
                    // back-reference exactness
                    let art = arena.handle_at(slot.art)?;
                    let aloc = arena.read_vec(art, ART_LOC, 1)?[0];
                    let aidx = arena.read_u64(art, ART_IDX)?;
                    if aloc != loc || aidx != i {
                        violations.push(format!(
                            "shard {sh}: article {} back-ref ({aloc},{aidx}) != ({loc},{i})",
                            slot.id
                        ));
                    }
                    match map.get(arena, &slot.id.to_le_bytes())? {
                        Some(v) if v == slot.art.to_le_bytes() => {}
                        _ => violations.push(format!(
                            "shard {sh}: map entry for {} does not point at its article",
                            slot.id
                        )),
                    }
                }
            }
            // boundary: every top member at least as strong as every rest member
            if top_len > 0 && rest_len > 0 {
                let top_arr = self.arr_handle(arena, shard, LOC_TOP)?;
                let rest_arr = self.arr_handle(arena, shard, LOC_REST)?;
                let weakest_top = self.slot_at(arena, top_arr, 0)?;
                let strongest_rest = self.slot_at(arena, rest_arr, 0)?;
                if stronger(
                    (strongest_rest.count, strongest_rest.id),
                    (weakest_top.count, weakest_top.id),
                ) {
                    violations.push(format!(
                        "shard {sh}: rest root {} beats top root {}",
                        strongest_rest.id, weakest_top.id
                    ));
                }
            }
        }
        Ok(violations)
    }

    fn state_digest(&self, arena: &Arena) -> Result<Vec<u8>> {
        let root = self.root(arena)?;
        let s = arena.read_u64(root, ROOT_S)?;
        let mut all: Vec<(u64, i64, Vec<u8>)> = Vec::new();
        for sh in 0..s {
            let shard = self.shard_handle(arena, sh)?;
            for loc in [LOC_TOP, LOC_REST] {
                let arr = self.arr_handle(arena, shard, loc)?;
                let len = self.len_of(arena, shard, loc)?;
                for i in 0..len {
                    let slot = self.slot_at(arena, arr, i)?;
                    let art = arena.handle_at(slot.art)?;
                    let tlen = arena.read_u32(art, ART_TLEN)?;
                    let title = arena.read_vec(art, ART_TITLE, tlen as u64)?;
                    all.push((slot.id, slot.count, title));
                }
            }
        }
        all.sort();
        let mut out = Vec::new();
        for (id, count, title) in all {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(&(title.len() as u32).to_le_bytes());
            out.extend_from_slice(&title);
        }
        Ok(out)
    }

    fn new_model(&self) -> Box<dyn RefModel> {
        Box::new(VoteModel {
            articles: BTreeMap::new(),
            k: self.k,
        })
    }
}

/// Full-sort reference: TOPK is the first K of all stories ordered by votes
/// descending, id ascending.
pub struct VoteModel {
    articles: BTreeMap<u64, (i64, Vec<u8>)>,
    k: u64,
}

impl RefModel for VoteModel {
    fn apply(&mut self, request: &[u8]) -> Vec<u8> {
        match codec::decode_vote(request) {
            Ok(VoteReq::Submit { id, title }) => {
                if self.articles.contains_key(&id) {
                    vec![status::EXISTS]
                } else {
                    self.articles.insert(id, (0, title.to_vec()));
                    vec![status::OK]
                }
            }
            Ok(VoteReq::Upvote { id }) => match self.articles.get_mut(&id) {
                Some(a) => {
                    a.0 += 1;
                    vec![status::OK]
                }
                None => vec![status::UNKNOWN_ARTICLE],
            },
            Ok(VoteReq::Downvote { id }) => match self.articles.get_mut(&id) {
                Some(a) => {
                    a.0 -= 1;
                    vec![status::OK]
                }
                None => vec![status::UNKNOWN_ARTICLE],
            },
            Ok(VoteReq::TopK) => {
                let mut all: Vec<(u64, i64)> =
                    self.articles.iter().map(|(id, (c, _))| (*id, *c)).collect();
                all.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                all.truncate(self.k as usize);
                let mut r = vec![status::OK];
                r.extend_from_slice(&(all.len() as u32).to_le_bytes());
                for (id, count) in all {
                    r.extend_from_slice(&id.to_le_bytes());
                    r.extend_from_slice(&count.to_le_bytes());
                }
                r
            }
            Err(_) => vec![status::MALFORMED],
        }
    }

    fn digest(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (id, (count, title)) in &self.articles {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(&(title.len() as u32).to_le_bytes());
            out.extend_from_slice(title);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patomic::TxManager;
    use crate::pheap::ArenaMode;
    use rand::SeedableRng;

    fn setup(k: u64, shards: u64) -> (Arena, TxManager, VoteService) {
        let arena = Arena::create_in_memory(8 << 20, ArenaMode::Strict).unwrap();
        let mgr = TxManager::create(&arena).unwrap();
        let svc = VoteService::new(k, shards, 1 << 12);
        svc.init(&arena).unwrap();
        (arena, mgr, svc)
    }

    fn call(arena: &Arena, mgr: &TxManager, svc: &VoteService, req: &[u8]) -> Vec<u8> {
        let mut tx = mgr.begin(arena).unwrap();
        let mut locks = LockSet::new();
        let mut resp = Vec::new();
        let mut ctx = ExecCtx::new(arena, mgr, &mut tx);
        svc.handle(&mut ctx, req, &mut locks, &mut resp).unwrap();
        mgr.commit(arena, &mut tx).unwrap();
        locks.release_all();
        resp
    }

    #[test]
    fn submit_and_vote_basics() {
        let (arena, mgr, svc) = setup(8, 4);
        assert_eq!(call(&arena, &mgr, &svc, &codec::vote_submit(1, b"a story")), [status::OK]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::vote_submit(1, b"dup")), [status::EXISTS]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::vote_upvote(2)), [status::UNKNOWN_ARTICLE]);
        for _ in 0..3 {
            assert_eq!(call(&arena, &mgr, &svc, &codec::vote_upvote(1)), [status::OK]);
        }
        let r = call(&arena, &mgr, &svc, &codec::vote_topk());
        let (st, top) = codec::decode_topk_response(&r).unwrap();
        assert_eq!(st, status::OK);
        assert_eq!(top, vec![(1, 3)]);
    }

    #[test]
    fn boundary_migration_across_heaps() {
        // K=2: the third article initially sits in rest; voting it up must
        // displace the weakest top member
        let (arena, mgr, svc) = setup(2, 1);
        for id in 1..=3 {
            call(&arena, &mgr, &svc, &codec::vote_submit(id, b"t"));
        }
        call(&arena, &mgr, &svc, &codec::vote_upvote(1));
        call(&arena, &mgr, &svc, &codec::vote_upvote(2));
        // top = {1,2}, rest = {3}
        for _ in 0..2 {
            call(&arena, &mgr, &svc, &codec::vote_upvote(3));
        }
        let (_, top) = codec::decode_topk_response(&call(&arena, &mgr, &svc, &codec::vote_topk())).unwrap();
        assert_eq!(top, vec![(3, 2), (1, 1)], "3 displaced the tie-loser 2");
        assert!(svc.recover_check(&arena).unwrap().is_empty());
        // downvote 3 back below: it must demote again
        for _ in 0..2 {
            call(&arena, &mgr, &svc, &codec::vote_downvote(3));
        }
        let (_, top) = codec::decode_topk_response(&call(&arena, &mgr, &svc, &codec::vote_topk())).unwrap();
        assert_eq!(top, vec![(1, 1), (2, 1)]);
        assert!(svc.recover_check(&arena).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_smaller_id() {
        let (arena, mgr, svc) = setup(3, 2);
        for id in [9, 4, 7, 2] {
            call(&arena, &mgr, &svc, &codec::vote_submit(id, b"t"));
        }
        let (_, top) = codec::decode_topk_response(&call(&arena, &mgr, &svc, &codec::vote_topk())).unwrap();
        assert_eq!(top, vec![(2, 0), (4, 0), (7, 0)]);
    }

    #[test]
    fn commute_rules() {
        let svc = VoteService::default();
        assert!(svc.commutes(&codec::vote_upvote(1), &codec::vote_upvote(1)), "same-story increments commute");
        assert!(svc.commutes(&codec::vote_upvote(1), &codec::vote_downvote(2)));
        assert!(svc.commutes(&codec::vote_topk(), &codec::vote_topk()));
        assert!(!svc.commutes(&codec::vote_topk(), &codec::vote_upvote(1)));
        assert!(!svc.commutes(&codec::vote_submit(1, b"t"), &codec::vote_upvote(1)));
        assert!(svc.commutes(&codec::vote_submit(1, b"t"), &codec::vote_submit(2, b"t")));
        assert!(!svc.commutes(&codec::vote_submit(1, b"t"), &codec::vote_submit(1, b"u")));
    }

    #[test]
    fn model_equivalence_randomized() {
        let (arena, mgr, _) = setup(8, 4);
        let svc = VoteService::new(8, 4, 1 << 12).with_sample_articles(40);
        svc.init(&arena).unwrap();
        let mut model = svc.new_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..10_000 {
            let req = svc.sample_request(&mut rng);
            let got = call(&arena, &mgr, &svc, &req);
            let want = model.apply(&req);
            assert_eq!(got, want, "divergence at op {i}");
        }
        assert_eq!(svc.state_digest(&arena).unwrap(), model.digest());
        assert!(svc.recover_check(&arena).unwrap().is_empty());
    }

    #[test]
    fn zipfian_topk_matches_full_sort_oracle() {
        use rand_distr::Distribution;
        for seed in 0..3u64 {
            let (arena, mgr, svc) = setup(8, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_articles = 500u64;
            for id in 0..n_articles {
                call(&arena, &mgr, &svc, &codec::vote_submit(id, b"zipf"));
            }
            let zipf = rand_distr::Zipf::new(n_articles as f64, 0.99).unwrap();
            let mut oracle: Vec<(u64, i64)> = (0..n_articles).map(|id| (id, 0)).collect();
            for _ in 0..5_000 {
                let id = zipf.sample(&mut rng) as u64 - 1;
                call(&arena, &mgr, &svc, &codec::vote_upvote(id));
                oracle[id as usize].1 += 1;
            }
            oracle.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            oracle.truncate(8);
            let (_, top) =
                codec::decode_topk_response(&call(&arena, &mgr, &svc, &codec::vote_topk())).unwrap();
            assert_eq!(top, oracle, "seed {seed}");
            assert!(svc.recover_check(&arena).unwrap().is_empty());
        }
    }
}
