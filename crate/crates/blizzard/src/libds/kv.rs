//! Persistent chained hashmap and the key-value service over it.
//!
//! Map layout: a root block `[bucket_count u64 | buckets_off u64]`, a bucket
//! array of node offsets, and per-entry nodes
//! `[next u64 | klen u32 | vlen u32 | key | value]`. No rehashing: the
//! bucket count is fixed at creation.
//!
//! Concurrency: operations to different keys commute; structural safety
//! within a bucket comes from striped volatile locks (stripe = bucket mod
//! stripes) acquired in the handler and released by the runtime after
//! commit. Reads take the same stripe lock so chain walks never race with
//! a relink.

use crate::error::Result;
use crate::pheap::{Arena, PHandle, ROOT_SERVICE};
use crate::service::{
    status, ExecCtx, LockSet, MutexDelayedLock, RefModel, Service,
};
use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::codec::{self, KvReq};

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

const MAP_BUCKET_COUNT: u64 = 0;
const MAP_BUCKETS_OFF: u64 = 8;
const MAP_ROOT_LEN: u64 = 16;

const NODE_NEXT: u64 = 0;
const NODE_KLEN: u64 = 8;
const NODE_VLEN: u64 = 12;
const NODE_DATA: u64 = 16;

#[derive(Clone, Copy)]
pub struct PHashMap {
    root: PHandle,
    buckets: PHandle,
    bucket_count: u64,
}

impl PHashMap {
    pub fn create(arena: &Arena, bucket_count: u64) -> Result<PHashMap> {
        let root = arena.alloc(MAP_ROOT_LEN)?;
        let buckets = arena.alloc(bucket_count * 8)?;
        arena.write_u64(root, MAP_BUCKET_COUNT, bucket_count)?;
        arena.write_u64(root, MAP_BUCKETS_OFF, buckets.offset())?;
        arena.flush(root, 0, MAP_ROOT_LEN)?;
        arena.fence();
        Ok(PHashMap {
            root,
            buckets,
            bucket_count,
        })
    }

    pub fn open(arena: &Arena, root: PHandle) -> Result<PHashMap> {
        let bucket_count = arena.read_u64(root, MAP_BUCKET_COUNT)?;
        let buckets = arena.handle_at(arena.read_u64(root, MAP_BUCKETS_OFF)?)?;
        Ok(PHashMap {
            root,
            buckets,
            bucket_count,
        })
    }

    pub fn root(&self) -> PHandle {
        self.root
    }

    pub fn bucket_count(&self) -> u64 {
        self.bucket_count
    }

    pub fn bucket_of(&self, key: &[u8]) -> u64 {
        fnv1a(key) % self.bucket_count
    }

    fn node_fields(&self, arena: &Arena, off: u64) -> Result<(PHandle, u64, u32, u32)> {
        let h = arena.handle_at(off)?;
        let next = arena.read_u64(h, NODE_NEXT)?;
        let klen = arena.read_u32(h, NODE_KLEN)?;
        let vlen = arena.read_u32(h, NODE_VLEN)?;
        Ok((h, next, klen, vlen))
    }

    fn node_key(&self, arena: &Arena, h: PHandle, klen: u32) -> Result<Vec<u8>> {
        arena.read_vec(h, NODE_DATA, klen as u64)
    }

    pub fn get(&self, arena: &Arena, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let b = self.bucket_of(key);
        let mut off = arena.read_u64(self.buckets, b * 8)?;
        while off != 0 {
            let (h, next, klen, vlen) = self.node_fields(arena, off)?;
            if klen as usize == key.len() && self.node_key(arena, h, klen)? == key {
                return Ok(Some(arena.read_vec(h, NODE_DATA + klen as u64, vlen as u64)?));
            }
            off = next;
        }
        Ok(None)
    }

    /// Node handle and value length for in-place value field updates.
    pub fn locate(&self, arena: &Arena, key: &[u8]) -> Result<Option<(PHandle, u32, u32)>> {
        let b = self.bucket_of(key);
        let mut off = arena.read_u64(self.buckets, b * 8)?;
        while off != 0 {
            let (h, next, klen, vlen) = self.node_fields(arena, off)?;
            if klen as usize == key.len() && self.node_key(arena, h, klen)? == key {
                return Ok(Some((h, klen, vlen)));
            }
            off = next;
        }
        Ok(None)
    }

    fn new_node(&self, ctx: &mut ExecCtx<'_>, key: &[u8], val: &[u8], next: u64) -> Result<PHandle> {
        let node = ctx.alloc(NODE_DATA + key.len() as u64 + val.len() as u64)?;
        ctx.write_fresh_u64(node, NODE_NEXT, next)?;
        ctx.write_fresh(node, NODE_KLEN, &(key.len() as u32).to_le_bytes())?;
        ctx.write_fresh(node, NODE_VLEN, &(val.len() as u32).to_le_bytes())?;
        ctx.write_fresh(node, NODE_DATA, key)?;
        ctx.write_fresh(node, NODE_DATA + key.len() as u64, val)?;
        Ok(node)
    }

    /// Upsert. Returns true if the key existed.
    pub fn insert(&self, ctx: &mut ExecCtx<'_>, key: &[u8], val: &[u8]) -> Result<bool> {
        let b = self.bucket_of(key);
        let head = ctx.arena.read_u64(self.buckets, b * 8)?;
        let mut prev: Option<PHandle> = None;
        let mut off = head;
        while off != 0 {
            let (h, next, klen, vlen) = self.node_fields(ctx.arena, off)?;
            if klen as usize == key.len() && self.node_key(ctx.arena, h, klen)? == key {
                if vlen as usize == val.len() {
                    ctx.write(h, NODE_DATA + klen as u64, val)?;
                } else {
                    // size changed: swap in a fresh node, free the old one
                    let node = self.new_node(ctx, key, val, next)?;
                    match prev {
                        Some(p) => ctx.write_u64(p, NODE_NEXT, node.offset())?,
                        None => ctx.write_u64(self.buckets, b * 8, node.offset())?,
                    }
                    ctx.free(h)?;
                }
                return Ok(true);
            }
            prev = Some(h);
            off = next;
        }
        let node = self.new_node(ctx, key, val, head)?;
        ctx.write_u64(self.buckets, b * 8, node.offset())?;
        Ok(false)
    }

    /// Returns true if the key was present.
    pub fn remove(&self, ctx: &mut ExecCtx<'_>, key: &[u8]) -> Result<bool> {
        let b = self.bucket_of(key);
        let mut prev: Option<PHandle> = None;
        let mut off = ctx.arena.read_u64(self.buckets, b * 8)?;
        while off != 0 {
            let (h, next, klen, _) = self.node_fields(ctx.arena, off)?;
            if klen as usize == key.len() && self.node_key(ctx.arena, h, klen)? == key {
                match prev {
                    Some(p) => ctx.write_u64(p, NODE_NEXT, next)?,
                    None => ctx.write_u64(self.buckets, b * 8, next)?,
                }
                ctx.free(h)?;
                return Ok(true);
            }
            prev = Some(h);
            off = next;
        }
        Ok(false)
    }

    pub fn collect(&self, arena: &Arena) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        let mut out = Vec::new();
        for b in 0..self.bucket_count {
            let mut off = arena.read_u64(self.buckets, b * 8)?;
            while off != 0 {
                let (h, next, klen, vlen) = self.node_fields(arena, off)?;
                let key = self.node_key(arena, h, klen)?;
                let val = arena.read_vec(h, NODE_DATA + klen as u64, vlen as u64)?;
                out.push((key, val));
                off = next;
            }
        }
        out.sort();
        Ok(out)
    }

    /// Structural scan: chain termination, handle validity, bucket placement.
    pub fn check(&self, arena: &Arena) -> Result<Vec<String>> {
        let mut violations = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for b in 0..self.bucket_count {
            let mut off = arena.read_u64(self.buckets, b * 8)?;
            let mut steps = 0u64;
            while off != 0 {
                if !seen.insert(off) {
                    violations.push(format!("node {off} linked twice"));
                    break;
                }
                let (h, next, klen, vlen) = match self.node_fields(arena, off) {
                    Ok(f) => f,
                    Err(e) => {
                        violations.push(format!("bucket {b}: bad node {off}: {e}"));
                        break;
                    }
                };
                match arena.read_vec(h, NODE_DATA, klen as u64 + vlen as u64) {
                    Ok(_) => {}
                    Err(e) => {
                        violations.push(format!("node {off}: data out of bounds: {e}"));
                        break;
                    }
                }
                let key = self.node_key(arena, h, klen)?;
                if self.bucket_of(&key) != b {
                    violations.push(format!("node {off} in wrong bucket {b}"));
                }
                off = next;
                steps += 1;
                if steps > 1 << 24 {
                    violations.push(format!("bucket {b}: chain does not terminate"));
                    break;
                }
            }
        }
        Ok(violations)
    }
}

pub const DEFAULT_KV_BUCKETS: u64 = 1 << 16;

/// Hashmap-backed point-query KV store: GET / PUT / DEL over binary keys and
/// values. Operations on different keys commute.
pub struct KvService {
    bucket_count: u64,
    stripes: Vec<Arc<Mutex<()>>>,
    sample_keys: u64,
}

impl KvService {
    pub fn new(bucket_count: u64) -> KvService {
        let n_stripes = (bucket_count.min(1024) as usize).max(1);
        KvService {
            bucket_count,
            stripes: (0..n_stripes).map(|_| Arc::new(Mutex::new(()))).collect(),
            sample_keys: 64,
        }
    }

    /// Restrict sampled keys to a small space (drives collision coverage in
    /// randomized tests).
    pub fn with_sample_keys(mut self, n: u64) -> Self {
        self.sample_keys = n.max(1);
        self
    }

    fn map(&self, arena: &Arena) -> Result<PHashMap> {
        PHashMap::open(arena, arena.root(ROOT_SERVICE)?)
    }

    fn lock_for(&self, map: &PHashMap, key: &[u8], locks: &mut LockSet) {
        let stripe = (map.bucket_of(key) % self.stripes.len() as u64) as usize;
        let guard = self.stripes[stripe].lock_arc();
        locks.push(Box::new(MutexDelayedLock::new(guard)));
    }
}

impl Default for KvService {
    fn default() -> Self {
        KvService::new(DEFAULT_KV_BUCKETS)
    }
}

impl Service for KvService {
    fn name(&self) -> &'static str {
        "kv"
    }

    fn init(&self, arena: &Arena) -> Result<()> {
        let map = PHashMap::create(arena, self.bucket_count)?;
        arena.set_root(ROOT_SERVICE, map.root())
    }

    fn handle(
        &self,
        ctx: &mut ExecCtx<'_>,
        request: &[u8],
        locks: &mut LockSet,
        response: &mut Vec<u8>,
    ) -> Result<()> {
        let req = match codec::decode_kv(request) {
            Ok(r) => r,
            Err(_) => {
                response.push(status::MALFORMED);
                return Ok(());
            }
        };
        let map = self.map(ctx.arena)?;
        self.lock_for(&map, req.key(), locks);
        match req {
            KvReq::Get(k) => match map.get(ctx.arena, k)? {
                Some(v) => {
                    response.push(status::OK);
                    response.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    response.extend_from_slice(&v);
                }
                None => response.push(status::NOT_FOUND),
            },
            KvReq::Put(k, v) => {
                map.insert(ctx, k, v)?;
                response.push(status::OK);
            }
            KvReq::Del(k) => {
                let existed = map.remove(ctx, k)?;
                response.push(if existed { status::OK } else { status::NOT_FOUND });
            }
        }
        Ok(())
    }

    fn commutes(&self, a: &[u8], b: &[u8]) -> bool {
        match (codec::decode_kv(a), codec::decode_kv(b)) {
            (Ok(ra), Ok(rb)) => ra.key() != rb.key(),
            _ => false,
        }
    }

    fn is_read(&self, request: &[u8]) -> bool {
        request.first() == Some(&codec::KV_GET)
    }

    fn sample_request(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let key = rng.random_range(0..self.sample_keys).to_le_bytes();
        match rng.random_range(0..3u8) {
            0 => codec::kv_get(&key),
            1 => codec::kv_put(&key, &rng.random::<u64>().to_le_bytes()),
            _ => codec::kv_del(&key),
        }
    }

    fn recover_check(&self, arena: &Arena) -> Result<Vec<String>> {
        self.map(arena)?.check(arena)
    }

    fn state_digest(&self, arena: &Arena) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (k, v) in self.map(arena)?.collect(arena)? {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(&k);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(&v);
        }
        Ok(out)
    }

    fn new_model(&self) -> Box<dyn RefModel> {
        Box::new(KvModel::default())
    }
}

/// Plain in-memory reference for the model-based oracle.
#[derive(Default)]
pub struct KvModel {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl RefModel for KvModel {
    fn apply(&mut self, request: &[u8]) -> Vec<u8> {
        match codec::decode_kv(request) {
            Ok(KvReq::Get(k)) => match self.map.get(k) {
                Some(v) => {
                    let mut r = vec![status::OK];
                    r.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    r.extend_from_slice(v);
                    r
                }
                None => vec![status::NOT_FOUND],
            },
            Ok(KvReq::Put(k, v)) => {
                self.map.insert(k.to_vec(), v.to_vec());
                vec![status::OK]
            }
            Ok(KvReq::Del(k)) => {
                if self.map.remove(k).is_some() {
                    vec![status::OK]
                } else {
                    vec![status::NOT_FOUND]
                }
            }
            Err(_) => vec![status::MALFORMED],
        }
    }

    fn digest(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.map {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v);
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

    fn setup() -> (Arena, TxManager, KvService) {
        let arena = Arena::create_in_memory(4 << 20, ArenaMode::Strict).unwrap();
        let mgr = TxManager::create(&arena).unwrap();
        let svc = KvService::new(256);
        svc.init(&arena).unwrap();
        (arena, mgr, svc)
    }

    fn call(arena: &Arena, mgr: &TxManager, svc: &KvService, req: &[u8]) -> Vec<u8> {
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
    fn put_then_get_returns_value() {
        let (arena, mgr, svc) = setup();
        assert_eq!(call(&arena, &mgr, &svc, &codec::kv_put(b"k", b"hello")), [status::OK]);
        let r = call(&arena, &mgr, &svc, &codec::kv_get(b"k"));
        assert_eq!(r[0], status::OK);
        assert_eq!(&r[5..], b"hello");
        assert_eq!(call(&arena, &mgr, &svc, &codec::kv_get(b"nope")), [status::NOT_FOUND]);
    }

    #[test]
    fn overwrite_and_resize_values() {
        let (arena, mgr, svc) = setup();
        call(&arena, &mgr, &svc, &codec::kv_put(b"k", b"12345678"));
        call(&arena, &mgr, &svc, &codec::kv_put(b"k", b"87654321")); // same len, in place
        let r = call(&arena, &mgr, &svc, &codec::kv_get(b"k"));
        assert_eq!(&r[5..], b"87654321");
        call(&arena, &mgr, &svc, &codec::kv_put(b"k", b"longer value here")); // resize
        let r = call(&arena, &mgr, &svc, &codec::kv_get(b"k"));
        assert_eq!(&r[5..], b"longer value here");
        svc.recover_check(&arena).unwrap().is_empty().then_some(()).unwrap();
    }

    #[test]
    fn delete_removes_and_reports_missing() {
        let (arena, mgr, svc) = setup();
        call(&arena, &mgr, &svc, &codec::kv_put(b"k", b"v"));
        assert_eq!(call(&arena, &mgr, &svc, &codec::kv_del(b"k")), [status::OK]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::kv_del(b"k")), [status::NOT_FOUND]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::kv_get(b"k")), [status::NOT_FOUND]);
    }

    #[test]
    fn commute_predicate_is_per_key() {
        let svc = KvService::default();
        assert!(svc.commutes(&codec::kv_put(b"k1", b"v"), &codec::kv_put(b"k2", b"v")));
        assert!(!svc.commutes(&codec::kv_put(b"k1", b"v"), &codec::kv_get(b"k1")));
        assert!(svc.commutes(&codec::kv_get(b"k1"), &codec::kv_get(b"k2")));
        assert!(!svc.commutes(b"garbage", &codec::kv_get(b"k1")), "malformed never commutes");
    }

    #[test]
    fn model_equivalence_randomized() {
        let (arena, mgr, _) = setup();
        let svc = KvService::new(64).with_sample_keys(24); // dense collisions
        svc.init(&arena).unwrap(); // re-init root with smaller map
        let mut model = svc.new_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
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
    fn chains_survive_collisions() {
        let (arena, mgr, _) = setup();
        let svc = KvService::new(2); // everything collides
        svc.init(&arena).unwrap();
        for i in 0..100u64 {
            call(&arena, &mgr, &svc, &codec::kv_put(&i.to_le_bytes(), &i.to_le_bytes()));
        }
        for i in 0..100u64 {
            let r = call(&arena, &mgr, &svc, &codec::kv_get(&i.to_le_bytes()));
            assert_eq!(&r[5..], &i.to_le_bytes());
        }
        assert!(svc.recover_check(&arena).unwrap().is_empty());
    }
}
