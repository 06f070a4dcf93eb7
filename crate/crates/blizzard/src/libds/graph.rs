//! Undirected adjacency-list graph service.
//!
//! A persistent hashmap maps vertex id to `[list_head u64 | degree u64]`;
//! neighbor lists are singly linked nodes `[next u64 | neighbor u64 |
//! attr u64]`. An edge (u, v) is inserted into both endpoint lists inside
//! one transaction, which is what keeps lookups via either endpoint
//! consistent across crashes.
//!
//! Edge operations commute when their endpoint sets are disjoint; reads
//! participate through the vertices they touch. Striped per-vertex locks
//! (acquired in stripe order) cover both the vertex map structure and the
//! lists.

use crate::error::Result;
use crate::pheap::{Arena, PHandle, ROOT_SERVICE};
use crate::service::{status, ExecCtx, LockSet, MutexDelayedLock, RefModel, Service};
use parking_lot::Mutex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::codec::{self, GraphReq};
use super::kv::PHashMap;

const VAL_HEAD: u64 = 0;
const VAL_DEGREE: u64 = 8;
const VERTEX_VAL_LEN: usize = 16;

const EDGE_NEXT: u64 = 0;
const EDGE_NEIGHBOR: u64 = 8;
const EDGE_ATTR: u64 = 16;
const EDGE_NODE_LEN: u64 = 24;

pub const DEFAULT_GRAPH_BUCKETS: u64 = 1 << 12;

pub struct GraphService {
    bucket_count: u64,
    stripes: Vec<Arc<Mutex<()>>>,
    sample_vertices: u64,
}

impl GraphService {
    pub fn new(bucket_count: u64) -> GraphService {
        let n_stripes = (bucket_count.min(1024) as usize).max(1);
        GraphService {
            bucket_count,
            stripes: (0..n_stripes).map(|_| Arc::new(Mutex::new(()))).collect(),
            sample_vertices: 32,
        }
    }

    pub fn with_sample_vertices(mut self, n: u64) -> Self {
        self.sample_vertices = n.max(2);
        self
    }

    fn map(&self, arena: &Arena) -> Result<PHashMap> {
        PHashMap::open(arena, arena.root(ROOT_SERVICE)?)
    }

    fn stripe_of(&self, map: &PHashMap, vertex: u64) -> usize {
        (map.bucket_of(&vertex.to_le_bytes()) % self.stripes.len() as u64) as usize
    }

    /// Lock the stripes of the touched vertices in ascending stripe order.
    fn lock_vertices(&self, map: &PHashMap, vertices: &[u64], locks: &mut LockSet) {
        let mut stripes: Vec<usize> = vertices.iter().map(|v| self.stripe_of(map, *v)).collect();
        stripes.sort_unstable();
        stripes.dedup();
        for s in stripes {
            locks.push(Box::new(MutexDelayedLock::new(self.stripes[s].lock_arc())));
        }
    }

    /// (node handle, klen, vlen) of the vertex entry, creating it if needed.
    fn ensure_vertex(&self, ctx: &mut ExecCtx<'_>, map: &PHashMap, v: u64) -> Result<PHandle> {
        let key = v.to_le_bytes();
        if let Some((node, klen, _)) = map.locate(ctx.arena, &key)? {
            let _ = klen;
            return Ok(node);
        }
        map.insert(ctx, &key, &[0u8; VERTEX_VAL_LEN])?;
        Ok(map.locate(ctx.arena, &key)?.expect("just inserted").0)
    }

    /// Offset of the value region inside a vertex map node (after the key).
    fn val_off() -> u64 {
        // map node layout: next u64 | klen u32 | vlen u32 | key (8) | value
        16 + 8
    }

    fn vertex_fields(&self, arena: &Arena, node: PHandle) -> Result<(u64, u64)> {
        let head = arena.read_u64(node, Self::val_off() + VAL_HEAD)?;
        let degree = arena.read_u64(node, Self::val_off() + VAL_DEGREE)?;
        Ok((head, degree))
    }

    fn find_edge(&self, arena: &Arena, head: u64, neighbor: u64) -> Result<Option<(PHandle, Option<PHandle>)>> {
        let mut prev: Option<PHandle> = None;
        let mut off = head;
        while off != 0 {
            let h = arena.handle_at(off)?;
            if arena.read_u64(h, EDGE_NEIGHBOR)? == neighbor {
                return Ok(Some((h, prev)));
            }
            prev = Some(h);
            off = arena.read_u64(h, EDGE_NEXT)?;
        }
        Ok(None)
    }

    /// Push an edge node onto `vertex`'s list and bump its degree.
    fn link_edge(
        &self,
        ctx: &mut ExecCtx<'_>,
        vnode: PHandle,
        neighbor: u64,
        attr: u64,
    ) -> Result<()> {
        let (head, degree) = self.vertex_fields(ctx.arena, vnode)?;
        let edge = ctx.alloc(EDGE_NODE_LEN)?;
        ctx.write_fresh_u64(edge, EDGE_NEXT, head)?;
        ctx.write_fresh_u64(edge, EDGE_NEIGHBOR, neighbor)?;
        ctx.write_fresh_u64(edge, EDGE_ATTR, attr)?;
        ctx.write_u64(vnode, Self::val_off() + VAL_HEAD, edge.offset())?;
        ctx.write_u64(vnode, Self::val_off() + VAL_DEGREE, degree + 1)?;
        Ok(())
    }

    fn unlink_edge(
        &self,
        ctx: &mut ExecCtx<'_>,
        vnode: PHandle,
        edge: PHandle,
        prev: Option<PHandle>,
    ) -> Result<()> {
        let next = ctx.arena.read_u64(edge, EDGE_NEXT)?;
        match prev {
            Some(p) => ctx.write_u64(p, EDGE_NEXT, next)?,
            None => ctx.write_u64(vnode, Self::val_off() + VAL_HEAD, next)?,
        }
        let degree = ctx.arena.read_u64(vnode, Self::val_off() + VAL_DEGREE)?;
        ctx.write_u64(vnode, Self::val_off() + VAL_DEGREE, degree - 1)?;
        ctx.free(edge)?;
        Ok(())
    }

    fn neighbors(&self, arena: &Arena, map: &PHashMap, v: u64) -> Result<Vec<(u64, u64)>> {
        let mut out = Vec::new();
        if let Some((node, _, _)) = map.locate(arena, &v.to_le_bytes())? {
            let (mut off, _) = self.vertex_fields(arena, node)?;
            while off != 0 {
                let h = arena.handle_at(off)?;
                out.push((arena.read_u64(h, EDGE_NEIGHBOR)?, arena.read_u64(h, EDGE_ATTR)?));
                off = arena.read_u64(h, EDGE_NEXT)?;
            }
        }
        Ok(out)
    }
}

impl Default for GraphService {
    fn default() -> Self {
        GraphService::new(DEFAULT_GRAPH_BUCKETS)
    }
}

impl Service for GraphService {
    fn name(&self) -> &'static str {
        "graph"
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
        let req = match codec::decode_graph(request) {
            Ok(r) => r,
            Err(_) => {
                response.push(status::MALFORMED);
                return Ok(());
            }
        };
        let map = self.map(ctx.arena)?;
        let touched: Vec<u64> = req.touched().iter().flatten().copied().collect();
        self.lock_vertices(&map, &touched, locks);
        match req {
            GraphReq::AddEdge { u, v, attr } => {
                let unode = self.ensure_vertex(ctx, &map, u)?;
                let (uhead, _) = self.vertex_fields(ctx.arena, unode)?;
                if self.find_edge(ctx.arena, uhead, v)?.is_some() {
                    response.push(status::EXISTS);
                    return Ok(());
                }
                self.link_edge(ctx, unode, v, attr)?;
                if u != v {
                    let vnode = self.ensure_vertex(ctx, &map, v)?;
                    self.link_edge(ctx, vnode, u, attr)?;
                }
                response.push(status::OK);
            }
            GraphReq::DelEdge { u, v } => {
                let found = match map.locate(ctx.arena, &u.to_le_bytes())? {
                    Some((unode, _, _)) => {
                        let (uhead, _) = self.vertex_fields(ctx.arena, unode)?;
                        match self.find_edge(ctx.arena, uhead, v)? {
                            Some((edge, prev)) => {
                                self.unlink_edge(ctx, unode, edge, prev)?;
                                if u != v {
                                    let (vnode, _, _) = map
                                        .locate(ctx.arena, &v.to_le_bytes())?
                                        .expect("undirected counterpart missing");
                                    let (vhead, _) = self.vertex_fields(ctx.arena, vnode)?;
                                    let (edge2, prev2) = self
                                        .find_edge(ctx.arena, vhead, u)?
                                        .expect("undirected counterpart missing");
                                    self.unlink_edge(ctx, vnode, edge2, prev2)?;
                                }
                                true
                            }
                            None => false,
                        }
                    }
                    None => false,
                };
                response.push(if found { status::OK } else { status::MISSING });
            }
            GraphReq::OutDegree { v } => {
                let degree = match map.locate(ctx.arena, &v.to_le_bytes())? {
                    Some((node, _, _)) => self.vertex_fields(ctx.arena, node)?.1,
                    None => 0,
                };
                response.push(status::OK);
                response.extend_from_slice(&degree.to_le_bytes());
            }
            GraphReq::EdgeAttr { u, v } => {
                let attr = match map.locate(ctx.arena, &u.to_le_bytes())? {
                    Some((node, _, _)) => {
                        let (head, _) = self.vertex_fields(ctx.arena, node)?;
                        self.find_edge(ctx.arena, head, v)?
                            .map(|(e, _)| ctx.arena.read_u64(e, EDGE_ATTR))
                            .transpose()?
                    }
                    None => None,
                };
                match attr {
                    Some(a) => {
                        response.push(status::OK);
                        response.extend_from_slice(&a.to_le_bytes());
                    }
                    None => response.push(status::MISSING),
                }
            }
        }
        Ok(())
    }

    fn commutes(&self, a: &[u8], b: &[u8]) -> bool {
        let (ra, rb) = match (codec::decode_graph(a), codec::decode_graph(b)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return false,
        };
        let ta = ra.touched();
        let tb = rb.touched();
        for x in ta.iter().flatten() {
            for y in tb.iter().flatten() {
                if x == y {
                    return false;
                }
            }
        }
        true
    }

    fn is_read(&self, request: &[u8]) -> bool {
        matches!(
            request.first(),
            Some(&codec::GRAPH_OUT_DEGREE) | Some(&codec::GRAPH_EDGE_ATTR)
        )
    }

    fn sample_request(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let u = rng.random_range(0..self.sample_vertices);
        let v = rng.random_range(0..self.sample_vertices);
        match rng.random_range(0..4u8) {
            0 => codec::graph_add_edge(u, v, rng.random_range(0..1000)),
            1 => codec::graph_del_edge(u, v),
            2 => codec::graph_out_degree(v),
            _ => codec::graph_edge_attr(u, v),
        }
    }

    fn recover_check(&self, arena: &Arena) -> Result<Vec<String>> {
        let map = self.map(arena)?;
        let mut violations = map.check(arena)?;
        // undirected consistency and degree accounting, by full scan
        let mut adjacency: BTreeMap<u64, BTreeMap<u64, u64>> = BTreeMap::new();
        for (k, _) in map.collect(arena)? {
            if k.len() != 8 {
                violations.push(format!("vertex key of length {}", k.len()));
                continue;
            }
            let v = u64::from_le_bytes(k.try_into().unwrap());
            let (node, _, vlen) = map.locate(arena, &v.to_le_bytes())?.expect("just scanned");
            if vlen as usize != VERTEX_VAL_LEN {
                violations.push(format!("vertex {v}: bad value length {vlen}"));
                continue;
            }
            let (_, degree) = self.vertex_fields(arena, node)?;
            let neigh = self.neighbors(arena, &map, v)?;
            if neigh.len() as u64 != degree {
                violations.push(format!(
                    "vertex {v}: degree field {degree} != list length {}",
                    neigh.len()
                ));
            }
            let mut m = BTreeMap::new();
            for (n, attr) in neigh {
                if m.insert(n, attr).is_some() {
                    violations.push(format!("vertex {v}: duplicate neighbor {n}"));
                }
            }
            adjacency.insert(v, m);
        }
        for (u, neigh) in &adjacency {
            for (v, attr) in neigh {
                if u == v {
                    continue; // self-loop stored once
                }
                match adjacency.get(v).and_then(|m| m.get(u)) {
                    Some(a2) if a2 == attr => {}
                    Some(a2) => violations.push(format!(
                        "edge ({u},{v}): attr {attr} vs {a2} depending on endpoint"
                    )),
                    None => violations.push(format!("edge ({u},{v}) present only via {u}")),
                }
            }
        }
        Ok(violations)
    }

    fn state_digest(&self, arena: &Arena) -> Result<Vec<u8>> {
        let map = self.map(arena)?;
        let mut edges: Vec<(u64, u64, u64)> = Vec::new();
        let mut vertices: Vec<u64> = Vec::new();
        for (k, _) in map.collect(arena)? {
            let v = u64::from_le_bytes(k.try_into().expect("8-byte vertex key"));
            vertices.push(v);
            for (n, attr) in self.neighbors(arena, &map, v)? {
                if v <= n {
                    edges.push((v, n, attr));
                }
            }
        }
        vertices.sort_unstable();
        edges.sort_unstable();
        let mut out = Vec::new();
        out.extend_from_slice(&(vertices.len() as u64).to_le_bytes());
        for v in vertices {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (u, v, a) in edges {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
            out.extend_from_slice(&a.to_le_bytes());
        }
        Ok(out)
    }

    fn new_model(&self) -> Box<dyn RefModel> {
        Box::new(GraphModel::default())
    }
}

/// Reference adjacency model; empty vertices created by edge insertion are
/// tracked so digests line up with the persistent structure.
#[derive(Default)]
pub struct GraphModel {
    adj: BTreeMap<u64, BTreeMap<u64, u64>>,
}

impl RefModel for GraphModel {
    fn apply(&mut self, request: &[u8]) -> Vec<u8> {
        match codec::decode_graph(request) {
            Ok(GraphReq::AddEdge { u, v, attr }) => {
                if self.adj.get(&u).is_some_and(|m| m.contains_key(&v)) {
                    return vec![status::EXISTS];
                }
                self.adj.entry(u).or_default().insert(v, attr);
                self.adj.entry(v).or_default().insert(u, attr);
                vec![status::OK]
            }
            Ok(GraphReq::DelEdge { u, v }) => {
                let existed = self.adj.get_mut(&u).is_some_and(|m| m.remove(&v).is_some());
                if existed {
                    if let Some(m) = self.adj.get_mut(&v) {
                        m.remove(&u);
                    }
                    vec![status::OK]
                } else {
                    vec![status::MISSING]
                }
            }
            Ok(GraphReq::OutDegree { v }) => {
                let d = self.adj.get(&v).map_or(0, |m| m.len() as u64);
                let mut r = vec![status::OK];
                r.extend_from_slice(&d.to_le_bytes());
                r
            }
            Ok(GraphReq::EdgeAttr { u, v }) => match self.adj.get(&u).and_then(|m| m.get(&v)) {
                Some(a) => {
                    let mut r = vec![status::OK];
                    r.extend_from_slice(&a.to_le_bytes());
                    r
                }
                None => vec![status::MISSING],
            },
            Err(_) => vec![status::MALFORMED],
        }
    }

    fn digest(&self) -> Vec<u8> {
        let mut edges: Vec<(u64, u64, u64)> = Vec::new();
        for (u, m) in &self.adj {
            for (v, a) in m {
                if u <= v {
                    edges.push((*u, *v, *a));
                }
            }
        }
        edges.sort_unstable();
        let mut out = Vec::new();
        out.extend_from_slice(&(self.adj.len() as u64).to_le_bytes());
        for v in self.adj.keys() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (u, v, a) in edges {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
            out.extend_from_slice(&a.to_le_bytes());
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

    fn setup() -> (Arena, TxManager, GraphService) {
        let arena = Arena::create_in_memory(4 << 20, ArenaMode::Strict).unwrap();
        let mgr = TxManager::create(&arena).unwrap();
        let svc = GraphService::new(64);
        svc.init(&arena).unwrap();
        (arena, mgr, svc)
    }

    fn call(arena: &Arena, mgr: &TxManager, svc: &GraphService, req: &[u8]) -> Vec<u8> {
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
    fn edge_visible_from_both_endpoints() {
        let (arena, mgr, svc) = setup();
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_add_edge(1, 2, 77)), [status::OK]);
        let via_u = call(&arena, &mgr, &svc, &codec::graph_edge_attr(1, 2));
        let via_v = call(&arena, &mgr, &svc, &codec::graph_edge_attr(2, 1));
        assert_eq!(via_u, via_v);
        assert_eq!(u64::from_le_bytes(via_u[1..9].try_into().unwrap()), 77);
    }

    #[test]
    fn duplicate_edge_and_missing_delete_report_status() {
        let (arena, mgr, svc) = setup();
        call(&arena, &mgr, &svc, &codec::graph_add_edge(1, 2, 0));
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_add_edge(1, 2, 9)), [status::EXISTS]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_add_edge(2, 1, 9)), [status::EXISTS]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_del_edge(3, 4)), [status::MISSING]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_del_edge(1, 2)), [status::OK]);
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_del_edge(1, 2)), [status::MISSING]);
    }

    #[test]
    fn out_degree_counts_list_length() {
        let (arena, mgr, svc) = setup();
        for v in 2..7 {
            call(&arena, &mgr, &svc, &codec::graph_add_edge(1, v, 0));
        }
        let r = call(&arena, &mgr, &svc, &codec::graph_out_degree(1));
        assert_eq!(u64::from_le_bytes(r[1..9].try_into().unwrap()), 5);
        let r = call(&arena, &mgr, &svc, &codec::graph_out_degree(99));
        assert_eq!(u64::from_le_bytes(r[1..9].try_into().unwrap()), 0);
    }

    #[test]
    fn commute_is_endpoint_disjointness() {
        let svc = GraphService::default();
        assert!(svc.commutes(&codec::graph_add_edge(1, 2, 0), &codec::graph_add_edge(3, 4, 0)));
        assert!(!svc.commutes(&codec::graph_add_edge(1, 2, 0), &codec::graph_add_edge(2, 3, 0)));
        assert!(!svc.commutes(&codec::graph_out_degree(1), &codec::graph_add_edge(1, 5, 0)));
        assert!(svc.commutes(&codec::graph_out_degree(1), &codec::graph_out_degree(1)) == false);
        assert!(svc.commutes(&codec::graph_out_degree(1), &codec::graph_out_degree(2)));
    }

    #[test]
    fn model_equivalence_randomized() {
        let (arena, mgr, _) = setup();
        let svc = GraphService::new(32).with_sample_vertices(12);
        svc.init(&arena).unwrap();
        let mut model = svc.new_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
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
    fn self_loop_stored_once() {
        let (arena, mgr, svc) = setup();
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_add_edge(5, 5, 3)), [status::OK]);
        let r = call(&arena, &mgr, &svc, &codec::graph_out_degree(5));
        assert_eq!(u64::from_le_bytes(r[1..9].try_into().unwrap()), 1);
        assert!(svc.recover_check(&arena).unwrap().is_empty());
        assert_eq!(call(&arena, &mgr, &svc, &codec::graph_del_edge(5, 5)), [status::OK]);
    }
}
