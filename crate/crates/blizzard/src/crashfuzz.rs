//! Crash-consistency campaigns over the full single-node pipeline.
//!
//! Each run drives a scripted update sequence through a one-replica cluster
//! on a strict arena, freezes durability at a chosen line-persist point,
//! reboots from the frozen image, runs recovery and drains the queue, then
//! checks:
//!
//! * the structure's invariant scan and the allocator self-check pass,
//! * the recovered state equals the reference model applied to exactly the
//!   durably-logged prefix of operations,
//! * recovery re-invoked the handler exactly once for every durably-logged
//!   entry that had not completed — operations execute exactly once with
//!   respect to persistent state.
//!
//! Crash points can be exhaustive (every persist event of the scripted run)
//! or sampled per seed.

use crate::error::{Error, Result};
use crate::libds::{GraphService, KvService, VoteService};
use crate::logrep::entry::{self, OpState};
use crate::logrep::wire::{Message, ReplyStatus, RequestKind};
use crate::pheap::{Arena, ArenaMode};
use crate::runtime::{NodeOut, Replica, ReplicaConfig};
use crate::service::Service;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::Ordering;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct FuzzSpec {
    pub service: String,
    pub ops: usize,
    pub seeds: u64,
    pub exhaustive: bool,
    /// Detector-sanity mode: skip the undo-record fence and expect the
    /// checks to catch the resulting corruption.
    pub inject_skip_undo_flush: bool,
    pub base_seed: u64,
}

impl Default for FuzzSpec {
    fn default() -> Self {
        FuzzSpec {
            service: "kv".into(),
            ops: 5,
            seeds: 100,
            exhaustive: true,
            inject_skip_undo_flush: false,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub runs: u64,
    pub crash_points: u64,
    pub violations: Vec<String>,
}

/// Small-footprint service instances for fuzzing (dense collisions, tiny
/// arenas).
pub fn fuzz_service(name: &str) -> Result<Arc<dyn Service>> {
    match name {
        "kv" => Ok(Arc::new(KvService::new(64).with_sample_keys(12))),
        "graph" => Ok(Arc::new(GraphService::new(32).with_sample_vertices(8))),
        "vote" => Ok(Arc::new(VoteService::new(3, 2, 256).with_sample_articles(8))),
        other => Err(Error::ConfigInvalid(format!("unknown fuzz service {other}"))),
    }
}

fn node_config() -> ReplicaConfig {
    ReplicaConfig {
        raft: crate::logrep::RaftConfig {
            id: 0,
            peers: vec![],
            election_timeout_us: 1_000,
            heartbeat_us: 500,
            batch_cap: 32,
            log_capacity: 1 << 10,
            seed: 1,
            force_copy: false,
        },
        executors: 1,
        arena_capacity: 2 << 20,
        arena_mode: ArenaMode::Strict,
        force_copy: false,
        serial: false,
        ack_on_commit: false,
    }
}

/// Sample `n` update requests (reads are skipped; crash semantics concern
/// mutations).
pub fn sample_updates(service: &dyn Service, n: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let req = service.sample_request(&mut rng);
        if !service.is_read(&req) {
            out.push(req);
        }
    }
    out
}

struct RunEnd {
    replica: Replica,
    replies: Vec<(u64, ReplyStatus, Vec<u8>)>,
}

/// Drive a replica synchronously: feed inputs, run dispatched executions
/// inline, collect replies, until quiescent.
fn drain(replica: &mut Replica, mut outs: Vec<NodeOut>, replies: &mut Vec<(u64, ReplyStatus, Vec<u8>)>) -> Result<()> {
    loop {
        let mut exec_items = Vec::new();
        for out in outs.drain(..) {
            match out {
                NodeOut::Exec { item } => exec_items.push(item),
                NodeOut::Reply { msg, .. } => {
                    if let Message::ClientReply {
                        status,
                        request_id,
                        payload,
                        ..
                    } = msg
                    {
                        replies.push((request_id, status, payload));
                    }
                }
                _ => {}
            }
        }
        if exec_items.is_empty() {
            break;
        }
        for item in exec_items {
            let outcome = replica.run_exec(item)?;
            outs.extend(replica.on_exec_done(item, outcome, 0)?);
        }
        outs.extend(replica.flush_now()?);
    }
    Ok(())
}

/// Run the scripted ops on a fresh strict-arena node, crashing at
/// `crash_at` (absolute persist-event count); returns the wrecked arena's
/// durable image and the total persist budget.
fn scripted_run(
    service_name: &str,
    ops: &[Vec<u8>],
    crash_at: Option<u64>,
    inject: bool,
) -> Result<(Vec<u8>, u64, u64)> {
    let service = fuzz_service(service_name)?;
    let mut replica = Replica::create(node_config(), service)?;
    if inject {
        replica.mgr.set_skip_undo_flush(true);
    }
    let setup_persists = replica.arena.persist_events();
    if let Some(k) = crash_at {
        replica.arena.set_crash_point(k);
    }
    let mut replies = Vec::new();
    let outs = replica.start(0)?;
    drain(&mut replica, outs, &mut replies)?;
    for (i, op) in ops.iter().enumerate() {
        let mut outs = replica.on_client(i as u64, RequestKind::Update, 1, i as u64 + 1, op, 0)?;
        outs.extend(replica.flush_now()?);
        drain(&mut replica, outs, &mut replies)?;
    }
    let budget = replica.arena.persist_events();
    Ok((replica.arena.simulate_crash(), setup_persists, budget))
}

/// Reboot from a durable image, recover, drain everything that remains.
fn recover_run(service_name: &str, image: Vec<u8>) -> Result<RunEnd> {
    let service = fuzz_service(service_name)?;
    let mut replica = Replica::open_image(image, node_config(), service)?;
    let mut replies = Vec::new();
    let outs = replica.start(0)?;
    drain(&mut replica, outs, &mut replies)?;
    // a few pump rounds in case gc or stragglers remain
    for _ in 0..4 {
        let outs = replica.flush_now()?;
        drain(&mut replica, outs, &mut replies)?;
    }
    Ok(RunEnd { replica, replies })
}

/// All checks for one crash point. `ops` must be the scripted updates in
/// submission order; request_id i+1 identifies ops[i].
fn check_one(
    service_name: &str,
    ops: &[Vec<u8>],
    image: Vec<u8>,
    label: &str,
    violations: &mut Vec<String>,
) -> Result<()> {
    // pre-recovery scan of the durable log: how many entries survived, and
    // how many had already completed
    let probe = Arena::open_image(image.clone(), ArenaMode::Strict)?;
    crate::patomic::recover_transactions(&probe)?;
    let raft = crate::logrep::RaftCore::open(&probe, node_config().raft)?;
    let mut logged_rids: Vec<u64> = Vec::new();
    let mut completed = 0u64;
    for pos in raft.queue_tail()..raft.queue_head() {
        let off = raft.entry_off_at(&probe, pos)?;
        let h = probe.handle_at(off)?;
        if entry::kind(&probe, h)? == Some(crate::logrep::Kind::Update) {
            logged_rids.push(entry::request_id(&probe, h)?);
            if entry::state(&probe, h)? == Some(OpState::Completed) {
                completed += 1;
            }
        }
    }
    drop(probe);

    let end = recover_run(service_name, image)?;
    let rep = &end.replica;

    if let Err(e) = rep.arena.self_check() {
        violations.push(format!("{label}: allocator self-check: {e}"));
    }
    for v in rep.recover_check()? {
        violations.push(format!("{label}: invariant scan: {v}"));
    }

    // exactly-once: recovery invokes the handler only for survivors that
    // had not completed
    let invoked = rep.counters.handler_invocations.load(Ordering::Relaxed);
    let expected = logged_rids.len() as u64 - completed;
    if invoked != expected {
        violations.push(format!(
            "{label}: recovery invoked handler {invoked} times, expected {expected} \
             ({} logged, {completed} already completed)",
            logged_rids.len()
        ));
    }

    // model comparison over the durably-logged prefix
    let service = fuzz_service(service_name)?;
    let mut model = service.new_model();
    for rid in &logged_rids {
        let idx = (*rid - 1) as usize;
        if idx >= ops.len() {
            violations.push(format!("{label}: unknown request id {rid} in durable log"));
            return Ok(());
        }
        model.apply(&ops[idx]);
    }
    let got = rep.state_digest()?;
    if got != model.digest() {
        violations.push(format!(
            "{label}: state diverges from model over {} logged ops",
            logged_rids.len()
        ));
    }
    // the durable log must be a prefix of the submission order
    for (i, rid) in logged_rids.iter().enumerate() {
        if *rid != i as u64 + 1 {
            violations.push(format!(
                "{label}: durable log is not a submission-order prefix at {i} (rid {rid})"
            ));
            break;
        }
    }
    Ok(())
}

/// Run a campaign. Violations are expected to be empty unless the
/// undo-fence bug is injected.
pub fn run_campaign(spec: &FuzzSpec) -> Result<FuzzReport> {
    let mut report = FuzzReport::default();
    let inject = spec.inject_skip_undo_flush;

    if spec.exhaustive {
        let ops = sample_updates(&*fuzz_service(&spec.service)?, spec.ops, spec.base_seed);
        let (_, base, budget) = scripted_run(&spec.service, &ops, None, inject)?;
        for k in base..=budget {
            let (image, _, _) = scripted_run(&spec.service, &ops, Some(k), inject)?;
            report.runs += 1;
            report.crash_points += 1;
            let label = format!("{} exhaustive@{k}", spec.service);
            if let Err(e) = check_one(&spec.service, &ops, image, &label, &mut report.violations) {
                report.violations.push(format!("{label}: {e}"));
            }
        }
    }

    for s in 0..spec.seeds {
        let seed = spec.base_seed ^ (s.wrapping_mul(0x9e37_79b9) + 7);
        let ops = sample_updates(&*fuzz_service(&spec.service)?, spec.ops, seed);
        let (_, base, budget) = scripted_run(&spec.service, &ops, None, inject)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(base..=budget.max(base));
        let (image, _, _) = scripted_run(&spec.service, &ops, Some(k), inject)?;
        report.runs += 1;
        report.crash_points += 1;
        let label = format!("{} seed {seed}@{k}", spec.service);
        if let Err(e) = check_one(&spec.service, &ops, image, &label, &mut report.violations) {
            report.violations.push(format!("{label}: {e}"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_has_no_violations() {
        let spec = FuzzSpec {
            service: "kv".into(),
            ops: 4,
            seeds: 5,
            exhaustive: false,
            ..Default::default()
        };
        let report = run_campaign(&spec).unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert_eq!(report.runs, 5);
    }

    #[test]
    fn exhaustive_small_kv_campaign() {
        let spec = FuzzSpec {
            service: "kv".into(),
            ops: 3,
            seeds: 0,
            exhaustive: true,
            ..Default::default()
        };
        let report = run_campaign(&spec).unwrap();
        assert!(report.crash_points > 50, "expected many crash points, got {}", report.crash_points);
        assert!(report.violations.is_empty(), "{:?}", report.violations);
    }

    #[test]
    fn injected_undo_bug_is_detected() {
        let spec = FuzzSpec {
            service: "kv".into(),
            ops: 4,
            seeds: 40,
            exhaustive: true,
            inject_skip_undo_flush: true,
            ..Default::default()
        };
        // the campaign may error out (corrupt chains) or record violations;
        // either way the detector must fire
        match run_campaign(&spec) {
            Ok(report) => assert!(
                !report.violations.is_empty(),
                "injected bug must be observable"
            ),
            Err(_) => {} // recovery detected corruption and refused
        }
    }
}
