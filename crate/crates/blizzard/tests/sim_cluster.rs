//! Deterministic cluster simulations: replication correctness, determinism,
//! fault injection, and client failover behavior.

use blizzard::libds::{codec, KvService};
use blizzard::net::checks::SafetyChecker;
use blizzard::net::client::Status;
use blizzard::net::sim::{
    ClientScript, FaultEvent, SimConfig, SimNet, TraceEvent, WorkloadOp,
};
use blizzard::service::Service;
use std::sync::Arc;

fn kv_factory() -> Arc<dyn Fn() -> Arc<dyn Service> + Send + Sync> {
    Arc::new(|| Arc::new(KvService::new(1 << 10)) as Arc<dyn Service>)
}

fn put_op(k: u64, v: u64) -> WorkloadOp {
    WorkloadOp::Update(codec::kv_put(&k.to_le_bytes(), &v.to_le_bytes()))
}

fn get_op(k: u64) -> WorkloadOp {
    WorkloadOp::Read(codec::kv_get(&k.to_le_bytes()))
}

#[test]
fn healthy_cluster_serves_updates_and_reads() {
    let cfg = SimConfig {
        seed: 1,
        ..Default::default()
    };
    let sim = SimNet::new(cfg, kv_factory()).unwrap();
    let script = ClientScript {
        start_us: 10_000,
        gap_us: 2_000,
        ops: vec![put_op(1, 42), get_op(1), put_op(2, 7), get_op(2), get_op(99)],
    };
    let report = sim.run(vec![], vec![script]).unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    assert_eq!(report.results.len(), 5);
    for r in &report.results {
        assert_eq!(r.status, Status::Ok, "op {:?}", r.request);
    }
    // read-your-own-writes: the GET after PUT(1, 42) sees 42
    let get1 = &report.results[1];
    assert_eq!(get1.response[0], 0);
    assert_eq!(&get1.response[5..13], &42u64.to_le_bytes());
    // missing key reads NOT_FOUND
    assert_eq!(report.results[4].response, vec![1u8]);
    // all replicas converge
    let conv = SafetyChecker::convergence_violations(&report.nodes);
    assert!(conv.is_empty(), "{conv:?}");
}

#[test]
fn identical_seeds_produce_identical_traces() {
    let mk = |seed| {
        let cfg = SimConfig {
            seed,
            drop_rate: 0.05,
            ..Default::default()
        };
        let script = ClientScript {
            start_us: 5_000,
            gap_us: 1_000,
            ops: (0..20).map(|i| put_op(i % 5, i)).collect(),
        };
        let faults = vec![
            (300_000u64, FaultEvent::Kill { node: 0 }),
            (900_000u64, FaultEvent::Restart { node: 0 }),
        ];
        SimNet::new(cfg, kv_factory())
            .unwrap()
            .run(faults, vec![script])
            .unwrap()
    };
    let a = mk(77);
    let b = mk(77);
    let c = mk(78);
    assert_eq!(a.trace, b.trace, "same seed must replay byte-identically");
    assert_ne!(a.trace, c.trace, "different seed must differ");
}

#[test]
fn empty_workload_produces_heartbeat_only_trace() {
    let cfg = SimConfig {
        seed: 3,
        max_virtual_us: 2_000_000,
        ..Default::default()
    };
    let report = SimNet::new(cfg, kv_factory()).unwrap().run(vec![], vec![]).unwrap();
    assert!(report.violations.is_empty());
    let mut saw_heartbeat = false;
    for ev in &report.trace {
        match ev {
            TraceEvent::MsgSent { .. } | TraceEvent::MsgDropped { .. } => saw_heartbeat = true,
            TraceEvent::Leader { .. } | TraceEvent::Committed { .. } => {}
            other => panic!("unexpected client/fault event in empty workload: {other:?}"),
        }
    }
    assert!(saw_heartbeat);
}

#[test]
fn leader_kill_fails_over_and_loses_nothing() {
    let cfg = SimConfig {
        seed: 11,
        ..Default::default()
    };
    let script = ClientScript {
        start_us: 5_000,
        gap_us: 3_000,
        ops: (0..60).map(|i| put_op(i, i * 10)).collect(),
    };
    // kill whichever node is leader at 100ms: with seed 11 we must find it
    // from a dry run's trace
    let dry = SimNet::new(cfg.clone(), kv_factory())
        .unwrap()
        .run(vec![], vec![script.clone()])
        .unwrap();
    let first_leader = dry
        .trace
        .iter()
        .find_map(|e| match e {
            TraceEvent::Leader { node, is_leader: true, .. } => Some(*node),
            _ => None,
        })
        .expect("a leader must emerge");

    let faults = vec![(100_000u64, FaultEvent::Kill { node: first_leader })];
    let report = SimNet::new(cfg, kv_factory())
        .unwrap()
        .run(faults, vec![script])
        .unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    // progress resumed: every op eventually succeeded (retry budget is generous)
    let acked = report
        .results
        .iter()
        .filter(|r| r.status == Status::Ok)
        .count();
    assert!(acked >= 55, "most updates must survive failover, got {acked}");
    // a new leader exists among the survivors
    assert!(report.nodes.iter().any(|n| n.alive && n.is_leader));
}

#[test]
fn symmetric_partition_blocks_minority_then_heals() {
    let cfg = SimConfig {
        seed: 21,
        ..Default::default()
    };
    let script = ClientScript {
        start_us: 5_000,
        gap_us: 5_000,
        ops: (0..40).map(|i| put_op(i, i)).collect(),
    };
    let faults = vec![
        // leader (whoever it is) may end up in either side; a 1-node side
        // can never commit
        (150_000u64, FaultEvent::Partition { groups: vec![vec![0, 1], vec![2]] }),
        (600_000u64, FaultEvent::Heal),
    ];
    let report = SimNet::new(cfg, kv_factory())
        .unwrap()
        .run(faults, vec![script])
        .unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    let conv = SafetyChecker::convergence_violations(&report.nodes);
    assert!(conv.is_empty(), "{conv:?}");
}

#[test]
fn fully_partitioned_client_gets_no_leader() {
    let cfg = SimConfig {
        seed: 5,
        client_attempts: 6,
        client_timeout_us: 20_000,
        max_virtual_us: 3_000_000,
        settle_us: 100_000,
        ..Default::default()
    };
    let script = ClientScript {
        start_us: 400_000, // after the cluster elects
        gap_us: 1_000,
        ops: vec![put_op(1, 1)],
    };
    // client id 1000 isolated from every node from the start
    let faults = vec![(
        0u64,
        FaultEvent::Partition {
            groups: vec![vec![0, 1, 2], vec![1000]],
        },
    )];
    let report = SimNet::new(cfg, kv_factory())
        .unwrap()
        .run(faults, vec![script])
        .unwrap();
    assert_eq!(report.results.len(), 1);
    assert_eq!(report.results[0].status, Status::NoLeader);
}

#[test]
fn kill_and_restart_rejoins_with_matching_log() {
    let cfg = SimConfig {
        seed: 31,
        ..Default::default()
    };
    let script = ClientScript {
        start_us: 5_000,
        gap_us: 4_000,
        ops: (0..50).map(|i| put_op(i % 7, i)).collect(),
    };
    let faults = vec![
        (120_000u64, FaultEvent::Kill { node: 1 }),
        (400_000u64, FaultEvent::Restart { node: 1 }),
    ];
    let report = SimNet::new(cfg, kv_factory())
        .unwrap()
        .run(faults, vec![script])
        .unwrap();
    assert!(report.violations.is_empty(), "{:?}", report.violations);
    assert!(report.nodes.iter().all(|n| n.alive));
    let conv = SafetyChecker::convergence_violations(&report.nodes);
    assert!(conv.is_empty(), "{conv:?}");
}
