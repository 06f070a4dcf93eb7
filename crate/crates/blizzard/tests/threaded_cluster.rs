//! In-process threaded cluster: real threads, channel transport, wall clock.

use blizzard::libds::{codec, KvService, VoteService};
use blizzard::net::client::Status;
use blizzard::runtime::{ReplicaConfig, ThreadedCluster};
use blizzard::service::Service;
use std::sync::Arc;
use std::time::Duration;

fn base_cfg() -> ReplicaConfig {
    let mut cfg = ReplicaConfig::default();
    cfg.raft.election_timeout_us = 150_000;
    cfg.raft.heartbeat_us = 40_000;
    cfg.arena_capacity = 16 << 20;
    cfg
}

#[test]
fn kv_roundtrip_through_threads() {
    let cluster = ThreadedCluster::start(
        3,
        base_cfg(),
        Arc::new(|| Arc::new(KvService::new(1 << 10)) as Arc<dyn Service>),
    )
    .unwrap();
    let mut client = cluster.client(1, Duration::from_millis(500), 60);

    let (st, _) = client.update(&codec::kv_put(b"alpha", b"beta"));
    assert_eq!(st, Status::Ok);
    let (st, body) = client.read(&codec::kv_get(b"alpha"));
    assert_eq!(st, Status::Ok);
    assert_eq!(body[0], 0);
    assert_eq!(&body[5..], b"beta");
    let (st, body) = client.read(&codec::kv_get(b"missing"));
    assert_eq!(st, Status::Ok);
    assert_eq!(body, vec![1u8]);

    let reports = cluster.shutdown().unwrap();
    assert_eq!(reports.len(), 3);
    assert!(reports.iter().any(|r| r.is_leader));
    // zero-copy: exactly one payload write per request on the leader
    let leader = reports.iter().find(|r| r.is_leader).unwrap();
    assert!(leader.payload_copies >= 3);
}

#[test]
fn concurrent_clients_commute() {
    let mut cfg = base_cfg();
    cfg.executors = 4;
    let cluster = ThreadedCluster::start(
        3,
        cfg,
        Arc::new(|| Arc::new(VoteService::new(8, 4, 1 << 10)) as Arc<dyn Service>),
    )
    .unwrap();

    let mut submit = cluster.client(9, Duration::from_millis(500), 60);
    for id in 0..8u64 {
        let (st, body) = submit.update(&codec::vote_submit(id, b"story"));
        assert_eq!(st, Status::Ok);
        assert_eq!(body[0], 0);
    }

    let mut handles = Vec::new();
    for c in 0..4u64 {
        let mut client = cluster.client(10 + c, Duration::from_millis(500), 60);
        handles.push(std::thread::spawn(move || {
            for i in 0..50u64 {
                let (st, _) = client.update(&codec::vote_upvote(i % 8));
                assert_eq!(st, Status::Ok);
            }
        }));
    }
    for h in handles {
        h.join().unwrap();
    }

    let mut reader = cluster.client(99, Duration::from_millis(500), 60);
    let (st, body) = reader.read(&codec::vote_topk());
    assert_eq!(st, Status::Ok);
    let (_, top) = codec::decode_topk_response(&body).unwrap();
    let total: i64 = top.iter().map(|(_, c)| *c).sum();
    assert_eq!(total, 200, "4 clients x 50 upvotes all applied: {top:?}");

    let reports = cluster.shutdown().unwrap();
    // every replica applied the same state
    let digests: Vec<_> = reports.iter().map(|r| r.digest.clone()).collect();
    assert!(digests.windows(2).all(|w| w[0] == w[1]), "replicas diverged");
}
