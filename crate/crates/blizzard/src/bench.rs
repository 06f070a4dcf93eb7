//! Workload generation and the benchmark engine behind `bench` and the
//! directional ablation suites.
//!
//! Two modes: `threaded` runs a real in-process cluster under the wall clock
//! (throughput and ablation numbers); `sim` runs under virtual time
//! (reproducible latency shapes, no parallelism). Metrics go to an
//! append-only CSV with a fixed schema.

use crate::error::{Error, Result};
use crate::libds::{codec, EchoService, GraphService, KvService, VoteService};
use crate::net::client::Status;
use crate::net::sim::{ClientScript, SimConfig, SimNet, WorkloadOp};
use crate::runtime::{NodeReport, ReplicaConfig, ThreadedCluster};
use crate::service::Service;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDistribution {
    Uniform,
    Zipfian(f64),
}

#[derive(Debug, Clone)]
pub struct WorkloadSpec {
    pub benchmark: String,
    pub op_count: usize,
    pub read_fraction: f64,
    pub key_space: u64,
    pub distribution: KeyDistribution,
    pub batch_cap: usize,
    pub replicas: u64,
    pub executors: usize,
    pub clients: usize,
    /// Requests each client keeps in flight (the paper's load generators
    /// pipeline; 1 = strict RPC round trips).
    pub pipeline: usize,
    pub payload_len: usize,
    pub seed: u64,
    pub no_batching: bool,
    pub force_copy: bool,
    pub serial: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            benchmark: "kv".into(),
            op_count: 20_000,
            read_fraction: 0.5,
            key_space: 10_000,
            distribution: KeyDistribution::Uniform,
            batch_cap: 32,
            replicas: 3,
            executors: 4,
            clients: 8,
            pipeline: 8,
            payload_len: 8,
            seed: 1,
            no_batching: false,
            force_copy: false,
            serial: false,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(Error::InvalidSpec("read_fraction outside [0,1]".into()));
        }
        if self.replicas == 0 || self.replicas % 2 == 0 {
            return Err(Error::InvalidSpec("replicas must be odd".into()));
        }
        if self.op_count == 0 || self.clients == 0 || self.key_space == 0 {
            return Err(Error::InvalidSpec("op_count, clients, key_space must be positive".into()));
        }
        if let KeyDistribution::Zipfian(theta) = self.distribution {
            if !(theta > 0.0) {
                return Err(Error::InvalidSpec("zipfian theta must be positive".into()));
            }
        }
        match self.benchmark.as_str() {
            "echo" | "kv" | "graph" | "vote" => Ok(()),
            other => Err(Error::InvalidSpec(format!("unknown benchmark {other}"))),
        }
    }

    pub fn effective_batch_cap(&self) -> usize {
        if self.no_batching {
            1
        } else {
            self.batch_cap
        }
    }

    pub fn service_factory(&self) -> Arc<dyn Fn() -> Arc<dyn Service> + Send + Sync> {
        match self.benchmark.as_str() {
            "echo" => {
                let len = self.payload_len;
                Arc::new(move || Arc::new(EchoService::new(len)) as Arc<dyn Service>)
            }
            "kv" => Arc::new(|| Arc::new(KvService::new(1 << 14)) as Arc<dyn Service>),
            "graph" => Arc::new(|| Arc::new(GraphService::new(1 << 12)) as Arc<dyn Service>),
            "vote" => Arc::new(|| Arc::new(VoteService::default()) as Arc<dyn Service>),
            _ => unreachable!("validated"),
        }
    }
}

struct KeyGen {
    dist: KeyDistribution,
    space: u64,
    rng: ChaCha8Rng,
    zipf: Option<rand_distr::Zipf<f64>>,
}

impl KeyGen {
    fn new(spec: &WorkloadSpec, seed: u64) -> Result<KeyGen> {
        let zipf = match spec.distribution {
            KeyDistribution::Zipfian(theta) => Some(
                rand_distr::Zipf::new(spec.key_space as f64, theta)
                    .map_err(|e| Error::InvalidSpec(format!("zipf: {e}")))?,
            ),
            KeyDistribution::Uniform => None,
        };
        Ok(KeyGen {
            dist: spec.distribution,
            space: spec.key_space,
            rng: ChaCha8Rng::seed_from_u64(seed),
            zipf,
        })
    }

    fn next(&mut self) -> u64 {
        match self.dist {
            KeyDistribution::Uniform => self.rng.random_range(0..self.space),
            KeyDistribution::Zipfian(_) => {
                (self.zipf.as_ref().unwrap().sample(&mut self.rng) as u64).saturating_sub(1)
            }
        }
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }
}

/// Generate one request; `is_read` mirrors the service's read classifier.
fn gen_request(spec: &WorkloadSpec, keys: &mut KeyGen) -> (Vec<u8>, bool) {
    match spec.benchmark.as_str() {
        "echo" => {
            let payload: Vec<u8> = (0..spec.payload_len.max(1))
                .map(|_| keys.rng.random())
                .collect();
            (payload, false)
        }
        "kv" => {
            let key = keys.next().to_le_bytes();
            if keys.chance(spec.read_fraction) {
                (codec::kv_get(&key), true)
            } else {
                let val: u64 = keys.rng.random();
                (codec::kv_put(&key, &val.to_le_bytes()), false)
            }
        }
        "graph" => {
            let u = keys.next();
            if keys.chance(spec.read_fraction) {
                (codec::graph_out_degree(u), true)
            } else {
                let v = keys.next();
                (codec::graph_add_edge(u, v, keys.rng.random_range(0..1_000)), false)
            }
        }
        "vote" => {
            if keys.chance(spec.read_fraction) {
                (codec::vote_topk(), true)
            } else {
                let id = keys.next();
                (codec::vote_upvote(id), false)
            }
        }
        _ => unreachable!("validated"),
    }
}

/// Fixed-schema CSV row (one per benchmark run).
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub timestamp_ms: u128,
    pub benchmark: String,
    pub mode: String,
    pub ops: u64,
    pub ok_ops: u64,
    pub elapsed_us: u64,
    pub throughput_ops_s: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub e_mean: f64,
    pub batch_fill_mean: f64,
    pub gc_lag: u64,
    pub copies_per_op: f64,
    pub fences_per_entry: f64,
}

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        "timestamp_ms,benchmark,mode,ops,ok_ops,elapsed_us,throughput_ops_s,\
         p50_us,p95_us,p99_us,e_mean,batch_fill_mean,gc_lag,copies_per_op,fences_per_entry"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.1},{},{},{},{:.2},{:.2},{},{:.3},{:.3}",
            self.timestamp_ms,
            self.benchmark,
            self.mode,
            self.ops,
            self.ok_ops,
            self.elapsed_us,
            self.throughput_ops_s,
            self.p50_us,
            self.p95_us,
            self.p99_us,
            self.e_mean,
            self.batch_fill_mean,
            self.gc_lag,
            self.copies_per_op,
            self.fences_per_entry
        )
    }
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub row: MetricsRow,
    pub leader: NodeReport,
    pub reports: Vec<NodeReport>,
}

fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

/// Articles submitted before the timed window so votes have targets.
fn preload_ops(spec: &WorkloadSpec) -> Vec<Vec<u8>> {
    match spec.benchmark.as_str() {
        "vote" => (0..spec.key_space)
            .map(|id| codec::vote_submit(id, format!("article-{id}").as_bytes()))
            .collect(),
        _ => vec![],
    }
}

/// Wall-clock benchmark over a threaded in-process cluster.
pub fn run_threaded(spec: &WorkloadSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let mut cfg = ReplicaConfig {
        executors: spec.executors,
        force_copy: spec.force_copy,
        serial: spec.serial,
        ack_on_commit: spec.benchmark == "echo",
        arena_capacity: 128 << 20,
        ..Default::default()
    };
    cfg.raft.batch_cap = spec.effective_batch_cap();
    cfg.raft.seed = spec.seed;
    cfg.raft.election_timeout_us = 300_000;
    cfg.raft.heartbeat_us = 50_000;
    cfg.raft.force_copy = spec.force_copy;

    let cluster = ThreadedCluster::start(spec.replicas, cfg, spec.service_factory())?;

    // wait for a leader, then preload outside the timed window
    let mut warm = cluster.client(1, Duration::from_secs(2), 400);
    let (st, _) = warm.update(&first_warm_op(spec));
    if st != Status::Ok {
        let _ = cluster.shutdown();
        return Err(Error::ConfigInvalid("cluster failed to elect a leader".into()));
    }
    for chunk in preload_ops(spec) {
        let (st, _) = warm.update(&chunk);
        if st != Status::Ok {
            let _ = cluster.shutdown();
            return Err(Error::ConfigInvalid("preload failed".into()));
        }
    }

    // pre-generate each client's request stream
    let per_client = spec.op_count / spec.clients;
    let mut streams = Vec::new();
    for c in 0..spec.clients {
        let mut keys = KeyGen::new(spec, spec.seed ^ (c as u64 + 1).wrapping_mul(0x9e37))?;
        let ops: Vec<(Vec<u8>, bool)> =
            (0..per_client).map(|_| gen_request(spec, &mut keys)).collect();
        streams.push(ops);
    }

    let latencies = Arc::new(Mutex::new(Vec::<u64>::new()));
    let ok_count = Arc::new(std::sync::atomic::AtomicU64::new(0));
    let started = Instant::now();
    let mut handles = Vec::new();
    let window = spec.pipeline.max(1);
    for (c, ops) in streams.into_iter().enumerate() {
        let mut client = cluster.client(10 + c as u64, Duration::from_secs(2), 400);
        let lat = latencies.clone();
        let okc = ok_count.clone();
        handles.push(std::thread::spawn(move || {
            let mut mine = Vec::with_capacity(ops.len());
            if window == 1 {
                for (req, is_read) in ops {
                    let t0 = Instant::now();
                    let (st, _) = if is_read {
                        client.read(&req)
                    } else {
                        client.update(&req)
                    };
                    mine.push(t0.elapsed().as_micros() as u64);
                    if st == Status::Ok {
                        okc.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                }
            } else {
                let ok = client.pipelined(&ops, window, &mut mine);
                okc.fetch_add(ok, std::sync::atomic::Ordering::Relaxed);
            }
            lat.lock().unwrap().extend(mine);
        }));
    }
    for h in handles {
        h.join().expect("client thread panicked");
    }
    let elapsed = started.elapsed();
    let reports = cluster.shutdown()?;
    let leader = reports
        .iter()
        .find(|r| r.is_leader)
        .or_else(|| reports.iter().max_by_key(|r| r.commit_index))
        .expect("at least one node")
        .clone();

    let mut lat = Arc::try_unwrap(latencies).unwrap().into_inner().unwrap();
    lat.sort_unstable();
    let ops = (per_client * spec.clients) as u64;
    let ok_ops = ok_count.load(std::sync::atomic::Ordering::Relaxed);
    let elapsed_us = elapsed.as_micros() as u64;
    let row = MetricsRow {
        timestamp_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_millis(),
        benchmark: spec.benchmark.clone(),
        mode: "threaded".into(),
        ops,
        ok_ops,
        elapsed_us,
        throughput_ops_s: ops as f64 / (elapsed_us as f64 / 1e6),
        p50_us: percentile(&lat, 0.50),
        p95_us: percentile(&lat, 0.95),
        p99_us: percentile(&lat, 0.99),
        e_mean: if leader.sched.ticks > 0 {
            leader.sched.e_size_sum as f64 / leader.sched.ticks as f64
        } else {
            0.0
        },
        batch_fill_mean: if leader.nonempty_batches > 0 {
            leader.batch_entries as f64 / leader.nonempty_batches as f64
        } else {
            0.0
        },
        gc_lag: leader.queue_len,
        copies_per_op: leader.payload_copies as f64 / ops.max(1) as f64,
        fences_per_entry: leader.fences as f64 / leader.commit_index.max(1) as f64,
    };
    Ok(BenchOutcome { row, leader, reports })
}

fn first_warm_op(spec: &WorkloadSpec) -> Vec<u8> {
    match spec.benchmark.as_str() {
        "echo" => vec![0xEC; spec.payload_len.max(1)],
        "kv" => codec::kv_put(b"warmup", b"warm"),
        "graph" => codec::graph_add_edge(u64::MAX, u64::MAX - 1, 0),
        "vote" => codec::vote_submit(u64::MAX, b"warmup"),
        _ => unreachable!(),
    }
}

/// Virtual-time benchmark: latencies in virtual microseconds.
pub fn run_sim(spec: &WorkloadSpec) -> Result<BenchOutcome> {
    spec.validate()?;
    let cfg = SimConfig {
        replicas: spec.replicas,
        seed: spec.seed,
        batch_cap: spec.effective_batch_cap(),
        executors: spec.executors,
        serial: spec.serial,
        force_copy: spec.force_copy,
        ack_on_commit: spec.benchmark == "echo",
        arena_capacity: 64 << 20,
        max_virtual_us: 300_000_000,
        ..Default::default()
    };
    let per_client = spec.op_count / spec.clients;
    let mut scripts = Vec::new();
    // preload articles via a dedicated first client
    let preload = preload_ops(spec);
    let preload_len = preload.len();
    if !preload.is_empty() {
        scripts.push(ClientScript {
            start_us: 1_000,
            gap_us: 10,
            ops: preload.into_iter().map(WorkloadOp::Update).collect(),
        });
    }
    let work_start = 400_000 + preload_len as u64 * 40;
    for c in 0..spec.clients {
        let mut keys = KeyGen::new(spec, spec.seed ^ (c as u64 + 1).wrapping_mul(0x9e37))?;
        let ops = (0..per_client)
            .map(|_| {
                let (req, is_read) = gen_request(spec, &mut keys);
                if is_read {
                    WorkloadOp::Read(req)
                } else {
                    WorkloadOp::Update(req)
                }
            })
            .collect();
        scripts.push(ClientScript {
            start_us: work_start,
            gap_us: 100,
            ops,
        });
    }
    let sim = SimNet::new(cfg, spec.service_factory())?;
    let report = sim.run(vec![], scripts)?;
    if !report.violations.is_empty() {
        return Err(Error::ConfigInvalid(format!(
            "safety violations during benchmark: {:?}",
            report.violations
        )));
    }
    let mut lat: Vec<u64> = report
        .results
        .iter()
        .filter(|r| r.client_id > crate::net::sim::CLIENT_BASE || preload_len == 0)
        .map(|r| r.done_at - r.issued_at)
        .collect();
    lat.sort_unstable();
    let ok_ops = report.results.iter().filter(|r| r.status == Status::Ok).count() as u64;
    let ops = report.results.len() as u64;
    let window = report.finished_at.saturating_sub(work_start).max(1);
    let row = MetricsRow {
        timestamp_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_millis(),
        benchmark: spec.benchmark.clone(),
        mode: "sim".into(),
        ops,
        ok_ops,
        elapsed_us: window,
        throughput_ops_s: ops as f64 / (window as f64 / 1e6),
        p50_us: percentile(&lat, 0.50),
        p95_us: percentile(&lat, 0.95),
        p99_us: percentile(&lat, 0.99),
        e_mean: 0.0,
        batch_fill_mean: 0.0,
        gc_lag: 0,
        copies_per_op: 0.0,
        fences_per_entry: 0.0,
    };
    let leader = NodeReport {
        id: 0,
        fences: 0,
        flushes: 0,
        payload_copies: 0,
        batches_sent: 0,
        nonempty_batches: 0,
        batch_entries: 0,
        sched: Default::default(),
        handler_invocations: 0,
        committed_runs: 0,
        digest: vec![],
        commit_index: 0,
        is_leader: false,
        queue_len: 0,
    };
    Ok(BenchOutcome {
        row,
        leader,
        reports: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut s = WorkloadSpec::default();
        s.validate().unwrap();
        s.read_fraction = 1.5;
        assert!(s.validate().is_err());
        s.read_fraction = 0.5;
        s.replicas = 4;
        assert!(s.validate().is_err());
        s.replicas = 3;
        s.benchmark = "bogus".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn small_threaded_kv_bench_runs() {
        let spec = WorkloadSpec {
            op_count: 400,
            clients: 4,
            executors: 2,
            key_space: 64,
            ..Default::default()
        };
        let out = run_threaded(&spec).unwrap();
        assert_eq!(out.row.ops, 400);
        assert_eq!(out.row.ok_ops, 400, "all ops must succeed on a healthy cluster");
        assert!(out.row.throughput_ops_s > 0.0);
        // zero-copy default: exactly one payload write per request on the
        // leader (plus warmup noise below one per op)
        assert!(out.row.copies_per_op < 1.1, "copies/op {}", out.row.copies_per_op);
    }
}
