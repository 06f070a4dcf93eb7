//! Subcommand implementations. The heavy lifting lives in the library; this
//! layer parses flags, loads config files, and formats output.

use anyhow::{bail, Context};
use blizzard::bench::{self, KeyDistribution, MetricsRow, WorkloadSpec};
use blizzard::crashfuzz::{run_campaign, FuzzSpec};
use blizzard::libds::{self, codec};
use blizzard::net::client::Status;
use blizzard::net::config::{load_fault_schedule, ClusterConfig};
use blizzard::net::sim::{ClientScript, FaultEvent, SimNet, TraceEvent, WorkloadOp};
use blizzard::net::udp;
use blizzard::service::Service;
use clap::Args;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

#[derive(Args)]
pub struct BenchArgs {
    /// echo | kv | graph | vote
    #[arg(long, default_value = "kv")]
    pub benchmark: String,
    #[arg(long, default_value_t = 20_000)]
    pub ops: usize,
    #[arg(long, default_value_t = 0.5)]
    pub read_fraction: f64,
    #[arg(long, default_value_t = 10_000)]
    pub key_space: u64,
    /// uniform | zipfian
    #[arg(long, default_value = "uniform")]
    pub distribution: String,
    #[arg(long, default_value_t = 0.99)]
    pub theta: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_cap: usize,
    #[arg(long, default_value_t = 3)]
    pub replicas: u64,
    #[arg(long, default_value_t = 4)]
    pub executors: usize,
    #[arg(long, default_value_t = 4)]
    pub clients: usize,
    /// Requests each client keeps in flight.
    #[arg(long, default_value_t = 16)]
    pub pipeline: usize,
    #[arg(long, default_value_t = 8)]
    pub payload_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// threaded (wall clock) | sim (virtual time)
    #[arg(long, default_value = "threaded")]
    pub mode: String,
    /// Ablation: replicate one entry at a time.
    #[arg(long)]
    pub no_batching: bool,
    /// Ablation: copy payloads at log-append and at send.
    #[arg(long)]
    pub copy: bool,
    /// Ablation: disable the commute predicate.
    #[arg(long)]
    pub serial: bool,
    /// Explicitly request commutative scheduling (the default).
    #[arg(long)]
    pub commute: bool,
    /// Append the CSV row here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.serial && a.commute {
        bail!("--serial and --commute are mutually exclusive");
    }
    let distribution = match a.distribution.as_str() {
        "uniform" => KeyDistribution::Uniform,
        "zipfian" => KeyDistribution::Zipfian(a.theta),
        other => bail!("unknown distribution {other}"),
    };
    let spec = WorkloadSpec {
        benchmark: a.benchmark,
        op_count: a.ops,
        read_fraction: a.read_fraction,
        key_space: a.key_space,
        distribution,
        batch_cap: a.batch_cap,
        replicas: a.replicas,
        executors: a.executors,
        clients: a.clients,
        pipeline: a.pipeline,
        payload_len: a.payload_len,
        seed: a.seed,
        no_batching: a.no_batching,
        force_copy: a.copy,
        serial: a.serial,
    };
    let outcome = match a.mode.as_str() {
        "threaded" => bench::run_threaded(&spec)?,
        "sim" => bench::run_sim(&spec)?,
        other => bail!("unknown mode {other}"),
    };
    emit_row(&outcome.row, a.out.as_deref())?;
    Ok(())
}

fn emit_row(row: &MetricsRow, out: Option<&std::path::Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?;
            if fresh {
                writeln!(f, "{}", MetricsRow::csv_header())?;
            }
            writeln!(f, "{}", row.to_csv())?;
            eprintln!("appended metrics row to {}", path.display());
        }
        None => {
            println!("{}", MetricsRow::csv_header());
            println!("{}", row.to_csv());
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct FailoverArgs {
    #[arg(long, default_value_t = 3)]
    pub replicas: u64,
    /// Virtual time of the leader kill (microseconds).
    #[arg(long, default_value_t = 700_000)]
    pub kill_at: u64,
    /// Failure-detection timeout T (microseconds, virtual).
    #[arg(long, default_value_t = 100_000)]
    pub detect_timeout: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub ops: usize,
}

pub fn failover(a: FailoverArgs) -> anyhow::Result<()> {
    let cfg = blizzard::net::sim::SimConfig {
        replicas: a.replicas,
        seed: a.seed,
        election_timeout_us: a.detect_timeout,
        heartbeat_us: a.detect_timeout / 3,
        client_timeout_us: a.detect_timeout / 2,
        settle_us: 1_500_000,
        ..Default::default()
    };
    let svc = Arc::new(libds::KvService::new(1 << 10).with_sample_keys(64));
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0xFA);
    let mut ops = Vec::new();
    while ops.len() < a.ops {
        let req = svc.sample_request(&mut rng);
        if !svc.is_read(&req) {
            ops.push(WorkloadOp::Update(req));
        }
    }
    let scripts = vec![ClientScript {
        start_us: 50_000,
        gap_us: 5_000,
        ops,
    }];
    let factory: Arc<dyn Fn() -> Arc<dyn Service> + Send + Sync> =
        Arc::new(|| Arc::new(libds::KvService::new(1 << 10)) as Arc<dyn Service>);
    let report = SimNet::new(cfg, factory)?.run(vec![(a.kill_at, FaultEvent::KillLeader)], scripts)?;

    let killed = report.trace.iter().find_map(|e| match e {
        TraceEvent::NodeKilled { at, node } => Some((*at, *node)),
        _ => None,
    });
    let Some((at_kill, node)) = killed else {
        bail!("no leader existed at kill time; try a later --kill-at");
    };
    // detection: first candidacy (term bump) after the kill on a survivor
    let detect = report.trace.iter().find_map(|e| match e {
        TraceEvent::Leader { at, .. } if *at > at_kill => Some(*at),
        _ => None,
    });
    let new_leader = report.trace.iter().find_map(|e| match e {
        TraceEvent::Leader { at, node, is_leader: true, term } if *at > at_kill => {
            Some((*at, *node, *term))
        }
        _ => None,
    });
    let first_commit = report.trace.iter().find_map(|e| match e {
        TraceEvent::Committed { at, .. } if *at > at_kill => Some(*at),
        _ => None,
    });
    let acked_loss = report
        .violations
        .iter()
        .filter(|v| v.contains("acked"))
        .count();

    println!("failover report (virtual time, microseconds)");
    println!("  leader node {node} killed at {at_kill}");
    match new_leader {
        Some((at, node, term)) => {
            println!("  new leader: node {node} (term {term}) at {at} (+{})", at - at_kill);
        }
        None => println!("  new leader: none within horizon"),
    }
    if let Some(at) = detect {
        println!("  first post-kill election activity at {at} (+{})", at - at_kill);
    }
    match first_commit {
        Some(at) => println!("  first post-failover commit at {at} (+{})", at - at_kill),
        None => println!("  first post-failover commit: none within horizon"),
    }
    println!("  acked-write-loss count: {acked_loss}");
    println!(
        "  safety violations: {}",
        if report.violations.is_empty() {
            "none".to_string()
        } else {
            report.violations.join("; ")
        }
    );
    if !report.violations.is_empty() {
        bail!("safety violations detected");
    }
    Ok(())
}

#[derive(Args)]
pub struct CrashfuzzArgs {
    /// kv | graph | vote
    #[arg(long, default_value = "kv")]
    pub service: String,
    /// Operations per crashed run.
    #[arg(long, default_value_t = 5)]
    pub ops: usize,
    /// Randomized campaign size.
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// Also enumerate every persist point of the scripted run.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Detector sanity: inject a missing undo fence and expect violations.
    #[arg(long)]
    pub inject_bug: bool,
}

pub fn crashfuzz(a: CrashfuzzArgs) -> anyhow::Result<()> {
    let spec = FuzzSpec {
        service: a.service.clone(),
        ops: a.ops,
        seeds: a.seeds,
        exhaustive: a.exhaustive,
        inject_skip_undo_flush: a.inject_bug,
        base_seed: a.seed,
    };
    let report = match run_campaign(&spec) {
        Ok(r) => r,
        Err(e) if a.inject_bug => {
            println!("campaign aborted by detected corruption: {e}");
            println!("injected-bug detection: OK");
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    println!(
        "crashfuzz {}: {} runs, {} crash points, {} violations",
        a.service,
        report.runs,
        report.crash_points,
        report.violations.len()
    );
    for v in &report.violations {
        println!("  violation: {v}");
    }
    if a.inject_bug {
        if report.violations.is_empty() {
            bail!("injected bug was not detected");
        }
        println!("injected-bug detection: OK");
        return Ok(());
    }
    if !report.violations.is_empty() {
        bail!("{} violations found", report.violations.len());
    }
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    /// Cluster config TOML (must list node addresses).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub node_id: u64,
    /// kv | graph | vote | echo
    #[arg(long, default_value = "kv")]
    pub service: String,
    /// Heap file backing this node's persistent state.
    #[arg(long)]
    pub heap: PathBuf,
    /// Optional run duration in seconds (default: until interrupted).
    #[arg(long)]
    pub duration_s: Option<u64>,
}

pub fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let cfg = ClusterConfig::load(&a.config)?;
    let service = libds::service_by_name(&a.service)?;
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(secs) = a.duration_s {
        let stop = stop.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_secs(secs));
            stop.store(true, Ordering::Relaxed);
        });
    }
    eprintln!(
        "node {} serving {} on {} (heap {})",
        a.node_id,
        a.service,
        cfg.nodes
            .iter()
            .find(|n| n.id == a.node_id)
            .map(|n| n.addr.clone())
            .unwrap_or_else(|| "<unknown>".into()),
        a.heap.display()
    );
    udp::run_node(&cfg, a.node_id, service, &a.heap, stop)?;
    Ok(())
}

#[derive(Args)]
pub struct ClientArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// kv | graph | vote | echo
    #[arg(long, default_value = "kv")]
    pub service: String,
    #[arg(long, default_value_t = 1)]
    pub client_id: u64,
    #[arg(long, default_value_t = 1000)]
    pub timeout_ms: u64,
    /// Operation, e.g. `put k v`, `get k`, `del k`, `add-edge 1 2 9`,
    /// `out-degree 1`, `edge-attr 1 2`, `submit 7 title`, `upvote 7`, `topk`,
    /// `echo hello`.
    #[arg(trailing_var_arg = true, required = true)]
    pub op: Vec<String>,
}

pub fn client(a: ClientArgs) -> anyhow::Result<()> {
    let cfg = ClusterConfig::load(&a.config)?;
    let (request, is_read) = parse_op(&a.service, &a.op)?;
    let mut client =
        udp::UdpClient::connect(&cfg, a.client_id, Duration::from_millis(a.timeout_ms))?;
    let (status, body) = if is_read {
        client.read(&request)
    } else {
        client.update(&request)
    };
    println!("status: {status:?}");
    print_response(&a.service, &a.op, &body);
    if status != Status::Ok {
        bail!("request did not complete");
    }
    Ok(())
}

fn parse_op(service: &str, op: &[String]) -> anyhow::Result<(Vec<u8>, bool)> {
    let verb = op[0].as_str();
    let arg = |i: usize| -> anyhow::Result<&str> {
        op.get(i)
            .map(|s| s.as_str())
            .with_context(|| format!("`{verb}` needs argument {i}"))
    };
    let num = |i: usize| -> anyhow::Result<u64> { Ok(arg(i)?.parse()?) };
    Ok(match (service, verb) {
        ("kv", "put") => (codec::kv_put(arg(1)?.as_bytes(), arg(2)?.as_bytes()), false),
        ("kv", "get") => (codec::kv_get(arg(1)?.as_bytes()), true),
        ("kv", "del") => (codec::kv_del(arg(1)?.as_bytes()), false),
        ("graph", "add-edge") => (codec::graph_add_edge(num(1)?, num(2)?, num(3).unwrap_or(0)), false),
        ("graph", "del-edge") => (codec::graph_del_edge(num(1)?, num(2)?), false),
        ("graph", "out-degree") => (codec::graph_out_degree(num(1)?), true),
        ("graph", "edge-attr") => (codec::graph_edge_attr(num(1)?, num(2)?), true),
        ("vote", "submit") => (codec::vote_submit(num(1)?, arg(2)?.as_bytes()), false),
        ("vote", "upvote") => (codec::vote_upvote(num(1)?), false),
        ("vote", "downvote") => (codec::vote_downvote(num(1)?), false),
        ("vote", "topk") => (codec::vote_topk(), true),
        ("echo", _) => (op.join(" ").into_bytes(), false),
        (s, v) => bail!("unknown op `{v}` for service {s}"),
    })
}

fn print_response(service: &str, op: &[String], body: &[u8]) {
    if body.is_empty() {
        return;
    }
    let status = body[0];
    match (service, op[0].as_str(), status) {
        ("kv", "get", 0) => {
            let v = &body[5..];
            println!("value: {}", String::from_utf8_lossy(v));
        }
        ("graph", "out-degree", 0) | ("graph", "edge-attr", 0) => {
            let v = u64::from_le_bytes(body[1..9].try_into().unwrap());
            println!("value: {v}");
        }
        ("vote", "topk", 0) => {
            if let Ok((_, top)) = codec::decode_topk_response(body) {
                for (id, count) in top {
                    println!("  article {id}: {count}");
                }
            }
        }
        (_, _, 0) => println!("ok"),
        (_, _, s) => println!("application status: {s}"),
    }
}
