//! Temporary measurement probe (deleted before final).

use blizzard::bench::{run_threaded, WorkloadSpec};

#[test]
#[ignore]
fn probe_commute_configs() {
    for (bench, replicas, clients, pipeline, ops, read_frac) in [
        ("kv", 1u64, 2usize, 32usize, 30000usize, 0.5f64),
        ("graph", 1, 2, 32, 20000, 0.5),
        ("vote", 1, 2, 32, 20000, 0.0),
    ] {
        let mut rows = Vec::new();
        for serial in [true, false] {
            let spec = WorkloadSpec {
                benchmark: bench.into(),
                op_count: ops,
                clients,
                pipeline,
                executors: 4,
                key_space: if bench == "vote" { 2000 } else { 10_000 },
                read_fraction: read_frac,
                replicas,
                serial,
                ..Default::default()
            };
            let out = run_threaded(&spec).unwrap();
            rows.push(out.row.throughput_ops_s);
            assert_eq!(out.row.ok_ops as usize, ops);
        }
        eprintln!(
            "{bench} r{replicas} c{clients} p{pipeline}: serial {:.0} commute {:.0} ratio {:.2}",
            rows[0],
            rows[1],
            rows[1] / rows[0]
        );
    }
}

#[test]
#[ignore]
fn probe_batch1_latency() {
    let spec = WorkloadSpec {
        benchmark: "echo".into(),
        op_count: 200,
        clients: 2,
        executors: 2,
        no_batching: true,
        ..Default::default()
    };
    let out = run_threaded(&spec).unwrap();
    eprintln!(
        "echo batch1 small: {:.0} ops/s p50 {} p95 {} p99 {} ok {} batches {} acks_fill {:.2}",
        out.row.throughput_ops_s,
        out.row.p50_us,
        out.row.p95_us,
        out.row.p99_us,
        out.row.ok_ops,
        out.leader.batches_sent,
        out.row.batch_fill_mean,
    );
}

#[test]
#[ignore]
fn probe_saturated_batching() {
    for (label, no_batching, ops) in [("batch32", false, 20000), ("batch1", true, 3000)] {
        let spec = WorkloadSpec {
            benchmark: "echo".into(),
            op_count: ops,
            clients: 4,
            pipeline: 24,
            executors: 2,
            no_batching,
            ..Default::default()
        };
        let out = run_threaded(&spec).unwrap();
        eprintln!(
            "echo {label} 48c: {:.0} ops/s fences/entry {:.3} fill {:.2} p50 {} p99 {} ok {}",
            out.row.throughput_ops_s,
            out.row.fences_per_entry,
            out.row.batch_fill_mean,
            out.row.p50_us,
            out.row.p99_us,
            out.row.ok_ops,
        );
    }
}

#[test]
#[ignore]
fn probe_ablation_numbers() {
    // echo: batching on vs off
    for (label, no_batching) in [("batch32", false), ("batch1", true)] {
        let spec = WorkloadSpec {
            benchmark: "echo".into(),
            op_count: 6000,
            clients: 8,
            executors: 2,
            no_batching,
            ..Default::default()
        };
        let out = run_threaded(&spec).unwrap();
        eprintln!(
            "echo {label}: {:.0} ops/s fences/entry {:.3} batch_fill {:.2} ok {}",
            out.row.throughput_ops_s, out.row.fences_per_entry, out.row.batch_fill_mean, out.row.ok_ops
        );
    }
    // kv: serial vs commute
    for (label, serial) in [("serial", true), ("commute", false)] {
        let spec = WorkloadSpec {
            benchmark: "kv".into(),
            op_count: 20_000,
            clients: 4,
            pipeline: 16,
            executors: 4,
            key_space: 10_000,
            serial,
            ..Default::default()
        };
        let out = run_threaded(&spec).unwrap();
        eprintln!(
            "kv {label}: {:.0} ops/s e_mean {:.2} ok {}",
            out.row.throughput_ops_s, out.row.e_mean, out.row.ok_ops
        );
    }
    // copy ablation
    for (label, force_copy) in [("zerocopy", false), ("copy", true)] {
        let spec = WorkloadSpec {
            benchmark: "echo".into(),
            op_count: 3000,
            clients: 4,
            executors: 2,
            force_copy,
            ..Default::default()
        };
        let out = run_threaded(&spec).unwrap();
        eprintln!("echo {label}: copies/op {:.2}", out.row.copies_per_op);
    }
}
