//! Operator entry point: benchmarks, failover drills, crash-consistency
//! fuzzing campaigns, and real-socket nodes/clients.

mod commands;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "blizzard", about = "Replicated persistent data structures: cluster tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload and emit a metrics CSV row.
    Bench(commands::BenchArgs),
    /// Kill the leader mid-run and report detection/election/commit timings.
    Failover(commands::FailoverArgs),
    /// Crash-point injection campaigns with invariant, model and
    /// exactly-once checks.
    Crashfuzz(commands::CrashfuzzArgs),
    /// Run one replica over UDP (state persists in a heap file).
    Serve(commands::ServeArgs),
    /// Send requests to a running UDP cluster.
    Client(commands::ClientArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Bench(a) => commands::bench(a),
        Command::Failover(a) => commands::failover(a),
        Command::Crashfuzz(a) => commands::crashfuzz(a),
        Command::Serve(a) => commands::serve(a),
        Command::Client(a) => commands::client(a),
    }
}
