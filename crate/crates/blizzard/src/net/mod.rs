//! Transport layer: deterministic simulator, client policy, cluster
//! configuration, protocol safety checkers, and the datagram transport for
//! real-socket deployments.

pub mod checks;
pub mod client;
pub mod config;
pub mod sim;
pub mod udp;

pub use client::{ClientPolicy, Status};
pub use sim::{FaultEvent, SimConfig, SimNet, Trace, TraceEvent, WorkloadOp};
