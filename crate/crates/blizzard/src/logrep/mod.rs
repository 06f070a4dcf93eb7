//! RAFT replication engine with the coupled operations log.

pub mod entry;
pub mod oplog;
pub mod raft;
pub mod wire;

pub use entry::{Kind, OpState};
pub use raft::{RaftConfig, RaftCore, RaftEvent, RaftMetrics, Role};
