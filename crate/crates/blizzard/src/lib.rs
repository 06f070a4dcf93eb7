//! Blizzard: replicated, failure-atomic persistent in-memory data structures.
//!
//! The runtime couples a RAFT replication engine and a persistent-memory
//! execution engine through a single operations log: each client request is
//! allocated once in a persistent arena and the same bytes are referenced by
//! replication, scheduling and execution. A user-supplied commutativity
//! predicate lets the scheduler run operations concurrently without giving up
//! the serializability implied by the log order.
//!
//! Layering, bottom up:
//!
//! * [`pheap`] — simulated persistent-memory arena over a file image, with a
//!   cache-line volatility model (`strict` mode) for crash testing.
//! * [`patomic`] — failure-atomic transactions via persistent undo logs.
//! * [`logrep`] — RAFT replication over the coupled operations log.
//! * [`sched`] — commutativity scheduler, executor, and restart recovery.
//! * [`libds`] — persistent hashmap / adjacency-list graph / sharded top-K
//!   vote services, each with a request codec and a commute predicate.
//! * [`net`] — deterministic simulated transport, client library, fault
//!   injection, and protocol safety checkers.
//! * [`runtime`] — a replica node composing the layers, plus a threaded
//!   in-process cluster driver.
//! * [`bench`] / [`crashfuzz`] — workload and crash-campaign engines used by
//!   the CLI and the acceptance suite.

pub mod bench;
pub mod crashfuzz;
pub mod error;
pub mod libds;
pub mod logrep;
pub mod net;
pub mod patomic;
pub mod pheap;
pub mod runtime;
pub mod sched;
pub mod service;

pub use error::{Error, Result};
