//! Persistent data-structure services: hashmap KV store, adjacency-list
//! graph, sharded top-K vote backend, and a no-op echo service. Each packs a
//! request codec, a handler, and a commutativity predicate over one
//! structure in the arena.

pub mod codec;
pub mod echo;
pub mod graph;
pub mod kv;
pub mod vote;

pub use echo::EchoService;
pub use graph::GraphService;
pub use kv::{KvService, PHashMap};
pub use vote::VoteService;

use crate::error::{Error, Result};
use crate::service::Service;
use std::sync::Arc;

/// Benchmark-sized services by name. The test harnesses use smaller
/// structures than the production defaults to keep arenas compact.
pub fn service_by_name(name: &str) -> Result<Arc<dyn Service>> {
    match name {
        "kv" => Ok(Arc::new(KvService::default())),
        "graph" => Ok(Arc::new(GraphService::default())),
        "vote" => Ok(Arc::new(VoteService::default())),
        "echo" => Ok(Arc::new(EchoService::default())),
        other => Err(Error::ConfigInvalid(format!("unknown service {other}"))),
    }
}
