//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    // pheap
    #[error("capacity too small: {got} bytes (minimum {min})")]
    CapacityTooSmall { got: u64, min: u64 },
    #[error("bad magic in heap file")]
    BadMagic,
    #[error("heap version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("arena out of space (requested {requested} bytes)")]
    OutOfSpace { requested: u64 },
    #[error("invalid handle (offset {offset})")]
    InvalidHandle { offset: u64 },
    #[error("stale handle: generation {handle_gen}, arena incarnation {arena_gen}")]
    StaleHandle { handle_gen: u64, arena_gen: u64 },
    #[error("double free at offset {offset}")]
    DoubleFree { offset: u64 },
    #[error("range out of bounds: offset {offset} len {len} within allocation of {alloc_len}")]
    RangeOutOfBounds { offset: u64, len: u64, alloc_len: u64 },
    #[error("allocator self-check failed: {0}")]
    AllocatorCorrupt(String),

    // patomic
    #[error("transaction not active")]
    TxNotActive,
    #[error("transaction table full")]
    TxTableFull,
    #[error("corrupt undo chain: {0}")]
    CorruptUndoChain(String),

    // logrep / sched
    #[error("not the leader (hint: node {hint:?})")]
    NotLeader { hint: Option<u64> },
    #[error("operations log full")]
    LogFull,
    #[error("corrupt operation queue: {0}")]
    CorruptQueue(String),
    #[error("service already registered")]
    DuplicateRegistration,
    #[error("commutes predicate not symmetric on sampled pair")]
    AsymmetricPredicate,

    // libds / net / cli
    #[error("malformed request")]
    MalformedRequest,
    #[error("malformed wire message")]
    MalformedMessage,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
