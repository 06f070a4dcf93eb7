//! Client-side request policy: leader discovery, failover and retry.
//!
//! The policy is a transport-free state machine shared by the blocking
//! client (threaded / UDP clusters) and the simulator's event-driven
//! sessions, so both exercise identical failover behavior: send to the
//! cached leader, follow NotLeader hints, probe round-robin on timeouts,
//! and give up when the retry budget runs out.

use crate::logrep::wire::{ReplyStatus, NO_HINT};

/// Client-visible outcome of an RPC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// The request may not have been applied; safe to retry (duplicates are
    /// possible — there is no dedup table).
    Retryable,
    /// No leader reachable within the retry budget.
    NoLeader,
    /// The handler failed; the operation was completed without effects.
    AppError,
}

#[derive(Debug)]
pub enum Verdict {
    Done(Status),
    /// Try again (possibly at a new target).
    Retry,
}

#[derive(Debug, Clone)]
pub struct ClientPolicy {
    nodes: Vec<u64>,
    cached_leader: Option<u64>,
    probe_cursor: usize,
    attempts_left: u32,
}

impl ClientPolicy {
    pub fn new(nodes: Vec<u64>, attempts: u32) -> ClientPolicy {
        ClientPolicy {
            nodes,
            cached_leader: None,
            probe_cursor: 0,
            attempts_left: attempts,
        }
    }

    pub fn cached_leader(&self) -> Option<u64> {
        self.cached_leader
    }

    /// Refill the per-operation retry budget, keeping the cached leader.
    pub fn reset_attempts(&mut self, attempts: u32) {
        self.attempts_left = attempts;
    }

    /// Whom to send the next attempt to; None when the budget is exhausted.
    pub fn next_target(&mut self) -> Option<u64> {
        if self.attempts_left == 0 {
            return None;
        }
        self.attempts_left -= 1;
        match self.cached_leader {
            Some(l) => Some(l),
            None => {
                let t = self.nodes[self.probe_cursor % self.nodes.len()];
                self.probe_cursor += 1;
                Some(t)
            }
        }
    }

    pub fn on_reply(&mut self, from: u64, status: ReplyStatus, leader_hint: u64) -> Verdict {
        match status {
            ReplyStatus::Ok => {
                self.cached_leader = Some(from);
                Verdict::Done(Status::Ok)
            }
            ReplyStatus::AppError => Verdict::Done(Status::AppError),
            ReplyStatus::Retryable | ReplyStatus::Busy => Verdict::Retry,
            ReplyStatus::NotLeader => {
                self.cached_leader = if leader_hint != NO_HINT && leader_hint != from {
                    Some(leader_hint)
                } else {
                    None
                };
                Verdict::Retry
            }
        }
    }

    pub fn on_timeout(&mut self, target: u64) {
        if self.cached_leader == Some(target) {
            self.cached_leader = None;
        }
    }
}
