//! Cluster configuration and fault-schedule files (TOML).

use crate::error::{Error, Result};
use crate::net::sim::{FaultEvent, FaultSchedule, SimConfig};
use crate::pheap::ArenaMode;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeAddr {
    pub id: u64,
    pub addr: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub replicas: u64,
    pub seed: u64,
    pub election_timeout_us: u64,
    pub heartbeat_us: u64,
    pub link_latency_us: u64,
    pub link_jitter_us: u64,
    pub batch_cap: usize,
    pub log_capacity: u64,
    pub arena_capacity: u64,
    /// "fast" or "strict"
    pub arena_mode: String,
    pub executors: usize,
    pub drop_rate: f64,
    pub client_timeout_us: u64,
    pub client_attempts: u32,
    /// Socket addresses for real-socket (`serve`) deployments.
    pub nodes: Vec<NodeAddr>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        ClusterConfig {
            replicas: sim.replicas,
            seed: sim.seed,
            election_timeout_us: sim.election_timeout_us,
            heartbeat_us: sim.heartbeat_us,
            link_latency_us: sim.link_latency_us,
            link_jitter_us: sim.link_jitter_us,
            batch_cap: sim.batch_cap,
            log_capacity: sim.log_capacity,
            arena_capacity: sim.arena_capacity,
            arena_mode: "fast".into(),
            executors: sim.executors,
            drop_rate: 0.0,
            client_timeout_us: sim.client_timeout_us,
            client_attempts: sim.client_attempts,
            nodes: vec![],
        }
    }
}

impl ClusterConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ClusterConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ClusterConfig =
            toml::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 || self.replicas % 2 == 0 {
            return Err(Error::ConfigInvalid(format!(
                "replicas must be odd and positive, got {}",
                self.replicas
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::ConfigInvalid("drop_rate outside [0,1]".into()));
        }
        self.mode()?;
        Ok(())
    }

    pub fn mode(&self) -> Result<ArenaMode> {
        match self.arena_mode.as_str() {
            "fast" => Ok(ArenaMode::Fast),
            "strict" => Ok(ArenaMode::Strict),
            other => Err(Error::ConfigInvalid(format!("unknown arena mode {other}"))),
        }
    }

    pub fn to_sim(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            replicas: self.replicas,
            seed: self.seed,
            election_timeout_us: self.election_timeout_us,
            heartbeat_us: self.heartbeat_us,
            link_latency_us: self.link_latency_us,
            link_jitter_us: self.link_jitter_us,
            batch_cap: self.batch_cap,
            log_capacity: self.log_capacity,
            arena_capacity: self.arena_capacity,
            arena_mode: self.mode()?,
            executors: self.executors,
            drop_rate: self.drop_rate,
            client_timeout_us: self.client_timeout_us,
            client_attempts: self.client_attempts,
            ..SimConfig::default()
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FaultEntry {
    at_us: u64,
    action: String,
    #[serde(default)]
    node: Option<u64>,
    #[serde(default)]
    rate: Option<f64>,
    #[serde(default)]
    groups: Option<Vec<Vec<u64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FaultFile {
    #[serde(default)]
    events: Vec<FaultEntry>,
}

/// Parse a fault schedule: `[[events]]` records of (virtual time, action).
pub fn load_fault_schedule(path: impl AsRef<Path>) -> Result<FaultSchedule> {
    let text = std::fs::read_to_string(path)?;
    parse_fault_schedule(&text)
}

pub fn parse_fault_schedule(text: &str) -> Result<FaultSchedule> {
    let file: FaultFile = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let mut out = Vec::new();
    for e in file.events {
        let need_node = || {
            e.node
                .ok_or_else(|| Error::ConfigInvalid(format!("{} needs `node`", e.action)))
        };
        let ev = match e.action.as_str() {
            "kill" => FaultEvent::Kill { node: need_node()? },
            "kill_leader" => FaultEvent::KillLeader,
            "restart" => FaultEvent::Restart { node: need_node()? },
            "partition" => FaultEvent::Partition {
                groups: e
                    .groups
                    .clone()
                    .ok_or_else(|| Error::ConfigInvalid("partition needs `groups`".into()))?,
            },
            "heal" => FaultEvent::Heal,
            "drop_rate" => FaultEvent::SetDropRate {
                rate: e
                    .rate
                    .ok_or_else(|| Error::ConfigInvalid("drop_rate needs `rate`".into()))?,
            },
            other => {
                return Err(Error::ConfigInvalid(format!("unknown fault action {other}")))
            }
        };
        out.push((e.at_us, ev));
    }
    out.sort_by_key(|(at, _)| *at);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_cluster_and_faults() {
        let cfg: ClusterConfig = toml::from_str(
            r#"
            replicas = 5
            seed = 9
            arena_mode = "strict"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.replicas, 5);
        assert_eq!(cfg.mode().unwrap(), ArenaMode::Strict);

        let sched = parse_fault_schedule(
            r#"
            [[events]]
            at_us = 500000
            action = "kill"
            node = 0

            [[events]]
            at_us = 900000
            action = "partition"
            groups = [[0, 1], [2]]

            [[events]]
            at_us = 1500000
            action = "heal"
            "#,
        )
        .unwrap();
        assert_eq!(sched.len(), 3);
        assert!(matches!(sched[0].1, FaultEvent::Kill { node: 0 }));
    }

    #[test]
    fn even_replicas_rejected() {
        let cfg = ClusterConfig {
            replicas: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
