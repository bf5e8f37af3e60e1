//! Deterministic discrete-event simulation of data-parallel iterations.

mod engine;
pub mod experiment;
pub mod profile;
pub mod trace;

use serde::{Deserialize, Serialize};

pub use engine::{
    simulate_costs, simulate_iteration, Event, EventKind, IterationCosts, IterationTimeline,
    SimScheme, Workload,
};
pub use profile::{profile_ccr, ProfileReport};

use crate::error::{CovapError, Result};
use crate::topology::{allocate_buckets, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub workers: u32,
    pub bandwidth_gbps: f64,
    #[serde(default)]
    pub latency_ms: f64,
    #[serde(default = "default_efficiency")]
    pub allreduce_efficiency: f64,
    /// Constant per-worker start offsets; missing entries are zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skew_ms: Vec<f64>,
}

fn default_efficiency() -> f64 {
    1.0
}

impl ClusterConfig {
    pub fn new(workers: u32, bandwidth_gbps: f64) -> Self {
        ClusterConfig {
            workers,
            bandwidth_gbps,
            latency_ms: 0.0,
            allreduce_efficiency: 1.0,
            skew_ms: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(CovapError::config("cluster.workers", "must be at least 1"));
        }
        if !(self.bandwidth_gbps.is_finite() && self.bandwidth_gbps > 0.0) {
            return Err(CovapError::config(
                "cluster.bandwidth_gbps",
                "must be positive",
            ));
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(CovapError::config("cluster.latency_ms", "must be >= 0"));
        }
        if !(self.allreduce_efficiency > 0.0 && self.allreduce_efficiency <= 1.0) {
            return Err(CovapError::config(
                "cluster.allreduce_efficiency",
                format!("{} outside (0, 1]", self.allreduce_efficiency),
            ));
        }
        if self.skew_ms.len() > self.workers as usize {
            return Err(CovapError::config(
                "cluster.skew_ms",
                "more entries than workers",
            ));
        }
        if self.skew_ms.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(CovapError::config(
                "cluster.skew_ms",
                "offsets must be >= 0",
            ));
        }
        Ok(())
    }

    pub fn skew(&self, worker: usize) -> f64 {
        self.skew_ms.get(worker).copied().unwrap_or(0.0)
    }

    pub fn with_workers(&self, workers: u32) -> Self {
        let mut c = self.clone();
        c.workers = workers;
        c.skew_ms.truncate(workers as usize);
        c
    }

    /// Milliseconds to push `bits` through one link at effective bandwidth.
    fn wire_ms(&self, bits: f64) -> f64 {
        bits / (self.bandwidth_gbps * 1e9 * self.allreduce_efficiency) * 1e3
    }
}

/// Ring allreduce: `latency + 2(P-1)/P * bytes * 8 / (bandwidth * eff)`.
pub fn comm_time(bytes: u64, cluster: &ClusterConfig) -> f64 {
    let p = f64::from(cluster.workers);
    cluster.latency_ms + cluster.wire_ms(2.0 * (p - 1.0) / p * bytes as f64 * 8.0)
}

/// Ring allgather of `bytes` contributed by each worker.
pub fn allgather_time(bytes_per_worker: u64, cluster: &ClusterConfig) -> f64 {
    let p = f64::from(cluster.workers);
    cluster.latency_ms + cluster.wire_ms((p - 1.0) * bytes_per_worker as f64 * 8.0)
}

/// Efficiency factor that makes allreducing every bucket in `bucket_bytes`
/// take `target_ms` in total.
pub fn calibrate_efficiency(
    bucket_bytes: &[u64],
    target_ms: f64,
    cluster: &ClusterConfig,
) -> Result<f64> {
    let fixed = cluster.latency_ms * bucket_bytes.len() as f64;
    let at_full = ClusterConfig {
        allreduce_efficiency: 1.0,
        latency_ms: 0.0,
        ..cluster.clone()
    };
    let volume: f64 = bucket_bytes.iter().map(|&b| comm_time(b, &at_full)).sum();
    if !(target_ms > fixed) || volume <= 0.0 {
        return Err(CovapError::config(
            "timing.t_comm_ms",
            format!("{target_ms} ms cannot be reached: latency alone costs {fixed} ms"),
        ));
    }
    let eff = volume / (target_ms - fixed);
    if eff > 1.0 {
        return Err(CovapError::config(
            "timing.t_comm_ms",
            format!("{target_ms} ms is faster than the link allows (efficiency {eff:.3} > 1)"),
        ));
    }
    Ok(eff)
}

/// `cluster` with its efficiency fitted so the model's dense buckets take
/// `t_comm_ms` to allreduce.
pub fn calibrated_cluster(
    model: &ModelSpec,
    cluster: &ClusterConfig,
    t_comm_ms: f64,
) -> Result<ClusterConfig> {
    let plan = allocate_buckets(model, model.bucket_cap_bytes)?;
    let bytes: Vec<u64> = plan.buckets.iter().map(|b| b.bytes).collect();
    Ok(ClusterConfig {
        allreduce_efficiency: calibrate_efficiency(&bytes, t_comm_ms, cluster)?,
        ..cluster.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_V: [u64; 6] = [4101096, 16781312, 107480576, 7079424, 7669760, 555072];

    #[test]
    fn zero_bytes_costs_latency() {
        let mut c = ClusterConfig::new(8, 10.0);
        c.latency_ms = 0.7;
        assert_eq!(comm_time(0, &c), 0.7);
    }

    #[test]
    fn doubling_bandwidth_halves_volume_term() {
        let slow = ClusterConfig::new(16, 10.0);
        let fast = ClusterConfig::new(16, 20.0);
        let b = 123_456_789;
        assert!((comm_time(b, &slow) - 2.0 * comm_time(b, &fast)).abs() < 1e-9);
    }

    #[test]
    fn ring_volume_by_hand() {
        // 2 workers, 1 GB over 8 Gbps: 2*(1/2)*8e9 bits / 8e9 = 1 s.
        let c = ClusterConfig::new(2, 8.0);
        assert!((comm_time(1_000_000_000, &c) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn calibrated_shares_follow_sizes() {
        let mut cluster = ClusterConfig::new(64, 30.0);
        cluster.latency_ms = 5.0;
        let bytes: Vec<u64> = TABLE_V.iter().map(|n| n * 4).collect();
        let eff = calibrate_efficiency(&bytes, 830.094, &cluster).unwrap();
        cluster.allreduce_efficiency = eff;
        let times: Vec<f64> = bytes.iter().map(|&b| comm_time(b, &cluster)).collect();
        let total: f64 = times.iter().sum();
        assert!((total - 830.094).abs() < 1e-9);
        assert!((times[2] / total * 100.0 - 72.67).abs() < 1.0);
    }

    #[test]
    fn unreachable_targets_error() {
        let mut c = ClusterConfig::new(4, 10.0);
        c.latency_ms = 10.0;
        assert!(calibrate_efficiency(&[100], 5.0, &c).is_err());
        c.latency_ms = 0.0;
        assert!(calibrate_efficiency(&[1_000_000_000], 1e-3, &c).is_err());
    }

    #[test]
    fn validation() {
        assert!(ClusterConfig::new(0, 1.0).validate().is_err());
        assert!(ClusterConfig::new(2, 0.0).validate().is_err());
        let mut c = ClusterConfig::new(2, 1.0);
        c.skew_ms = vec![0.0, 1.0, 2.0];
        assert!(c.validate().is_err());
    }
}
