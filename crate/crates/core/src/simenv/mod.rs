//! Discrete-event simulation of a request-driven serverless data path.
//!
//! Models the serving pipeline of a Knative-style platform: an activator
//! buffer on scale-from-zero, per-pod concurrency gating by a queue-proxy,
//! processor-sharing CPU inside each pod, admission-controlled memory, and a
//! periodic pod autoscaler. Time is integer microseconds throughout; event
//! ties break on a monotonically increasing sequence number, so a run is a
//! pure function of its configuration and seed.

mod engine;

pub use engine::SimEnv;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("concurrency limit {0} outside the valid range 1..=1000")]
    LimitOutOfRange(u32),
    #[error("soft concurrency target {0} must be at least 1")]
    TargetOutOfRange(u32),
    #[error("request rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("test duration must be positive, got {0} ms")]
    InvalidDuration(u64),
    #[error("offered load of {rate} rps over {duration_ms} ms yields no whole request")]
    OfferedLoadTooLow { rate: f64, duration_ms: u64 },
    #[error("invalid service demand: {0}")]
    InvalidDemand(String),
}

/// Cluster and autoscaler parameters for one simulated environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Reference CPU cores per pod, shared processor-style by in-flight requests.
    pub pod_cpu_cores: f64,
    /// Memory capacity per pod in MB; admission beyond it fails the request.
    pub pod_mem_mb: f64,
    /// Resident MB an idle pod occupies (runtime overhead).
    pub pod_base_mem_mb: f64,
    /// Delay between requesting a pod and it becoming ready.
    pub cold_start_ms: u64,
    /// Upper bound on simultaneously alive pods.
    pub max_pods: u32,
    /// Autoscaler evaluation period.
    pub scale_interval_ms: u64,
    /// Fraction of the per-pod concurrency value the autoscaler targets.
    pub target_percentage: f64,
    /// Whether zero pods is a permitted scale; if so, cold starts happen via
    /// the activator buffer.
    pub scale_to_zero: bool,
    /// Client-side request timeout; expiry counts as failure.
    pub timeout_ms: u64,
    /// Draw arrival instants from a Poisson process instead of an even grid.
    pub poisson_arrivals: bool,
    /// Seed for everything stochastic in this environment.
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pod_cpu_cores: 2.0,
            pod_mem_mb: 7168.0,
            pod_base_mem_mb: 64.0,
            cold_start_ms: 2000,
            max_pods: 3,
            scale_interval_ms: 2000,
            target_percentage: 1.0,
            scale_to_zero: true,
            timeout_ms: 30_000,
            poisson_arrivals: false,
            rng_seed: 42,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if !(self.pod_cpu_cores > 0.0 && self.pod_cpu_cores.is_finite()) {
            return bad(format!("pod_cpu_cores must be positive, got {}", self.pod_cpu_cores));
        }
        if !(self.pod_mem_mb > 0.0 && self.pod_mem_mb.is_finite()) {
            return bad(format!("pod_mem_mb must be positive, got {}", self.pod_mem_mb));
        }
        if !(self.pod_base_mem_mb >= 0.0 && self.pod_base_mem_mb < self.pod_mem_mb) {
            return bad(format!(
                "pod_base_mem_mb {} must be in [0, pod_mem_mb)",
                self.pod_base_mem_mb
            ));
        }
        if self.max_pods < 1 {
            return bad("max_pods must be at least 1".into());
        }
        if self.scale_interval_ms == 0 {
            return bad("scale_interval_ms must be positive".into());
        }
        if !(self.target_percentage > 0.0 && self.target_percentage <= 1.0) {
            return bad(format!(
                "target_percentage must be in (0, 1], got {}",
                self.target_percentage
            ));
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        Ok(())
    }
}

/// Admission and scaling mode for one load test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConcurrencyPolicy {
    /// Hard per-pod cap; the autoscaler targets `limit * target_percentage`
    /// in-flight requests per pod.
    HardLimit(u32),
    /// No per-pod admission cap; the autoscaler targets
    /// `target * target_percentage` per pod (platform default behavior).
    SoftTarget(u32),
}

impl ConcurrencyPolicy {
    pub(crate) fn validate(&self) -> Result<(), SimError> {
        match *self {
            ConcurrencyPolicy::HardLimit(l) if !(1..=1000).contains(&l) => {
                Err(SimError::LimitOutOfRange(l))
            }
            ConcurrencyPolicy::SoftTarget(t) if t < 1 => Err(SimError::TargetOutOfRange(t)),
            _ => Ok(()),
        }
    }

    /// Per-pod slot bound enforced at admission.
    pub(crate) fn slot_limit(&self) -> u32 {
        match *self {
            ConcurrencyPolicy::HardLimit(l) => l,
            ConcurrencyPolicy::SoftTarget(_) => u32::MAX,
        }
    }

    /// Per-pod concurrency value the autoscaler divides by.
    pub(crate) fn scale_value(&self) -> u32 {
        match *self {
            ConcurrencyPolicy::HardLimit(l) | ConcurrencyPolicy::SoftTarget(l) => l,
        }
    }
}

/// Replica count the autoscaler wants: `ceil(observed / (value * pct))`,
/// clamped to `[scale_to_zero ? 0 : 1, max_pods]`.
pub fn desired_pods(
    observed_concurrency: f64,
    concurrency_value: u32,
    target_percentage: f64,
    scale_to_zero: bool,
    max_pods: u32,
) -> u32 {
    let denom = f64::from(concurrency_value) * target_percentage;
    let raw = (observed_concurrency.max(0.0) / denom).ceil();
    let raw = if raw.is_finite() { raw.max(0.0).min(f64::from(u32::MAX)) as u32 } else { max_pods };
    let floor = if scale_to_zero { 0 } else { 1 };
    raw.clamp(floor, max_pods)
}

/// Time-weighted resource utilization over one finished test window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    /// Mean busy fraction per ready pod, in [0, 1].
    pub avg_cpu_util: f64,
    /// Mean resident-memory fraction per ready pod, in [0, 1].
    pub avg_mem_util: f64,
}

/// Aggregate outcome of one load test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadTestReport {
    /// Successful completions per second of wall-clock test span (attack
    /// window plus drain, load-tool style).
    pub throughput_rps: f64,
    /// Mean latency of successful requests, ms.
    pub mean_latency_ms: f64,
    /// 95th percentile (nearest-rank) latency of successful requests, ms.
    pub p95_latency_ms: f64,
    /// succeeded / issued.
    pub success_ratio: f64,
    pub issued: u64,
    pub succeeded: u64,
    pub failed: u64,
    /// Failures from memory-exhausted admission.
    pub failed_mem: u64,
    /// Failures from request timeout.
    pub failed_timeout: u64,
    pub resources: ResourceSnapshot,
}

/// One line of the debug event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_us: u64,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pod: Option<u64>,
}
