//! Discrete-event benchmarks of request-based serverless autoscaling, with a
//! tabular Q-learning agent that tunes the per-pod concurrency limit online.
//!
//! The crate has three layers: [`simenv`] simulates the serving data path of
//! a Knative-style platform (activator buffering, queue-proxy concurrency
//! gating, processor-sharing CPU, memory admission control, periodic pod
//! autoscaling); [`agent`] implements the Q-learning pieces (state
//! discretization, epsilon-greedy policy, the reward around a running best
//! throughput); [`harness`] orchestrates the experiments (concurrency sweep,
//! online training, comparison with the default autoscaler configuration)
//! and [`export`] writes the result files. The `concsim` binary in
//! [`cli`] ties them to a TOML config.

pub mod agent;
pub mod cli;
pub mod config;
pub mod export;
pub mod harness;
pub mod simenv;
pub mod workload;
