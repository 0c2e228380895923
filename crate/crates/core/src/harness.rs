//! Experiment orchestration: the baseline concurrency sweep, Q-learning
//! training and the comparison against the platform-default autoscaling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, epsilon_at, q_update, select_action, update_ref, AgentError, QTable};
use crate::config::{ConfigError, ExperimentConfig};
use crate::simenv::{ConcurrencyPolicy, LoadTestReport, SimConfig, SimEnv, SimError};
use crate::workload::{service_demand, ServiceDemand};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
}

/// Seed streams so each consumer of randomness is independent.
mod stream {
    pub const SWEEP: u64 = 1;
    pub const AGENT: u64 = 2;
    pub const TRAIN_ENV: u64 = 3;
}

/// Derives an independent seed from the master seed via chained splitmix64.
pub fn derive_seed(master: u64, stream: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(master ^ stream) ^ a) ^ b)
}

/// Pearson correlation coefficient of two equal-length series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, HarnessError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(HarnessError::UndefinedCorrelation(format!(
            "need two equal-length series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(HarnessError::UndefinedCorrelation(
            "a series has zero variance".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-level means across the repetitions of one sweep level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMean {
    pub throughput_rps: f64,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub success_ratio: f64,
    pub issued: f64,
    pub succeeded: f64,
    pub failed: f64,
    pub avg_cpu_util: f64,
    pub avg_mem_util: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub conc: u32,
    pub mean: LevelMean,
    pub reps: Vec<LoadTestReport>,
}

/// Concurrency levels that won each metric (max throughput, min latencies).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestBy {
    pub throughput: u32,
    pub mean_latency: u32,
    pub p95_latency: u32,
}

/// Pearson correlations over the per-level means; `None` when a series has
/// no variance (e.g. a workload whose throughput is flat across the grid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub throughput_mean_latency: Option<f64>,
    pub throughput_p95_latency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub levels: Vec<LevelSummary>,
    pub best_by: BestBy,
    pub correlations: Correlations,
}

/// One training iteration as logged: the limit actually tested, the action
/// that produced it, and the resulting signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: u64,
    pub conc: u32,
    pub action: i32,
    pub throughput_rps: f64,
    pub reward: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub qtable: QTable,
    /// Most frequent concurrency over the last `window_k` iterations.
    pub modal_conc_last_k: u32,
    pub window_k: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub iteration: u64,
    pub rl_throughput_rps: f64,
    pub rl_avg_throughput_rps: f64,
    pub default_throughput_rps: f64,
    pub default_avg_throughput_rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub final_rl_avg: f64,
    pub final_default_avg: f64,
}

fn demand_of(cfg: &ExperimentConfig) -> Result<ServiceDemand, HarnessError> {
    let profile = cfg.profile.resolve()?;
    Ok(service_demand(&profile, &cfg.calibration))
}

fn run_one(
    cfg: &ExperimentConfig,
    demand: &ServiceDemand,
    seed: u64,
    policy: ConcurrencyPolicy,
    sim_override: Option<SimConfig>,
) -> Result<LoadTestReport, HarnessError> {
    let sim = SimConfig { rng_seed: seed, ..sim_override.unwrap_or(cfg.sim) };
    let mut env = SimEnv::new(sim)?;
    Ok(env.run_with_policy(policy, demand, cfg.rate_rps, cfg.duration_ms)?)
}

/// Runs every grid level `repetitions` times and aggregates the outcome.
/// Levels and repetitions are independent seeded runs and execute in
/// parallel; aggregation order is fixed, so the report is deterministic.
pub fn baseline_sweep(cfg: &ExperimentConfig) -> Result<SweepReport, HarnessError> {
    cfg.validate()?;
    let demand = demand_of(cfg)?;
    let levels = cfg.sweep.levels();

    let summaries: Vec<LevelSummary> = levels
        .par_iter()
        .map(|&conc| -> Result<LevelSummary, HarnessError> {
            let reps: Vec<LoadTestReport> = (0..cfg.sweep.repetitions)
                .into_par_iter()
                .map(|rep| {
                    let seed =
                        derive_seed(cfg.master_seed, stream::SWEEP, u64::from(conc), u64::from(rep));
                    run_one(cfg, &demand, seed, ConcurrencyPolicy::HardLimit(conc), None)
                })
                .collect::<Result<_, _>>()?;
            let n = reps.len() as f64;
            let mean = LevelMean {
                throughput_rps: reps.iter().map(|r| r.throughput_rps).sum::<f64>() / n,
                mean_latency_ms: reps.iter().map(|r| r.mean_latency_ms).sum::<f64>() / n,
                p95_latency_ms: reps.iter().map(|r| r.p95_latency_ms).sum::<f64>() / n,
                success_ratio: reps.iter().map(|r| r.success_ratio).sum::<f64>() / n,
                issued: reps.iter().map(|r| r.issued as f64).sum::<f64>() / n,
                succeeded: reps.iter().map(|r| r.succeeded as f64).sum::<f64>() / n,
                failed: reps.iter().map(|r| r.failed as f64).sum::<f64>() / n,
                avg_cpu_util: reps.iter().map(|r| r.resources.avg_cpu_util).sum::<f64>() / n,
                avg_mem_util: reps.iter().map(|r| r.resources.avg_mem_util).sum::<f64>() / n,
            };
            Ok(LevelSummary { conc, mean, reps })
        })
        .collect::<Result<_, _>>()?;

    let argbest = |better: fn(f64, f64) -> bool, metric: fn(&LevelMean) -> f64| -> u32 {
        let mut best = &summaries[0];
        for s in &summaries[1..] {
            if better(metric(&s.mean), metric(&best.mean)) {
                best = s;
            }
        }
        best.conc
    };
    let best_by = BestBy {
        throughput: argbest(|a, b| a > b, |m| m.throughput_rps),
        mean_latency: argbest(|a, b| a < b, |m| m.mean_latency_ms),
        p95_latency: argbest(|a, b| a < b, |m| m.p95_latency_ms),
    };

    let tps: Vec<f64> = summaries.iter().map(|s| s.mean.throughput_rps).collect();
    let means: Vec<f64> = summaries.iter().map(|s| s.mean.mean_latency_ms).collect();
    let p95s: Vec<f64> = summaries.iter().map(|s| s.mean.p95_latency_ms).collect();
    let correlations = Correlations {
        throughput_mean_latency: pearson(&tps, &means).ok(),
        throughput_p95_latency: pearson(&tps, &p95s).ok(),
    };

    Ok(SweepReport { levels: summaries, best_by, correlations })
}

/// Trains the agent online: observe, pick an action, run one load test under
/// the updated limit, reward against the running best throughput, back up.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainReport, HarnessError> {
    cfg.validate()?;
    let demand = demand_of(cfg)?;
    let mut agent_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, stream::AGENT, 0, 0));
    let mut q = QTable::new();
    let mut rc = cfg.reward;
    let mut rows = Vec::with_capacity(cfg.iterations as usize);
    let mut state = agent::discretize(cfg.start_conc, 0.0, 0.0, &cfg.hp)?;

    for iteration in 0..cfg.iterations {
        let epsilon = epsilon_at(iteration, &cfg.hp);
        let action = select_action(&q, state, epsilon, &cfg.hp, &mut agent_rng);
        let conc = (i64::from(state.conc) + i64::from(action.delta())) as u32;
        debug_assert!(cfg.hp.on_grid(conc));

        let seed = derive_seed(cfg.master_seed, stream::TRAIN_ENV, iteration, 0);
        let report = run_one(cfg, &demand, seed, ConcurrencyPolicy::HardLimit(conc), None)?;

        rc = update_ref(rc, report.throughput_rps);
        let reward = agent::reward(report.throughput_rps, &rc)?;
        let next_state = agent::discretize(
            conc,
            report.resources.avg_cpu_util,
            report.resources.avg_mem_util,
            &cfg.hp,
        )?;
        q_update(&mut q, state, action, reward, next_state, &cfg.hp);

        rows.push(TrainRow {
            iteration,
            conc,
            action: action.delta(),
            throughput_rps: report.throughput_rps,
            reward,
            epsilon,
        });
        state = next_state;
    }

    let window_k = cfg.modal_window.min(cfg.iterations);
    let modal_conc_last_k = modal_conc(&rows, window_k);
    Ok(TrainReport { rows, qtable: q, modal_conc_last_k, window_k })
}

/// Most frequent tested concurrency over the last `k` rows; ties go to the
/// smallest level.
fn modal_conc(rows: &[TrainRow], k: u64) -> u32 {
    let tail = &rows[rows.len().saturating_sub(k as usize)..];
    let mut counts = std::collections::BTreeMap::new();
    for row in tail {
        *counts.entry(row.conc).or_insert(0usize) += 1;
    }
    counts
        .into_iter()
        .max_by_key(|&(conc, count)| (count, std::cmp::Reverse(conc)))
        .map(|(conc, _)| conc)
        .expect("modal window over empty training log")
}

/// Runs the RL arm and the platform-default arm over paired seeds and
/// reports both running-average throughput series.
pub fn compare_default(cfg: &ExperimentConfig) -> Result<ComparisonReport, HarnessError> {
    cfg.validate()?;
    let demand = demand_of(cfg)?;
    let rl = train(cfg)?;

    let default_sim =
        SimConfig { target_percentage: cfg.compare_target_percentage, ..cfg.sim };
    let policy = ConcurrencyPolicy::SoftTarget(cfg.compare_target);
    let default_tps: Vec<f64> = (0..cfg.iterations)
        .into_par_iter()
        .map(|iteration| {
            // the default arm reuses the RL arm's per-iteration environment
            // seeds so the two series differ only in scaling policy
            let seed = derive_seed(cfg.master_seed, stream::TRAIN_ENV, iteration, 0);
            run_one(cfg, &demand, seed, policy, Some(default_sim))
                .map(|r| r.throughput_rps)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(cfg.iterations as usize);
    let mut rl_avg = 0.0;
    let mut default_avg = 0.0;
    for (i, (rl_row, &default_tp)) in rl.rows.iter().zip(&default_tps).enumerate() {
        let n = (i + 1) as f64;
        rl_avg += (rl_row.throughput_rps - rl_avg) / n;
        default_avg += (default_tp - default_avg) / n;
        rows.push(ComparisonRow {
            iteration: rl_row.iteration,
            rl_throughput_rps: rl_row.throughput_rps,
            rl_avg_throughput_rps: rl_avg,
            default_throughput_rps: default_tp,
            default_avg_throughput_rps: default_avg,
        });
    }
    Ok(ComparisonReport { rows, final_rl_avg: rl_avg, final_default_avg: default_avg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProfileSpec;

    fn fast_cfg(profile: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            profile: ProfileSpec::Builtin(profile.into()),
            ..ExperimentConfig::default()
        };
        cfg.apply_fast();
        cfg
    }

    #[test]
    fn pearson_closed_forms() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap(), -1.0);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(HarnessError::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        let r = pearson(&[1.0, 2.0, 4.0, 5.0], &[10.0, 8.0, 9.0, 1.0]).unwrap();
        assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn sweep_covers_the_grid_with_repetitions() {
        let mut cfg = fast_cfg("I");
        cfg.sweep.repetitions = 2;
        let report = baseline_sweep(&cfg).unwrap();
        let levels: Vec<u32> = report.levels.iter().map(|l| l.conc).collect();
        assert_eq!(levels, (10..=310).step_by(20).collect::<Vec<u32>>());
        assert_eq!(levels.len(), 16);
        for level in &report.levels {
            assert_eq!(level.reps.len(), 2);
        }
        if let Some(r) = report.correlations.throughput_mean_latency {
            assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn sweep_best_by_is_extremal() {
        let mut cfg = fast_cfg("X");
        cfg.sweep.repetitions = 1;
        let report = baseline_sweep(&cfg).unwrap();
        let best = report
            .levels
            .iter()
            .find(|l| l.conc == report.best_by.throughput)
            .unwrap();
        for l in &report.levels {
            assert!(l.mean.throughput_rps <= best.mean.throughput_rps);
        }
        let best = report
            .levels
            .iter()
            .find(|l| l.conc == report.best_by.mean_latency)
            .unwrap();
        for l in &report.levels {
            assert!(l.mean.mean_latency_ms >= best.mean.mean_latency_ms);
        }
    }

    #[test]
    fn single_iteration_train_contract() {
        let mut cfg = fast_cfg("I");
        cfg.iterations = 1;
        let report = train(&cfg).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.qtable.len(), 1);
        assert_eq!(report.rows[0].iteration, 0);
        assert_eq!(report.rows[0].epsilon, 1.0);
        // first-ever observation initializes the reference, so reward is 1
        assert_eq!(report.rows[0].reward, 1.0);
        assert_eq!(report.modal_conc_last_k, report.rows[0].conc);
    }

    #[test]
    fn train_rows_are_contiguous_and_on_grid() {
        let mut cfg = fast_cfg("I");
        cfg.iterations = 40;
        let report = train(&cfg).unwrap();
        for (i, row) in report.rows.iter().enumerate() {
            assert_eq!(row.iteration, i as u64);
            assert!(cfg.hp.on_grid(row.conc));
            assert!([-20, 0, 20].contains(&row.action));
        }
        // consecutive rows move by at most one action step
        for pair in report.rows.windows(2) {
            let delta = i64::from(pair[1].conc) - i64::from(pair[0].conc);
            assert!([-20, 0, 20].contains(&delta));
        }
    }

    #[test]
    fn train_is_reproducible() {
        let mut cfg = fast_cfg("X");
        cfg.iterations = 25;
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ref_value_equals_running_max_of_throughput() {
        let mut cfg = fast_cfg("X");
        cfg.iterations = 30;
        let report = train(&cfg).unwrap();
        // replay: reward must have used the running max as reference
        let mut rc = cfg.reward;
        for row in &report.rows {
            rc = update_ref(rc, row.throughput_rps);
            let expected = agent::reward(row.throughput_rps, &rc).unwrap();
            assert_eq!(row.reward, expected, "iteration {}", row.iteration);
        }
        let running_max = report
            .rows
            .iter()
            .map(|r| r.throughput_rps)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rc.ref_value, Some(running_max));
    }

    #[test]
    fn compare_rejects_zero_iterations() {
        let mut cfg = fast_cfg("I");
        cfg.iterations = 0;
        assert!(matches!(
            compare_default(&cfg),
            Err(HarnessError::Config(ConfigError::Invalid(_)))
        ));
    }

    #[test]
    fn comparison_running_average_recurrence_is_exact() {
        let mut cfg = fast_cfg("X");
        cfg.iterations = 12;
        let report = compare_default(&cfg).unwrap();
        assert_eq!(report, compare_default(&cfg).unwrap());
        assert_eq!(report.rows.len(), 12);
        let mut rl = 0.0;
        let mut def = 0.0;
        for (i, row) in report.rows.iter().enumerate() {
            let n = (i + 1) as f64;
            rl += (row.rl_throughput_rps - rl) / n;
            def += (row.default_throughput_rps - def) / n;
            assert_eq!(row.rl_avg_throughput_rps, rl);
            assert_eq!(row.default_avg_throughput_rps, def);
        }
        assert_eq!(report.final_rl_avg, rl);
        assert_eq!(report.final_default_avg, def);
    }

    #[test]
    fn modal_conc_prefers_smallest_on_ties() {
        let mk = |conc| TrainRow {
            iteration: 0,
            conc,
            action: 0,
            throughput_rps: 1.0,
            reward: 1.0,
            epsilon: 0.5,
        };
        let rows = vec![mk(50), mk(30), mk(50), mk(30), mk(70)];
        assert_eq!(modal_conc(&rows, 5), 30);
        assert_eq!(modal_conc(&rows, 1), 70);
    }

    #[test]
    fn derive_seed_streams_are_distinct() {
        let a = derive_seed(42, stream::SWEEP, 10, 0);
        let b = derive_seed(42, stream::SWEEP, 10, 1);
        let c = derive_seed(42, stream::TRAIN_ENV, 10, 0);
        let d = derive_seed(43, stream::SWEEP, 10, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive_seed(42, stream::SWEEP, 10, 0));
    }
}
