//! Tabular Q-learning agent for the per-pod concurrency limit.
//!
//! State is the discretized triple (concurrency limit, CPU utilization bin,
//! memory utilization bin); actions move the limit by -20/0/+20 on a fixed
//! grid. Values live in a plain lookup table keyed by (state, action) with an
//! implicit 0.0 for anything never visited.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Step size of the concurrency grid and of every action.
pub const CONC_STEP: u32 = 20;

const QTABLE_MAGIC: &str = "concsim-qtable";
const QTABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("concurrency {0} is not on the grid {1}..={2} step {step}", step = CONC_STEP)]
    OffGridConcurrency(u32, u32, u32),
    #[error("reward reference value is unset or non-positive")]
    ReferenceUnset,
    #[error("throughput must be finite and non-negative, got {0}")]
    InvalidThroughput(f64),
    #[error("q-table file {path}: {source}")]
    QTableIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("q-table file {path} has unsupported version header {found:?}")]
    QTableVersion { path: String, found: String },
    #[error("q-table file {path} is malformed at line {line}: {reason}")]
    QTableMalformed { path: String, line: usize, reason: String },
}

/// Discretized environment state as seen by the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentState {
    /// Current concurrency limit; always a grid value.
    pub conc: u32,
    /// Bin index of average CPU utilization, 0..n_bins.
    pub cpu_bin: u8,
    /// Bin index of average memory utilization, 0..n_bins.
    pub mem_bin: u8,
}

/// Concurrency-limit update. Ordering doubles as the argmax tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Down,
    Stay,
    Up,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Down, Action::Stay, Action::Up];

    /// Signed concurrency delta of this action.
    pub fn delta(self) -> i32 {
        match self {
            Action::Down => -(CONC_STEP as i32),
            Action::Stay => 0,
            Action::Up => CONC_STEP as i32,
        }
    }

    pub fn from_delta(delta: i32) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.delta() == delta)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.delta())
    }
}

/// Q-learning hyperparameters and the concurrency grid definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Learning rate.
    pub alpha: f64,
    /// Discount factor.
    pub gamma: f64,
    /// Exploration probability once the decay schedule starts.
    pub epsilon_start: f64,
    /// Multiplicative decay applied per iteration after the schedule starts.
    pub epsilon_decay: f64,
    /// Floor of the exploration probability.
    pub epsilon_min: f64,
    /// Iteration at which the decay schedule begins; earlier iterations explore with 1.0.
    pub exploration_start_iter: u64,
    /// Number of equal-size bins for each resource utilization feature.
    pub n_bins: u8,
    /// Smallest concurrency limit on the grid.
    pub conc_min: u32,
    /// Largest concurrency limit on the grid.
    pub conc_max: u32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_decay: 0.995,
            epsilon_min: 0.1,
            exploration_start_iter: 50,
            n_bins: 10,
            conc_min: 10,
            conc_max: 310,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha must be in (0,1], got {}", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma must be in [0,1), got {}", self.gamma));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return Err(format!("epsilon_decay must be in (0,1], got {}", self.epsilon_decay));
        }
        if !(0.0 <= self.epsilon_min
            && self.epsilon_min <= self.epsilon_start
            && self.epsilon_start <= 1.0)
        {
            return Err(format!(
                "need 0 <= epsilon_min <= epsilon_start <= 1, got {} and {}",
                self.epsilon_min, self.epsilon_start
            ));
        }
        if self.n_bins == 0 {
            return Err("n_bins must be at least 1".into());
        }
        if self.conc_min < 1 || self.conc_max > 1000 {
            return Err(format!(
                "concurrency grid {}..={} must stay within 1..=1000",
                self.conc_min, self.conc_max
            ));
        }
        if self.conc_min > self.conc_max || !(self.conc_max - self.conc_min).is_multiple_of(CONC_STEP) {
            return Err(format!(
                "grid endpoints {}..={} must differ by a multiple of {}",
                self.conc_min, self.conc_max, CONC_STEP
            ));
        }
        Ok(())
    }

    pub fn on_grid(&self, conc: u32) -> bool {
        conc >= self.conc_min && conc <= self.conc_max && (conc - self.conc_min).is_multiple_of(CONC_STEP)
    }

    /// Grid point closest to the middle of the range; ties round up.
    pub fn midpoint_conc(&self) -> u32 {
        let steps = (self.conc_max - self.conc_min) / CONC_STEP;
        let half = f64::from(steps) / 2.0;
        self.conc_min + (half.round() as u32) * CONC_STEP
    }
}

/// Reward shaping parameters: a running reference value with a tolerance band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Half-width of the neutral band around `ref_value`, as a fraction.
    pub tolerance: f64,
    /// Best throughput observed so far; unset until the first positive observation.
    pub ref_value: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { tolerance: 0.05, ref_value: None }
    }
}

/// Lookup table of action values. Absent entries read as exactly 0.0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    entries: BTreeMap<(AgentState, Action), f64>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, state: AgentState, action: Action) -> f64 {
        self.entries.get(&(state, action)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, state: AgentState, action: Action, value: f64) {
        assert!(value.is_finite(), "q-value must be finite");
        self.entries.insert((state, action), value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AgentState, Action, f64)> + '_ {
        self.entries.iter().map(|(&(s, a), &v)| (s, a, v))
    }

    /// Highest value among the given actions (0.0 defaults included).
    pub fn max_over(&self, state: AgentState, actions: &[Action]) -> f64 {
        actions
            .iter()
            .map(|&a| self.get(state, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Bins utilization features and pairs them with the current limit.
///
/// `conc` must already be a grid value; anything else means the caller and
/// the agent disagree about the actuated limit.
pub fn discretize(
    conc: u32,
    cpu_util: f64,
    mem_util: f64,
    hp: &Hyperparams,
) -> Result<AgentState, AgentError> {
    if !hp.on_grid(conc) {
        return Err(AgentError::OffGridConcurrency(conc, hp.conc_min, hp.conc_max));
    }
    let bin = |x: f64| -> u8 {
        let scaled = (x.clamp(0.0, 1.0) * f64::from(hp.n_bins)).floor() as u32;
        scaled.min(u32::from(hp.n_bins) - 1) as u8
    };
    Ok(AgentState { conc, cpu_bin: bin(cpu_util), mem_bin: bin(mem_util) })
}

/// Actions executable from `state`: the grid endpoints lose the step that
/// would leave the grid.
pub fn valid_actions(state: AgentState, hp: &Hyperparams) -> Vec<Action> {
    Action::ALL
        .into_iter()
        .filter(|a| match a {
            Action::Down => state.conc > hp.conc_min,
            Action::Stay => true,
            Action::Up => state.conc < hp.conc_max,
        })
        .collect()
}

/// Exploration probability at `iteration`: 1.0 before the schedule starts,
/// then `epsilon_start * decay^(iteration - start)` floored at `epsilon_min`.
pub fn epsilon_at(iteration: u64, hp: &Hyperparams) -> f64 {
    if iteration < hp.exploration_start_iter {
        return 1.0;
    }
    let steps = (iteration - hp.exploration_start_iter) as i32;
    (hp.epsilon_start * hp.epsilon_decay.powi(steps)).max(hp.epsilon_min)
}

/// Epsilon-greedy action selection over the valid actions of `state`.
///
/// Exploitation takes the first maximal action in (-20, 0, +20) order, so
/// ties resolve deterministically.
pub fn select_action<R: rand::Rng>(
    q: &QTable,
    state: AgentState,
    epsilon: f64,
    hp: &Hyperparams,
    rng: &mut R,
) -> Action {
    let actions = valid_actions(state, hp);
    debug_assert!(!actions.is_empty());
    if rng.random::<f64>() < epsilon {
        return actions[rng.random_range(0..actions.len())];
    }
    let mut best = actions[0];
    let mut best_value = q.get(state, best);
    for &a in &actions[1..] {
        let v = q.get(state, a);
        if v > best_value {
            best = a;
            best_value = v;
        }
    }
    best
}

/// Throughput-relative reward: the ratio to `ref_value` outside the tolerance
/// band, a flat 1.0 inside it. Both band edges belong to the ratio branch.
///
/// Zero throughput (total failure) yields reward 0.0 through the ratio branch.
pub fn reward(throughput: f64, rc: &RewardConfig) -> Result<f64, AgentError> {
    if !throughput.is_finite() || throughput < 0.0 {
        return Err(AgentError::InvalidThroughput(throughput));
    }
    let reference = match rc.ref_value {
        Some(v) if v > 0.0 => v,
        _ if throughput == 0.0 => return Ok(0.0),
        _ => return Err(AgentError::ReferenceUnset),
    };
    let low = reference * (1.0 - rc.tolerance);
    let high = reference * (1.0 + rc.tolerance);
    if throughput <= low || throughput >= high {
        Ok(throughput / reference)
    } else {
        Ok(1.0)
    }
}

/// Folds a new observation into the running best-throughput reference.
/// Non-positive observations never initialize the reference.
pub fn update_ref(rc: RewardConfig, throughput: f64) -> RewardConfig {
    let ref_value = match rc.ref_value {
        Some(current) => Some(current.max(throughput)),
        None if throughput > 0.0 => Some(throughput),
        None => None,
    };
    RewardConfig { ref_value, ..rc }
}

/// One Q-learning backup:
/// `Q(s,a) <- (1-alpha) Q(s,a) + alpha (r + gamma * max_a' Q(s',a'))`
/// where the max ranges over the valid actions of `s'` only.
pub fn q_update(
    q: &mut QTable,
    state: AgentState,
    action: Action,
    r: f64,
    next_state: AgentState,
    hp: &Hyperparams,
) {
    let next_actions = valid_actions(next_state, hp);
    let max_next = q.max_over(next_state, &next_actions);
    let old = q.get(state, action);
    let updated = (1.0 - hp.alpha) * old + hp.alpha * (r + hp.gamma * max_next);
    q.set(state, action, updated);
}

/// Writes the table as versioned text, one `(conc cpu mem delta value)` record
/// per line, sorted, so snapshots diff cleanly.
pub fn save_qtable(q: &QTable, path: &Path) -> Result<(), AgentError> {
    let io_err = |source| AgentError::QTableIo { path: path.display().to_string(), source };
    let mut body = format!("{} v{}\n", QTABLE_MAGIC, QTABLE_VERSION);
    body.push_str("# conc cpu_bin mem_bin delta value\n");
    for (state, action, value) in q.iter() {
        body.push_str(&format!(
            "{} {} {} {} {}\n",
            state.conc,
            state.cpu_bin,
            state.mem_bin,
            action.delta(),
            value
        ));
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(body.as_bytes()).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Reads a table written by [`save_qtable`]. Round-trips exactly, including
/// the absent-key-reads-as-zero semantics.
pub fn load_qtable(path: &Path) -> Result<QTable, AgentError> {
    let text = fs::read_to_string(path)
        .map_err(|source| AgentError::QTableIo { path: path.display().to_string(), source })?;
    let malformed = |line: usize, reason: &str| AgentError::QTableMalformed {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "empty file"))?;
    if header != format!("{} v{}", QTABLE_MAGIC, QTABLE_VERSION) {
        return Err(AgentError::QTableVersion {
            path: path.display().to_string(),
            found: header.to_string(),
        });
    }
    let mut q = QTable::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 5 {
            return Err(malformed(idx + 1, "expected 5 fields"));
        }
        let conc: u32 = fields[0].parse().map_err(|_| malformed(idx + 1, "bad conc"))?;
        let cpu_bin: u8 = fields[1].parse().map_err(|_| malformed(idx + 1, "bad cpu_bin"))?;
        let mem_bin: u8 = fields[2].parse().map_err(|_| malformed(idx + 1, "bad mem_bin"))?;
        let delta: i32 = fields[3].parse().map_err(|_| malformed(idx + 1, "bad delta"))?;
        let value: f64 = fields[4].parse().map_err(|_| malformed(idx + 1, "bad value"))?;
        let action =
            Action::from_delta(delta).ok_or_else(|| malformed(idx + 1, "delta not in {-20,0,20}"))?;
        if !value.is_finite() {
            return Err(malformed(idx + 1, "non-finite value"));
        }
        q.set(AgentState { conc, cpu_bin, mem_bin }, action, value);
    }
    Ok(q)
}
