//! Event loop of the simulated serving data path.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::workload::ServiceDemand;

use super::{
    desired_pods, ConcurrencyPolicy, LoadTestReport, ResourceSnapshot, SimConfig, SimError,
    TraceEvent,
};

/// Residual CPU work below this many core-microseconds counts as done.
const CPU_EPS: f64 = 1e-3;
/// Slack for floating-point memory sums at the admission check.
const MEM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PodPhase {
    Starting,
    Ready,
    Terminating,
}

#[derive(Debug, Clone)]
struct Pod {
    phase: PodPhase,
    alive: bool,
    ready_at_us: u64,
    in_flight: u32,
    waiting: u32,
    cpu_active: Vec<usize>,
    mem_used_mb: f64,
    last_cpu_advance_us: u64,
    cpu_epoch: u64,
}

impl Pod {
    fn new(now_us: u64, ready_at_us: u64, base_mem_mb: f64) -> Self {
        Self {
            phase: if ready_at_us <= now_us { PodPhase::Ready } else { PodPhase::Starting },
            alive: true,
            ready_at_us,
            in_flight: 0,
            waiting: 0,
            cpu_active: Vec::new(),
            mem_used_mb: base_mem_mb,
            last_cpu_advance_us: now_us,
            cpu_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ReqPhase {
    Pending,
    /// In the CPU stage on a pod. A `doomed` request had its allocation
    /// fail: it occupies a concurrency slot and burns through the full
    /// service envelope, but resolves as an error.
    Cpu { pod: usize, doomed: bool },
    Wait { pod: usize, doomed: bool },
    Done,
}

#[derive(Debug, Clone, Copy)]
struct Req {
    arrival_us: u64,
    phase: ReqPhase,
    remaining_cpu: f64, // core-microseconds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Arrival(usize),
    CpuDone { pod: usize, epoch: u64 },
    WaitDone(usize),
    PodReady(usize),
    ScaleTick,
    Timeout(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    at_us: u64,
    seq: u64,
    kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at_us, self.seq).cmp(&(other.at_us, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// One simulated cluster. Owns all mutable simulation state; a load test is
/// deterministic given the config (including its seed).
#[derive(Debug)]
pub struct SimEnv {
    cfg: SimConfig,
    clock_us: u64,
    pods: Vec<Pod>,
    buffer: VecDeque<usize>,
    buffered_live: usize,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    rng: ChaCha8Rng,

    // active run
    policy: ConcurrencyPolicy,
    demand: ServiceDemand,
    requests: Vec<Req>,
    succeeded: u64,
    failed_mem: u64,
    failed_timeout: u64,
    unresolved: usize,
    latencies_ms: Vec<f64>,
    last_resolution_us: u64,

    // time-weighted metrics
    last_metrics_us: u64,
    ready_pod_us: f64,
    cpu_util_integral: f64,
    mem_util_integral: f64,
    last_snapshot: ResourceSnapshot,

    trace: Option<Vec<TraceEvent>>,
}

impl SimEnv {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut env = Self {
            cfg,
            clock_us: 0,
            pods: Vec::new(),
            buffer: VecDeque::new(),
            buffered_live: 0,
            heap: BinaryHeap::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            policy: ConcurrencyPolicy::HardLimit(1),
            demand: ServiceDemand { cpu_ms: 0.0, mem_mb: 0.0, wait_ms: 0.0 },
            requests: Vec::new(),
            succeeded: 0,
            failed_mem: 0,
            failed_timeout: 0,
            unresolved: 0,
            latencies_ms: Vec::new(),
            last_resolution_us: 0,
            last_metrics_us: 0,
            ready_pod_us: 0.0,
            cpu_util_integral: 0.0,
            mem_util_integral: 0.0,
            last_snapshot: ResourceSnapshot::default(),
            trace: None,
        };
        env.reset();
        Ok(env)
    }

    /// Returns the environment to its start-of-test state: clock zero, empty
    /// buffers, no pods (or one warm pod when scale-to-zero is off) and the
    /// RNG reseeded from the config.
    pub fn reset(&mut self) {
        self.clock_us = 0;
        self.pods.clear();
        self.buffer.clear();
        self.buffered_live = 0;
        self.heap.clear();
        self.seq = 0;
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
        self.requests.clear();
        self.succeeded = 0;
        self.failed_mem = 0;
        self.failed_timeout = 0;
        self.unresolved = 0;
        self.latencies_ms.clear();
        self.last_resolution_us = 0;
        self.last_metrics_us = 0;
        self.ready_pod_us = 0.0;
        self.cpu_util_integral = 0.0;
        self.mem_util_integral = 0.0;
        self.last_snapshot = ResourceSnapshot::default();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        if !self.cfg.scale_to_zero {
            self.pods.push(Pod::new(0, 0, self.cfg.pod_base_mem_mb));
            self.push_trace(0, "pod_ready", None, Some(0));
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_us / 1000
    }

    pub fn pod_count(&self) -> usize {
        self.pods.iter().filter(|p| p.alive).count()
    }

    pub fn ready_pod_count(&self) -> usize {
        self.pods.iter().filter(|p| p.alive && p.phase == PodPhase::Ready).count()
    }

    pub fn buffered_requests(&self) -> usize {
        self.buffered_live
    }

    /// Utilization averages of the most recently finished load test.
    pub fn resource_snapshot(&self) -> ResourceSnapshot {
        self.last_snapshot
    }

    /// Starts recording an event trace; cleared on reset.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    /// Runs one constant-rate load test through the full data path with a
    /// hard per-pod concurrency limit.
    pub fn run_load_test(
        &mut self,
        concurrency_limit: u32,
        demand: &ServiceDemand,
        rate_rps: f64,
        duration_ms: u64,
    ) -> Result<LoadTestReport, SimError> {
        self.run_with_policy(ConcurrencyPolicy::HardLimit(concurrency_limit), demand, rate_rps, duration_ms)
    }

    /// Runs one load test under an explicit admission/scaling policy.
    pub fn run_with_policy(
        &mut self,
        policy: ConcurrencyPolicy,
        demand: &ServiceDemand,
        rate_rps: f64,
        duration_ms: u64,
    ) -> Result<LoadTestReport, SimError> {
        policy.validate()?;
        if !(rate_rps > 0.0 && rate_rps.is_finite()) {
            return Err(SimError::InvalidRate(rate_rps));
        }
        if duration_ms == 0 {
            return Err(SimError::InvalidDuration(duration_ms));
        }
        for (name, v) in
            [("cpu_ms", demand.cpu_ms), ("mem_mb", demand.mem_mb), ("wait_ms", demand.wait_ms)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidDemand(format!("{name} must be >= 0, got {v}")));
            }
        }
        let issued = (rate_rps * duration_ms as f64 / 1000.0).floor() as usize;
        if issued == 0 {
            return Err(SimError::OfferedLoadTooLow { rate: rate_rps, duration_ms });
        }

        self.reset();
        self.policy = policy;
        self.demand = *demand;
        self.unresolved = issued;
        let duration_us = duration_ms * 1000;
        let timeout_us = self.cfg.timeout_ms * 1000;

        let arrivals = self.arrival_times_us(issued, rate_rps, duration_us);
        self.requests = arrivals
            .iter()
            .map(|&t| Req { arrival_us: t, phase: ReqPhase::Pending, remaining_cpu: 0.0 })
            .collect();
        self.schedule(0, EventKind::ScaleTick);
        for (id, &t) in arrivals.iter().enumerate() {
            self.schedule(t, EventKind::Arrival(id));
            self.schedule(t + timeout_us, EventKind::Timeout(id));
        }

        while self.unresolved > 0 {
            let Reverse(ev) = self.heap.pop().expect("pending requests but no events");
            debug_assert!(ev.at_us >= self.clock_us, "event queue went backwards");
            self.advance_metrics(ev.at_us);
            self.clock_us = ev.at_us;
            self.dispatch(ev);
            // an instant is atomic: apply every event at this timestamp
            // first, then forward queued requests once against the settled
            // pod state
            loop {
                while self.unresolved > 0 {
                    match self.heap.peek() {
                        Some(&Reverse(next)) if next.at_us == self.clock_us => {
                            let Reverse(next) = self.heap.pop().unwrap();
                            self.dispatch(next);
                        }
                        _ => break,
                    }
                }
                if self.unresolved == 0 {
                    break;
                }
                self.drain_buffer(self.clock_us);
                match self.heap.peek() {
                    Some(&Reverse(next)) if next.at_us == self.clock_us => {}
                    _ => break,
                }
            }
        }

        let window_end = self.last_resolution_us.max(duration_us);
        self.advance_metrics(window_end);
        self.clock_us = self.clock_us.max(window_end);
        self.last_snapshot = self.finish_snapshot();

        Ok(self.build_report(issued as u64, window_end))
    }

    fn arrival_times_us(&mut self, n: usize, rate_rps: f64, duration_us: u64) -> Vec<u64> {
        if self.cfg.poisson_arrivals {
            // a Poisson process conditioned on its count is n uniform order
            // statistics over the window
            let mut times: Vec<u64> =
                (0..n).map(|_| self.rng.random_range(0..duration_us)).collect();
            times.sort_unstable();
            times
        } else {
            (0..n).map(|i| (i as f64 * 1_000_000.0 / rate_rps).round() as u64).collect()
        }
    }

    fn schedule(&mut self, at_us: u64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Event { at_us, seq, kind }));
    }

    fn push_trace(&mut self, t_us: u64, event: &str, request: Option<usize>, pod: Option<usize>) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                t_us,
                event: event.to_string(),
                request: request.map(|r| r as u64),
                pod: pod.map(|p| p as u64),
            });
        }
    }

    fn dispatch(&mut self, ev: Event) {
        let now = ev.at_us;
        match ev.kind {
            EventKind::Arrival(id) => self.on_arrival(id, now),
            EventKind::CpuDone { pod, epoch } => self.on_cpu_done(pod, epoch, now),
            EventKind::WaitDone(id) => self.on_wait_done(id, now),
            EventKind::PodReady(pod) => self.on_pod_ready(pod, now),
            EventKind::ScaleTick => self.on_scale_tick(now),
            EventKind::Timeout(id) => self.on_timeout(id, now),
        }
    }

    fn on_arrival(&mut self, id: usize, now: u64) {
        self.push_trace(now, "arrival", Some(id), None);
        // with no ready pod this is the activator buffering the request;
        // scaling itself happens only on the autoscaler tick
        self.buffer.push_back(id);
        self.buffered_live += 1;
    }

    fn on_cpu_done(&mut self, pod_id: usize, epoch: u64, now: u64) {
        let pod = &self.pods[pod_id];
        if !pod.alive || pod.cpu_epoch != epoch {
            return;
        }
        self.advance_pod_cpu(pod_id, now);
        let finished: Vec<usize> = self.pods[pod_id]
            .cpu_active
            .iter()
            .copied()
            .filter(|&r| self.requests[r].remaining_cpu <= CPU_EPS)
            .collect();
        debug_assert!(!finished.is_empty(), "cpu completion event fired with no finished work");
        self.pods[pod_id].cpu_active.retain(|r| !finished.contains(r));
        let wait_us = (self.demand.wait_ms * 1000.0).round() as u64;
        for r in finished {
            let doomed = matches!(self.requests[r].phase, ReqPhase::Cpu { doomed: true, .. });
            if wait_us > 0 {
                self.requests[r].phase = ReqPhase::Wait { pod: pod_id, doomed };
                self.pods[pod_id].waiting += 1;
                self.schedule(now + wait_us, EventKind::WaitDone(r));
            } else if doomed {
                self.pods[pod_id].in_flight -= 1;
                self.resolve_failure(r, now, true, Some(pod_id));
                self.remove_if_drained(pod_id, now);
            } else {
                self.complete_success(r, pod_id, now);
            }
        }
        self.reschedule_cpu(pod_id, now);
    }

    fn on_wait_done(&mut self, id: usize, now: u64) {
        let ReqPhase::Wait { pod: pod_id, doomed } = self.requests[id].phase else {
            return; // timed out while waiting
        };
        self.pods[pod_id].waiting -= 1;
        if doomed {
            self.pods[pod_id].in_flight -= 1;
            self.resolve_failure(id, now, true, Some(pod_id));
            self.remove_if_drained(pod_id, now);
        } else {
            self.complete_success(id, pod_id, now);
        }
    }

    fn on_pod_ready(&mut self, pod_id: usize, now: u64) {
        let pod = &mut self.pods[pod_id];
        if !pod.alive || pod.phase != PodPhase::Starting {
            return; // canceled during scale-down
        }
        debug_assert_eq!(pod.ready_at_us, now);
        pod.phase = PodPhase::Ready;
        pod.last_cpu_advance_us = now;
        self.push_trace(now, "pod_ready", None, Some(pod_id));
    }

    fn on_scale_tick(&mut self, now: u64) {
        self.push_trace(now, "scale_tick", None, None);
        self.scale_eval(now);
        if self.unresolved > 0 {
            self.schedule(now + self.cfg.scale_interval_ms * 1000, EventKind::ScaleTick);
        }
    }

    fn on_timeout(&mut self, id: usize, now: u64) {
        match self.requests[id].phase {
            ReqPhase::Done => {}
            ReqPhase::Pending => {
                // still queued; tombstone, the buffer skips resolved entries
                self.buffered_live -= 1;
                self.resolve_failure(id, now, false, None);
            }
            ReqPhase::Cpu { pod: pod_id, doomed } => {
                self.advance_pod_cpu(pod_id, now);
                self.pods[pod_id].cpu_active.retain(|&r| r != id);
                if doomed {
                    self.pods[pod_id].in_flight -= 1;
                } else {
                    self.release_slot(pod_id);
                }
                self.resolve_failure(id, now, false, Some(pod_id));
                self.reschedule_cpu(pod_id, now);
                self.remove_if_drained(pod_id, now);
            }
            ReqPhase::Wait { pod: pod_id, doomed } => {
                self.pods[pod_id].waiting -= 1;
                if doomed {
                    self.pods[pod_id].in_flight -= 1;
                } else {
                    self.release_slot(pod_id);
                }
                self.resolve_failure(id, now, false, Some(pod_id));
                self.remove_if_drained(pod_id, now);
            }
        }
    }

    /// Reconciles the pod set against the formula-desired replica count.
    fn scale_eval(&mut self, now: u64) {
        let observed: f64 = self
            .pods
            .iter()
            .filter(|p| p.alive)
            .map(|p| f64::from(p.in_flight))
            .sum::<f64>()
            + self.buffered_live as f64;
        let desired = desired_pods(
            observed,
            self.policy.scale_value(),
            self.cfg.target_percentage,
            self.cfg.scale_to_zero,
            self.cfg.max_pods,
        );
        let alive_nonterm: Vec<usize> = (0..self.pods.len())
            .filter(|&i| self.pods[i].alive && self.pods[i].phase != PodPhase::Terminating)
            .collect();
        let current = alive_nonterm.len() as u32;

        if desired > current {
            for _ in 0..(desired - current) {
                let ready_at = now + self.cfg.cold_start_ms * 1000;
                let id = self.pods.len();
                let pod = Pod::new(now, ready_at, self.cfg.pod_base_mem_mb);
                let starting = pod.phase == PodPhase::Starting;
                self.pods.push(pod);
                self.push_trace(now, "pod_start", None, Some(id));
                if starting {
                    self.schedule(ready_at, EventKind::PodReady(id));
                } else {
                    self.push_trace(now, "pod_ready", None, Some(id));
                }
            }
        } else if desired < current {
            // shed newest first: starting pods are cheapest, then idle ready
            // pods, then busy ones (which drain as Terminating)
            let mut excess = (current - desired) as usize;
            let shed = |ids: Vec<usize>, pods: &mut Vec<Pod>, excess: &mut usize| {
                for i in ids.into_iter().rev() {
                    if *excess == 0 {
                        return;
                    }
                    match pods[i].phase {
                        PodPhase::Starting => pods[i].alive = false,
                        PodPhase::Ready if pods[i].in_flight == 0 => pods[i].alive = false,
                        PodPhase::Ready => pods[i].phase = PodPhase::Terminating,
                        PodPhase::Terminating => unreachable!(),
                    }
                    *excess -= 1;
                }
            };
            let starting: Vec<usize> = alive_nonterm
                .iter()
                .copied()
                .filter(|&i| self.pods[i].phase == PodPhase::Starting)
                .collect();
            shed(starting, &mut self.pods, &mut excess);
            let idle: Vec<usize> = alive_nonterm
                .iter()
                .copied()
                .filter(|&i| self.pods[i].phase == PodPhase::Ready && self.pods[i].in_flight == 0)
                .collect();
            shed(idle, &mut self.pods, &mut excess);
            let busy: Vec<usize> = alive_nonterm
                .iter()
                .copied()
                .filter(|&i| self.pods[i].phase == PodPhase::Ready && self.pods[i].in_flight > 0)
                .collect();
            shed(busy, &mut self.pods, &mut excess);
        }
    }

    /// Moves queued requests into pods whenever a concurrency slot is free;
    /// the queue-proxy knows nothing about memory, so memory decides the
    /// request's fate only once it is inside the pod.
    fn drain_buffer(&mut self, now: u64) {
        loop {
            // drop tombstoned (timed-out) heads
            while let Some(&head) = self.buffer.front() {
                if self.requests[head].phase == ReqPhase::Done {
                    self.buffer.pop_front();
                } else {
                    break;
                }
            }
            let Some(&head) = self.buffer.front() else { return };
            let Some(pod_id) = self.pick_pod() else { return };
            self.buffer.pop_front();
            self.buffered_live -= 1;
            self.admit(head, pod_id, now);
        }
    }

    /// Least-loaded ready pod with a free concurrency slot, lowest id on ties.
    fn pick_pod(&self) -> Option<usize> {
        let limit = self.policy.slot_limit();
        (0..self.pods.len())
            .filter(|&i| {
                let p = &self.pods[i];
                p.alive && p.phase == PodPhase::Ready && p.in_flight < limit
            })
            .min_by_key(|&i| (self.pods[i].in_flight, i))
    }

    fn admit(&mut self, id: usize, pod_id: usize, now: u64) {
        self.advance_pod_cpu(pod_id, now);
        let fits = self.pods[pod_id].mem_used_mb + self.demand.mem_mb
            <= self.cfg.pod_mem_mb + MEM_EPS;
        let pod = &mut self.pods[pod_id];
        pod.in_flight += 1;
        debug_assert!(
            pod.in_flight <= self.policy.slot_limit(),
            "pod {pod_id} exceeded its concurrency limit"
        );

        let cpu_core_us = self.demand.cpu_ms * 1000.0;
        let wait_us = (self.demand.wait_ms * 1000.0).round() as u64;
        let doomed = !fits;
        if doomed {
            // allocation failure: the request holds its slot through the
            // whole service envelope and then errors, like an overloaded
            // container that fails slowly rather than sheds instantly
            self.push_trace(now, "reject_mem", Some(id), Some(pod_id));
        } else {
            pod.mem_used_mb += self.demand.mem_mb;
            debug_assert!(pod.mem_used_mb <= self.cfg.pod_mem_mb + MEM_EPS);
            self.push_trace(now, "admit", Some(id), Some(pod_id));
        }

        if cpu_core_us > 0.0 {
            self.requests[id].remaining_cpu = cpu_core_us;
            self.requests[id].phase = ReqPhase::Cpu { pod: pod_id, doomed };
            self.pods[pod_id].cpu_active.push(id);
            self.reschedule_cpu(pod_id, now);
        } else if wait_us > 0 {
            self.requests[id].phase = ReqPhase::Wait { pod: pod_id, doomed };
            self.pods[pod_id].waiting += 1;
            self.schedule(now + wait_us, EventKind::WaitDone(id));
        } else if doomed {
            self.pods[pod_id].in_flight -= 1;
            self.resolve_failure(id, now, true, Some(pod_id));
            self.remove_if_drained(pod_id, now);
        } else {
            // zero-work request: admit and complete at the same instant
            self.requests[id].phase = ReqPhase::Wait { pod: pod_id, doomed: false };
            self.pods[pod_id].waiting += 1;
            self.pods[pod_id].waiting -= 1;
            self.complete_success(id, pod_id, now);
        }
    }

    /// Burns processor-sharing CPU on a pod up to `now`.
    fn advance_pod_cpu(&mut self, pod_id: usize, now: u64) {
        let n = self.pods[pod_id].cpu_active.len();
        let last = self.pods[pod_id].last_cpu_advance_us;
        self.pods[pod_id].last_cpu_advance_us = now;
        if n == 0 || now <= last {
            return;
        }
        let rate = (self.cfg.pod_cpu_cores / n as f64).min(1.0);
        let burn = (now - last) as f64 * rate;
        let active = std::mem::take(&mut self.pods[pod_id].cpu_active);
        for &r in &active {
            self.requests[r].remaining_cpu -= burn;
        }
        self.pods[pod_id].cpu_active = active;
    }

    /// Schedules the next CPU completion for a pod, invalidating older events.
    fn reschedule_cpu(&mut self, pod_id: usize, now: u64) {
        self.pods[pod_id].cpu_epoch += 1;
        let epoch = self.pods[pod_id].cpu_epoch;
        let n = self.pods[pod_id].cpu_active.len();
        if n == 0 {
            return;
        }
        let min_remaining = self.pods[pod_id]
            .cpu_active
            .iter()
            .map(|&r| self.requests[r].remaining_cpu)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        let rate = (self.cfg.pod_cpu_cores / n as f64).min(1.0);
        let dt_us = (min_remaining / rate).ceil() as u64;
        self.schedule(now + dt_us, EventKind::CpuDone { pod: pod_id, epoch });
    }

    fn release_slot(&mut self, pod_id: usize) {
        let pod = &mut self.pods[pod_id];
        pod.in_flight -= 1;
        pod.mem_used_mb -= self.demand.mem_mb;
    }

    fn remove_if_drained(&mut self, pod_id: usize, now: u64) {
        let pod = &mut self.pods[pod_id];
        if pod.alive && pod.phase == PodPhase::Terminating && pod.in_flight == 0 {
            pod.alive = false;
            self.push_trace(now, "pod_removed", None, Some(pod_id));
        }
    }

    fn complete_success(&mut self, id: usize, pod_id: usize, now: u64) {
        self.release_slot(pod_id);
        self.requests[id].phase = ReqPhase::Done;
        self.succeeded += 1;
        self.unresolved -= 1;
        self.latencies_ms.push((now - self.requests[id].arrival_us) as f64 / 1000.0);
        self.last_resolution_us = self.last_resolution_us.max(now);
        self.push_trace(now, "success", Some(id), Some(pod_id));
        self.remove_if_drained(pod_id, now);
    }

    fn resolve_failure(&mut self, id: usize, now: u64, memory: bool, pod: Option<usize>) {
        self.requests[id].phase = ReqPhase::Done;
        if memory {
            self.failed_mem += 1;
            self.push_trace(now, "fail_mem", Some(id), pod);
        } else {
            self.failed_timeout += 1;
            self.push_trace(now, "fail_timeout", Some(id), pod);
        }
        self.unresolved -= 1;
        self.last_resolution_us = self.last_resolution_us.max(now);
    }

    fn advance_metrics(&mut self, to_us: u64) {
        if to_us <= self.last_metrics_us {
            return;
        }
        let dt = (to_us - self.last_metrics_us) as f64;
        self.last_metrics_us = to_us;
        for pod in self.pods.iter().filter(|p| p.alive && p.phase == PodPhase::Ready) {
            self.ready_pod_us += dt;
            let busy_cores = (pod.cpu_active.len() as f64).min(self.cfg.pod_cpu_cores);
            self.cpu_util_integral += dt * busy_cores / self.cfg.pod_cpu_cores;
            self.mem_util_integral += dt * (pod.mem_used_mb / self.cfg.pod_mem_mb).clamp(0.0, 1.0);
        }
    }

    fn finish_snapshot(&self) -> ResourceSnapshot {
        if self.ready_pod_us <= 0.0 {
            return ResourceSnapshot::default();
        }
        ResourceSnapshot {
            avg_cpu_util: (self.cpu_util_integral / self.ready_pod_us).clamp(0.0, 1.0),
            avg_mem_util: (self.mem_util_integral / self.ready_pod_us).clamp(0.0, 1.0),
        }
    }

    fn build_report(&mut self, issued: u64, window_end_us: u64) -> LoadTestReport {
        let failed = self.failed_mem + self.failed_timeout;
        debug_assert_eq!(issued, self.succeeded + failed);
        let span_s = window_end_us as f64 / 1_000_000.0;
        let mut latencies = std::mem::take(&mut self.latencies_ms);
        latencies.sort_unstable_by(f64::total_cmp);
        let mean = if latencies.is_empty() {
            0.0
        } else {
            latencies.iter().sum::<f64>() / latencies.len() as f64
        };
        let p95 = if latencies.is_empty() {
            0.0
        } else {
            let rank = ((0.95 * latencies.len() as f64).ceil() as usize).max(1);
            latencies[rank - 1]
        };
        LoadTestReport {
            throughput_rps: self.succeeded as f64 / span_s,
            mean_latency_ms: mean,
            p95_latency_ms: p95,
            success_ratio: self.succeeded as f64 / issued as f64,
            issued,
            succeeded: self.succeeded,
            failed,
            failed_mem: self.failed_mem,
            failed_timeout: self.failed_timeout,
            resources: self.finish_snapshot(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demand(cpu_ms: f64, mem_mb: f64, wait_ms: f64) -> ServiceDemand {
        ServiceDemand { cpu_ms, mem_mb, wait_ms }
    }

    fn warm_config() -> SimConfig {
        SimConfig {
            scale_to_zero: false,
            pod_cpu_cores: 1.0,
            pod_mem_mb: 4096.0,
            pod_base_mem_mb: 0.0,
            max_pods: 1,
            ..SimConfig::default()
        }
    }

    #[test]
    fn serial_service_throughput_is_one_rps() {
        // one pod, limit 1, each request needs a full second of CPU
        let mut env = SimEnv::new(warm_config()).unwrap();
        let report = env.run_load_test(1, &demand(1000.0, 1.0, 0.0), 50.0, 2000).unwrap();
        assert_eq!(report.issued, 100);
        assert!(report.throughput_rps > 0.8 && report.throughput_rps < 1.2, "{report:?}");
        assert!(report.failed_timeout > 0); // the backlog cannot all be served within the timeout
    }

    #[test]
    fn pure_delay_request_latency_is_exact() {
        let mut env = SimEnv::new(SimConfig { max_pods: 2, ..warm_config() }).unwrap();
        let report = env.run_load_test(100, &demand(0.0, 0.0, 500.0), 10.0, 1000).unwrap();
        assert_eq!(report.issued, 10);
        assert_eq!(report.succeeded, 10);
        assert_eq!(report.mean_latency_ms, 500.0);
        assert_eq!(report.p95_latency_ms, 500.0);
    }

    #[test]
    fn memory_heavy_load_fails_more_at_high_limit() {
        let cfg = SimConfig {
            pod_mem_mb: 1000.0,
            pod_base_mem_mb: 0.0,
            pod_cpu_cores: 2.0,
            scale_to_zero: false,
            max_pods: 1,
            ..SimConfig::default()
        };
        // admissible in-flight = floor(1000 / 100) = 10
        let d = demand(50.0, 100.0, 500.0);

        let mut env = SimEnv::new(cfg).unwrap();
        let low = env.run_load_test(10, &d, 100.0, 2000).unwrap();
        let mut env = SimEnv::new(cfg).unwrap();
        env.enable_trace();
        let high = env.run_load_test(300, &d, 100.0, 2000).unwrap();

        assert_eq!(low.failed_mem, 0, "at the memory-derived limit nothing is rejected");
        assert!(high.failed_mem > 0);
        assert!(high.failed > low.failed);

        // cross-check: the trace never shows more than 10 requests resident
        let trace = env.take_trace();
        let mut resident: i64 = 0;
        let mut peak: i64 = 0;
        for ev in &trace {
            match ev.event.as_str() {
                "admit" => {
                    resident += 1;
                    peak = peak.max(resident);
                }
                "success" => resident -= 1,
                "fail_timeout" if ev.pod.is_some() => resident -= 1,
                _ => {}
            }
        }
        assert_eq!(peak, 10);
    }

    #[test]
    fn cpu_saturated_pod_reports_full_utilization() {
        let mut env = SimEnv::new(SimConfig { max_pods: 1, ..warm_config() }).unwrap();
        // back-to-back CPU-bound requests keep the single core busy all window
        let report = env.run_load_test(4, &demand(500.0, 1.0, 0.0), 2.0, 2000).unwrap();
        assert_eq!(report.succeeded, 4);
        assert!((report.resources.avg_cpu_util - 1.0).abs() < 1e-9, "{report:?}");
    }

    #[test]
    fn half_busy_window_reports_half_utilization() {
        let mut env = SimEnv::new(warm_config()).unwrap();
        // a single request occupying exactly half of the 10 s window
        let report = env.run_load_test(10, &demand(5000.0, 1.0, 0.0), 0.1, 10_000).unwrap();
        assert_eq!(report.issued, 1);
        assert!((report.resources.avg_cpu_util - 0.5).abs() <= 0.01, "{report:?}");
    }

    #[test]
    fn idle_warm_pod_shows_base_memory_fraction() {
        let cfg = SimConfig {
            scale_to_zero: false,
            pod_base_mem_mb: 64.0,
            ..SimConfig::default()
        };
        let mut env = SimEnv::new(cfg).unwrap();
        assert_eq!(env.resource_snapshot(), ResourceSnapshot::default());
        let report = env.run_load_test(10, &demand(0.0, 0.0, 1.0), 1.0, 1000).unwrap();
        assert_eq!(report.resources.avg_cpu_util, 0.0);
        let expected = 64.0 / cfg.pod_mem_mb;
        assert!((report.resources.avg_mem_util - expected).abs() < 1e-6);
    }

    #[test]
    fn reset_restores_initial_state() {
        let mut env = SimEnv::new(SimConfig::default()).unwrap();
        let _ = env.run_load_test(50, &demand(1.0, 8.0, 0.0), 100.0, 1000).unwrap();
        env.reset();
        assert_eq!(env.clock_ms(), 0);
        assert_eq!(env.pod_count(), 0); // scale-to-zero default
        assert_eq!(env.buffered_requests(), 0);
        assert_eq!(env.resource_snapshot(), ResourceSnapshot::default());
        env.reset();
        assert_eq!(env.clock_ms(), 0);
        assert_eq!(env.pod_count(), 0);

        let warm = SimEnv::new(warm_config()).unwrap();
        assert_eq!(warm.pod_count(), 1);
        assert_eq!(warm.ready_pod_count(), 1);
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let cfg = SimConfig { poisson_arrivals: true, rng_seed: 7, ..SimConfig::default() };
        let d = demand(5.0, 64.0, 100.0);
        let mut a = SimEnv::new(cfg).unwrap();
        let mut b = SimEnv::new(cfg).unwrap();
        let ra = a.run_load_test(50, &d, 200.0, 2000).unwrap();
        let rb = b.run_load_test(50, &d, 200.0, 2000).unwrap();
        assert_eq!(ra, rb);
        // and rerunning on the same env resets to the same outcome
        let rc = a.run_load_test(50, &d, 200.0, 2000).unwrap();
        assert_eq!(ra, rc);
    }

    #[test]
    fn cold_start_adds_to_first_latency() {
        let cfg = SimConfig { cold_start_ms: 2000, ..SimConfig::default() };
        let mut env = SimEnv::new(cfg).unwrap();
        let report = env.run_load_test(10, &demand(1.0, 8.0, 100.0), 1.0, 1000).unwrap();
        assert_eq!(report.issued, 1);
        assert_eq!(report.succeeded, 1);
        assert!(report.mean_latency_ms >= 2000.0 + 100.0, "{report:?}");
    }

    #[test]
    fn scale_from_zero_goes_through_activator_buffer() {
        let mut env = SimEnv::new(SimConfig::default()).unwrap();
        env.enable_trace();
        let _ = env.run_load_test(10, &demand(1.0, 8.0, 0.0), 10.0, 1000).unwrap();
        let trace = env.take_trace();
        let first_arrival = trace.iter().position(|e| e.event == "arrival").unwrap();
        let first_admit = trace.iter().position(|e| e.event == "admit").unwrap();
        let first_ready = trace.iter().position(|e| e.event == "pod_ready").unwrap();
        assert!(first_arrival < first_ready, "pod starts only after traffic arrives");
        assert!(first_ready < first_admit, "nothing admitted before a pod is ready");

        // warm environment: the first request is admitted at its arrival instant
        let mut env = SimEnv::new(warm_config()).unwrap();
        env.enable_trace();
        let _ = env.run_load_test(10, &demand(1.0, 8.0, 0.0), 10.0, 1000).unwrap();
        let trace = env.take_trace();
        let arrival = trace.iter().find(|e| e.event == "arrival").unwrap();
        let admit = trace.iter().find(|e| e.event == "admit").unwrap();
        assert_eq!(arrival.t_us, admit.t_us);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut env = SimEnv::new(SimConfig::default()).unwrap();
        let d = demand(1.0, 1.0, 0.0);
        assert!(matches!(env.run_load_test(0, &d, 10.0, 1000), Err(SimError::LimitOutOfRange(0))));
        assert!(matches!(
            env.run_load_test(1001, &d, 10.0, 1000),
            Err(SimError::LimitOutOfRange(1001))
        ));
        assert!(matches!(env.run_load_test(10, &d, 0.0, 1000), Err(SimError::InvalidRate(_))));
        assert!(matches!(env.run_load_test(10, &d, -5.0, 1000), Err(SimError::InvalidRate(_))));
        assert!(matches!(env.run_load_test(10, &d, 10.0, 0), Err(SimError::InvalidDuration(0))));
        assert!(matches!(
            env.run_load_test(10, &d, 0.1, 1000),
            Err(SimError::OfferedLoadTooLow { .. })
        ));
        assert!(matches!(
            env.run_load_test(10, &demand(-1.0, 0.0, 0.0), 10.0, 1000),
            Err(SimError::InvalidDemand(_))
        ));
    }

    #[test]
    fn conservation_and_bounds_on_a_mixed_run() {
        let cfg = SimConfig { rng_seed: 99, ..SimConfig::default() };
        let mut env = SimEnv::new(cfg).unwrap();
        let d = demand(20.0, 300.0, 50.0);
        let report = env.run_load_test(150, &d, 300.0, 3000).unwrap();
        assert_eq!(report.issued, report.succeeded + report.failed);
        assert!(report.throughput_rps <= 300.0);
        let cpu_capacity =
            f64::from(cfg.max_pods) * cfg.pod_cpu_cores * 1000.0 / d.cpu_ms;
        assert!(report.throughput_rps <= cpu_capacity + 1e-9);
        assert!(report.success_ratio >= 0.0 && report.success_ratio <= 1.0);
        if report.succeeded > 0 {
            assert!(report.mean_latency_ms >= d.wait_ms);
            assert!(report.p95_latency_ms >= d.wait_ms);
        }
    }

    #[test]
    fn soft_target_mode_admits_beyond_any_limit() {
        // soft target: no per-pod cap, so a burst lands entirely in one pod
        let cfg = SimConfig {
            scale_to_zero: false,
            max_pods: 1,
            pod_mem_mb: 100_000.0,
            pod_base_mem_mb: 0.0,
            ..SimConfig::default()
        };
        let mut env = SimEnv::new(cfg).unwrap();
        let report = env
            .run_with_policy(ConcurrencyPolicy::SoftTarget(100), &demand(0.0, 1.0, 2000.0), 100.0, 1000)
            .unwrap();
        // all 100 requests sleep concurrently in the single pod
        assert_eq!(report.succeeded, 100);
        assert_eq!(report.mean_latency_ms, 2000.0);
    }
}
