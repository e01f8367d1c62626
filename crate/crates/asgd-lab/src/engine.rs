//! Deterministic discrete-event simulator for asynchronous SGD.
//!
//! The event loop pops the earliest pending gradient completion (ties broken
//! by ascending worker index), hands the gradient to a [`ServerStrategy`],
//! and lets the strategy decide whether the model moves and what the worker
//! does next. Workers re-read the current model the instant their gradient
//! is applied; there is no communication latency.
//!
//! Round-based strategies (one aggregated step per round) are polled only
//! after *all* deliveries at a timestamp have been processed, so a round
//! that closes at `t` still absorbs every gradient arriving at `t`.
//! Closing a round restarts every worker at the new model.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand_distr::Distribution;

use crate::objectives::GradientOracle;
use crate::rng::{StreamRng, PURPOSE_TIMING};
use crate::timing::{build_cycle_plan, check_harmonic, CyclePlan, WorkerId};
use crate::{Error, Result};

/// How computation durations are generated.
#[derive(Clone, Debug, PartialEq)]
pub enum TimingModel {
    /// Worker `i` always takes `taus[i]` time units per gradient.
    Fixed { taus: Vec<f64> },
    /// Durations drawn from an exponential distribution with mean `means[i]`.
    ExponentialFluctuating { means: Vec<f64> },
}

impl TimingModel {
    pub fn n(&self) -> usize {
        self.taus().len()
    }

    /// Nominal per-worker times (the means, under fluctuation).
    pub fn taus(&self) -> &[f64] {
        match self {
            TimingModel::Fixed { taus } => taus,
            TimingModel::ExponentialFluctuating { means } => means,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, TimingModel::Fixed { .. })
    }
}

/// What a strategy did with one delivered gradient.
pub struct Delivery {
    /// Stepsize of the immediate model update (0.0 if none was applied).
    pub stepsize: f64,
    /// Whether the model was updated by this delivery.
    pub updated: bool,
    /// What the delivering worker does next.
    pub next: NextAction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NextAction {
    /// Re-read the current model and start the next computation now.
    Continue,
    /// Wait; the worker restarts only when the strategy closes a round.
    Idle,
}

/// Server-side behaviour of an optimization method.
pub trait ServerStrategy {
    fn name(&self) -> &'static str;

    /// Consume one delivered gradient. `delay` is the number of server
    /// updates applied between the worker reading the model and now.
    fn on_delivery(
        &mut self,
        worker: WorkerId,
        gradient: &[f64],
        delay: u64,
        t: f64,
        model: &mut [f64],
    ) -> Delivery;

    /// Called once all deliveries at the current timestamp are processed.
    /// Returning a stepsize means the strategy applied one aggregated
    /// update and every worker must restart at the new model.
    fn poll_round(&mut self, _t: f64, _model: &mut [f64]) -> Option<f64> {
        None
    }

    /// Wall-clock lengths of completed rounds, for round-based strategies.
    fn round_durations(&self) -> &[f64] {
        &[]
    }
}

/// One processed delivery.
#[derive(Clone, Debug)]
pub struct TraceEvent {
    pub t: f64,
    pub worker: WorkerId,
    /// Server updates between the worker's model read and this delivery.
    pub delay: u64,
    /// Stepsize applied on this delivery (0.0 when the strategy buffered).
    pub stepsize: f64,
    /// Model snapshot the gradient was evaluated at (when recording).
    pub snapshot: Option<Vec<f64>>,
    /// The delivered stochastic gradient (when recording).
    pub gradient: Option<Vec<f64>>,
}

/// Sampled run metrics. Loss and gradient norm refer to the equal-weighted
/// global objective regardless of the method's implicit target.
#[derive(Clone, Copy, Debug)]
pub struct MetricSample {
    pub t: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub cum_stepsize: f64,
    /// Completed-cycle count under fixed harmonic timing; nominal
    /// `floor(t / tau_max)` otherwise.
    pub cycle: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { t: f64 },
}

/// Full record of one simulated run.
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub metrics: Vec<MetricSample>,
    /// Model at the start of each completed cycle (fixed harmonic timing
    /// only), beginning with the initial model.
    pub cycle_iterates: Vec<Vec<f64>>,
    /// Event counts at which each cycle completed (`K`, `2K`, ...).
    pub cycle_boundaries: Vec<usize>,
    /// The cycle plan, when timing is fixed and harmonic.
    pub plan: Option<CyclePlan>,
    /// Durations of completed rounds (round-based strategies only).
    pub round_durations: Vec<f64>,
    /// Stepsize of every applied model update, in application order.
    pub applied_stepsizes: Vec<f64>,
    /// Compensated running sum of `applied_stepsizes`.
    pub cum_stepsize: f64,
    pub updates: u64,
    pub final_model: Vec<f64>,
    pub final_t: f64,
    pub status: RunStatus,
}

impl Trace {
    /// Events of cycle `m` (fixed harmonic timing, completed cycles only).
    pub fn cycle_events(&self, m: usize) -> Option<&[TraceEvent]> {
        let plan = self.plan.as_ref()?;
        let k = plan.k as usize;
        let (lo, hi) = (m * k, (m + 1) * k);
        if hi <= *self.cycle_boundaries.last().unwrap_or(&0) {
            Some(&self.events[lo..hi])
        } else {
            None
        }
    }

    /// Number of completed cycles.
    pub fn completed_cycles(&self) -> usize {
        self.cycle_boundaries.len()
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

/// Extract the per-cycle server iterates; errors unless the run used fixed
/// harmonic timing.
pub fn cycle_iterates(trace: &Trace) -> Result<&[Vec<f64>]> {
    if trace.plan.is_none() {
        return Err(Error::CyclesUndefined);
    }
    Ok(&trace.cycle_iterates)
}

/// Per-worker delay statistics over trace events.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelayStats {
    pub worker: WorkerId,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub count: u64,
}

/// Delay statistics over all events.
pub fn measure_delays(trace: &Trace) -> Vec<DelayStats> {
    measure_delays_after(trace, 0)
}

/// Delay statistics skipping the first `skip_events` events. Within cycle 0
/// all snapshots start at the initial model, so delays there sit below
/// their steady-state values; skip one cycle's worth of events to measure
/// steady state.
pub fn measure_delays_after(trace: &Trace, skip_events: usize) -> Vec<DelayStats> {
    let n = trace.events.iter().map(|e| e.worker.0).max().unwrap_or(0);
    let mut stats: Vec<DelayStats> = (1..=n)
        .map(|i| DelayStats {
            worker: WorkerId(i),
            min: u64::MAX,
            max: 0,
            mean: 0.0,
            count: 0,
        })
        .collect();
    for e in trace.events.iter().skip(skip_events) {
        let s = &mut stats[e.worker.index()];
        s.min = s.min.min(e.delay);
        s.max = s.max.max(e.delay);
        s.mean += e.delay as f64;
        s.count += 1;
    }
    for s in &mut stats {
        if s.count > 0 {
            s.mean /= s.count as f64;
        } else {
            s.min = 0;
        }
    }
    stats
}

/// Simulation settings besides the strategy, oracle, and timing model.
#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Wall-clock horizon; deliveries in `(0, horizon]` are processed.
    pub horizon: f64,
    pub seed: u64,
    /// Store per-event model snapshots and gradients (needed by the cycle
    /// decomposition; memory scales with events x dim).
    pub record_vectors: bool,
    /// Sample metrics after every event.
    pub metric_every_event: bool,
    /// Sample metrics at this wall-clock cadence (evaluated after draining
    /// each timestamp).
    pub metric_cadence: Option<f64>,
}

impl SimConfig {
    pub fn new(horizon: f64, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            record_vectors: false,
            metric_every_event: false,
            metric_cadence: None,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record_vectors = true;
        self
    }
}

#[derive(Clone, Copy, PartialEq)]
struct EventKey {
    t: f64,
    worker: usize,
}

impl Eq for EventKey {}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.worker.cmp(&other.worker))
    }
}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct WorkerState {
    snapshot: Vec<f64>,
    read_updates: u64,
    deliveries: u64,
    /// Start of the current uninterrupted computation run. Fixed timing
    /// schedules completions as `base_t + j * tau` to avoid float drift.
    base_t: f64,
    since_base: u64,
    timing_draws: u64,
}

/// Kahan-compensated accumulator for the cumulative stepsize.
#[derive(Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Run one simulation to the wall-clock horizon.
pub fn simulate(
    strategy: &mut dyn ServerStrategy,
    oracle: &GradientOracle,
    timing: &TimingModel,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<Trace> {
    let n = timing.n();
    if n == 0 {
        return Err(Error::NoWorkers);
    }
    if n != oracle.suite().n() {
        return Err(Error::DimensionMismatch(format!(
            "{n} workers in timing model but {} local objectives",
            oracle.suite().n()
        )));
    }
    if !(cfg.horizon > 0.0) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    if x0.len() != oracle.suite().dim() {
        return Err(Error::DimensionMismatch(format!(
            "x0 has dim {} but suite has dim {}",
            x0.len(),
            oracle.suite().dim()
        )));
    }

    let plan = if timing.is_fixed() && check_harmonic(timing.taus())? {
        Some(build_cycle_plan(timing.taus())?)
    } else {
        None
    };
    let tau_max_nominal = timing.taus().iter().cloned().fold(0.0, f64::max);
    let global = oracle.suite().equal_weighted();

    let mut x = x0.to_vec();
    let mut workers: Vec<WorkerState> = (0..n)
        .map(|_| WorkerState {
            snapshot: x.clone(),
            read_updates: 0,
            deliveries: 0,
            base_t: 0.0,
            since_base: 0,
            timing_draws: 0,
        })
        .collect();

    let mut heap: BinaryHeap<std::cmp::Reverse<EventKey>> = BinaryHeap::new();
    let schedule = |heap: &mut BinaryHeap<std::cmp::Reverse<EventKey>>,
                    w: &mut WorkerState,
                    i: usize,
                    now: f64| {
        let t = match timing {
            TimingModel::Fixed { taus } => w.base_t + (w.since_base + 1) as f64 * taus[i],
            TimingModel::ExponentialFluctuating { means } => {
                let mut rng =
                    StreamRng::from_key(cfg.seed, PURPOSE_TIMING, i as u64 + 1, w.timing_draws);
                w.timing_draws += 1;
                let exp = rand_distr::Exp::new(1.0 / means[i]).expect("positive rate");
                now + exp.sample(&mut rng)
            }
        };
        heap.push(std::cmp::Reverse(EventKey { t, worker: i }));
    };
    for (i, w) in workers.iter_mut().enumerate() {
        schedule(&mut heap, w, i, 0.0);
    }

    let mut trace = Trace {
        events: Vec::new(),
        metrics: Vec::new(),
        cycle_iterates: if plan.is_some() {
            vec![x.clone()]
        } else {
            Vec::new()
        },
        cycle_boundaries: Vec::new(),
        plan,
        round_durations: Vec::new(),
        applied_stepsizes: Vec::new(),
        cum_stepsize: 0.0,
        updates: 0,
        final_model: x.clone(),
        final_t: 0.0,
        status: RunStatus::Completed,
    };
    let mut cum = Compensated::default();
    let mut updates: u64 = 0;
    let mut next_cadence = cfg.metric_cadence;

    let fixed_cycles = trace.plan.is_some();
    let cycle_of = |t: f64, boundaries: usize| -> u64 {
        if fixed_cycles {
            boundaries as u64
        } else if tau_max_nominal > 0.0 {
            (t / tau_max_nominal) as u64
        } else {
            0
        }
    };
    macro_rules! sample_metrics {
        ($t:expr) => {{
            trace.metrics.push(MetricSample {
                t: $t,
                loss: global.value(&x),
                grad_norm_sq: global.grad_norm_sq(&x),
                cum_stepsize: cum.sum,
                cycle: cycle_of($t, trace.cycle_boundaries.len()),
            });
        }};
    }
    sample_metrics!(0.0);

    'outer: while let Some(&std::cmp::Reverse(head)) = heap.peek() {
        if head.t > cfg.horizon {
            break;
        }
        heap.pop();
        let t = head.t;
        let i = head.worker;
        let id = WorkerId(i + 1);

        let (delay, gradient) = {
            let w = &workers[i];
            let g = match oracle.sample(id, &w.snapshot, w.deliveries) {
                Ok(g) => g,
                Err(Error::DivergedIterate) => {
                    trace.status = RunStatus::Diverged { t };
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            (updates - w.read_updates, g)
        };
        workers[i].deliveries += 1;
        workers[i].since_base += 1;

        let outcome = strategy.on_delivery(id, &gradient, delay, t, &mut x);
        if outcome.updated {
            updates += 1;
            cum.add(outcome.stepsize);
            trace.applied_stepsizes.push(outcome.stepsize);
        }
        trace.events.push(TraceEvent {
            t,
            worker: id,
            delay,
            stepsize: if outcome.updated { outcome.stepsize } else { 0.0 },
            snapshot: cfg.record_vectors.then(|| workers[i].snapshot.clone()),
            gradient: cfg.record_vectors.then_some(gradient),
        });
        if x.iter().any(|v| !v.is_finite()) {
            trace.status = RunStatus::Diverged { t };
            break 'outer;
        }
        match outcome.next {
            NextAction::Continue => {
                let w = &mut workers[i];
                w.snapshot.copy_from_slice(&x);
                w.read_updates = updates;
                schedule(&mut heap, w, i, t);
            }
            NextAction::Idle => {}
        }
        if cfg.metric_every_event {
            sample_metrics!(t);
        }

        // Timestamp drained: rounds close, cycles end, cadence samples fire.
        let drained = heap.peek().map_or(true, |&std::cmp::Reverse(nx)| nx.t > t);
        if drained {
            if let Some(stepsize) = strategy.poll_round(t, &mut x) {
                updates += 1;
                cum.add(stepsize);
                trace.applied_stepsizes.push(stepsize);
                if x.iter().any(|v| !v.is_finite()) {
                    trace.status = RunStatus::Diverged { t };
                    break 'outer;
                }
                heap.clear();
                for (j, w) in workers.iter_mut().enumerate() {
                    w.snapshot.copy_from_slice(&x);
                    w.read_updates = updates;
                    w.base_t = t;
                    w.since_base = 0;
                    schedule(&mut heap, w, j, t);
                }
            }
            if let Some(plan) = &trace.plan {
                let k = plan.k as usize;
                if trace.events.len() % k == 0
                    && trace.events.len() / k > trace.cycle_boundaries.len()
                {
                    trace.cycle_boundaries.push(trace.events.len());
                    trace.cycle_iterates.push(x.clone());
                    if !cfg.metric_every_event {
                        sample_metrics!(t);
                    }
                }
            }
            if let (Some(cadence), Some(next)) = (cfg.metric_cadence, next_cadence) {
                if t >= next {
                    if !cfg.metric_every_event {
                        sample_metrics!(t);
                    }
                    let mut nx = next;
                    while nx <= t {
                        nx += cadence;
                    }
                    next_cadence = Some(nx);
                }
            }
        }
    }

    trace.final_t = match trace.status {
        RunStatus::Completed => cfg.horizon,
        RunStatus::Diverged { t } => t,
    };
    if !trace.diverged() {
        sample_metrics!(cfg.horizon);
    }
    trace.round_durations = strategy.round_durations().to_vec();
    trace.cum_stepsize = cum.sum;
    trace.updates = updates;
    trace.final_model = x;
    Ok(trace)
}

/// Recompute the compensated sum of stepsizes the way the engine does.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut acc = Compensated::default();
    for &v in values {
        acc.add(v);
    }
    acc.sum
}
