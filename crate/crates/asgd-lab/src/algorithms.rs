//! Stepsize policies and server strategies.
//!
//! Three stepsize rules drive the immediate-update server: vanilla
//! (`gamma_i = gamma / K`), rescaled (`gamma_i = gamma * tau_i * tau_H /
//! (n * tau_max)`, equalizing each worker's aggregate stepsize per cycle),
//! and delay-adaptive (`gamma / (1 + delta)` with the measured per-event
//! delay). Three baselines gate on rounds instead: naive minibatch waits
//! for one gradient per worker at a common model, malenia lets fast workers
//! accumulate gradients within a round, and ringleader keeps a gradient
//! table and takes `n` asynchronous table-averaged steps per round.

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::engine::{Delivery, NextAction, ServerStrategy};
use crate::timing::{build_cycle_plan, check_harmonic, timing_stats, WorkerId};
use crate::{Error, Result};

/// Method tags, as used in configs and on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Rescaled,
    DelayAdaptive,
    NaiveMinibatch,
    Malenia,
    Ringleader,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Rescaled => "rescaled",
            Method::DelayAdaptive => "delay_adaptive",
            Method::NaiveMinibatch => "naive_minibatch",
            Method::Malenia => "malenia",
            Method::Ringleader => "ringleader",
        }
    }

    /// Whether the server applies every arriving gradient immediately.
    pub fn is_immediate(self) -> bool {
        matches!(
            self,
            Method::Vanilla | Method::Rescaled | Method::DelayAdaptive
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rescaled per-worker stepsizes `gamma * tau_i * tau_H / (n * tau_max)`.
///
/// Computed as `(gamma * tau_H / n) * (tau_i / tau_max)` so that for
/// power-of-two time sets the identity `gamma_i * K_i = gamma * tau_H / n`
/// holds bit-exactly across workers.
pub fn rescaled_stepsizes(gamma: f64, taus: &[f64]) -> Result<Vec<f64>> {
    if !check_harmonic(taus)? {
        return Err(Error::NonHarmonic);
    }
    let stats = timing_stats(taus)?;
    let base = gamma * stats.tau_h / taus.len() as f64;
    Ok(taus.iter().map(|&t| base * (t / stats.tau_max)).collect())
}

/// Vanilla per-worker stepsizes: the constant `gamma / K` for each worker.
pub fn vanilla_stepsizes(gamma: f64, k: u64, n: usize) -> Vec<f64> {
    vec![gamma / k as f64; n]
}

/// Delay-adaptive per-event stepsize `gamma / (1 + delta)`.
pub fn delay_adaptive_stepsize(gamma: f64, delta: u64) -> f64 {
    gamma / (1.0 + delta as f64)
}

/// Per-update stepsize rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsizePolicy {
    Vanilla { gamma: f64 },
    Rescaled { gamma: f64 },
    DelayAdaptive { gamma: f64 },
    PerWorker { gammas: Vec<f64> },
}

/// Cycle-level constants of a policy over a harmonic time set:
/// `alpha = sum_k gamma_{i_k}` (cycle stepsize), `sq_sum = sum_k
/// gamma_{i_k}^2`, and the largest per-event stepsize. For the
/// delay-adaptive rule the values use the analytic steady-state delay
/// `delta_i = tau_i * n / tau_H - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConstants {
    /// Static per-worker stepsizes (`None` for the delay-adaptive rule,
    /// whose per-event stepsizes vary within a cycle).
    pub per_worker: Option<Vec<f64>>,
    pub alpha: f64,
    pub sq_sum: f64,
    pub gamma_max: f64,
}

impl StepsizePolicy {
    /// Resolve the policy against a harmonic time set.
    pub fn constants(&self, taus: &[f64]) -> Result<PolicyConstants> {
        let plan = build_cycle_plan(taus)?;
        let stats = timing_stats(taus)?;
        let n = taus.len();
        let static_gammas = match self {
            StepsizePolicy::Vanilla { gamma } => Some(vanilla_stepsizes(*gamma, plan.k, n)),
            StepsizePolicy::Rescaled { gamma } => Some(rescaled_stepsizes(*gamma, taus)?),
            StepsizePolicy::PerWorker { gammas } => {
                if gammas.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "{} stepsizes for {n} workers",
                        gammas.len()
                    )));
                }
                Some(gammas.clone())
            }
            StepsizePolicy::DelayAdaptive { .. } => None,
        };
        match static_gammas {
            Some(gammas) => {
                let mut alpha = 0.0;
                let mut sq_sum = 0.0;
                for (g, &k) in gammas.iter().zip(&plan.k_i) {
                    alpha += g * k as f64;
                    sq_sum += g * g * k as f64;
                }
                let gamma_max = gammas.iter().cloned().fold(0.0, f64::max);
                Ok(PolicyConstants {
                    per_worker: Some(gammas),
                    alpha,
                    sq_sum,
                    gamma_max,
                })
            }
            None => {
                let StepsizePolicy::DelayAdaptive { gamma } = self else {
                    unreachable!()
                };
                // Analytic per-worker aggregate over a cycle:
                // Gamma_i = gamma * tau_max * tau_H / (n * tau_i^2).
                let mut alpha = 0.0;
                let mut sq_sum = 0.0;
                for (&tau, &k) in taus.iter().zip(&plan.k_i) {
                    let per_event = gamma * stats.tau_h / (n as f64 * tau);
                    alpha += per_event * k as f64;
                    sq_sum += per_event * per_event * k as f64;
                }
                let gamma_max = gamma * stats.tau_h / (n as f64 * stats.tau_min);
                Ok(PolicyConstants {
                    per_worker: None,
                    alpha,
                    sq_sum,
                    gamma_max,
                })
            }
        }
    }
}

enum EventRule {
    Static(Vec<f64>),
    DelayAdaptive(f64),
}

/// Immediate-update server: every arriving gradient is applied exactly once.
pub struct AsgdImmediate {
    name: &'static str,
    rule: EventRule,
}

impl AsgdImmediate {
    pub fn vanilla(gamma: f64, taus: &[f64]) -> Result<Self> {
        let plan = build_cycle_plan(taus)?;
        Ok(Self {
            name: "vanilla",
            rule: EventRule::Static(vanilla_stepsizes(gamma, plan.k, taus.len())),
        })
    }

    pub fn rescaled(gamma: f64, taus: &[f64]) -> Result<Self> {
        Ok(Self {
            name: "rescaled",
            rule: EventRule::Static(rescaled_stepsizes(gamma, taus)?),
        })
    }

    pub fn delay_adaptive(gamma: f64) -> Self {
        Self {
            name: "delay_adaptive",
            rule: EventRule::DelayAdaptive(gamma),
        }
    }

    pub fn per_worker(gammas: Vec<f64>) -> Self {
        Self {
            name: "per_worker",
            rule: EventRule::Static(gammas),
        }
    }

    fn stepsize(&self, worker: WorkerId, delay: u64) -> f64 {
        match &self.rule {
            EventRule::Static(gammas) => gammas[worker.index()],
            EventRule::DelayAdaptive(gamma) => delay_adaptive_stepsize(*gamma, delay),
        }
    }
}

impl ServerStrategy for AsgdImmediate {
    fn name(&self) -> &'static str {
        self.name
    }

    fn on_delivery(
        &mut self,
        worker: WorkerId,
        gradient: &[f64],
        delay: u64,
        _t: f64,
        model: &mut [f64],
    ) -> Delivery {
        let gamma = self.stepsize(worker, delay);
        for (m, g) in model.iter_mut().zip(gradient) {
            *m -= gamma * g;
        }
        Delivery {
            stepsize: gamma,
            updated: true,
            next: NextAction::Continue,
        }
    }
}

/// Fully synchronous baseline: one gradient per worker per round, all
/// evaluated at the round's model; fast workers idle until the round ends.
pub struct NaiveMinibatch {
    alpha: f64,
    buffers: Vec<Option<Vec<f64>>>,
    received: usize,
    round_start: f64,
    durations: Vec<f64>,
}

impl NaiveMinibatch {
    pub fn new(alpha: f64, n: usize) -> Self {
        Self {
            alpha,
            buffers: vec![None; n],
            received: 0,
            round_start: 0.0,
            durations: Vec::new(),
        }
    }
}

impl ServerStrategy for NaiveMinibatch {
    fn name(&self) -> &'static str {
        "naive_minibatch"
    }

    fn on_delivery(
        &mut self,
        worker: WorkerId,
        gradient: &[f64],
        _delay: u64,
        _t: f64,
        _model: &mut [f64],
    ) -> Delivery {
        let slot = &mut self.buffers[worker.index()];
        if slot.is_none() {
            self.received += 1;
        }
        *slot = Some(gradient.to_vec());
        Delivery {
            stepsize: 0.0,
            updated: false,
            next: NextAction::Idle,
        }
    }

    fn poll_round(&mut self, t: f64, model: &mut [f64]) -> Option<f64> {
        if self.received < self.buffers.len() {
            return None;
        }
        let n = self.buffers.len() as f64;
        for buf in self.buffers.iter().flatten() {
            for (m, g) in model.iter_mut().zip(buf) {
                *m -= self.alpha / n * g;
            }
        }
        for buf in &mut self.buffers {
            *buf = None;
        }
        self.received = 0;
        self.durations.push(t - self.round_start);
        self.round_start = t;
        Some(self.alpha)
    }

    fn round_durations(&self) -> &[f64] {
        &self.durations
    }
}

/// Round-based baseline without idling: workers keep computing at the
/// round's model; the round ends once every worker delivered at least one
/// gradient, which are averaged per worker and then across workers.
pub struct Malenia {
    alpha: f64,
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
    round_start: f64,
    durations: Vec<f64>,
}

impl Malenia {
    pub fn new(alpha: f64, n: usize, dim: usize) -> Self {
        Self {
            alpha,
            sums: vec![vec![0.0; dim]; n],
            counts: vec![0; n],
            round_start: 0.0,
            durations: Vec::new(),
        }
    }
}

impl ServerStrategy for Malenia {
    fn name(&self) -> &'static str {
        "malenia"
    }

    fn on_delivery(
        &mut self,
        worker: WorkerId,
        gradient: &[f64],
        _delay: u64,
        _t: f64,
        _model: &mut [f64],
    ) -> Delivery {
        let i = worker.index();
        for (s, g) in self.sums[i].iter_mut().zip(gradient) {
            *s += g;
        }
        self.counts[i] += 1;
        Delivery {
            stepsize: 0.0,
            updated: false,
            // The model is unchanged mid-round, so re-reading it keeps the
            // worker computing at the round's iterate.
            next: NextAction::Continue,
        }
    }

    fn poll_round(&mut self, t: f64, model: &mut [f64]) -> Option<f64> {
        if self.counts.iter().any(|&c| c == 0) {
            return None;
        }
        let n = self.sums.len() as f64;
        for (sum, &count) in self.sums.iter().zip(&self.counts) {
            let scale = self.alpha / (n * count as f64);
            for (m, s) in model.iter_mut().zip(sum) {
                *m -= scale * s;
            }
        }
        for sum in &mut self.sums {
            sum.iter_mut().for_each(|s| *s = 0.0);
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.durations.push(t - self.round_start);
        self.round_start = t;
        Some(self.alpha)
    }

    fn round_durations(&self) -> &[f64] {
        &self.durations
    }
}

/// Gradient-table baseline: after an initial gathering phase fills one slot
/// per worker, each round applies `n` asynchronous updates of `alpha / n`
/// along the table mean, one per distinct worker. Slots persist across
/// rounds; a worker's later arrivals within a round refresh its slot only.
pub struct Ringleader {
    alpha: f64,
    slots: Vec<Option<Vec<f64>>>,
    stepped: Vec<bool>,
    gathered: bool,
    steps_in_round: usize,
    round_start: f64,
    durations: Vec<f64>,
}

impl Ringleader {
    pub fn new(alpha: f64, n: usize) -> Self {
        Self {
            alpha,
            slots: vec![None; n],
            stepped: vec![false; n],
            gathered: false,
            steps_in_round: 0,
            round_start: 0.0,
            durations: Vec::new(),
        }
    }

    fn table_mean(&self) -> Vec<f64> {
        let dim = self
            .slots
            .iter()
            .flatten()
            .next()
            .map(Vec::len)
            .unwrap_or(0);
        let mut mean = vec![0.0; dim];
        for slot in self.slots.iter().flatten() {
            for (m, g) in mean.iter_mut().zip(slot) {
                *m += g;
            }
        }
        let n = self.slots.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

impl ServerStrategy for Ringleader {
    fn name(&self) -> &'static str {
        "ringleader"
    }

    fn on_delivery(
        &mut self,
        worker: WorkerId,
        gradient: &[f64],
        _delay: u64,
        t: f64,
        model: &mut [f64],
    ) -> Delivery {
        let i = worker.index();
        self.slots[i] = Some(gradient.to_vec());
        if !self.gathered {
            if self.slots.iter().all(Option::is_some) {
                self.gathered = true;
                self.durations.push(t - self.round_start);
                self.round_start = t;
            }
            return Delivery {
                stepsize: 0.0,
                updated: false,
                next: NextAction::Continue,
            };
        }
        if self.stepped[i] {
            // Slot refreshed; this worker already stepped this round.
            return Delivery {
                stepsize: 0.0,
                updated: false,
                next: NextAction::Continue,
            };
        }
        self.stepped[i] = true;
        self.steps_in_round += 1;
        let n = self.slots.len() as f64;
        let stepsize = self.alpha / n;
        let mean = self.table_mean();
        for (m, g) in model.iter_mut().zip(&mean) {
            *m -= stepsize * g;
        }
        if self.steps_in_round == self.slots.len() {
            self.stepped.iter_mut().for_each(|s| *s = false);
            self.steps_in_round = 0;
            self.durations.push(t - self.round_start);
            self.round_start = t;
        }
        Delivery {
            stepsize,
            updated: true,
            next: NextAction::Continue,
        }
    }

    fn round_durations(&self) -> &[f64] {
        &self.durations
    }
}

/// Build a strategy and its policy constants from a method tag.
///
/// `gamma` is each method's own stepsize knob: for vanilla the cycle
/// stepsize itself (`alpha = gamma`), for rescaled the parameter with
/// `alpha = gamma * tau_H`, for delay-adaptive the fresh-gradient stepsize,
/// and for the round baselines the aggregated stepsize per round
/// (ringleader splits it into `n` steps of `gamma / n`).
pub fn build_strategy(
    method: Method,
    gamma: f64,
    taus: &[f64],
    dim: usize,
) -> Result<(Box<dyn ServerStrategy>, PolicyConstants)> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config("gamma must be positive".into()));
    }
    let n = taus.len();
    let strategy: Box<dyn ServerStrategy> = match method {
        Method::Vanilla => Box::new(AsgdImmediate::vanilla(gamma, taus)?),
        Method::Rescaled => Box::new(AsgdImmediate::rescaled(gamma, taus)?),
        Method::DelayAdaptive => Box::new(AsgdImmediate::delay_adaptive(gamma)),
        Method::NaiveMinibatch => Box::new(NaiveMinibatch::new(gamma, n)),
        Method::Malenia => Box::new(Malenia::new(gamma, n, dim)),
        Method::Ringleader => Box::new(Ringleader::new(gamma, n)),
    };
    let constants = match method {
        Method::Vanilla => StepsizePolicy::Vanilla { gamma }.constants(taus)?,
        Method::Rescaled => StepsizePolicy::Rescaled { gamma }.constants(taus)?,
        Method::DelayAdaptive => StepsizePolicy::DelayAdaptive { gamma }.constants(taus)?,
        // One aggregated step of `gamma` per round.
        Method::NaiveMinibatch | Method::Malenia => PolicyConstants {
            per_worker: None,
            alpha: gamma,
            sq_sum: gamma * gamma,
            gamma_max: gamma,
        },
        // n steps of `gamma / n` per round.
        Method::Ringleader => PolicyConstants {
            per_worker: None,
            alpha: gamma,
            sq_sum: gamma * gamma / n as f64,
            gamma_max: gamma / n as f64,
        },
    };
    Ok((strategy, constants))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, SimConfig, TimingModel};
    use crate::objectives::{GradientOracle, NoiseModel, ObjectiveSuite, QuadraticSpec};
    use crate::timing::timing_stats;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn rescaled_two_speed_values() {
        let gammas = rescaled_stepsizes(1.0, &[1.0, 2.0]).unwrap();
        assert_relative_eq!(gammas[0], 1.0 / 3.0, max_relative = 1e-15);
        assert_relative_eq!(gammas[1], 2.0 / 3.0, max_relative = 1e-15);
        let constants = StepsizePolicy::Rescaled { gamma: 1.0 }
            .constants(&[1.0, 2.0])
            .unwrap();
        assert_relative_eq!(constants.alpha, 4.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn rescaled_equal_times_is_uniform() {
        // Unit times: gamma_i = gamma / n. General equal times tau scale
        // this by tau (gamma_i = gamma * tau / n), keeping alpha = gamma tau.
        for n in [1usize, 3, 7] {
            let gammas = rescaled_stepsizes(0.3, &vec![1.0; n]).unwrap();
            for g in &gammas {
                assert_relative_eq!(*g, 0.3 / n as f64, max_relative = 1e-15);
            }
            let scaled = rescaled_stepsizes(0.3, &vec![4.0; n]).unwrap();
            for g in &scaled {
                assert_relative_eq!(*g, 0.3 * 4.0 / n as f64, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn rescaled_squared_sum_identity_two_speed() {
        // A = sum_k gamma_{i_k}^2 = 2 (1/3)^2 + (2/3)^2 = 2/3 for gamma 1.
        let constants = StepsizePolicy::Rescaled { gamma: 1.0 }
            .constants(&[1.0, 2.0])
            .unwrap();
        assert_relative_eq!(constants.sq_sum, 2.0 / 3.0, max_relative = 1e-14);
        let stats = timing_stats(&[1.0, 2.0]).unwrap();
        let closed_form = 1.0 * stats.tau_h * stats.tau_a / 3.0;
        assert_relative_eq!(constants.sq_sum, closed_form, max_relative = 1e-14);
    }

    #[test]
    fn rescaled_aggregate_per_worker_is_bit_identical_on_powers_of_two() {
        let taus = [1.0, 2.0, 4.0, 4.0, 32.0];
        let gammas = rescaled_stepsizes(0.37, &taus).unwrap();
        let plan = build_cycle_plan(&taus).unwrap();
        let aggregates: Vec<f64> = gammas
            .iter()
            .zip(&plan.k_i)
            .map(|(g, &k)| g * k as f64)
            .collect();
        for a in &aggregates {
            assert_eq!(a.to_bits(), aggregates[0].to_bits());
        }
    }

    #[test]
    fn vanilla_values_and_degenerate_cases() {
        let gammas = vanilla_stepsizes(0.01, 3, 2);
        for g in &gammas {
            assert_relative_eq!(*g, 1.0 / 300.0, max_relative = 1e-15);
        }
        assert_eq!(vanilla_stepsizes(0.5, 1, 1), vec![0.5]);
        // With equal unit times K = n and vanilla coincides with rescaled.
        let taus = vec![1.0; 4];
        let v = StepsizePolicy::Vanilla { gamma: 0.8 }.constants(&taus).unwrap();
        let r = StepsizePolicy::Rescaled { gamma: 0.8 }.constants(&taus).unwrap();
        for (a, b) in v
            .per_worker
            .as_ref()
            .unwrap()
            .iter()
            .zip(r.per_worker.as_ref().unwrap())
        {
            assert_relative_eq!(a, b, max_relative = 1e-15);
        }
        assert_relative_eq!(v.alpha, 0.8, max_relative = 1e-15);
    }

    #[test]
    fn delay_adaptive_per_event_values() {
        assert_eq!(delay_adaptive_stepsize(0.3, 0), 0.3);
        assert_relative_eq!(delay_adaptive_stepsize(0.3, 2), 0.1, max_relative = 1e-15);
    }

    #[test]
    fn delay_adaptive_aggregate_matches_analytic_form() {
        // Measured per-event delays over a cycle of taus (1, 2):
        // worker 1 sees 0 and 1, worker 2 sees 2.
        // Gamma_2 = gamma / 3 matches gamma * tau_max * tau_H / (n tau_2^2).
        let gamma = 0.9;
        let taus = [1.0, 2.0];
        let stats = timing_stats(&taus).unwrap();
        let analytic_g2 = gamma * stats.tau_max * stats.tau_h / (2.0 * 4.0);
        assert_relative_eq!(analytic_g2, gamma / 3.0, max_relative = 1e-14);
        assert_relative_eq!(
            delay_adaptive_stepsize(gamma, 2),
            analytic_g2,
            max_relative = 1e-14
        );
        // Analytic alpha from the policy constants equals sum_i Gamma_i.
        let constants = StepsizePolicy::DelayAdaptive { gamma }.constants(&taus).unwrap();
        let gamma_1 = gamma * stats.tau_max * stats.tau_h / (2.0 * 1.0);
        assert_relative_eq!(constants.alpha, gamma_1 + analytic_g2, max_relative = 1e-12);
    }

    fn quad_oracle(specs: Vec<QuadraticSpec>, noise: NoiseModel, seed: u64) -> GradientOracle {
        GradientOracle::new(Arc::new(ObjectiveSuite::quadratic(specs).unwrap()), noise, seed)
    }

    #[test]
    fn asgd_step_zero_gradient_and_unit_step() {
        let mut strategy = AsgdImmediate::per_worker(vec![1.0]);
        let mut x = vec![2.0, -1.0];
        let out = strategy.on_delivery(WorkerId(1), &[0.0, 0.0], 0, 0.0, &mut x);
        assert!(out.updated);
        assert_eq!(x, vec![2.0, -1.0]);
        strategy.on_delivery(WorkerId(1), &[0.5, -0.25], 0, 0.0, &mut x);
        assert_eq!(x, vec![1.5, -0.75]);
    }

    #[test]
    fn counterexample_cycle_replay_matches_closed_form() {
        // F1 = x^2/2 - cx, F2 = x^2/2 + cx with per-step sizes (g, 2g):
        // one cycle maps x0 to x0 (1 - 4g + g^2) - g^2 c.
        let (x0, g, c) = (0.5, 0.1, 10.0);
        let oracle = quad_oracle(
            vec![
                QuadraticSpec::scalar_1d(1.0, 0.0, -c),
                QuadraticSpec::scalar_1d(1.0, 0.0, c),
            ],
            NoiseModel::Exact,
            0,
        );
        let mut strategy = AsgdImmediate::per_worker(vec![g, 2.0 * g]);
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 2.0],
            },
            &[x0],
            &SimConfig::new(2.0, 0),
        )
        .unwrap();
        let expected = x0 * (1.0 - 4.0 * g + g * g) - g * g * c;
        assert_relative_eq!(trace.final_model[0], expected, max_relative = 1e-14);
    }

    #[test]
    fn naive_minibatch_round_is_one_gradient_descent_step() {
        let specs = vec![
            QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
            QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
        ];
        let suite = ObjectiveSuite::quadratic(specs.clone()).unwrap();
        let global = suite.equal_weighted();
        let x0 = vec![1.0];
        let alpha = 0.05;
        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut strategy = NaiveMinibatch::new(alpha, 2);
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 2.0],
            },
            &x0,
            &SimConfig::new(2.0, 0),
        )
        .unwrap();
        // One round of duration tau_max = 2 with the exact global gradient.
        assert_eq!(trace.round_durations, vec![2.0]);
        let expected = x0[0] - alpha * global.grad(&x0)[0];
        assert_relative_eq!(trace.final_model[0], expected, max_relative = 1e-14);
        assert_eq!(trace.updates, 1);
    }

    #[test]
    fn naive_minibatch_identical_gradients_step_by_alpha_g() {
        let specs = vec![
            QuadraticSpec::scalar_1d(0.0, 0.0, 2.0),
            QuadraticSpec::scalar_1d(0.0, 0.0, 2.0),
        ];
        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut strategy = NaiveMinibatch::new(0.1, 2);
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 4.0],
            },
            &[0.0],
            &SimConfig::new(4.0, 0),
        )
        .unwrap();
        // Constant gradient 2.0 everywhere: one round moves by alpha * 2.
        assert_relative_eq!(trace.final_model[0], -0.2, max_relative = 1e-14);
        // Fast worker idles: only its first gradient is used per round.
        assert_eq!(trace.events.len(), 2);
    }

    #[test]
    fn malenia_round_collects_k_i_gradients() {
        let specs = vec![
            QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
            QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
        ];
        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut strategy = Malenia::new(0.05, 2, 1);
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 2.0],
            },
            &[1.0],
            &SimConfig::new(2.0, 0),
        )
        .unwrap();
        // Worker 1 delivers at t=1 and t=2, worker 2 at t=2.
        let per_worker: Vec<usize> = (1..=2)
            .map(|i| trace.events.iter().filter(|e| e.worker.0 == i).count())
            .collect();
        assert_eq!(per_worker, vec![2, 1]);
        assert_eq!(trace.round_durations, vec![2.0]);
    }

    #[test]
    fn malenia_equals_naive_round_with_exact_gradients() {
        let specs = vec![
            QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
            QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
        ];
        let run = |strategy: &mut dyn ServerStrategy| {
            let oracle = quad_oracle(specs.clone(), NoiseModel::Exact, 0);
            simulate(
                strategy,
                &oracle,
                &TimingModel::Fixed {
                    taus: vec![1.0, 2.0],
                },
                &[1.0],
                &SimConfig::new(20.0, 0),
            )
            .unwrap()
        };
        let a = run(&mut Malenia::new(0.05, 2, 1));
        let b = run(&mut NaiveMinibatch::new(0.05, 2));
        // Gradients within a malenia round are all evaluated at the round
        // model, so their per-worker means equal the exact gradients.
        assert_relative_eq!(a.final_model[0], b.final_model[0], max_relative = 1e-12);
        assert_eq!(a.updates, b.updates);
    }

    #[test]
    fn malenia_fluctuating_round_is_max_of_first_arrivals() {
        let specs = vec![
            QuadraticSpec::scalar_1d(1.0, 0.0, 0.0),
            QuadraticSpec::scalar_1d(1.0, 0.0, 0.0),
            QuadraticSpec::scalar_1d(1.0, 0.0, 0.0),
        ];
        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut strategy = Malenia::new(0.01, 3, 1);
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::ExponentialFluctuating {
                means: vec![1.0, 2.0, 4.0],
            },
            &[0.1],
            &SimConfig::new(4000.0, 7),
        )
        .unwrap();
        assert!(trace.round_durations.len() > 100);
        let mean: f64 =
            trace.round_durations.iter().sum::<f64>() / trace.round_durations.len() as f64;
        // Expectation of the max of first arrivals strictly exceeds the
        // slowest mean; with these rates it is near 5.1.
        assert!(mean > 4.0, "mean round duration {mean}");
    }

    #[test]
    fn ringleader_single_worker_degenerates_to_asgd() {
        let specs = vec![QuadraticSpec::scalar_1d(2.0, 1.0, 0.0)];
        let alpha = 0.1;
        let run_ring = {
            let oracle = quad_oracle(specs.clone(), NoiseModel::Exact, 0);
            let mut strategy = Ringleader::new(alpha, 1);
            simulate(
                &mut strategy,
                &oracle,
                &TimingModel::Fixed { taus: vec![1.0] },
                &[0.0],
                &SimConfig::new(10.0, 0),
            )
            .unwrap()
        };
        let run_asgd = {
            let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
            let mut strategy = AsgdImmediate::per_worker(vec![alpha]);
            simulate(
                &mut strategy,
                &oracle,
                &TimingModel::Fixed { taus: vec![1.0] },
                &[0.0],
                &SimConfig::new(10.0, 0),
            )
            .unwrap()
        };
        // Ringleader's gather phase consumes the first arrival; thereafter
        // each arrival applies a full alpha step like plain ASGD.
        assert_eq!(run_ring.updates + 1, run_asgd.updates);
        let expected = {
            // ASGD shifted by one event: replay 9 steps from x0.
            let mut x = 0.0f64;
            for _ in 0..9 {
                x -= alpha * 2.0 * (x - 1.0);
            }
            x
        };
        assert_relative_eq!(run_ring.final_model[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn ringleader_applies_cycle_stepsize_alpha_per_cycle() {
        let specs = vec![
            QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
            QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
        ];
        let alpha = 0.02;
        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut strategy = Ringleader::new(alpha, 2);
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 2.0],
            },
            &[0.0],
            &SimConfig::new(42.0, 0),
        )
        .unwrap();
        // After the gather cycle, each cycle applies 2 updates of alpha/2.
        let cycles = trace.completed_cycles() as f64;
        assert_relative_eq!(
            trace.cum_stepsize,
            (cycles - 1.0) * alpha,
            max_relative = 1e-12
        );
        // Steady-state round durations equal the cycle length.
        for d in &trace.round_durations[1..] {
            assert_relative_eq!(*d, 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn ringleader_table_mean_is_global_gradient_with_synced_slots() {
        let mut strategy = Ringleader::new(0.5, 2);
        let mut x = vec![1.0];
        // Gather: both slots filled with local gradients at the same x.
        strategy.on_delivery(WorkerId(1), &[2.0 * (1.0 - 4.0)], 0, 1.0, &mut x);
        strategy.on_delivery(WorkerId(2), &[4.0 * (1.0 + 3.0)], 0, 2.0, &mut x);
        assert_eq!(x, vec![1.0]); // gather applies no update
        let mean = strategy.table_mean();
        // Equal-weighted global gradient of the demo pair at x=1 is 5.
        assert_relative_eq!(mean[0], 5.0, max_relative = 1e-14);
    }

    #[test]
    fn homogeneous_times_make_all_immediate_policies_agree() {
        // Equal unit times, common gamma: vanilla gives gamma/K = gamma/n,
        // rescaled gives gamma/n, and delay-adaptive sees the constant
        // steady-state delay n-1, also giving gamma/n per event.
        let taus = vec![1.0; 3];
        let gamma = 0.3;
        let run = |mut strategy: Box<dyn ServerStrategy>| {
            let specs = vec![
                QuadraticSpec::scalar_1d(2.0, 1.0, 0.0),
                QuadraticSpec::scalar_1d(1.0, -1.0, 0.0),
                QuadraticSpec::scalar_1d(3.0, 0.5, 0.0),
            ];
            let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
            simulate(
                &mut *strategy,
                &oracle,
                &TimingModel::Fixed { taus: taus.clone() },
                &[0.2],
                &SimConfig::new(20.0, 0),
            )
            .unwrap()
        };
        let vanilla = run(Box::new(AsgdImmediate::vanilla(gamma, &taus).unwrap()));
        let rescaled = run(Box::new(AsgdImmediate::rescaled(gamma, &taus).unwrap()));
        assert_eq!(vanilla.applied_stepsizes, rescaled.applied_stepsizes);
        assert_relative_eq!(
            vanilla.final_model[0],
            rescaled.final_model[0],
            max_relative = 1e-12
        );
        // Warm-up delays differ (0, 1, 2 in the first cycle), so compare
        // the delay-adaptive stepsizes from cycle 1 on.
        let da = run(Box::new(AsgdImmediate::delay_adaptive(gamma)));
        for (a, b) in vanilla.applied_stepsizes[3..9]
            .iter()
            .zip(&da.applied_stepsizes[3..9])
        {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn immediate_updates_equal_events_and_rounds_equal_updates() {
        let specs = vec![
            QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
            QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
        ];
        let oracle = quad_oracle(specs.clone(), NoiseModel::AdditiveGaussian { sigma_sq: 0.1 }, 3);
        let mut asgd = AsgdImmediate::rescaled(0.01, &[1.0, 2.0]).unwrap();
        let trace = simulate(
            &mut asgd,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 2.0],
            },
            &[0.0],
            &SimConfig::new(30.0, 0),
        )
        .unwrap();
        assert_eq!(trace.updates as usize, trace.events.len());

        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut malenia = Malenia::new(0.01, 2, 1);
        let trace = simulate(
            &mut malenia,
            &oracle,
            &TimingModel::Fixed {
                taus: vec![1.0, 2.0],
            },
            &[0.0],
            &SimConfig::new(30.0, 0),
        )
        .unwrap();
        assert_eq!(trace.updates as usize, trace.round_durations.len());
    }

    #[test]
    fn rescaled_cumulative_stepsize_grows_at_alpha_per_cycle() {
        let taus = vec![1.0, 2.0];
        let gamma = 0.6;
        let constants = StepsizePolicy::Rescaled { gamma }.constants(&taus).unwrap();
        let specs = vec![
            QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
            QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
        ];
        let oracle = quad_oracle(specs, NoiseModel::Exact, 0);
        let mut strategy = AsgdImmediate::rescaled(gamma, &taus).unwrap();
        let trace = simulate(
            &mut strategy,
            &oracle,
            &TimingModel::Fixed { taus },
            &[0.0],
            &SimConfig::new(200.0, 0),
        )
        .unwrap();
        let cycles = trace.completed_cycles() as f64;
        assert_relative_eq!(
            trace.cum_stepsize,
            constants.alpha * cycles,
            max_relative = 1e-12
        );
    }
}
