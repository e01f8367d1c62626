//! Numerical verification machinery: per-cycle step decomposition, target
//! weights, the two-worker blow-up oracle, leading complexity terms, and
//! Monte-Carlo checks of the noise and bias bounds.
//!
//! The aggregate step of a cycle splits exactly into an ideal gradient step
//! on the policy's target objective, a staleness bias, and a zero-mean
//! sampling noise:
//!
//! ```text
//! S_m = sum_k gamma_k grad f_{i_k}(y_k)
//!     = alpha grad F_w(x^m) + b_m + nu_m,
//! nu_m = sum_k gamma_k (grad f_{i_k}(y_k) - grad F_{i_k}(y_k)),
//! b_m  = sum_k gamma_k (grad F_{i_k}(y_k) - grad F_{i_k}(x^m)),
//! ```
//!
//! where the weights `w_i` are proportional to each worker's aggregate
//! stepsize divided by its time (`w_i ∝ Gamma_i / tau_i`... equivalently
//! `Gamma_i`-weighted per-cycle contributions) — uniform for the rescaled
//! rule, `∝ 1/tau_i` for vanilla, `∝ 1/tau_i^2` for delay-adaptive.

use serde::{Deserialize, Serialize};

use crate::algorithms::{AsgdImmediate, Method};
use crate::engine::{simulate, SimConfig, TimingModel, Trace};
use crate::objectives::{GradientOracle, ObjectiveSuite, WeightedObjective};
use crate::timing::{check_harmonic, CyclePlan, TimingStats, WorkerId};
use crate::{Error, Result};

/// Exact algebraic split of one cycle's aggregate step.
#[derive(Clone, Debug)]
pub struct CycleDecomposition {
    /// `S_m`: the summed stepsize-weighted gradients (equals `x^m - x^{m+1}`).
    pub aggregate: Vec<f64>,
    /// `alpha * grad F_w(x^m)` for the cycle's implied target weights.
    pub ideal: Vec<f64>,
    /// Staleness bias `b_m`.
    pub bias: Vec<f64>,
    /// Sampling noise `nu_m`.
    pub noise: Vec<f64>,
    /// `|S_m - ideal - b_m - nu_m|`, which is float round-off only.
    pub residual_norm: f64,
    /// Cycle stepsize `alpha = sum_k gamma_k` of this cycle.
    pub alpha: f64,
    /// Implied target weights `Gamma_i / alpha`.
    pub weights: Vec<f64>,
}

/// Decompose cycle `m` of a recorded trace. Requires fixed harmonic timing,
/// per-event snapshots/gradients, and exact local gradients on the suite.
pub fn decompose_cycle(trace: &Trace, m: usize, suite: &ObjectiveSuite) -> Result<CycleDecomposition> {
    if !suite.has_exact_local_gradients() {
        return Err(Error::NeedsExactGradients);
    }
    let Some(events) = trace.cycle_events(m) else {
        return Err(Error::Config(format!(
            "cycle {m} not fully contained in trace ({} completed cycles)",
            trace.completed_cycles()
        )));
    };
    let x_m = &trace.cycle_iterates[m];
    let dim = suite.dim();
    let n = suite.n();

    let mut aggregate = vec![0.0; dim];
    let mut noise = vec![0.0; dim];
    let mut bias = vec![0.0; dim];
    let mut per_worker_gamma = vec![0.0; n];
    for e in events {
        let (Some(snapshot), Some(gradient)) = (&e.snapshot, &e.gradient) else {
            return Err(Error::MissingTraceVectors);
        };
        let gamma = e.stepsize;
        per_worker_gamma[e.worker.index()] += gamma;
        let local = suite.local(e.worker);
        let exact_at_snapshot = local.grad(snapshot);
        let exact_at_cycle_start = local.grad(x_m);
        for j in 0..dim {
            aggregate[j] += gamma * gradient[j];
            noise[j] += gamma * (gradient[j] - exact_at_snapshot[j]);
            bias[j] += gamma * (exact_at_snapshot[j] - exact_at_cycle_start[j]);
        }
    }
    let alpha: f64 = per_worker_gamma.iter().sum();
    if alpha <= 0.0 {
        return Err(Error::Config("cycle applied no stepsize".into()));
    }
    let weights: Vec<f64> = per_worker_gamma.iter().map(|g| g / alpha).collect();
    let target = suite.weighted(&weights)?;
    let ideal: Vec<f64> = target.grad(x_m).iter().map(|g| alpha * g).collect();
    let residual_norm = (0..dim)
        .map(|j| (aggregate[j] - ideal[j] - bias[j] - noise[j]).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(CycleDecomposition {
        aggregate,
        ideal,
        bias,
        noise,
        residual_norm,
        alpha,
        weights,
    })
}

/// Closed-form one-cycle map of the two-worker blow-up construction:
/// `F_1 = x^2/2 - cx`, `F_2 = x^2/2 + cx`, times `(1, 2)`, per-step sizes
/// `(gamma, 2 gamma)`. One cycle sends `x0` to
/// `x0 (1 - 4 gamma + gamma^2) - gamma^2 c`.
pub fn counterexample_step(x0: f64, gamma: f64, c: f64) -> f64 {
    x0 * (1.0 - 4.0 * gamma + gamma * gamma) - gamma * gamma * c
}

/// Replay the same cycle through the event engine and return the simulated
/// end-of-cycle iterate.
pub fn counterexample_replay(x0: f64, gamma: f64, c: f64) -> Result<f64> {
    let suite = ObjectiveSuite::quadratic(vec![
        crate::objectives::QuadraticSpec::scalar_1d(1.0, 0.0, -c),
        crate::objectives::QuadraticSpec::scalar_1d(1.0, 0.0, c),
    ])?;
    let oracle = GradientOracle::new(
        std::sync::Arc::new(suite),
        crate::objectives::NoiseModel::Exact,
        0,
    );
    let mut strategy = AsgdImmediate::per_worker(vec![gamma, 2.0 * gamma]);
    let trace = simulate(
        &mut strategy,
        &oracle,
        &TimingModel::Fixed {
            taus: vec![1.0, 2.0],
        },
        &[x0],
        &SimConfig::new(2.0, 0),
    )?;
    Ok(trace.final_model[0])
}

/// The objective a stepsize rule implicitly targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetWeights {
    pub method: Method,
    pub weights: Vec<f64>,
}

/// Analytic target weights per method: uniform for rescaled and the
/// round-based baselines, `∝ 1/tau_i` for vanilla, `∝ 1/tau_i^2` for
/// delay-adaptive (via the analytic per-cycle aggregates `Gamma_i`).
pub fn target_weights(method: Method, taus: &[f64]) -> Result<TargetWeights> {
    if !check_harmonic(taus)? {
        return Err(Error::NonHarmonic);
    }
    let n = taus.len();
    let raw: Vec<f64> = match method {
        Method::Rescaled | Method::NaiveMinibatch | Method::Malenia | Method::Ringleader => {
            vec![1.0; n]
        }
        Method::Vanilla => taus.iter().map(|t| 1.0 / t).collect(),
        Method::DelayAdaptive => taus.iter().map(|t| 1.0 / (t * t)).collect(),
    };
    let sum: f64 = raw.iter().sum();
    Ok(TargetWeights {
        method,
        weights: raw.into_iter().map(|w| w / sum).collect(),
    })
}

/// Problem constants entering complexity terms and bound evaluations.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProblemParams {
    pub delta: f64,
    pub l: f64,
    pub l_max: f64,
    pub sigma_sq: f64,
    pub zeta_sq: f64,
    pub rho: f64,
    pub n: usize,
}

/// Methods with a reported leading wall-clock complexity term. Concurrent
/// sampling-based ASGD is reported only; it is not simulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum ComplexityMethod {
    NaiveMinibatch,
    Malenia,
    Ringleader,
    Concurrent,
    DelayAdaptive,
    Vanilla,
    Rescaled,
}

impl ComplexityMethod {
    pub const ALL: [ComplexityMethod; 7] = [
        ComplexityMethod::NaiveMinibatch,
        ComplexityMethod::Malenia,
        ComplexityMethod::Ringleader,
        ComplexityMethod::Concurrent,
        ComplexityMethod::DelayAdaptive,
        ComplexityMethod::Vanilla,
        ComplexityMethod::Rescaled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComplexityMethod::NaiveMinibatch => "naive_minibatch",
            ComplexityMethod::Malenia => "malenia",
            ComplexityMethod::Ringleader => "ringleader",
            ComplexityMethod::Concurrent => "concurrent",
            ComplexityMethod::DelayAdaptive => "delay_adaptive",
            ComplexityMethod::Vanilla => "vanilla",
            ComplexityMethod::Rescaled => "rescaled",
        }
    }
}

/// Leading term of the worst-case wall-clock time to reach an
/// `eps`-stationary point. The timing factor is what distinguishes the
/// methods: `tau_max` for the synchronous baseline and concurrent sampling,
/// `tau_A` for the arithmetic-mean-rate methods, `tau_H` for vanilla (whose
/// target is the frequency-weighted average), `tau_DA` for delay-adaptive.
/// Reporting only; no convergence claim is attached.
pub fn leading_term(
    method: ComplexityMethod,
    p: &ProblemParams,
    stats: &TimingStats,
    eps: f64,
) -> f64 {
    let base = p.delta * p.l * p.sigma_sq / (p.n as f64 * eps * eps);
    match method {
        ComplexityMethod::NaiveMinibatch => base * stats.tau_max,
        ComplexityMethod::Malenia | ComplexityMethod::Ringleader | ComplexityMethod::Rescaled => {
            base * stats.tau_a
        }
        ComplexityMethod::Concurrent => {
            p.delta * p.l * (p.sigma_sq + p.zeta_sq) / (p.n as f64 * eps * eps) * stats.tau_max
        }
        ComplexityMethod::DelayAdaptive => base * stats.tau_da,
        ComplexityMethod::Vanilla => base * stats.tau_h,
    }
}

/// Per-cycle squared gradient norms of the target objective and their
/// running average.
pub fn stationarity_gap(
    iterates: &[Vec<f64>],
    objective: &WeightedObjective,
) -> (Vec<f64>, Vec<f64>) {
    let series: Vec<f64> = iterates
        .iter()
        .map(|x| objective.grad_norm_sq(x))
        .collect();
    let mut running = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (m, v) in series.iter().enumerate() {
        acc += v;
        running.push(acc / (m + 1) as f64);
    }
    (series, running)
}

/// Frozen-model Monte-Carlo statistics of the cycle noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseMcStats {
    pub cycles: usize,
    /// Coordinate-wise mean of `nu` across cycles.
    pub mean: Vec<f64>,
    /// Mean of `|nu|^2` across cycles.
    pub mean_sq_norm: f64,
    /// The bound `A sigma^2` (0 when sigma is unknown).
    pub bound: f64,
    /// Per-coordinate 4-sigma band for the mean: `4 sqrt(A sigma^2 / (d N))`.
    pub coord_band: f64,
}

/// Estimate the cycle-noise moments at a frozen model `x`: each cycle draws
/// fresh gradients along the plan's order with per-worker stepsizes
/// `gammas`, accumulating `nu = sum_k gamma_k (g_k - grad F_{i_k}(x))`.
pub fn noise_monte_carlo(
    oracle: &GradientOracle,
    plan: &CyclePlan,
    gammas: &[f64],
    x: &[f64],
    cycles: usize,
) -> Result<NoiseMcStats> {
    let suite = oracle.suite();
    if !oracle.supports_decomposition() {
        return Err(Error::NeedsExactGradients);
    }
    if gammas.len() != suite.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} stepsizes for {} workers",
            gammas.len(),
            suite.n()
        )));
    }
    let dim = suite.dim();
    let exact: Vec<Vec<f64>> = (0..suite.n())
        .map(|i| suite.local(WorkerId(i + 1)).grad(x))
        .collect();
    let sq_sum: f64 = gammas
        .iter()
        .zip(&plan.k_i)
        .map(|(g, &k)| g * g * k as f64)
        .sum();
    let sigma_sq = oracle.known_sigma_sq().unwrap_or(0.0);

    let mut indices = vec![0u64; suite.n()];
    let mut mean = vec![0.0; dim];
    let mut mean_sq_norm = 0.0;
    let mut nu = vec![0.0; dim];
    for _ in 0..cycles {
        nu.iter_mut().for_each(|v| *v = 0.0);
        for &worker in &plan.order {
            let i = worker.index();
            let g = oracle.sample(worker, x, indices[i])?;
            indices[i] += 1;
            for j in 0..dim {
                nu[j] += gammas[i] * (g[j] - exact[i][j]);
            }
        }
        for j in 0..dim {
            mean[j] += nu[j];
            mean_sq_norm += nu[j] * nu[j];
        }
    }
    let n_f = cycles as f64;
    mean.iter_mut().for_each(|v| *v /= n_f);
    let bound = sq_sum * sigma_sq;
    Ok(NoiseMcStats {
        cycles,
        mean,
        mean_sq_norm: mean_sq_norm / n_f,
        bound,
        coord_band: 4.0 * (bound / (dim as f64 * n_f)).sqrt(),
    })
}

/// Comparison of the measured cumulative squared bias against its analytic
/// upper bound with proof constants:
/// `sum_m |b_m|^2 <= 2 A^2 K^2 L_max^2 M (sigma^2 + zeta^2)
///  + 4 A^2 K^2 L_max^2 rho^2 sum_m |grad F(x^m)|^2`,
/// valid for `gamma_max <= 1 / (2 K L rho)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasBoundReport {
    pub cycles: usize,
    pub measured: f64,
    pub bound: f64,
    pub grad_sq_sum: f64,
    /// Whether the stepsize condition of the bound holds.
    pub stepsize_ok: bool,
    pub holds: bool,
}

/// Evaluate the bias bound over the first `cycles` completed cycles of a
/// recorded trace. `weights` selects the target objective (must match the
/// policy's implied weights for the bound to be meaningful).
#[allow(clippy::too_many_arguments)]
pub fn bias_bound_report(
    trace: &Trace,
    suite: &ObjectiveSuite,
    weights: &[f64],
    params: &ProblemParams,
    sq_sum: f64,
    gamma_max: f64,
    cycles: usize,
) -> Result<BiasBoundReport> {
    let plan = trace.plan.as_ref().ok_or(Error::CyclesUndefined)?;
    let k = plan.k as f64;
    if cycles > trace.completed_cycles() {
        return Err(Error::Config(format!(
            "requested {cycles} cycles but trace completed {}",
            trace.completed_cycles()
        )));
    }
    let target = suite.weighted(weights)?;
    let mut measured = 0.0;
    let mut grad_sq_sum = 0.0;
    for m in 0..cycles {
        let d = decompose_cycle(trace, m, suite)?;
        measured += d.bias.iter().map(|b| b * b).sum::<f64>();
        grad_sq_sum += target.grad_norm_sq(&trace.cycle_iterates[m]);
    }
    let a_k_l = sq_sum * sq_sum * k * k * params.l_max * params.l_max;
    let bound = 2.0 * a_k_l * cycles as f64 * (params.sigma_sq + params.zeta_sq)
        + 4.0 * a_k_l * params.rho * params.rho * grad_sq_sum;
    let stepsize_ok = gamma_max <= 1.0 / (2.0 * k * params.l * params.rho);
    Ok(BiasBoundReport {
        cycles,
        measured,
        bound,
        grad_sq_sum,
        stepsize_ok,
        holds: measured <= bound,
    })
}

/// The averaged-gradient-norm bound with proof constants (4, 6, 10):
/// `4 Delta / (alpha M) + 6 (A/alpha) L sigma^2
///  + 10 (A/alpha)^2 K^2 L_max^2 (sigma^2 + zeta^2)`.
pub fn master_bound(p: &ProblemParams, alpha: f64, sq_sum: f64, k: u64, cycles: usize) -> f64 {
    let ratio = sq_sum / alpha;
    4.0 * p.delta / (alpha * cycles as f64)
        + 6.0 * ratio * p.l * p.sigma_sq
        + 10.0 * ratio * ratio * (k * k) as f64 * p.l_max * p.l_max * (p.sigma_sq + p.zeta_sq)
}
