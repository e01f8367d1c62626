//! Local objective functions, stochastic gradient oracles, and
//! heterogeneity diagnostics.
//!
//! An [`ObjectiveSuite`] holds one differentiable local objective per worker
//! plus default global weights. A [`GradientOracle`] wraps a suite with a
//! noise model — exact gradients, additive Gaussian noise with a known total
//! variance, or minibatch sampling — and draws reproducibly from streams
//! keyed by `(seed, worker, delivery index)`.

pub mod mlp;

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{StreamRng, PURPOSE_GRADIENT};
use crate::timing::WorkerId;
use crate::{Error, Result};

/// Tolerance for weight-vector sums.
pub const WEIGHT_TOL: f64 = 1e-9;

/// A differentiable local objective.
pub trait LocalObjective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;

    /// Whether [`grad`](Self::grad) is the exact local gradient (not itself
    /// an estimate). True for everything in this crate.
    fn exact_gradient(&self) -> bool {
        true
    }

    /// Minibatch stochastic gradient, for objectives backed by data shards.
    fn minibatch_grad(&self, _x: &[f64], _batch: usize, _rng: &mut StreamRng) -> Option<Vec<f64>> {
        None
    }
}

/// Curvature of a quadratic: a scalar multiple of the identity or a
/// diagonal matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

/// `F(x) = (x - center)' Q (x - center) / 2 + linear' x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub curvature: Curvature,
    pub center: Vec<f64>,
    pub linear: Vec<f64>,
}

impl QuadraticSpec {
    /// One-dimensional quadratic `a/2 (x - c)^2 + b x`.
    pub fn scalar_1d(a: f64, center: f64, linear: f64) -> Self {
        Self {
            curvature: Curvature::Scalar(a),
            center: vec![center],
            linear: vec![linear],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn curvature_at(&self, j: usize) -> f64 {
        match &self.curvature {
            Curvature::Scalar(a) => *a,
            Curvature::Diagonal(d) => d[j],
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.center.len();
        if self.linear.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "center has dim {d} but linear has dim {}",
                self.linear.len()
            )));
        }
        match &self.curvature {
            Curvature::Scalar(a) => {
                if *a < 0.0 || !a.is_finite() {
                    return Err(Error::NotPsd);
                }
            }
            Curvature::Diagonal(diag) => {
                if diag.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "center has dim {d} but curvature has dim {}",
                        diag.len()
                    )));
                }
                if diag.iter().any(|a| *a < 0.0 || !a.is_finite()) {
                    return Err(Error::NotPsd);
                }
            }
        }
        Ok(())
    }
}

impl LocalObjective for QuadraticSpec {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for j in 0..x.len() {
            let d = x[j] - self.center[j];
            v += 0.5 * self.curvature_at(j) * d * d + self.linear[j] * x[j];
        }
        v
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|j| self.curvature_at(j) * (x[j] - self.center[j]) + self.linear[j])
            .collect()
    }
}

/// A convex combination of local objectives with fixed weights.
#[derive(Clone)]
pub struct WeightedObjective {
    locals: Vec<Arc<dyn LocalObjective>>,
    weights: Vec<f64>,
    dim: usize,
}

impl WeightedObjective {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.locals
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w * l.value(x))
            .sum()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (l, &w) in self.locals.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for (gj, lj) in g.iter_mut().zip(l.grad(x)) {
                *gj += w * lj;
            }
        }
        g
    }

    pub fn grad_norm_sq(&self, x: &[f64]) -> f64 {
        self.grad(x).iter().map(|g| g * g).sum()
    }
}

/// The per-worker objectives of a simulated fleet.
pub struct ObjectiveSuite {
    locals: Vec<Arc<dyn LocalObjective>>,
    dim: usize,
    weights: Vec<f64>,
    quadratics: Option<Vec<QuadraticSpec>>,
}

impl ObjectiveSuite {
    /// Suite of closed-form quadratics, one per worker.
    pub fn quadratic(specs: Vec<QuadraticSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::NoWorkers);
        }
        let dim = specs[0].dim();
        for s in &specs {
            s.validate()?;
            if s.dim() != dim {
                return Err(Error::DimensionMismatch(
                    "quadratic specs disagree on dimension".into(),
                ));
            }
        }
        let locals: Vec<Arc<dyn LocalObjective>> = specs
            .iter()
            .cloned()
            .map(|s| Arc::new(s) as Arc<dyn LocalObjective>)
            .collect();
        let n = locals.len();
        Ok(Self {
            locals,
            dim,
            weights: vec![1.0 / n as f64; n],
            quadratics: Some(specs),
        })
    }

    /// Suite from arbitrary local objectives.
    pub fn from_locals(locals: Vec<Arc<dyn LocalObjective>>) -> Result<Self> {
        if locals.is_empty() {
            return Err(Error::NoWorkers);
        }
        let dim = locals[0].dim();
        if locals.iter().any(|l| l.dim() != dim) {
            return Err(Error::DimensionMismatch(
                "local objectives disagree on dimension".into(),
            ));
        }
        let n = locals.len();
        Ok(Self {
            locals,
            dim,
            weights: vec![1.0 / n as f64; n],
            quadratics: None,
        })
    }

    pub fn n(&self) -> usize {
        self.locals.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn local(&self, worker: WorkerId) -> &dyn LocalObjective {
        self.locals[worker.index()].as_ref()
    }

    pub fn default_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn quadratics(&self) -> Option<&[QuadraticSpec]> {
        self.quadratics.as_deref()
    }

    pub fn has_exact_local_gradients(&self) -> bool {
        self.locals.iter().all(|l| l.exact_gradient())
    }

    /// The weighted objective `sum_i w_i F_i`.
    pub fn weighted(&self, weights: &[f64]) -> Result<WeightedObjective> {
        validate_weights(weights, self.n())?;
        Ok(WeightedObjective {
            locals: self.locals.clone(),
            weights: weights.to_vec(),
            dim: self.dim,
        })
    }

    /// The equal-weighted global objective.
    pub fn equal_weighted(&self) -> WeightedObjective {
        self.weighted(&self.weights)
            .expect("uniform weights are valid")
    }

    /// Closed-form minimizer of the weighted objective when the suite is
    /// quadratic with non-singular combined curvature.
    pub fn quadratic_minimizer(&self, weights: &[f64]) -> Result<Option<Vec<f64>>> {
        validate_weights(weights, self.n())?;
        let Some(specs) = &self.quadratics else {
            return Ok(None);
        };
        let d = self.dim;
        let mut curv = vec![0.0; d];
        let mut rhs = vec![0.0; d];
        for (s, &w) in specs.iter().zip(weights) {
            for j in 0..d {
                let a = s.curvature_at(j);
                curv[j] += w * a;
                rhs[j] += w * (a * s.center[j] - s.linear[j]);
            }
        }
        if curv.iter().any(|a| *a <= 0.0) {
            return Ok(None);
        }
        Ok(Some(rhs.iter().zip(&curv).map(|(r, a)| r / a).collect()))
    }
}

fn validate_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {n} workers",
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::BadWeights(f64::NAN));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::BadWeights(sum - 1.0));
    }
    Ok(())
}

/// Noise model applied on top of exact local gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Return the exact local gradient.
    Exact,
    /// Add isotropic Gaussian noise with total variance `sigma_sq`
    /// (per-coordinate variance `sigma_sq / d`).
    AdditiveGaussian { sigma_sq: f64 },
    /// Sample a minibatch of the worker's shard.
    Minibatch { batch_size: usize },
}

/// Reproducible stochastic gradient source.
///
/// Draws are keyed by `(seed, worker, update_index)` where `update_index`
/// is the worker's own delivery counter, so results do not depend on how
/// deliveries from different workers interleave.
pub struct GradientOracle {
    suite: Arc<ObjectiveSuite>,
    noise: NoiseModel,
    seed: u64,
}

impl GradientOracle {
    pub fn new(suite: Arc<ObjectiveSuite>, noise: NoiseModel, seed: u64) -> Self {
        Self { suite, noise, seed }
    }

    pub fn suite(&self) -> &Arc<ObjectiveSuite> {
        &self.suite
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noise variance bound `sigma_sq` when it is known exactly.
    pub fn known_sigma_sq(&self) -> Option<f64> {
        match self.noise {
            NoiseModel::Exact => Some(0.0),
            NoiseModel::AdditiveGaussian { sigma_sq } => Some(sigma_sq),
            NoiseModel::Minibatch { .. } => None,
        }
    }

    /// Whether the exact local gradient of every worker is available per
    /// event, which the cycle decomposition requires.
    pub fn supports_decomposition(&self) -> bool {
        !matches!(self.noise, NoiseModel::Minibatch { .. })
            && self.suite.has_exact_local_gradients()
    }

    /// Draw the stochastic gradient of worker `worker` at `x` for the
    /// worker's `update_index`-th delivery.
    pub fn sample(&self, worker: WorkerId, x: &[f64], update_index: u64) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedIterate);
        }
        let local = self.suite.local(worker);
        match self.noise {
            NoiseModel::Exact => Ok(local.grad(x)),
            NoiseModel::AdditiveGaussian { sigma_sq } => {
                let mut g = local.grad(x);
                let scale = (sigma_sq / x.len() as f64).sqrt();
                let mut rng =
                    StreamRng::from_key(self.seed, PURPOSE_GRADIENT, worker.0 as u64, update_index);
                for gj in &mut g {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *gj += scale * z;
                }
                Ok(g)
            }
            NoiseModel::Minibatch { batch_size } => {
                let mut rng =
                    StreamRng::from_key(self.seed, PURPOSE_GRADIENT, worker.0 as u64, update_index);
                local
                    .minibatch_grad(x, batch_size, &mut rng)
                    .ok_or(Error::NeedsExactGradients)
            }
        }
    }
}

/// Constants of the bounded-heterogeneity envelope
/// `||grad F_i(x)||^2 <= zeta_sq + rho_sq ||grad F(x)||^2` plus smoothness
/// and initial-gap diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityParams {
    pub zeta_sq: f64,
    pub rho_sq: f64,
    pub l: f64,
    pub l_max: f64,
    pub delta: f64,
}

/// Fit envelope constants over probe points. Diagnostics only: the fit is a
/// least-squares line through `(||grad F||^2, max_i ||grad F_i||^2)` pairs,
/// shifted up so the envelope covers every probe.
pub fn estimate_heterogeneity(
    suite: &ObjectiveSuite,
    probes: &[Vec<f64>],
) -> Result<HeterogeneityParams> {
    if probes.is_empty() {
        return Err(Error::Config("at least one probe point required".into()));
    }
    let global = suite.equal_weighted();
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(probes.len());
    for p in probes {
        if p.len() != suite.dim() {
            return Err(Error::DimensionMismatch("probe dimension".into()));
        }
        let u = global.grad_norm_sq(p);
        let v = (0..suite.n())
            .map(|i| {
                suite
                    .local(WorkerId(i + 1))
                    .grad(p)
                    .iter()
                    .map(|g| g * g)
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        pts.push((u, v));
    }

    let n = pts.len() as f64;
    let mean_u = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_v = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let var_u = pts.iter().map(|p| (p.0 - mean_u).powi(2)).sum::<f64>();
    let mut rho_sq = if var_u > 1e-12 * (1.0 + mean_u * mean_u) {
        let cov = pts
            .iter()
            .map(|p| (p.0 - mean_u) * (p.1 - mean_v))
            .sum::<f64>();
        (cov / var_u).max(0.0)
    } else {
        1.0
    };
    if !rho_sq.is_finite() {
        rho_sq = 1.0;
    }
    let zeta_sq = pts
        .iter()
        .map(|&(u, v)| v - rho_sq * u)
        .fold(0.0, f64::max);

    // Secant estimates of smoothness over probe pairs.
    let mut l: f64 = 0.0;
    let mut l_max: f64 = 0.0;
    for (a, pa) in probes.iter().enumerate() {
        for pb in &probes[a + 1..] {
            let dist: f64 = pa
                .iter()
                .zip(pb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-12 {
                continue;
            }
            let gd: f64 = global
                .grad(pa)
                .iter()
                .zip(global.grad(pb))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            l = l.max(gd / dist);
            for i in 0..suite.n() {
                let li = suite.local(WorkerId(i + 1));
                let gd: f64 = li
                    .grad(pa)
                    .iter()
                    .zip(li.grad(pb))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                l_max = l_max.max(gd / dist);
            }
        }
    }
    let f0 = global.value(&probes[0]);
    let fmin = probes
        .iter()
        .map(|p| global.value(p))
        .fold(f64::INFINITY, f64::min);
    Ok(HeterogeneityParams {
        zeta_sq,
        rho_sq,
        l,
        l_max,
        delta: f0 - fmin,
    })
}

/// Exact envelope constants for suites of scalar-curvature quadratics.
///
/// For `F_i = a_i/2 ||x - c_i||^2 + b_i' x` with weighted curvature
/// `a_bar = sum w_i a_i > 0`, any `rho_sq > (max_i a_i / a_bar)^2` admits a
/// finite `zeta_sq`; `rho_margin` scales the minimal `rho` (must be > 1).
/// Returns `None` for non-quadratic or non-scalar-curvature suites.
pub fn quadratic_heterogeneity(
    suite: &ObjectiveSuite,
    weights: &[f64],
    x0: &[f64],
    rho_margin: f64,
) -> Result<Option<HeterogeneityParams>> {
    validate_weights(weights, suite.n())?;
    let Some(specs) = suite.quadratics() else {
        return Ok(None);
    };
    let mut coeffs = Vec::with_capacity(specs.len());
    for s in specs {
        match s.curvature {
            Curvature::Scalar(a) => coeffs.push(a),
            Curvature::Diagonal(_) => return Ok(None),
        }
    }
    let a_bar: f64 = coeffs.iter().zip(weights).map(|(a, w)| a * w).sum();
    if a_bar <= 0.0 {
        return Ok(None);
    }
    let weighted = suite.weighted(weights)?;
    let x_star = match suite.quadratic_minimizer(weights)? {
        Some(x) => x,
        None => return Ok(None),
    };
    let a_max = coeffs.iter().cloned().fold(0.0, f64::max);
    let rho_sq = rho_margin * rho_margin * (a_max / a_bar).powi(2);
    let mut zeta_sq: f64 = 0.0;
    for (s, &a) in specs.iter().zip(&coeffs) {
        // grad F_i = a (x - c') with shifted center c'; pure linear locals
        // (a == 0) contribute their constant gradient directly.
        if a <= 0.0 {
            let off: f64 = s.linear.iter().map(|b| b * b).sum();
            zeta_sq = zeta_sq.max(off);
            continue;
        }
        let offset_sq: f64 = (0..suite.dim())
            .map(|j| {
                let cj = s.center[j] - s.linear[j] / a;
                (cj - x_star[j]).powi(2)
            })
            .sum();
        let ratio = rho_sq * a_bar * a_bar / (a * a);
        let slack = ratio - 1.0;
        if slack <= 0.0 {
            return Ok(None);
        }
        zeta_sq = zeta_sq.max(a * a * (1.0 + 1.0 / slack) * offset_sq);
    }
    let f_star = weighted.value(&x_star);
    Ok(Some(HeterogeneityParams {
        zeta_sq,
        rho_sq,
        l: a_bar,
        l_max: a_max,
        delta: weighted.value(x0) - f_star,
    }))
}
