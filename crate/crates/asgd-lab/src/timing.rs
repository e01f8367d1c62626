//! Worker speed profiles, harmonic-period tools, timing statistics, and
//! deterministic cycle schedules.
//!
//! A set of computation times is *harmonic* when every pair divides one way
//! or the other. Under that structure the stream of gradient deliveries is
//! exactly periodic: one cycle lasts `tau_max` wall-clock units and worker
//! `i` delivers `K_i = tau_max / tau_i` gradients per cycle, in a fixed
//! order. [`build_cycle_plan`] enumerates that order once; the engine
//! reproduces it event by event.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative tolerance for detecting integer ratios in real-valued times.
pub const RATIO_TOL: f64 = 1e-9;

/// 1-based worker index, matching the order of the `taus` slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub usize);

impl WorkerId {
    /// Position in 0-based per-worker arrays.
    #[inline]
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for WorkerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A worker and its per-gradient computation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorkerProfile {
    pub id: WorkerId,
    pub tau: f64,
}

/// Build contiguous 1-based profiles from a list of computation times.
pub fn worker_profiles(taus: &[f64]) -> Result<Vec<WorkerProfile>> {
    validate_taus(taus)?;
    Ok(taus
        .iter()
        .enumerate()
        .map(|(i, &tau)| WorkerProfile {
            id: WorkerId(i + 1),
            tau,
        })
        .collect())
}

/// Summary statistics of a set of computation times.
///
/// `tau_da` is the delay-adaptive effective time
/// `n * sum(tau^-3) / sum(tau^-2)^2`; it collapses to the arithmetic mean
/// for equal times and always lies in `[tau_h, n * tau_min]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_a: f64,
    pub tau_h: f64,
    pub tau_da: f64,
}

/// Compute arithmetic, harmonic, and delay-adaptive means.
pub fn timing_stats(taus: &[f64]) -> Result<TimingStats> {
    validate_taus(taus)?;
    let n = taus.len() as f64;
    let (mut inv1, mut inv2, mut inv3) = (0.0, 0.0, 0.0);
    for &t in taus {
        let r = 1.0 / t;
        inv1 += r;
        inv2 += r * r;
        inv3 += r * r * r;
    }
    Ok(TimingStats {
        tau_min: taus.iter().cloned().fold(f64::INFINITY, f64::min),
        tau_max: taus.iter().cloned().fold(0.0, f64::max),
        tau_a: taus.iter().sum::<f64>() / n,
        tau_h: n / inv1,
        tau_da: n * inv3 / (inv2 * inv2),
    })
}

/// Round each time up to the next power of two, slowing any worker by a
/// factor below two while making the set harmonic.
pub fn harmonize(taus: &[f64]) -> Result<Vec<f64>> {
    validate_taus(taus)?;
    Ok(taus.iter().map(|&t| next_power_of_two(t)).collect())
}

/// Smallest power of two `>= x` for positive `x`.
fn next_power_of_two(x: f64) -> f64 {
    let mut p = 2f64.powi(x.log2().ceil() as i32);
    while p < x {
        p *= 2.0;
    }
    while p / 2.0 >= x {
        p /= 2.0;
    }
    p
}

/// True when every pair of times divides one way or the other, within
/// [`RATIO_TOL`] relative tolerance.
pub fn check_harmonic(taus: &[f64]) -> Result<bool> {
    validate_taus(taus)?;
    for (i, &a) in taus.iter().enumerate() {
        for &b in &taus[i + 1..] {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            if integer_ratio(hi, lo).is_none() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// `hi / lo` as an integer, if it is one within [`RATIO_TOL`] relative.
fn integer_ratio(hi: f64, lo: f64) -> Option<u64> {
    let r = hi / lo;
    let k = r.round();
    if k >= 1.0 && (r - k).abs() <= RATIO_TOL * r {
        Some(k as u64)
    } else {
        None
    }
}

fn validate_taus(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::NoWorkers);
    }
    if taus.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::InvalidTau);
    }
    Ok(())
}

/// The deterministic per-cycle update schedule induced by harmonic times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclePlan {
    /// Updates contributed by each worker per cycle, `K_i = tau_max / tau_i`.
    pub k_i: Vec<u64>,
    /// Total updates per cycle, `K = sum K_i`.
    pub k: u64,
    /// Worker delivering the `k`-th update of a cycle.
    pub order: Vec<WorkerId>,
    /// Wall-clock cycle length, `tau_max`.
    pub duration: f64,
    /// Delivery time of each update within the cycle, in `(0, duration]`.
    pub delivery_times: Vec<f64>,
}

/// Enumerate one cycle of deliveries. All workers start at time 0 and worker
/// `i` delivers every `tau_i` units; simultaneous deliveries are ordered by
/// ascending worker index.
pub fn build_cycle_plan(taus: &[f64]) -> Result<CyclePlan> {
    if !check_harmonic(taus)? {
        return Err(Error::NonHarmonic);
    }
    let tau_max = taus.iter().cloned().fold(0.0, f64::max);
    let k_i: Vec<u64> = taus
        .iter()
        .map(|&t| integer_ratio(tau_max, t).expect("harmonic set has integer ratios"))
        .collect();
    // Harmonic sets are chains under divisibility, so the lcm is just the
    // max, but compute it properly to stay safe near the ratio tolerance.
    let ticks = k_i.iter().fold(1u64, |acc, &k| lcm(acc, k));
    let mut events: Vec<(u64, WorkerId)> = Vec::with_capacity(k_i.iter().sum::<u64>() as usize);
    for (idx, &k) in k_i.iter().enumerate() {
        let step = ticks / k;
        for j in 1..=k {
            events.push((j * step, WorkerId(idx + 1)));
        }
    }
    events.sort();
    let order: Vec<WorkerId> = events.iter().map(|&(_, id)| id).collect();
    let delivery_times: Vec<f64> = events
        .iter()
        .map(|&(slot, _)| slot as f64 / ticks as f64 * tau_max)
        .collect();
    let k = k_i.iter().sum();
    Ok(CyclePlan {
        k_i,
        k,
        order,
        duration: tau_max,
        delivery_times,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}
