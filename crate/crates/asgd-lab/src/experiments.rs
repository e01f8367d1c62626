//! Experiment orchestration: configuration, multi-seed runs, stepsize
//! sweeps, trace aggregation, and persistence.
//!
//! A run writes one CSV per seed with columns
//! `time,loss,grad_norm_sq,cumulative_stepsize,cycle_index` (floats at
//! full 17-digit precision, so parsing reproduces the in-memory series
//! exactly) plus a `summary.json` with final metrics, timing statistics,
//! policy constants, and target weights. Seeds and sweep points execute as
//! independent parallel tasks.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::algorithms::{build_strategy, Method, PolicyConstants};
use crate::analysis::target_weights;
use crate::data::{dataset_from_idx, partition_by_label, synth_classification};
use crate::engine::{simulate, SimConfig, TimingModel, Trace};
use crate::objectives::mlp::{MlpArch, MlpLocal};
use crate::objectives::{
    GradientOracle, LocalObjective, NoiseModel, ObjectiveSuite, QuadraticSpec,
};
use crate::timing::{check_harmonic, harmonize, timing_stats, TimingStats};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingKind {
    #[default]
    Fixed,
    Exponential,
}

/// The optimization problem of an experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    /// Closed-form quadratic locals, one per worker.
    Quadratic { specs: Vec<QuadraticSpec> },
    /// Synthetic Gaussian-cluster classification, partitioned by label
    /// across workers (one class each), trained by a two-layer network.
    SynthMlp {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        hidden: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    /// IDX image/label files partitioned by label across workers.
    IdxMlp {
        images: String,
        labels: String,
        hidden: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

fn default_true() -> bool {
    true
}

/// Initial model choice. `Auto` means zeros for quadratic problems and a
/// seeded random initialization for networks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Spec {
    #[default]
    Auto,
    Zeros,
    Value(Vec<f64>),
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Exact
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_grid_size() -> usize {
    200
}

fn default_data_seed() -> u64 {
    7
}

/// Everything needed to run one method on one problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub method: Method,
    /// Nominal computation times (means, under fluctuating timing).
    pub taus: Vec<f64>,
    /// Round times up to powers of two before running.
    #[serde(default)]
    pub harmonize: bool,
    #[serde(default)]
    pub timing: TimingKind,
    /// The method's stepsize knob; see `build_strategy` for the mapping.
    pub gamma: f64,
    /// Wall-clock horizon in abstract time units.
    pub horizon: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub x0: X0Spec,
    /// Interpolation grid length for aggregation.
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default)]
    pub record_vectors: bool,
    #[serde(default)]
    pub metric_every_event: bool,
    /// Seed for dataset synthesis and label partitioning (separate from
    /// run seeds so every seed shares the same data).
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if self.taus.is_empty() {
            return Err(Error::NoWorkers);
        }
        Ok(())
    }

    /// Times after optional harmonization.
    pub fn effective_taus(&self) -> Result<Vec<f64>> {
        if self.harmonize {
            harmonize(&self.taus)
        } else {
            Ok(self.taus.clone())
        }
    }
}

/// Stable short hash of a config, for run directory names.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(12);
    for b in digest.iter().take(6) {
        use std::fmt::Write;
        write!(hex, "{b:02x}").expect("write to string");
    }
    hex
}

/// A problem instantiated into a suite of local objectives.
pub struct BuiltProblem {
    pub suite: Arc<ObjectiveSuite>,
    pub mlp: Option<MlpArch>,
}

impl BuiltProblem {
    pub fn initial_model(&self, spec: &X0Spec, seed: u64) -> Result<Vec<f64>> {
        let dim = self.suite.dim();
        match spec {
            X0Spec::Zeros => Ok(vec![0.0; dim]),
            X0Spec::Auto => match &self.mlp {
                Some(arch) => Ok(arch.init_params(seed)),
                None => Ok(vec![0.0; dim]),
            },
            X0Spec::Value(v) => {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "x0 has dim {} but problem has dim {dim}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// Instantiate the problem: build data, shards, and local objectives.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<BuiltProblem> {
    let n = cfg.taus.len();
    match &cfg.problem {
        ProblemSpec::Quadratic { specs } => {
            if specs.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} quadratic specs for {n} workers",
                    specs.len()
                )));
            }
            Ok(BuiltProblem {
                suite: Arc::new(ObjectiveSuite::quadratic(specs.clone())?),
                mlp: None,
            })
        }
        ProblemSpec::SynthMlp {
            classes,
            dim,
            per_class,
            separation,
            hidden,
            normalize,
        } => {
            let mut data =
                synth_classification(*classes, *dim, *per_class, *separation, cfg.data_seed)?;
            if *normalize {
                data.normalize();
            }
            let shards = partition_by_label(Arc::new(data), n, cfg.data_seed)?;
            let arch = MlpArch::new(*dim, *hidden, *classes);
            let locals: Vec<Arc<dyn LocalObjective>> = shards
                .into_iter()
                .map(|s| Arc::new(MlpLocal::new(arch, s)) as Arc<dyn LocalObjective>)
                .collect();
            Ok(BuiltProblem {
                suite: Arc::new(ObjectiveSuite::from_locals(locals)?),
                mlp: Some(arch),
            })
        }
        ProblemSpec::IdxMlp {
            images,
            labels,
            hidden,
            normalize,
        } => {
            let mut data = dataset_from_idx(Path::new(images), Path::new(labels))?;
            if *normalize {
                data.normalize();
            }
            let input_dim = data.dim;
            let classes = data.classes;
            let shards = partition_by_label(Arc::new(data), n, cfg.data_seed)?;
            let arch = MlpArch::new(input_dim, *hidden, classes);
            let locals: Vec<Arc<dyn LocalObjective>> = shards
                .into_iter()
                .map(|s| Arc::new(MlpLocal::new(arch, s)) as Arc<dyn LocalObjective>)
                .collect();
            Ok(BuiltProblem {
                suite: Arc::new(ObjectiveSuite::from_locals(locals)?),
                mlp: Some(arch),
            })
        }
    }
}

/// Per-seed result digest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub status: String,
    pub final_t: f64,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub best_loss: f64,
    pub cum_stepsize: f64,
    pub updates: u64,
    pub events: usize,
    pub completed_cycles: usize,
    pub rounds: usize,
    pub round_duration_mean: Option<f64>,
    /// Final model vector, included for small problems only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_model: Option<Vec<f64>>,
    /// Last completed cycle iterate (fixed harmonic timing).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_cycle_iterate: Option<Vec<f64>>,
}

/// Pointwise seed statistics of a metric interpolated onto a common grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSeries {
    pub grid: Vec<f64>,
    pub median: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Result of one multi-seed experiment.
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub constants: PolicyConstants,
    pub timing_stats: TimingStats,
    pub seed_summaries: Vec<SeedSummary>,
    pub traces: Vec<Trace>,
    pub aggregated_loss: AggregatedSeries,
    pub summary: serde_json::Value,
}

impl RunOutcome {
    pub fn median_final_loss(&self) -> f64 {
        median(
            self.seed_summaries
                .iter()
                .map(|s| s.final_loss)
                .collect::<Vec<_>>(),
        )
    }

    pub fn any_diverged(&self) -> bool {
        self.seed_summaries.iter().any(|s| s.status == "diverged")
    }

    pub fn all_diverged(&self) -> bool {
        self.seed_summaries.iter().all(|s| s.status == "diverged")
    }
}

/// Median with the even-count convention: mean of the two middle values.
pub fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run one config over all its seeds; write artifacts when `out_dir` given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let taus = cfg.effective_taus()?;
    let problem = build_problem(cfg)?;
    let dim = problem.suite.dim();
    let stats = timing_stats(&taus)?;

    let runs: Vec<(SeedSummary, Trace)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(SeedSummary, Trace)> {
            let x0 = problem.initial_model(&cfg.x0, seed)?;
            let oracle = GradientOracle::new(problem.suite.clone(), cfg.noise, seed);
            let (mut strategy, _) = build_strategy(cfg.method, cfg.gamma, &taus, dim)?;
            let timing = match cfg.timing {
                TimingKind::Fixed => TimingModel::Fixed { taus: taus.clone() },
                TimingKind::Exponential => TimingModel::ExponentialFluctuating {
                    means: taus.clone(),
                },
            };
            let sim = SimConfig {
                horizon: cfg.horizon,
                seed,
                record_vectors: cfg.record_vectors,
                metric_every_event: cfg.metric_every_event,
                metric_cadence: Some(cfg.horizon / cfg.grid_size as f64),
            };
            let trace = simulate(&mut *strategy, &oracle, &timing, &x0, &sim)?;
            let last = trace.metrics.last().expect("metrics never empty");
            let best_loss = trace
                .metrics
                .iter()
                .map(|m| m.loss)
                .fold(f64::INFINITY, f64::min);
            let round_duration_mean = (!trace.round_durations.is_empty()).then(|| {
                trace.round_durations.iter().sum::<f64>() / trace.round_durations.len() as f64
            });
            let summary = SeedSummary {
                seed,
                status: if trace.diverged() {
                    "diverged".into()
                } else {
                    "completed".into()
                },
                final_t: trace.final_t,
                final_loss: last.loss,
                final_grad_norm_sq: last.grad_norm_sq,
                best_loss,
                cum_stepsize: trace.cum_stepsize,
                updates: trace.updates,
                events: trace.events.len(),
                completed_cycles: trace.completed_cycles(),
                rounds: trace.round_durations.len(),
                round_duration_mean,
                final_model: (dim <= 32).then(|| trace.final_model.clone()),
                final_cycle_iterate: trace.cycle_iterates.last().cloned(),
            };
            Ok((summary, trace))
        })
        .collect::<Result<Vec<_>>>()?;

    let (seed_summaries, traces): (Vec<_>, Vec<_>) = runs.into_iter().unzip();

    let loss_series: Vec<Vec<(f64, f64)>> = traces
        .iter()
        .map(|t| t.metrics.iter().map(|m| (m.t, m.loss)).collect())
        .collect();
    let aggregated_loss = aggregate(&loss_series, cfg.grid_size, cfg.horizon)?;

    let (_, constants) = build_strategy(cfg.method, cfg.gamma, &taus, dim)?;
    let weights = check_harmonic(&taus)?
        .then(|| target_weights(cfg.method, &taus))
        .transpose()?;

    let summary = serde_json::json!({
        "config": cfg,
        "config_hash": config_hash(cfg),
        "effective_taus": taus,
        "timing_stats": stats,
        "policy": constants,
        "target_weights": weights.as_ref().map(|w| &w.weights),
        "seeds": seed_summaries,
        "median_final_loss": median(seed_summaries.iter().map(|s| s.final_loss).collect()),
        "median_best_loss": median(seed_summaries.iter().map(|s| s.best_loss).collect()),
    });

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (summary, trace) in seed_summaries.iter().zip(&traces) {
            write_trace_csv(&dir.join(format!("seed-{}.csv", summary.seed)), trace)?;
        }
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }

    Ok(RunOutcome {
        config: cfg.clone(),
        constants,
        timing_stats: stats,
        seed_summaries,
        traces,
        aggregated_loss,
        summary,
    })
}

/// Write the sampled metric series of one trace.
pub fn write_trace_csv(path: &Path, trace: &Trace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["time", "loss", "grad_norm_sq", "cumulative_stepsize", "cycle_index"])?;
    for m in &trace.metrics {
        writer.write_record([
            full(m.t),
            full(m.loss),
            full(m.grad_norm_sq),
            full(m.cum_stepsize),
            m.cycle.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Full-precision float formatting (17 significant digits round-trips f64).
fn full(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parse a metrics CSV back into `(time, loss, grad_norm_sq,
/// cumulative_stepsize, cycle)` rows.
pub fn read_trace_csv(path: &Path) -> Result<Vec<(f64, f64, f64, f64, u64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let parse = |i: usize| -> Result<f64> {
            r.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad CSV field {i}")))
        };
        let cycle: u64 = r
            .get(4)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("bad CSV cycle field".into()))?;
        rows.push((parse(0)?, parse(1)?, parse(2)?, parse(3)?, cycle));
    }
    Ok(rows)
}

/// Interpolate each `(t, value)` series onto a uniform grid over
/// `[0, horizon]` and take pointwise median/min/max across series.
pub fn aggregate(
    series: &[Vec<(f64, f64)>],
    grid_size: usize,
    horizon: f64,
) -> Result<AggregatedSeries> {
    if series.is_empty() {
        return Err(Error::Config("no traces to aggregate".into()));
    }
    if series.iter().any(Vec::is_empty) {
        return Err(Error::Config("empty metric series".into()));
    }
    if grid_size < 2 {
        return Err(Error::Config("grid_size must be at least 2".into()));
    }
    let grid: Vec<f64> = (0..grid_size)
        .map(|j| horizon * j as f64 / (grid_size - 1) as f64)
        .collect();
    let mut median_s = Vec::with_capacity(grid_size);
    let mut min_s = Vec::with_capacity(grid_size);
    let mut max_s = Vec::with_capacity(grid_size);
    for &t in &grid {
        let values: Vec<f64> = series.iter().map(|s| interpolate(s, t)).collect();
        min_s.push(values.iter().cloned().fold(f64::INFINITY, f64::min));
        max_s.push(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        median_s.push(median(values));
    }
    Ok(AggregatedSeries {
        grid,
        median: median_s,
        min: min_s,
        max: max_s,
    })
}

/// Piecewise-linear interpolation with clamped ends.
fn interpolate(series: &[(f64, f64)], t: f64) -> f64 {
    if t <= series[0].0 {
        return series[0].1;
    }
    if t >= series[series.len() - 1].0 {
        return series[series.len() - 1].1;
    }
    let idx = series.partition_point(|&(st, _)| st <= t);
    let (t0, v0) = series[idx - 1];
    let (t1, v1) = series[idx];
    if t1 <= t0 {
        return v1;
    }
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

/// One grid point of a stepsize sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    /// Median final loss across seeds; `None` when any seed diverged.
    pub median_final_loss: Option<f64>,
    pub median_best_loss: Option<f64>,
    pub diverged_seeds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best_gamma: f64,
    pub best_median_final_loss: f64,
    /// True when the optimum sits on the grid boundary (the useful sweeps
    /// have interior optima).
    pub boundary: bool,
}

/// Run the config at every stepsize in `grid` and select the gamma with the
/// lowest median final loss. Gammas with any diverged seed are excluded
/// from selection.
pub fn sweep_stepsize(
    cfg: &ExperimentConfig,
    grid: &[f64],
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::Config("sweep grid must be positive".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&gamma| -> Result<SweepRow> {
            let mut c = cfg.clone();
            c.gamma = gamma;
            let dir = out_dir.map(|d| d.join(format!("gamma-{gamma:e}")));
            let outcome = run_experiment(&c, dir.as_deref())?;
            let diverged = outcome
                .seed_summaries
                .iter()
                .filter(|s| s.status == "diverged")
                .count();
            let ok = diverged == 0;
            Ok(SweepRow {
                gamma,
                median_final_loss: ok.then(|| outcome.median_final_loss()),
                median_best_loss: ok.then(|| {
                    median(
                        outcome
                            .seed_summaries
                            .iter()
                            .map(|s| s.best_loss)
                            .collect(),
                    )
                }),
                diverged_seeds: diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = rows
        .iter()
        .filter_map(|r| r.median_final_loss.map(|l| (r.gamma, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((best_gamma, best_loss)) = best else {
        return Err(Error::NoStableStepsize);
    };
    let boundary = best_gamma == grid[0] || best_gamma == grid[grid.len() - 1];
    let outcome = SweepOutcome {
        rows,
        best_gamma,
        best_median_final_loss: best_loss,
        boundary,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("sweep.json"),
            serde_json::to_string_pretty(&outcome)?,
        )?;
    }
    Ok(outcome)
}

/// Names of the bundled demonstration scenarios.
pub fn preset_names() -> &'static [&'static str] {
    &[
        "appendix-f1",
        "appendix-f2",
        "mnist-style-fixed",
        "mnist-style-fluctuating",
        "counterexample",
    ]
}

/// Expand a named scenario into its method configs.
pub fn preset(name: &str) -> Result<Vec<ExperimentConfig>> {
    match name {
        // Two-worker objective-inconsistency demonstration: same cycle
        // stepsize alpha = 0.01 for both methods, zero gradient noise.
        // Rescaled heads for the equal-weighted minimizer at -2/3, vanilla
        // for the frequency-weighted one at +1/2.
        "appendix-f1" => {
            let base = ExperimentConfig {
                name: "appendix-f1-rescaled".into(),
                method: Method::Rescaled,
                taus: vec![1.0, 2.0],
                harmonize: false,
                timing: TimingKind::Fixed,
                // alpha = gamma * tau_H with tau_H = 4/3.
                gamma: 0.0075,
                horizon: 4000.0,
                seeds: vec![1],
                problem: ProblemSpec::Quadratic {
                    specs: vec![
                        QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
                        QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
                    ],
                },
                noise: NoiseModel::Exact,
                x0: X0Spec::Zeros,
                grid_size: 200,
                record_vectors: false,
                metric_every_event: false,
                data_seed: default_data_seed(),
            };
            let mut vanilla = base.clone();
            vanilla.name = "appendix-f1-vanilla".into();
            vanilla.method = Method::Vanilla;
            vanilla.gamma = 0.01; // alpha = gamma for the vanilla rule
            Ok(vec![base, vanilla])
        }
        // One fast + one very slow worker: the delay-adaptive rule shrinks
        // the slow worker's contribution quadratically and lands near the
        // 1/tau^2-weighted minimizer at 0.9998; rescaled stays at the
        // equal-weighted minimizer 0.
        "appendix-f2" => {
            let base = ExperimentConfig {
                name: "appendix-f2-delay-adaptive".into(),
                method: Method::DelayAdaptive,
                taus: vec![1.0, 100.0],
                harmonize: false,
                timing: TimingKind::Fixed,
                gamma: 0.05,
                horizon: 2000.0,
                seeds: vec![1],
                problem: ProblemSpec::Quadratic {
                    specs: vec![
                        QuadraticSpec::scalar_1d(2.0, 1.0, 0.0),
                        QuadraticSpec::scalar_1d(2.0, -1.0, 0.0),
                    ],
                },
                noise: NoiseModel::Exact,
                x0: X0Spec::Zeros,
                grid_size: 200,
                record_vectors: false,
                metric_every_event: false,
                data_seed: default_data_seed(),
            };
            let mut rescaled = base.clone();
            rescaled.name = "appendix-f2-rescaled".into();
            rescaled.method = Method::Rescaled;
            Ok(vec![base, rescaled])
        }
        // Desk-scale analogue of the label-partitioned image experiment:
        // ten workers with two at each speed in {1, 2, 4, 8, 16}.
        "mnist-style-fixed" | "mnist-style-fluctuating" => {
            let timing = if name == "mnist-style-fixed" {
                TimingKind::Fixed
            } else {
                TimingKind::Exponential
            };
            let make = |method: Method, gamma: f64| ExperimentConfig {
                name: format!("{name}-{}", method.name()),
                method,
                taus: vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 8.0, 8.0, 16.0, 16.0],
                harmonize: false,
                timing,
                gamma,
                horizon: 3000.0,
                seeds: vec![1, 2, 3],
                problem: ProblemSpec::SynthMlp {
                    classes: 10,
                    dim: 20,
                    per_class: 200,
                    separation: 4.0,
                    hidden: 32,
                    normalize: true,
                },
                noise: NoiseModel::Minibatch { batch_size: 64 },
                x0: X0Spec::Auto,
                grid_size: 200,
                record_vectors: false,
                metric_every_event: false,
                data_seed: default_data_seed(),
            };
            Ok(vec![
                make(Method::Rescaled, 0.1),
                make(Method::Malenia, 0.1),
                make(Method::Ringleader, 0.1),
            ])
        }
        // The two-worker blow-up construction, one cycle.
        "counterexample" => Ok(vec![ExperimentConfig {
            name: "counterexample".into(),
            method: Method::Rescaled,
            taus: vec![1.0, 2.0],
            harmonize: false,
            timing: TimingKind::Fixed,
            // Per-worker steps (0.1, 0.2): rescaled knob 3 * 0.1.
            gamma: 0.3,
            horizon: 2.0,
            seeds: vec![0],
            problem: ProblemSpec::Quadratic {
                specs: vec![
                    QuadraticSpec::scalar_1d(1.0, 0.0, -10.0),
                    QuadraticSpec::scalar_1d(1.0, 0.0, 10.0),
                ],
            },
            noise: NoiseModel::Exact,
            x0: X0Spec::Value(vec![0.5]),
            grid_size: 2,
            record_vectors: true,
            metric_every_event: true,
            data_seed: default_data_seed(),
        }]),
        other => Err(Error::UnknownPreset(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_quadratic_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "test".into(),
            method: Method::Rescaled,
            taus: vec![1.0, 2.0],
            harmonize: false,
            timing: TimingKind::Fixed,
            gamma: 0.01,
            horizon: 100.0,
            seeds: vec![1, 2],
            problem: ProblemSpec::Quadratic {
                specs: vec![
                    QuadraticSpec::scalar_1d(2.0, 4.0, 0.0),
                    QuadraticSpec::scalar_1d(4.0, -3.0, 0.0),
                ],
            },
            noise: NoiseModel::AdditiveGaussian { sigma_sq: 0.01 },
            x0: X0Spec::Zeros,
            grid_size: 50,
            record_vectors: false,
            metric_every_event: false,
            data_seed: 7,
        }
    }

    #[test]
    fn run_is_reproducible_and_csv_round_trips() {
        let cfg = tiny_quadratic_config();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let a = run_experiment(&cfg, Some(dir1.path())).unwrap();
        let b = run_experiment(&cfg, Some(dir2.path())).unwrap();
        for seed in [1u64, 2] {
            let fa = std::fs::read(dir1.path().join(format!("seed-{seed}.csv"))).unwrap();
            let fb = std::fs::read(dir2.path().join(format!("seed-{seed}.csv"))).unwrap();
            assert_eq!(fa, fb, "seed {seed} artifacts differ across runs");
        }
        // Parsing the CSV reproduces the in-memory series exactly.
        let rows = read_trace_csv(&dir1.path().join("seed-1.csv")).unwrap();
        let trace = &a.traces[0];
        assert_eq!(rows.len(), trace.metrics.len());
        for (row, m) in rows.iter().zip(&trace.metrics) {
            assert_eq!(row.0.to_bits(), m.t.to_bits());
            assert_eq!(row.1.to_bits(), m.loss.to_bits());
            assert_eq!(row.2.to_bits(), m.grad_norm_sq.to_bits());
            assert_eq!(row.3.to_bits(), m.cum_stepsize.to_bits());
        }
        assert_eq!(a.median_final_loss(), b.median_final_loss());
    }

    #[test]
    fn single_worker_noiseless_loss_is_strictly_decreasing() {
        let cfg = ExperimentConfig {
            name: "descent".into(),
            method: Method::Vanilla,
            taus: vec![1.0],
            harmonize: false,
            timing: TimingKind::Fixed,
            gamma: 0.05,
            horizon: 60.0,
            seeds: vec![0],
            problem: ProblemSpec::Quadratic {
                specs: vec![QuadraticSpec::scalar_1d(2.0, 1.0, 0.0)],
            },
            noise: NoiseModel::Exact,
            x0: X0Spec::Value(vec![4.0]),
            grid_size: 10,
            record_vectors: false,
            metric_every_event: true,
            data_seed: 7,
        };
        let outcome = run_experiment(&cfg, None).unwrap();
        let losses: Vec<f64> = outcome.traces[0].metrics.iter().map(|m| m.loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-15, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn inconsistency_preset_targets_differ() {
        let configs = preset("appendix-f1").unwrap();
        let rescaled = run_experiment(&configs[0], None).unwrap();
        let vanilla = run_experiment(&configs[1], None).unwrap();
        let xr = rescaled.seed_summaries[0]
            .final_cycle_iterate
            .as_ref()
            .unwrap()[0];
        let xv = vanilla.seed_summaries[0]
            .final_cycle_iterate
            .as_ref()
            .unwrap()[0];
        assert!((xr - (-2.0 / 3.0)).abs() < 0.02, "rescaled landed at {xr}");
        assert!((xv - 0.5).abs() < 0.02, "vanilla landed at {xv}");
    }

    #[test]
    fn aggregate_single_trace_collapses_to_itself() {
        let series = vec![vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)]];
        let agg = aggregate(&series, 5, 2.0).unwrap();
        assert_eq!(agg.median, agg.min);
        assert_eq!(agg.median, agg.max);
        assert_relative_eq!(agg.median[1], 2.0, max_relative = 1e-15); // t = 0.5
        assert_relative_eq!(agg.median[2], 3.0, max_relative = 1e-15); // t = 1.0
    }

    #[test]
    fn aggregate_constants_and_even_count_median() {
        let series = vec![
            vec![(0.0, 1.0), (2.0, 1.0)],
            vec![(0.0, 3.0), (2.0, 3.0)],
        ];
        let agg = aggregate(&series, 4, 2.0).unwrap();
        for v in &agg.median {
            assert_relative_eq!(*v, 2.0, max_relative = 1e-15);
        }
        assert!(agg.min.iter().all(|v| *v == 1.0));
        assert!(agg.max.iter().all(|v| *v == 3.0));
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_rejects_empty() {
        let a = vec![(0.0, 1.0), (1.0, 2.0)];
        let b = vec![(0.0, 5.0), (1.0, 0.5)];
        let c = vec![(0.0, 2.0), (1.0, 1.0)];
        let fwd = aggregate(&[a.clone(), b.clone(), c.clone()], 7, 1.0).unwrap();
        let rev = aggregate(&[c, b, a], 7, 1.0).unwrap();
        assert_eq!(fwd, rev);
        assert!(aggregate(&[vec![]], 5, 1.0).is_err());
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![1.0, 3.0]), 2.0);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn sweep_flags_boundary_and_divergence() {
        // Convex quadratic with curvature 2: plain gradient descent is
        // unstable past gamma = 1, so the top of this grid diverges.
        let mut cfg = ExperimentConfig {
            name: "sweep".into(),
            method: Method::Vanilla,
            taus: vec![1.0],
            harmonize: false,
            timing: TimingKind::Fixed,
            gamma: 0.1,
            horizon: 400.0,
            seeds: vec![0],
            problem: ProblemSpec::Quadratic {
                specs: vec![QuadraticSpec::scalar_1d(2.0, 1.0, 0.0)],
            },
            noise: NoiseModel::Exact,
            x0: X0Spec::Value(vec![100.0]),
            grid_size: 10,
            record_vectors: false,
            metric_every_event: false,
            data_seed: 7,
        };
        let outcome = sweep_stepsize(&cfg, &[0.01, 0.1, 0.5, 4.0], None).unwrap();
        assert_eq!(outcome.rows.len(), 4);
        assert!(outcome.rows[3].median_final_loss.is_none());
        assert!(outcome.rows[3].diverged_seeds > 0);
        assert_eq!(outcome.best_gamma, 0.5);
        assert!(!outcome.boundary);

        // A single-point grid is trivially a boundary optimum.
        let single = sweep_stepsize(&cfg, &[0.1], None).unwrap();
        assert_eq!(single.best_gamma, 0.1);
        assert!(single.boundary);

        // Every point diverging is an error.
        cfg.horizon = 2000.0;
        assert!(matches!(
            sweep_stepsize(&cfg, &[2.0, 4.0], None),
            Err(Error::NoStableStepsize)
        ));
    }

    #[test]
    fn rescaled_cumulative_stepsize_slope_is_alpha_over_tau_max() {
        let mut cfg = tiny_quadratic_config();
        cfg.noise = NoiseModel::Exact;
        cfg.seeds = vec![0];
        cfg.horizon = 2000.0;
        let outcome = run_experiment(&cfg, None).unwrap();
        let alpha = outcome.constants.alpha;
        let tau_max = outcome.timing_stats.tau_max;
        let trace = &outcome.traces[0];
        // Exact at cycle boundaries; within one alpha everywhere.
        for m in &trace.metrics {
            let line = alpha / tau_max * m.t;
            assert!(
                (m.cum_stepsize - line).abs() <= alpha * (1.0 + 1e-9),
                "t={} cum={} line={}",
                m.t,
                m.cum_stepsize,
                line
            );
        }
        let boundary_cycles = trace.completed_cycles() as f64;
        let final_boundary_cum = alpha * boundary_cycles;
        let measured_at_boundary = trace
            .metrics
            .iter()
            .filter(|m| m.cycle == trace.completed_cycles() as u64)
            .map(|m| m.cum_stepsize)
            .next_back()
            .unwrap();
        assert_relative_eq!(
            measured_at_boundary,
            final_boundary_cum,
            max_relative = 1e-12
        );
    }

    #[test]
    fn preset_names_resolve_and_unknown_is_rejected() {
        for name in preset_names() {
            let configs = preset(name).unwrap();
            assert!(!configs.is_empty());
            for c in &configs {
                c.validate().unwrap();
            }
        }
        assert!(matches!(
            preset("nope"),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny_quadratic_config();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(serde_json::to_value(&cfg).unwrap(), serde_json::to_value(&back).unwrap());
        // Unknown fields are rejected with a field diagnostic.
        let bad = format!("{text}\nbogus_field = 3\n");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }
}
