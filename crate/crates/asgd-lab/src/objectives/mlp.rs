//! Two-layer perceptron with rectified-linear hidden units and
//! cross-entropy loss, plus a shard-backed [`LocalObjective`].
//!
//! Parameters live in a single flat vector laid out as
//! `[W1 (hidden x input), b1, W2 (classes x hidden), b2]`, so the model
//! plugs straight into the simulator's `d`-dimensional iterate.

use rand_distr::{Distribution, StandardNormal};

use crate::data::Shard;
use crate::rng::{StreamRng, PURPOSE_MODEL_INIT};
use crate::{Error, Result};

use super::LocalObjective;

/// Layer sizes of the two-layer network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpArch {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
        }
    }

    /// Total parameter count: weights and biases of both layers.
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.classes * self.hidden + self.classes
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.input;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.classes * self.hidden;
        (w1, b1, w2)
    }

    /// He-style random initialization, deterministic in the seed.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::from_key(seed, PURPOSE_MODEL_INIT, 0, 0);
        let mut params = vec![0.0; self.param_count()];
        let (w1_end, _, _) = self.offsets();
        let s1 = (2.0 / self.input as f64).sqrt();
        for p in &mut params[..w1_end] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = s1 * z;
        }
        let b1_end = w1_end + self.hidden;
        let w2_end = b1_end + self.classes * self.hidden;
        let s2 = (2.0 / self.hidden as f64).sqrt();
        for p in &mut params[b1_end..w2_end] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = s2 * z;
        }
        params
    }

    /// Forward pass for one example: mean cross-entropy and, if `grad` is
    /// given, the accumulated parameter gradient (unscaled).
    fn example_loss_grad(
        &self,
        params: &[f64],
        x: &[f64],
        label: usize,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let (w1_end, b1_end, w2_end) = self.offsets();
        let (w1, rest) = params.split_at(w1_end);
        let (b1, rest2) = rest.split_at(self.hidden);
        let (w2, b2) = rest2.split_at(self.classes * self.hidden);
        debug_assert_eq!(b1_end + self.classes * self.hidden, w2_end);

        // Hidden pre-activations and ReLU.
        let mut z1 = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            let row = &w1[h * self.input..(h + 1) * self.input];
            let mut acc = b1[h];
            for (wj, xj) in row.iter().zip(x) {
                acc += wj * xj;
            }
            z1[h] = acc;
        }
        let a1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();

        // Logits and log-softmax.
        let mut z2 = vec![0.0; self.classes];
        for c in 0..self.classes {
            let row = &w2[c * self.hidden..(c + 1) * self.hidden];
            let mut acc = b2[c];
            for (wj, aj) in row.iter().zip(&a1) {
                acc += wj * aj;
            }
            z2[c] = acc;
        }
        let zmax = z2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z2.iter().map(|z| (z - zmax).exp()).sum::<f64>().ln();
        let loss = lse - z2[label];

        if let Some(g) = grad.as_deref_mut() {
            // dL/dz2 = softmax - onehot.
            let mut dz2: Vec<f64> = z2.iter().map(|z| (z - lse).exp()).collect();
            dz2[label] -= 1.0;
            let (gw1, grest) = g.split_at_mut(w1_end);
            let (gb1, grest2) = grest.split_at_mut(self.hidden);
            let (gw2, gb2) = grest2.split_at_mut(self.classes * self.hidden);
            let mut da1 = vec![0.0; self.hidden];
            for c in 0..self.classes {
                let d = dz2[c];
                gb2[c] += d;
                let row = &mut gw2[c * self.hidden..(c + 1) * self.hidden];
                let wrow = &w2[c * self.hidden..(c + 1) * self.hidden];
                for h in 0..self.hidden {
                    row[h] += d * a1[h];
                    da1[h] += d * wrow[h];
                }
            }
            for h in 0..self.hidden {
                if z1[h] > 0.0 {
                    let d = da1[h];
                    gb1[h] += d;
                    let row = &mut gw1[h * self.input..(h + 1) * self.input];
                    for (gj, xj) in row.iter_mut().zip(x) {
                        *gj += d * xj;
                    }
                }
            }
        }
        loss
    }
}

/// A network plus a concrete parameter vector, as produced at run start.
#[derive(Clone, Debug)]
pub struct MlpModel {
    pub arch: MlpArch,
    pub params: Vec<f64>,
}

impl MlpModel {
    pub fn init(arch: MlpArch, seed: u64) -> Self {
        Self {
            params: arch.init_params(seed),
            arch,
        }
    }
}

/// Mean cross-entropy and its parameter gradient over the given shard rows.
pub fn mlp_gradient(
    arch: &MlpArch,
    shard: &Shard,
    batch: &[usize],
    params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if params.len() != arch.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} params for arch expecting {}",
            params.len(),
            arch.param_count()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for &i in batch {
        if i >= shard.len() {
            return Err(Error::Config(format!(
                "batch row {i} outside shard of size {}",
                shard.len()
            )));
        }
        loss += arch.example_loss_grad(params, shard.feature(i), shard.label(i), Some(&mut grad));
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

/// Mean cross-entropy over shard rows without the gradient.
pub fn mlp_loss(arch: &MlpArch, shard: &Shard, batch: &[usize], params: &[f64]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut loss = 0.0;
    for &i in batch {
        loss += arch.example_loss_grad(params, shard.feature(i), shard.label(i), None);
    }
    Ok(loss / batch.len() as f64)
}

/// Local objective of one worker: full-shard cross-entropy. The exact local
/// gradient is the full-batch gradient; minibatch draws sample rows
/// uniformly with replacement, which keeps them exactly unbiased.
pub struct MlpLocal {
    arch: MlpArch,
    shard: Shard,
    all_rows: Vec<usize>,
}

impl MlpLocal {
    pub fn new(arch: MlpArch, shard: Shard) -> Self {
        let all_rows = (0..shard.len()).collect();
        Self {
            arch,
            shard,
            all_rows,
        }
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }
}

impl LocalObjective for MlpLocal {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn value(&self, x: &[f64]) -> f64 {
        mlp_loss(&self.arch, &self.shard, &self.all_rows, x).expect("shard is non-empty")
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        mlp_gradient(&self.arch, &self.shard, &self.all_rows, x)
            .expect("shard is non-empty")
            .1
    }

    fn minibatch_grad(&self, x: &[f64], batch: usize, rng: &mut StreamRng) -> Option<Vec<f64>> {
        let rows: Vec<usize> = (0..batch.max(1))
            .map(|_| rng.index(self.shard.len()))
            .collect();
        mlp_gradient(&self.arch, &self.shard, &rows, x).ok().map(|r| r.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledDataset;
    use crate::timing::WorkerId;
    use std::sync::Arc;

    fn toy_shard(rows: usize, dim: usize, classes: usize, seed: u64) -> Shard {
        let mut rng = StreamRng::seeded(seed);
        let features: Vec<f64> = (0..rows * dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
        let dataset = Arc::new(LabeledDataset::new(features, dim, labels, classes).unwrap());
        Shard {
            owner: WorkerId(1),
            dataset,
            rows: (0..rows).collect(),
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax_loss() {
        let arch = MlpArch::new(3, 4, 5);
        let shard = toy_shard(1, 3, 5, 0);
        let params = vec![0.0; arch.param_count()];
        let (loss, _) = mlp_gradient(&arch, &shard, &[0], &params).unwrap();
        assert!((loss - (5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_example_matches_single_example_gradient() {
        let arch = MlpArch::new(3, 4, 3);
        let shard = toy_shard(2, 3, 3, 1);
        let params = arch.init_params(7);
        let (l1, g1) = mlp_gradient(&arch, &shard, &[0], &params).unwrap();
        let (l2, g2) = mlp_gradient(&arch, &shard, &[0, 0], &params).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let arch = MlpArch::new(3, 4, 3);
        let shard = toy_shard(2, 3, 3, 1);
        let params = arch.init_params(7);
        assert!(matches!(
            mlp_gradient(&arch, &shard, &[], &params),
            Err(crate::Error::EmptyBatch)
        ));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let arch = MlpArch::new(5, 8, 4);
        let shard = toy_shard(6, 5, 4, 2);
        let rows: Vec<usize> = (0..shard.len()).collect();
        let params = arch.init_params(3);
        let (_, grad) = mlp_gradient(&arch, &shard, &rows, &params).unwrap();
        let mut rng = StreamRng::seeded(4);
        let h = 1e-4;
        for trial in 0..20 {
            // Random unit direction.
            let mut dir: Vec<f64> = (0..params.len())
                .map(|_| {
                    use rand_distr::Distribution;
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    z
                })
                .collect();
            let norm: f64 = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            for d in &mut dir {
                *d /= norm;
            }
            let shift = |s: f64| -> Vec<f64> {
                params
                    .iter()
                    .zip(&dir)
                    .map(|(p, d)| p + s * d)
                    .collect()
            };
            let lp = mlp_loss(&arch, &shard, &rows, &shift(h)).unwrap();
            let lm = mlp_loss(&arch, &shard, &rows, &shift(-h)).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
            assert!(
                rel <= 1e-5,
                "trial {trial}: finite difference {fd} vs analytic {analytic} (rel {rel})"
            );
        }
    }

    #[test]
    fn minibatch_draws_are_seed_deterministic() {
        let arch = MlpArch::new(3, 4, 3);
        let local = MlpLocal::new(arch, toy_shard(9, 3, 3, 5));
        let params = arch.init_params(11);
        let mut r1 = StreamRng::from_key(1, crate::rng::PURPOSE_GRADIENT, 1, 0);
        let mut r2 = StreamRng::from_key(1, crate::rng::PURPOSE_GRADIENT, 1, 0);
        let a = local.minibatch_grad(&params, 4, &mut r1).unwrap();
        let b = local.minibatch_grad(&params, 4, &mut r2).unwrap();
        assert_eq!(a, b);
    }
}
