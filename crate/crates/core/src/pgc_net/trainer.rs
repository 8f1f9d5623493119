//! SGD with momentum and weight decay, batch size one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{Network, FEATURE_STRIDE};
use crate::density::{mae_mse, Scene};
use crate::error::{invalid, PgcError, Result};
use crate::map::{DensityMap, PerspectiveMap};
use crate::tensor::Tensor64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    /// Defaults sized for small networks trained from scratch.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.95,
            weight_decay: 5e-4,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, len: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    /// Updates `params` in place; entries with `frozen[i]` set are left alone.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], frozen: Option<&[bool]>) {
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            params[i] -= self.learning_rate * self.velocity[i];
        }
    }
}

/// A scene prepared for training: `f64` image, image-resolution perspective,
/// and the density target pooled to feature resolution by block sums.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor64,
    pub perspective: PerspectiveMap,
    pub target: DensityMap,
    pub count: f64,
}

impl TrainSample {
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Ok(Self {
            image: scene.image.to_f64(),
            perspective: scene.gt_perspective.clone(),
            target: scene.gt_density.block_sum(FEATURE_STRIDE)?,
            count: scene.gt_count(),
        })
    }
}

pub fn prepare(dataset: &[Scene]) -> Result<Vec<TrainSample>> {
    dataset.iter().map(TrainSample::from_scene).collect()
}

pub(crate) fn check_finite(loss: f64, grads: &[f64]) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(PgcError::Numerical("NaN or infinity in loss or gradient".into()));
    }
    Ok(())
}

/// Trains on the scenes with a fresh permutation per epoch drawn from the
/// trainer seed. Returns the trained network and the per-epoch mean loss.
pub fn train(net: &Network, dataset: &[Scene], tcfg: &TrainerConfig) -> Result<(Network, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(invalid("training set is empty"));
    }
    train_samples(net, &prepare(dataset)?, tcfg)
}

pub fn train_samples(net: &Network, samples: &[TrainSample], tcfg: &TrainerConfig) -> Result<(Network, Vec<f64>)> {
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut net = net.clone();
    let mut params = net.params();
    let mut opt = Sgd::new(tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(tcfg.epochs);
    for _ in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let s = &samples[idx];
            let (loss, grads, _) = net.loss_and_grad(&s.image, &s.perspective, &s.target)?;
            check_finite(loss, &grads)?;
            total += loss;
            opt.step(&mut params, &grads, None);
            net.set_params(&params)?;
        }
        curve.push(total / samples.len() as f64);
    }
    Ok((net, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub mean_loss: f64,
    pub predicted: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

/// Counting metrics over a set of samples. Samples are evaluated
/// concurrently; results are collected in input order.
pub fn evaluate(net: &Network, samples: &[TrainSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let results: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let pred = net.forward(&s.image, &s.perspective)?;
            let loss = 0.5
                * pred
                    .values
                    .iter()
                    .zip(&s.target.values)
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>();
            Ok((pred.sum(), loss))
        })
        .collect();
    let mut predicted = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for r in results {
        let (c, l) = r?;
        predicted.push(c);
        loss += l;
    }
    let ground_truth: Vec<f64> = samples.iter().map(|s| s.count).collect();
    let (mae, mse) = mae_mse(&predicted, &ground_truth)?;
    Ok(EvalReport {
        mae,
        mse,
        mean_loss: loss / samples.len() as f64,
        predicted,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{synth_scene, SceneConfig};
    use crate::pgc_net::network::{build_toy_net, NetworkConfig};

    fn setup(blocks: usize) -> (Network, Vec<TrainSample>) {
        setup_with(vec![4], blocks)
    }

    fn setup_with(backbone: Vec<usize>, blocks: usize) -> (Network, Vec<TrainSample>) {
        let cfg = NetworkConfig {
            backbone_channels: backbone,
            num_pgc_blocks: blocks,
            block_out_channels: 2,
            ..Default::default()
        };
        let mut net = build_toy_net(&cfg, 1).unwrap();
        let samples: Vec<_> = (0..2)
            .map(|s| TrainSample::from_scene(&synth_scene(&SceneConfig::new(32, 32, 8, s)).unwrap()).unwrap())
            .collect();
        net.init_perspective(&samples[0].perspective.values);
        (net, samples)
    }

    #[test]
    fn zero_rate_leaves_network_unchanged() {
        let (net, samples) = setup(1);
        let cfg = TrainerConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let (trained, curve) = train_samples(&net, &samples, &cfg).unwrap();
        assert_eq!(trained, net);
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0], curve[1]);
    }

    #[test]
    fn overfits_a_single_sample() {
        let (net, samples) = setup_with(vec![8, 8], 1);
        let cfg = TrainerConfig {
            learning_rate: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 1000,
            seed: 0,
        };
        let (_, curve) = train_samples(&net, &samples[..1], &cfg).unwrap();
        let best = curve.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best * 100.0 <= curve[0], "{} -> {}", curve[0], best);
    }

    #[test]
    fn weight_decay_shrinks_by_the_expected_factor() {
        let mut opt = Sgd::new(0.1, 0.0, 0.5, 2);
        let mut params = vec![2.0, -4.0];
        opt.step(&mut params, &[0.0, 0.0], None);
        assert_eq!(params, vec![2.0 * 0.95, -4.0 * 0.95]);
        opt.step(&mut params, &[1.0, 1.0], Some(&[true, false]));
        assert_eq!(params[0], 1.9);
    }

    #[test]
    fn empty_dataset_and_bad_config_are_rejected() {
        let (net, samples) = setup(0);
        assert!(train_samples(&net, &[], &TrainerConfig::default()).is_err());
        assert!(train(&net, &[], &TrainerConfig::default()).is_err());
        assert!(evaluate(&net, &[]).is_err());
        let bad = TrainerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(train_samples(&net, &samples, &bad).is_err());
    }

    #[test]
    fn non_finite_input_is_reported_as_numerical_error() {
        let (net, mut samples) = setup(1);
        samples[1].image.data_mut()[5] = f64::NAN;
        let err = train_samples(&net, &samples, &TrainerConfig::default()).unwrap_err();
        assert!(matches!(err, PgcError::Numerical(_)), "{err:?}");
    }

    #[test]
    fn evaluation_reports_counts_in_order() {
        let (net, samples) = setup(1);
        let r = evaluate(&net, &samples).unwrap();
        assert_eq!(r.ground_truth, samples.iter().map(|s| s.count).collect::<Vec<_>>());
        assert!(r.mae <= r.mse + 1e-12);
    }
}
