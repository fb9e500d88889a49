use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::ScoreNetwork;
use super::schedule::NoiseSchedule;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Anneal the learning rate to zero along a half cosine over training.
    pub cosine_decay: bool,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `v ← μv + g`, `w ← w - lr·v`.
    Momentum,
    /// Adam with `β₁ = momentum`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            cosine_decay: true,
            optimizer: Optimizer::Adam,
        }
    }
}

/// One normalized, flattened training trajectory and its condition index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub data: Vec<f64>,
    pub condition: usize,
}

/// Noise-prediction objective `E‖z_θ(τ_i, i) - z‖²` (summed over entries,
/// averaged over the batch) for explicit noisy inputs.
pub fn epsilon_loss(
    net: &ScoreNetwork,
    noisy: &[Vec<f64>],
    time_index: &[usize],
    condition: &[usize],
    noise: &[Vec<f64>],
) -> Result<f64> {
    let d = net.architecture().input_dim;
    let b = noisy.len();
    let g = Graph::new();
    let params = net.bind(&g, false);
    let x = g.constant(Tensor::new(&[b, d], noisy.concat())?);
    let out = net.forward(&g, &params, x, time_index, condition)?;
    let z = g.constant(Tensor::new(&[b, d], noise.concat())?);
    let diff = g.sub(out, z)?;
    Ok(g.value(g.sum(g.mul(diff, diff)?)).item()? / b as f64)
}

/// Minibatch SGD with momentum on the noise-prediction objective. Each
/// epoch takes `ceil(N / batch)` steps over a fresh shuffle of the data,
/// cycling through it when `N < batch`. Returns the per-epoch mean of the
/// per-entry squared error.
pub fn train(
    net: &mut ScoreNetwork,
    dataset: &[TrainSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let d = net.architecture().input_dim;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if let Some(bad) = dataset.iter().find(|s| s.data.len() != d) {
        return Err(Error::dims("training sample", &[d], &[bad.data.len()]));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = net.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut second: Vec<Vec<f64>> = velocity.clone();
    let mut step = 0i32;
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let t = schedule.steps();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = if cfg.cosine_decay {
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
        } else {
            cfg.learning_rate
        };
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let b = cfg.batch_size;
            let mut x = Vec::with_capacity(b * d);
            let mut z = Vec::with_capacity(b * d);
            let mut times = Vec::with_capacity(b);
            let mut conds = Vec::with_capacity(b);
            for _ in 0..b {
                let sample = &dataset[order[cursor % order.len()]];
                cursor += 1;
                let i = rng.random_range(0..t);
                let noise: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                x.extend(schedule.forward_noise(&sample.data, i, &noise)?);
                z.extend(noise);
                times.push(i);
                conds.push(sample.condition);
            }

            let g = Graph::new();
            let params = net.bind(&g, true);
            let xv = g.constant(Tensor::raw(&[b, d], x));
            let zv = g.constant(Tensor::raw(&[b, d], z));
            let out = net.forward(&g, &params, xv, &times, &conds)?;
            let diff = g.sub(out, zv)?;
            // Objective ‖z_θ - z‖² per sample; the curve reports it per entry.
            let loss = g.scale(g.sum(g.mul(diff, diff)?), 1.0 / b as f64);
            let loss_value = g.value(loss).item()? / d as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss became {loss_value}; lower the learning rate"),
                });
            }
            epoch_loss += loss_value;
            let grads = g.backward(loss)?;
            step += 1;
            let (b1, b2) = (cfg.momentum, 0.999f64);
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));

            let updated = net
                .parameters()
                .iter()
                .zip(&params.0)
                .zip(velocity.iter_mut().zip(second.iter_mut()))
                .map(|((p, &var), (vel, sq))| {
                    let grad = grads.wrt(var);
                    let data = p
                        .data()
                        .iter()
                        .zip(grad.data())
                        .zip(vel.iter_mut().zip(sq.iter_mut()))
                        .map(|((&w, &gw), (v, s))| match cfg.optimizer {
                            Optimizer::Momentum => {
                                *v = b1 * *v + gw;
                                w - lr * *v
                            }
                            Optimizer::Adam => {
                                *v = b1 * *v + (1.0 - b1) * gw;
                                *s = b2 * *s + (1.0 - b2) * gw * gw;
                                w - lr * (*v / c1) / ((*s / c2).sqrt() + 1e-8)
                            }
                        })
                        .collect();
                    Tensor::raw(p.shape(), data)
                })
                .collect();
            net.set_parameters(updated);
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        curve.push(mean);
        if epoch % 100 == 0 || epoch + 1 == cfg.epochs {
            debug!("epoch {epoch}: loss {mean:.5}");
        }
    }
    info!(
        "trained {} epochs, final loss {:.5}",
        cfg.epochs,
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(curve)
}
