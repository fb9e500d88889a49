//! Learned trajectory prior: noise schedule, normalization, score network,
//! training and the one-shot clean-trajectory estimate.

pub mod analytic;
pub mod checkpoint;
pub mod network;
pub mod schedule;
pub mod train;
pub mod trajectory;

pub use analytic::GaussianScore;
pub use checkpoint::Model;
pub use network::{Architecture, ScoreNetwork};
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use train::{train, Optimizer, TrainConfig, TrainSample};
pub use trajectory::{Normalizer, Trajectory};

use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Noise level a model is queried at: the index it was trained with and
/// the cumulative signal fraction `ᾱ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub index: usize,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub fn at(schedule: &NoiseSchedule, i: usize) -> Self {
        NoiseLevel {
            index: schedule.train_index[i],
            alpha_bar: schedule.alpha_bar[i],
        }
    }
}

/// Anything that predicts the noise `z_θ(τ_i, i)` for a batch `[B, D]` of
/// normalized trajectories, as a differentiable graph node.
pub trait ScoreModel {
    fn sample_dim(&self) -> usize;

    /// Number of condition labels the model accepts.
    fn condition_count(&self) -> usize {
        1
    }

    fn predict_noise(&self, g: &Graph, tau: Var, level: NoiseLevel, condition: &[usize]) -> Result<Var>;
}

/// `s_θ = -z_θ / √(1-ᾱ)`.
pub fn score<M: ScoreModel + ?Sized>(
    model: &M,
    g: &Graph,
    tau: Var,
    level: NoiseLevel,
    condition: &[usize],
) -> Result<Var> {
    let eps = model.predict_noise(g, tau, level, condition)?;
    Ok(g.scale(eps, -1.0 / (1.0 - level.alpha_bar).sqrt()))
}

/// `τ̂₀ = (τ_i + (1-ᾱ)·s) / √ᾱ` for a given score node.
pub fn tau0_from_score(g: &Graph, tau: Var, score: Var, alpha_bar: f64) -> Result<Var> {
    let shifted = g.add(tau, g.scale(score, 1.0 - alpha_bar))?;
    Ok(g.scale(shifted, 1.0 / alpha_bar.sqrt()))
}

/// Differentiable clean-trajectory estimate from a noisy batch.
pub fn predict_tau0<M: ScoreModel + ?Sized>(
    model: &M,
    g: &Graph,
    tau: Var,
    level: NoiseLevel,
    condition: &[usize],
) -> Result<Var> {
    let s = score(model, g, tau, level, condition)?;
    tau0_from_score(g, tau, s, level.alpha_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_score_unit_alpha_bar_is_identity() {
        let g = Graph::new();
        let tau = g.constant(Tensor::new(&[1, 3], vec![0.1, -0.4, 2.0]).unwrap());
        let s = g.constant(Tensor::zeros(&[1, 3]));
        let t0 = tau0_from_score(&g, tau, s, 1.0).unwrap();
        assert_eq!(g.value(t0).data(), &[0.1, -0.4, 2.0]);
    }

    #[test]
    fn analytic_single_point_score_recovers_point() {
        let point = vec![0.3, -0.7, 0.05, 0.9];
        let model = GaussianScore::single_point(point.clone());
        let schedule = NoiseSchedule::cosine(20).unwrap();
        for i in [0, 5, 12, 19] {
            let g = Graph::new();
            let tau = g.constant(Tensor::new(&[1, 4], vec![1.5, 0.2, -0.8, 0.4]).unwrap());
            let t0 = predict_tau0(&model, &g, tau, NoiseLevel::at(&schedule, i), &[0]).unwrap();
            for (a, b) in g.value(t0).data().iter().zip(&point) {
                assert!((a - b).abs() < 1e-10, "i={i}: {a} vs {b}");
            }
        }
    }
}
