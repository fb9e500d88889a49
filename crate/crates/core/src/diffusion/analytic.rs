//! Closed-form scores for Gaussian data, used as oracles and testbeds.

use nalgebra::{DMatrix, DVector};

use super::{NoiseLevel, ScoreModel};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exact score of `τ_i` when the clean data is `N(mean, covariance)`:
/// `s(τ_i) = -(ᾱΣ + (1-ᾱ)I)⁻¹ (τ_i - √ᾱ μ)`. A zero covariance gives the
/// single-point score `-(τ_i - √ᾱ τ*)/(1-ᾱ)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl GaussianScore {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::dims("gaussian covariance", &[d, d], &[covariance.len()]));
        }
        Ok(GaussianScore {
            mean: DVector::from_vec(mean),
            covariance: DMatrix::from_row_slice(d, d, &covariance),
        })
    }

    pub fn single_point(point: Vec<f64>) -> Self {
        let d = point.len();
        GaussianScore {
            mean: DVector::from_vec(point),
            covariance: DMatrix::zeros(d, d),
        }
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self, row: usize, col: usize) -> f64 {
        self.covariance[(row, col)]
    }

    fn precision(&self, alpha_bar: f64) -> Result<DMatrix<f64>> {
        let d = self.mean.len();
        let m = &self.covariance * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar);
        m.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Contract("noised covariance is not positive definite".into()))
    }

    /// Plain score evaluation for one sample.
    pub fn score(&self, tau: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        let p = self.precision(alpha_bar)?;
        let r = DVector::from_column_slice(tau) - &self.mean * alpha_bar.sqrt();
        Ok((-(p * r)).as_slice().to_vec())
    }
}

impl ScoreModel for GaussianScore {
    fn sample_dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_noise(&self, g: &Graph, tau: Var, level: NoiseLevel, _condition: &[usize]) -> Result<Var> {
        let d = self.mean.len();
        let shape = g.shape(tau);
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::dims("gaussian score input", &shape, &[0, d]));
        }
        let batch = shape[0];
        let ab = level.alpha_bar;
        let p = self.precision(ab)?;
        // Row-major copy of the (symmetric) precision matrix.
        let p_rows: Vec<f64> = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|rc| p[rc]).collect();
        let shift: Vec<f64> = (0..batch)
            .flat_map(|_| self.mean.iter().map(|m| m * ab.sqrt()))
            .collect();
        let shift = g.constant(Tensor::raw(&[batch, d], shift));
        let p = g.constant(Tensor::raw(&[d, d], p_rows));
        let centered = g.sub(tau, shift)?;
        let score = g.scale(g.matmul(centered, p)?, -1.0);
        // ε̂ = -√(1-ᾱ) s
        Ok(g.scale(score, -(1.0 - ab).sqrt()))
    }
}
