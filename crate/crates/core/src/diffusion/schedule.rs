use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip on per-step `β`.
pub const MAX_BETA: f64 = 0.999;

/// Discrete variance-preserving noise schedule. Position `i` runs from 0
/// (almost clean) to `T-1` (almost pure noise).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation `σ̃_i`, zero at `i = 0`.
    pub posterior_sigma: Vec<f64>,
    /// Index the score network was trained with for each position. The
    /// identity for a freshly built schedule; a subsequence after
    /// [`NoiseSchedule::restride`].
    pub train_index: Vec<usize>,
}

/// Recipe stored in checkpoints so the schedule can be rebuilt exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub offset: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine_with_offset(self.steps, self.offset)
    }
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        Self::cosine_with_offset(steps, COSINE_OFFSET)
    }

    /// `ᾱ_i = f(i+1)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
    /// Position 0 is one step away from the data; `β` is clipped at
    /// [`MAX_BETA`], which only bites at the final position where `f(T)=0`.
    pub fn cosine_with_offset(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "noise schedule needs at least 2 steps, got {steps}"
            )));
        }
        let f = |t: f64| {
            let u = ((t / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            u.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for i in 0..steps {
            let ab = f((i + 1) as f64) / f0;
            beta.push((1.0 - ab / prev).min(MAX_BETA));
            prev = ab;
        }
        Ok(Self::from_beta(beta, (0..steps).collect()))
    }

    fn from_beta(beta: Vec<f64>, train_index: Vec<usize>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_sigma,
            train_index,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `ᾱ_{i-1}`, with `ᾱ_{-1} = 1`.
    pub fn alpha_bar_prev(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar[i - 1]
        }
    }

    /// Keeps `steps` evenly spaced positions (always including the first
    /// and last) and recomputes the per-step `β` from the retained `ᾱ`.
    pub fn restride(&self, steps: usize) -> Result<Self> {
        let full = self.steps();
        if steps < 2 || steps > full {
            return Err(Error::Config(format!(
                "cannot restride a {full}-step schedule to {steps} steps"
            )));
        }
        if steps == full {
            return Ok(self.clone());
        }
        let picks: Vec<usize> = (0..steps)
            .map(|k| ((k as f64) * (full - 1) as f64 / (steps - 1) as f64).round() as usize)
            .collect();
        let mut beta = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &p in &picks {
            let ab = self.alpha_bar[p];
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        let train_index = picks.iter().map(|&p| self.train_index[p]).collect();
        Ok(Self::from_beta(beta, train_index))
    }

    /// Closed-form marginal `τ_i = √ᾱ_i τ_0 + √(1-ᾱ_i) z`.
    pub fn forward_noise(&self, tau0: &[f64], i: usize, z: &[f64]) -> Result<Vec<f64>> {
        if i >= self.steps() {
            return Err(Error::OutOfRange {
                index: i,
                limit: self.steps(),
            });
        }
        if z.len() != tau0.len() {
            return Err(Error::dims("forward noise", &[tau0.len()], &[z.len()]));
        }
        let (a, b) = (self.alpha_bar[i].sqrt(), (1.0 - self.alpha_bar[i]).sqrt());
        Ok(tau0.iter().zip(z).map(|(x, e)| a * x + b * e).collect())
    }

    /// Coefficients `(c_τ, c_0)` of the posterior mean
    /// `μ̃ = c_τ·τ_i + c_0·τ̂_0` of `q(τ_{i-1} | τ_i, τ_0)`.
    pub fn posterior_coefficients(&self, i: usize) -> (f64, f64) {
        let ab = self.alpha_bar[i];
        let ab_prev = self.alpha_bar_prev(i);
        let c_tau = self.alpha[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c_0 = ab_prev.sqrt() * self.beta[i] / (1.0 - ab);
        (c_tau, c_0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_step() {
        assert!(matches!(NoiseSchedule::cosine(1), Err(Error::Config(_))));
    }

    #[test]
    fn basic_invariants_for_t20() {
        let s = NoiseSchedule::cosine(20).unwrap();
        assert!(s.alpha_bar[0] > 0.99);
        assert!(s.alpha_bar[19] < 0.01);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
        assert_eq!(s.posterior_sigma[0], 0.0);
    }

    #[test]
    fn beta_clip_only_at_last_position() {
        for t in [5, 10, 20, 50, 100] {
            let s = NoiseSchedule::cosine(t).unwrap();
            let clipped: Vec<usize> = (0..t).filter(|&i| s.beta[i] >= MAX_BETA).collect();
            assert!(clipped.iter().all(|&i| i == t - 1), "T={t}: {clipped:?}");
        }
    }

    #[test]
    fn restride_keeps_endpoints() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let r = s.restride(10).unwrap();
        assert_eq!(r.steps(), 10);
        assert_eq!(r.train_index[0], 0);
        assert_eq!(r.train_index[9], 99);
        assert_eq!(r.alpha_bar[0], s.alpha_bar[0]);
        assert!((r.alpha_bar[9] - s.alpha_bar[99]).abs() < 1e-15);
        assert!(r.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.restride(101).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::cosine(20).unwrap();
        let x = [0.5, -0.25];
        let out = s.forward_noise(&x, 3, &[0.0, 0.0]).unwrap();
        let a = s.alpha_bar[3].sqrt();
        assert_eq!(out, vec![a * 0.5, a * -0.25]);
        assert!(s.forward_noise(&x, 20, &[0.0, 0.0]).is_err());
        assert!(s.forward_noise(&x, 0, &[0.0]).is_err());
    }
}
