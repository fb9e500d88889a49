//! Reverse-diffusion samplers: plain DDPM, projection-style guidance on the
//! post-step sample, and kinematic constraint gradient guidance (KCGG),
//! which differentiates the cost of the clean-trajectory estimate with
//! respect to the pre-step sample, through the score model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::constraints::StrikeConstraint;
use crate::diffusion::{self, NoiseLevel, NoiseSchedule, Normalizer, ScoreModel, Trajectory};
use crate::error::{Error, Result};
use crate::kinematics::ArmSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unconstrained,
    Projection,
    Kcgg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unconstrained => "unconstrained",
            Method::Projection => "projection",
            Method::Kcgg => "kcgg",
        }
    }

    pub fn is_guided(self) -> bool {
        self != Method::Unconstrained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    /// Diffusion steps; the training schedule is restrided to this count.
    pub steps: usize,
    pub batch_size: usize,
    pub guidance_scale: f64,
    pub batch_filter: bool,
    pub seed: u64,
    /// Clamp the clean-trajectory estimate to the normalized data range
    /// `[-1, 1]` before each mean step.
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_clip() -> bool {
    true
}

impl SamplerConfig {
    pub fn new(method: Method, steps: usize, batch_size: usize) -> Self {
        SamplerConfig {
            method,
            steps,
            batch_size,
            guidance_scale: 1.0,
            batch_filter: true,
            seed: 0,
            clip_denoised: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config(format!("need at least 2 diffusion steps, got {}", self.steps)));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scale {} must be non-negative",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Keyword selecting [`Condition::Marginal`] wherever labels are named.
pub const UNCONDITIONED: &str = "none";

/// The label samples are drawn under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Every batch element draws its own label uniformly from the model's
    /// vocabulary, which samples the marginal over labels.
    Marginal,
    Label(usize),
}

impl Condition {
    /// `None` or [`UNCONDITIONED`] selects the marginal.
    pub fn parse(name: Option<&str>, vocabulary: &[String]) -> Result<Self> {
        match name {
            None | Some(UNCONDITIONED) => Ok(Condition::Marginal),
            Some(label) => vocabulary
                .iter()
                .position(|v| v == label)
                .map(Condition::Label)
                .ok_or_else(|| Error::UnknownCondition(label.to_string())),
        }
    }
}

/// A cost on normalized model-space samples.
pub trait GuidanceCost {
    /// Per-element cost of a batch `[B, D]` given as a flat slice.
    fn values(&self, samples: &[f64], batch: usize) -> Result<Vec<f64>>;

    /// Differentiable cost summed over the batch.
    fn graph_cost(&self, g: &Graph, samples: Var) -> Result<Var>;
}

/// Strike constraint evaluated on denormalized trajectories.
pub struct StrikeGuidance<'a> {
    pub constraint: &'a StrikeConstraint,
    pub arm: &'a ArmSpec,
    pub normalizer: &'a Normalizer,
    pub rows: usize,
    pub dt: f64,
}

impl GuidanceCost for StrikeGuidance<'_> {
    fn values(&self, samples: &[f64], batch: usize) -> Result<Vec<f64>> {
        let width = samples.len() / batch.max(1);
        samples
            .chunks(width)
            .map(|s| {
                let traj = self.normalizer.decode(s, self.rows, self.dt)?;
                self.constraint.cost_forward(self.arm, &traj)
            })
            .collect()
    }

    fn graph_cost(&self, g: &Graph, samples: Var) -> Result<Var> {
        let shape = g.shape(samples);
        let (batch, width) = (shape[0], shape[1]);
        let d = self.normalizer.state_dim();
        let scale: Vec<f64> = (0..batch * width).map(|m| self.normalizer.scale(m % width % d)).collect();
        let offset: Vec<f64> = (0..batch * width).map(|m| self.normalizer.offset(m % width % d)).collect();
        let physical = g.mul(samples, g.constant(Tensor::raw(&shape, scale)))?;
        let physical = g.add(physical, g.constant(Tensor::raw(&shape, offset)))?;
        self.constraint.cost(g, self.arm, physical, self.rows)
    }
}

fn batch_var(g: &Graph, tau: &[f64], batch: usize, trainable: bool) -> Result<Var> {
    let t = Tensor::new(&[batch, tau.len() / batch], tau.to_vec())?;
    Ok(if trainable { g.variable(t) } else { g.constant(t) })
}

fn add_noise(mean: &mut [f64], sigma: f64, noise: &[f64]) {
    if sigma > 0.0 {
        for (m, z) in mean.iter_mut().zip(noise) {
            *m += sigma * z;
        }
    }
}

/// Unconditioned reverse step in the score form:
/// `τ_{i-1} = (τ_i + (1-α_i)·s) / √α_i + σ̃_i·z`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    tau: &[f64],
    batch: usize,
    i: usize,
    condition: &[usize],
    clip: bool,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let mut mean = score_mean(model, schedule, tau, batch, i, condition, clip)?;
    add_noise(&mut mean, schedule.posterior_sigma[i], noise);
    Ok(mean)
}

fn score_mean<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    tau: &[f64],
    batch: usize,
    i: usize,
    condition: &[usize],
    clip: bool,
) -> Result<Vec<f64>> {
    let g = Graph::new();
    let x = batch_var(&g, tau, batch, false)?;
    let s = g.value(diffusion::score(model, &g, x, NoiseLevel::at(schedule, i), condition)?);
    let (a, b, ab) = (schedule.alpha[i], schedule.beta[i], schedule.alpha_bar[i]);
    Ok(tau
        .iter()
        .zip(s.data())
        .map(|(&t, &s)| {
            let s = if clip { clipped_score(t, s, ab) } else { s };
            (t + b * s) / a.sqrt()
        })
        .collect())
}

/// The score implied by clamping `τ̂₀ = (τ + (1-ᾱ)s)/√ᾱ` to `[-1, 1]`.
fn clipped_score(tau: f64, score: f64, alpha_bar: f64) -> f64 {
    let tau0 = (tau + (1.0 - alpha_bar) * score) / alpha_bar.sqrt();
    if tau0.abs() <= 1.0 {
        score
    } else {
        (alpha_bar.sqrt() * tau0.clamp(-1.0, 1.0) - tau) / (1.0 - alpha_bar)
    }
}

/// Guidance on the noisy post-step sample:
/// `τ_{i-1} = τ' - η·∇_{τ'} c(τ') + σ̃_i·z`.
#[allow(clippy::too_many_arguments)]
pub fn projection_step<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    tau: &[f64],
    batch: usize,
    i: usize,
    condition: &[usize],
    cost: &dyn GuidanceCost,
    guidance_scale: f64,
    clip: bool,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let mut next = score_mean(model, schedule, tau, batch, i, condition, clip)?;
    if guidance_scale > 0.0 {
        let grad = projection_gradient(cost, &next, batch)?;
        for (x, gx) in next.iter_mut().zip(grad.data()) {
            *x -= guidance_scale * gx;
        }
    }
    add_noise(&mut next, schedule.posterior_sigma[i], noise);
    Ok(next)
}

/// `∇_{τ'} c(τ')` for a batch of post-step samples.
pub fn projection_gradient(cost: &dyn GuidanceCost, tau: &[f64], batch: usize) -> Result<Tensor> {
    let g = Graph::new();
    let x = batch_var(&g, tau, batch, true)?;
    let c = cost.graph_cost(&g, x)?;
    Ok(g.backward(c)?.wrt(x))
}

/// Posterior-mean step with the clean-trajectory estimate, followed by the
/// KCGG correction:
/// `τ_{i-1} = c_τ·τ_i + c_0·τ̂₀ - η(1-ᾱ_i)·∇_{τ_i} c(τ̂₀(τ_i)) + σ̃_i·z`.
#[allow(clippy::too_many_arguments)]
pub fn kcgg_step<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    tau: &[f64],
    batch: usize,
    i: usize,
    condition: &[usize],
    cost: &dyn GuidanceCost,
    guidance_scale: f64,
    clip: bool,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let guided = guidance_scale > 0.0;
    let g = Graph::new();
    let x = batch_var(&g, tau, batch, guided)?;
    let mut tau0 = diffusion::predict_tau0(model, &g, x, NoiseLevel::at(schedule, i), condition)?;
    if clip {
        tau0 = g.clamp(tau0, -1.0, 1.0);
    }
    let tau0_values = g.value(tau0);
    let (c_tau, c_0) = schedule.posterior_coefficients(i);
    let mut next: Vec<f64> = tau
        .iter()
        .zip(tau0_values.data())
        .map(|(t, t0)| c_tau * t + c_0 * t0)
        .collect();
    if guided {
        let c = cost.graph_cost(&g, tau0)?;
        let grad = g.backward(c)?.wrt(x);
        let k = guidance_scale * (1.0 - schedule.alpha_bar[i]);
        for (v, gx) in next.iter_mut().zip(grad.data()) {
            *v -= k * gx;
        }
    }
    add_noise(&mut next, schedule.posterior_sigma[i], noise);
    Ok(next)
}

/// `∇_{τ_i} c(τ̂₀(τ_i))`, exposed for gradient-structure checks.
pub fn kcgg_gradient<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    tau: &[f64],
    batch: usize,
    i: usize,
    condition: &[usize],
    cost: &dyn GuidanceCost,
) -> Result<Tensor> {
    let g = Graph::new();
    let x = batch_var(&g, tau, batch, true)?;
    let tau0 = diffusion::predict_tau0(model, &g, x, NoiseLevel::at(schedule, i), condition)?;
    let c = cost.graph_cost(&g, tau0)?;
    Ok(g.backward(c)?.wrt(x))
}

/// Largest `T` with `T · ms_per_step ≤ budget_ms`, never below 2.
pub fn time_budget_steps(budget_ms: f64, ms_per_step: f64) -> usize {
    if !(budget_ms > 0.0) || !(ms_per_step > 0.0) {
        return 2;
    }
    let mut t = (budget_ms / ms_per_step).floor() as usize;
    while t > 0 && t as f64 * ms_per_step > budget_ms {
        t -= 1;
    }
    t.max(2)
}

/// Per-call diagnostics, serialized as one JSON object per sample call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    pub guidance_scale: f64,
    pub batch_filter: bool,
    pub seed: u64,
    pub ms_per_step: f64,
    /// Final cost per batch element; empty when sampling without a cost.
    pub costs: Vec<f64>,
    pub chosen: usize,
    /// Condition label used by each batch element.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// All final samples in model space, `[B, D]` flattened.
    pub samples: Vec<f64>,
    pub chosen: usize,
    pub diagnostics: SampleDiagnostics,
}

impl BatchOutcome {
    pub fn element(&self, k: usize) -> &[f64] {
        let width = self.samples.len() / self.diagnostics.batch_size;
        &self.samples[k * width..(k + 1) * width]
    }

    pub fn best(&self) -> &[f64] {
        self.element(self.chosen)
    }
}

/// Independent noise stream for batch element `element`.
fn element_rng(seed: u64, element: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(element as u64);
    rng
}

/// Runs `config.steps` reverse steps on a batch drawn from `N(0, I)` and
/// returns every final sample plus the batch-filter choice. `schedule` is
/// the schedule the model was trained with; it is restrided as needed.
pub fn sample_batch<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    condition: Condition,
    cost: Option<&dyn GuidanceCost>,
) -> Result<BatchOutcome> {
    config.validate()?;
    if config.method.is_guided() && cost.is_none() {
        return Err(Error::Config(format!(
            "{} sampling needs a constraint",
            config.method.name()
        )));
    }
    let schedule = schedule.restride(config.steps)?;
    let (b, d) = (config.batch_size, model.sample_dim());
    let clip = config.clip_denoised;
    let mut rngs: Vec<ChaCha8Rng> = (0..b).map(|k| element_rng(config.seed, k)).collect();
    let conds: Vec<usize> = match condition {
        Condition::Label(c) if c >= model.condition_count() => {
            return Err(Error::UnknownCondition(format!("index {c}")));
        }
        Condition::Label(c) => vec![c; b],
        Condition::Marginal => {
            let n = model.condition_count();
            rngs.iter_mut().map(|r| r.random_range(0..n)).collect()
        }
    };
    let draw = |rngs: &mut [ChaCha8Rng]| -> Vec<f64> {
        rngs.iter_mut()
            .flat_map(|r| (0..d).map(|_| StandardNormal.sample(r)).collect::<Vec<f64>>())
            .collect()
    };

    let mut tau = draw(&mut rngs);
    let start = Instant::now();
    for i in (0..config.steps).rev() {
        let noise = if i > 0 { draw(&mut rngs) } else { vec![0.0; b * d] };
        tau = match (config.method, cost) {
            (Method::Unconstrained, _) => ddpm_step(model, &schedule, &tau, b, i, &conds, clip, &noise)?,
            (Method::Projection, Some(c)) => projection_step(
                model,
                &schedule,
                &tau,
                b,
                i,
                &conds,
                c,
                config.guidance_scale,
                clip,
                &noise,
            )?,
            (Method::Kcgg, Some(c)) => {
                kcgg_step(model, &schedule, &tau, b, i, &conds, c, config.guidance_scale, clip, &noise)?
            }
            _ => unreachable!("guided methods were checked for a cost above"),
        };
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reverse diffusion step"));
        }
    }
    let ms_per_step = start.elapsed().as_secs_f64() * 1e3 / config.steps as f64;

    let costs = match cost {
        Some(c) => c.values(&tau, b)?,
        None => Vec::new(),
    };
    let chosen = if config.batch_filter && !costs.is_empty() {
        argmin_first(&costs)
    } else {
        0
    };
    Ok(BatchOutcome {
        samples: tau,
        chosen,
        diagnostics: SampleDiagnostics {
            method: config.method,
            steps: config.steps,
            batch_size: b,
            guidance_scale: config.guidance_scale,
            batch_filter: config.batch_filter,
            seed: config.seed,
            ms_per_step,
            costs,
            chosen,
            labels: conds,
        },
    })
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = k;
        }
    }
    best
}

/// Decodes the batch-filtered sample into a physical trajectory.
pub fn decode_best(outcome: &BatchOutcome, normalizer: &Normalizer, rows: usize, dt: f64) -> Result<Trajectory> {
    normalizer.decode(outcome.best(), rows, dt)
}
