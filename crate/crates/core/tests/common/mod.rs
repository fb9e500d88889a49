//! Shared oracles for the integration tests.
#![allow(dead_code)]

use kcgg_core::autodiff::{Graph, Var};
use kcgg_core::diffusion::{GaussianScore, NoiseSchedule};
use kcgg_core::sampling::{sample_batch, Condition, GuidanceCost, Method, SamplerConfig};
use kcgg_core::tensor::Tensor;
use kcgg_core::Result;
use nalgebra::{DMatrix, DVector};

/// `λ (τ_k - b)²` on one coordinate of a model-space sample.
pub struct CoordinateCost {
    pub dim: usize,
    pub k: usize,
    pub target: f64,
    pub weight: f64,
}

impl GuidanceCost for CoordinateCost {
    fn values(&self, samples: &[f64], batch: usize) -> Result<Vec<f64>> {
        let w = samples.len() / batch;
        Ok(samples.chunks(w).map(|s| self.weight * (s[self.k] - self.target).powi(2)).collect())
    }

    fn graph_cost(&self, g: &Graph, samples: Var) -> Result<Var> {
        let batch = g.shape(samples)[0];
        let picks = (0..batch).map(|b| b * self.dim + self.k).collect();
        let x = g.gather(samples, picks, &[batch, 1])?;
        let r = g.sub(x, g.constant(Tensor::full(&[batch, 1], self.target)))?;
        Ok(g.scale(g.sum(g.mul(r, r)?), self.weight))
    }
}

/// Smooth 1-D trajectory prior and a single-coordinate quadratic cost,
/// with the exact mean of `p(τ)·exp(-c(τ))`.
pub struct LinearGaussianTestbed {
    pub prior: GaussianScore,
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub cost: CoordinateCost,
}

impl LinearGaussianTestbed {
    pub fn new() -> Self {
        Self::with(1.0, 0.5)
    }

    /// Prior marginal variance `v` and cost weight `λ`.
    pub fn with(v: f64, weight: f64) -> Self {
        let d = 12;
        let mean: Vec<f64> = (0..d).map(|t| 0.4 * (0.5 * t as f64).sin()).collect();
        let cov = DMatrix::from_fn(d, d, |r, c| {
            let dt = r as f64 - c as f64;
            v * (-dt * dt / (2.0 * 2.5f64.powi(2))).exp() + if r == c { 1e-4 } else { 0.0 }
        });
        let flat: Vec<f64> = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|rc| cov[rc]).collect();
        LinearGaussianTestbed {
            prior: GaussianScore::new(mean.clone(), flat).unwrap(),
            mean,
            covariance: cov,
            cost: CoordinateCost {
                dim: d,
                k: 7,
                target: 0.9,
                weight,
            },
        }
    }

    /// `μ + Σe_k · 2λ(b - μ_k) / (1 + 2λΣ_kk)`.
    pub fn conditional_mean(&self) -> Vec<f64> {
        let (k, lam, b) = (self.cost.k, self.cost.weight, self.cost.target);
        let gain = 2.0 * lam * (b - self.mean[k]) / (1.0 + 2.0 * lam * self.covariance[(k, k)]);
        let m = DVector::from_column_slice(&self.mean) + self.covariance.column(k) * gain;
        m.as_slice().to_vec()
    }

    /// Mean of `n` samples drawn with `method` (batch filter off).
    pub fn sample_mean(&self, method: Method, steps: usize, eta: f64, n: usize, seed: u64) -> Vec<f64> {
        let schedule = NoiseSchedule::cosine(steps).unwrap();
        let cfg = SamplerConfig {
            guidance_scale: eta,
            batch_filter: false,
            clip_denoised: false,
            seed,
            ..SamplerConfig::new(method, steps, n)
        };
        let cost = method.is_guided().then_some(&self.cost as &dyn GuidanceCost);
        let out = sample_batch(&self.prior, &schedule, &cfg, Condition::Label(0), cost).unwrap();
        let d = self.mean.len();
        let mut m = vec![0.0; d];
        for k in 0..n {
            for (a, v) in m.iter_mut().zip(out.element(k)) {
                *a += v / n as f64;
            }
        }
        m
    }
}

pub fn rms_error(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

// ------------------------------------------------------------ gradients

use kcgg_core::constraints::StrikeConstraint;
use kcgg_core::diffusion::{
    predict_tau0, Architecture, NoiseLevel, Normalizer, ScoreNetwork, Trajectory,
};
use kcgg_core::kinematics::ArmSpec;
use kcgg_core::sampling::StrikeGuidance;
#[allow(unused_imports)]
use kcgg_core::sampling::GuidanceCost as _;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub type Build = Box<dyn Fn(&Graph, Var) -> Result<Var>>;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Value and gradient of a scalar graph expression at `x`.
pub fn eval_graph(build: &dyn Fn(&Graph, Var) -> Result<Var>, shape: &[usize], x: &[f64], grad: bool) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let t = Tensor::new(shape, x.to_vec()).unwrap();
    let v = if grad { g.variable(t) } else { g.constant(t) };
    let root = build(&g, v).unwrap();
    let value = g.value(root).item().unwrap();
    let gx = if grad { g.backward(root).unwrap().wrt(v).to_vec() } else { Vec::new() };
    (value, gx)
}

/// Central finite differences against the reverse-mode gradient; every
/// entry must agree within `max(1e-6, 1e-4·scale)`.
pub fn check_gradient(build: &dyn Fn(&Graph, Var) -> Result<Var>, shape: &[usize], x: &[f64]) -> std::result::Result<(), String> {
    let (_, analytic) = eval_graph(build, shape, x, true);
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + FD_STEP;
        let up = eval_graph(build, shape, &probe, false).0;
        probe[k] = x[k] - FD_STEP;
        let down = eval_graph(build, shape, &probe, false).0;
        probe[k] = x[k];
        let fd = (up - down) / (2.0 * FD_STEP);
        let tol = 1e-6f64.max(1e-4 * fd.abs().max(analytic[k].abs()));
        if (fd - analytic[k]).abs() > tol {
            return Err(format!("entry {k}: autodiff {} vs finite difference {fd}", analytic[k]));
        }
    }
    Ok(())
}

/// Reduces any node to a scalar with random weights so every output entry
/// sends a distinct upstream gradient.
fn weighted_sum(g: &Graph, out: Var, w: &[f64]) -> Result<Var> {
    let shape = g.shape(out);
    let wv = g.constant(Tensor::new(&shape, w.to_vec()).unwrap());
    Ok(g.sum(g.mul(out, wv)?))
}

pub const OPS: [&str; 14] = [
    "add", "sub", "mul", "mul_self", "scale", "matmul", "sum", "silu", "sin", "cos", "clamp", "reshape", "gather",
    "scalar_broadcast",
];

/// One random instance of `op`: a scalar-valued builder over a flat input
/// of the returned length, and the probe point.
pub fn op_probe(op: &str, rng: &mut ChaCha8Rng) -> (Build, Vec<f64>) {
    let r = rng.random_range(1..4usize);
    let c = rng.random_range(1..5usize);
    let n = r * c;
    let a_const = normal_vec(rng, n, 1.0);
    let w = normal_vec(rng, n, 1.0);
    let (build, len): (Build, usize) = match op {
        // binary ops: the input holds both operands, sliced out by gather
        "add" | "sub" | "mul" => {
            let op = op.to_string();
            let w = w.clone();
            (
                Box::new(move |g, x| {
                    let a = g.gather(x, (0..n).collect(), &[r, c])?;
                    let b = g.gather(x, (n..2 * n).collect(), &[r, c])?;
                    let out = match op.as_str() {
                        "add" => g.add(a, b)?,
                        "sub" => g.sub(a, b)?,
                        _ => g.mul(a, b)?,
                    };
                    weighted_sum(g, out, &w)
                }),
                2 * n,
            )
        }
        "mul_self" => (
            Box::new(move |g, x| {
                let x = g.reshape(x, &[r, c])?;
                let out = g.mul(x, x)?;
                weighted_sum(g, out, &w)
            }),
            n,
        ),
        "scale" => {
            let k: f64 = rng.random_range(-3.0..3.0);
            (Box::new(move |g, x| weighted_sum(g, g.scale(x, k), &w)), n)
        }
        "matmul" => {
            let m = rng.random_range(1..4usize);
            let wm = normal_vec(rng, r * m, 1.0);
            (
                Box::new(move |g, x| {
                    let a = g.gather(x, (0..n).collect(), &[r, c])?;
                    let b = g.gather(x, (n..n + c * m).collect(), &[c, m])?;
                    weighted_sum(g, g.matmul(a, b)?, &wm)
                }),
                n + c * m,
            )
        }
        "sum" => {
            let k: f64 = rng.random_range(-2.0..2.0);
            (Box::new(move |g, x| Ok(g.scale(g.sum(g.mul(x, x)?), k))), n)
        }
        "silu" => (Box::new(move |g, x| weighted_sum(g, g.silu(x), &w)), n),
        "sin" => (Box::new(move |g, x| weighted_sum(g, g.sin(x), &w)), n),
        "cos" => (Box::new(move |g, x| weighted_sum(g, g.cos(x), &w)), n),
        "clamp" => (Box::new(move |g, x| weighted_sum(g, g.clamp(x, -0.5, 0.7), &w)), n),
        "reshape" => (
            Box::new(move |g, x| {
                let y = g.reshape(x, &[c, r])?;
                weighted_sum(g, g.mul(y, y)?, &w)
            }),
            n,
        ),
        "gather" => {
            let k = rng.random_range(1..2 * n + 1);
            let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
            let wk = normal_vec(rng, k, 1.0);
            (
                Box::new(move |g, x| {
                    let y = g.gather(x, idx.clone(), &[k])?;
                    weighted_sum(g, g.mul(y, y)?, &wk)
                }),
                n,
            )
        }
        "scalar_broadcast" => (
            Box::new(move |g, x| {
                let s = g.gather(x, vec![n], &[1])?;
                let a = g.gather(x, (0..n).collect(), &[n])?;
                let out = g.add(g.mul(a, s)?, g.sub(s, a)?)?;
                weighted_sum(g, out, &w)
            }),
            n + 1,
        ),
        other => panic!("unknown op {other}"),
    };
    let _ = a_const;
    let mut x = normal_vec(rng, len, 1.0);
    if op == "clamp" {
        // keep probes away from the kinks
        for v in &mut x {
            while (*v + 0.5).abs() < 1e-3 || (*v - 0.7).abs() < 1e-3 {
                *v += 0.01;
            }
        }
    }
    (build, x)
}

/// Small network with every parameter (including the output layer) random.
pub fn random_network(rng: &mut ChaCha8Rng, input_dim: usize, labels: usize) -> ScoreNetwork {
    let arch = Architecture {
        input_dim,
        hidden_width: 16,
        blocks: 2,
        time_embedding: 8,
        condition_embedding: 4,
        condition_vocabulary: (0..labels).map(|k| format!("c{k}")).collect(),
    };
    let params = arch
        .parameter_shapes()
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s, normal_vec(rng, n, 0.5 / (s[0] as f64).sqrt())).unwrap()
        })
        .collect();
    ScoreNetwork::from_parameters(arch, params).unwrap()
}

/// Everything needed for the strike cost through a network on short plans.
pub struct CompositeFixture {
    pub arm: ArmSpec,
    pub network: ScoreNetwork,
    pub normalizer: Normalizer,
    pub constraint: StrikeConstraint,
    pub rows: usize,
    pub level: NoiseLevel,
}

impl CompositeFixture {
    pub fn new(rng: &mut ChaCha8Rng, window: (usize, usize)) -> Self {
        let arm = ArmSpec::default();
        let rows = 4;
        let d = 2 * arm.joints();
        let dataset: Vec<Trajectory> = (0..5)
            .map(|_| Trajectory::new(rows, d, normal_vec(rng, rows * d, 0.8), 0.02).unwrap())
            .collect();
        let normalizer = Normalizer::fit(&dataset, 0.05).unwrap();
        let targets = (window.0..=window.1)
            .map(|_| [rng.random_range(0.3..0.9), rng.random_range(-0.4..0.4)])
            .collect();
        let schedule = NoiseSchedule::cosine(20).unwrap();
        CompositeFixture {
            network: random_network(rng, rows * d, 2),
            arm,
            normalizer,
            constraint: StrikeConstraint::new(window, targets, 1.0).unwrap(),
            rows,
            level: NoiseLevel::at(&schedule, rng.random_range(0..20)),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows * 2 * self.arm.joints()
    }

    /// `c(τ̂₀(τ))` through the network, the normalizer and FK.
    pub fn build(&self) -> impl Fn(&Graph, Var) -> Result<Var> + '_ {
        move |g, x| {
            let guidance = StrikeGuidance {
                constraint: &self.constraint,
                arm: &self.arm,
                normalizer: &self.normalizer,
                rows: self.rows,
                dt: 0.02,
            };
            let tau0 = predict_tau0(&self.network, g, x, self.level, &[1])?;
            guidance.graph_cost(g, tau0)
        }
    }
}

// ------------------------------------------------------------ overfit model

use kcgg_core::demos::{generate_dataset, ExpertParams, Style};
use kcgg_core::diffusion::{Model, ScheduleParams, TrainConfig, TrainSample};
use kcgg_core::sim::{EpisodeOptions, TableSpec};
use rand::SeedableRng;

pub const OVERFIT_EPOCHS: usize = 2000;

/// One expert demo (sweep-low style) on the default table and arm.
pub fn single_demo() -> Trajectory {
    let (set, _) = generate_dataset(
        &TableSpec::default(),
        &ArmSpec::default(),
        &ExpertParams::default(),
        &EpisodeOptions::default(),
        1,
        0,
    )
    .unwrap();
    set.demos.into_iter().find(|d| d.style == Style::SweepLow).unwrap().trajectory
}

/// A small network trained to memorize [`single_demo`]; returns the model,
/// the demo and the per-epoch loss curve.
pub fn train_overfit() -> (Model, Trajectory, Vec<f64>) {
    let demo = single_demo();
    let normalizer = Normalizer::fit(std::slice::from_ref(&demo), 0.05).unwrap();
    let sample = TrainSample {
        data: normalizer.encode(&demo),
        condition: Style::SweepLow.label() as usize,
    };
    let arch = Architecture {
        hidden_width: 384,
        blocks: 2,
        ..Architecture::new(demo.data().len(), &Style::vocabulary())
    };
    let mut network = ScoreNetwork::init(arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let schedule = ScheduleParams { steps: 100, offset: 0.008 };
    let cfg = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        batch_size: 64,
        learning_rate: 3e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let curve = kcgg_core::diffusion::train(&mut network, &[sample], &schedule.build().unwrap(), &cfg).unwrap();
    let model = Model {
        network,
        normalizer,
        schedule,
        rows: demo.rows(),
        dt: demo.dt,
    };
    (model, demo, curve)
}

/// [`train_overfit`]'s model, cached across test binaries.
pub fn overfit_model() -> (Model, Trajectory) {
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("overfit-model.kcgg");
    if let Ok(model) = Model::load(&path) {
        return (model, single_demo());
    }
    let (model, demo, _) = train_overfit();
    let tmp = path.with_extension(format!("{}.tmp", std::process::id()));
    model.save(&tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    (model, demo)
}
