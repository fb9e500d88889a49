//! Residual MLP noise predictor over flattened trajectories.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NoiseLevel, ScoreModel};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label used for unconditioned sampling; always vocabulary entry 0.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub blocks: usize,
    pub time_embedding: usize,
    pub condition_embedding: usize,
    pub condition_vocabulary: Vec<String>,
}

impl Architecture {
    pub fn new(input_dim: usize, labels: &[String]) -> Self {
        Architecture {
            input_dim,
            hidden_width: 256,
            blocks: 3,
            time_embedding: 32,
            condition_embedding: 16,
            condition_vocabulary: labels.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !self.time_embedding.is_multiple_of(2) {
            return Err(Error::Config("time embedding size must be even".into()));
        }
        if self.condition_vocabulary.is_empty() {
            return Err(Error::Config("condition vocabulary is empty".into()));
        }
        for (k, label) in self.condition_vocabulary.iter().enumerate() {
            if self.condition_vocabulary[..k].contains(label) {
                return Err(Error::Config(format!("condition label {label:?} repeated")));
            }
        }
        Ok(())
    }

    /// Parameter shapes in declaration (and checkpoint) order.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let (d, w) = (self.input_dim, self.hidden_width);
        let (te, ce) = (self.time_embedding, self.condition_embedding);
        let mut shapes = vec![
            vec![self.condition_vocabulary.len(), ce],
            vec![d, w],
            vec![1, w],
        ];
        for _ in 0..self.blocks {
            shapes.extend([
                vec![w, w],
                vec![te, w],
                vec![ce, w],
                vec![1, w],
                vec![w, w],
                vec![1, w],
            ]);
        }
        shapes.extend([vec![w, d], vec![1, d]]);
        shapes
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Sinusoidal embedding of integer diffusion indices, one row per index.
pub fn time_embedding(indices: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        let t = i as f64;
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Tensor::raw(&[indices.len(), dim], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    arch: Architecture,
    params: Vec<Tensor>,
}

/// Parameters registered on one graph.
pub struct BoundParams(pub Vec<Var>);

impl ScoreNetwork {
    /// Random initialization with a zeroed output layer, so a fresh network
    /// predicts zero noise (and hence zero score) everywhere.
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        let last = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(k, shape)| {
                let n: usize = shape.iter().product();
                let data = if k >= last || shape[0] == 1 {
                    vec![0.0; n]
                } else {
                    let std = if k == 0 { 1.0 } else { (1.0 / shape[0] as f64).sqrt() };
                    (0..n)
                        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>()
                };
                Tensor::raw(shape, data)
            })
            .collect();
        Ok(ScoreNetwork { arch, params })
    }

    pub fn from_parameters(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::dims("network parameter", s, p.shape()));
            }
        }
        Ok(ScoreNetwork { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn set_parameters(&mut self, params: Vec<Tensor>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn condition_index(&self, label: &str) -> Result<usize> {
        self.arch
            .condition_vocabulary
            .iter()
            .position(|v| v == label)
            .ok_or_else(|| Error::UnknownCondition(label.to_string()))
    }

    /// Registers the weights on `g`, as variables when training and as
    /// constants when only input gradients are wanted.
    pub fn bind(&self, g: &Graph, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.variable(p.clone())
                    } else {
                        g.constant(p.clone())
                    }
                })
                .collect(),
        )
    }

    /// Predicted noise for a batch `x: [B, D]`, with per-row diffusion
    /// indices and condition indices.
    pub fn forward(
        &self,
        g: &Graph,
        params: &BoundParams,
        x: Var,
        time_index: &[usize],
        condition: &[usize],
    ) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.arch.input_dim {
            return Err(Error::dims("score network input", &shape, &[0, self.arch.input_dim]));
        }
        let batch = shape[0];
        if time_index.len() != batch || condition.len() != batch {
            return Err(Error::dims(
                "score network conditioning",
                &[batch],
                &[time_index.len(), condition.len()],
            ));
        }
        let vocab = self.arch.condition_vocabulary.len();
        let mut one_hot = vec![0.0; batch * vocab];
        for (b, &c) in condition.iter().enumerate() {
            if c >= vocab {
                return Err(Error::UnknownCondition(format!("index {c}")));
            }
            one_hot[b * vocab + c] = 1.0;
        }

        let p = &params.0;
        let ones = g.constant(Tensor::full(&[batch, 1], 1.0));
        let temb = g.constant(time_embedding(time_index, self.arch.time_embedding));
        let one_hot = g.constant(Tensor::raw(&[batch, vocab], one_hot));
        let cemb = g.matmul(one_hot, p[0])?;

        let affine = |input: Var, w: Var, b: Var| -> Result<Var> {
            g.add(g.matmul(input, w)?, g.matmul(ones, b)?)
        };

        let mut h = affine(x, p[1], p[2])?;
        for blk in 0..self.arch.blocks {
            let q = &p[3 + 6 * blk..9 + 6 * blk];
            let u = g.add(g.matmul(h, q[0])?, g.matmul(temb, q[1])?)?;
            let u = g.add(u, g.matmul(cemb, q[2])?)?;
            let u = g.add(u, g.matmul(ones, q[3])?)?;
            let r = affine(g.silu(u), q[4], q[5])?;
            h = g.add(h, r)?;
        }
        let n = p.len();
        affine(g.silu(h), p[n - 2], p[n - 1])
    }
}

impl ScoreModel for ScoreNetwork {
    fn sample_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn condition_count(&self) -> usize {
        self.arch.condition_vocabulary.len()
    }

    fn predict_noise(&self, g: &Graph, tau: Var, level: NoiseLevel, condition: &[usize]) -> Result<Var> {
        let batch = g.shape(tau).first().copied().unwrap_or(0);
        let params = self.bind(g, false);
        self.forward(g, &params, tau, &vec![level.index; batch], condition)
    }
}
