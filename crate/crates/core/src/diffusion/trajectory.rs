use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-horizon sequence of arm states `[q, q̇]`, stored row-major as
/// `rows × state_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    rows: usize,
    state_dim: usize,
    data: Vec<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(rows: usize, state_dim: usize, data: Vec<f64>, dt: f64) -> Result<Self> {
        if rows * state_dim != data.len() {
            return Err(Error::dims("trajectory", &[rows, state_dim], &[data.len()]));
        }
        if !state_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "state dimension {state_dim} is not [q, q̇] shaped"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("control period {dt} must be positive")));
        }
        Ok(Trajectory {
            rows,
            state_dim,
            data,
            dt,
        })
    }

    /// Number of stored states, `H + 1`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn horizon(&self) -> usize {
        self.rows - 1
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn joints(&self) -> usize {
        self.state_dim / 2
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.data[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn positions(&self, t: usize) -> &[f64] {
        &self.state(t)[..self.joints()]
    }

    pub fn velocities(&self, t: usize) -> &[f64] {
        &self.state(t)[self.joints()..]
    }

    pub fn same_shape(&self, other: &Trajectory) -> bool {
        self.rows == other.rows && self.state_dim == other.state_dim
    }

    /// Root-mean-square difference per entry.
    pub fn rms_distance(&self, other: &Trajectory) -> f64 {
        let n = self.data.len() as f64;
        let ss: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (ss / n).sqrt()
    }
}

/// Per-state-dimension affine map onto `[-1, 1]`, fitted to the training
/// set's min/max widened by a margin on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    pub const DEFAULT_MARGIN: f64 = 0.05;

    pub fn fit(dataset: &[Trajectory], margin: f64) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::Config("cannot fit a normalizer to an empty dataset".into()))?;
        let d = first.state_dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for traj in dataset {
            if !traj.same_shape(first) {
                return Err(Error::dims(
                    "normalizer fit",
                    &[first.rows(), d],
                    &[traj.rows(), traj.state_dim()],
                ));
            }
            for row in traj.data().chunks(d) {
                for (k, &v) in row.iter().enumerate() {
                    lo[k] = lo[k].min(v);
                    hi[k] = hi[k].max(v);
                }
            }
        }
        for k in 0..d {
            let pad = ((hi[k] - lo[k]) * margin).max(1e-3);
            lo[k] -= pad;
            hi[k] += pad;
        }
        Ok(Normalizer { lo, hi })
    }

    pub fn state_dim(&self) -> usize {
        self.lo.len()
    }

    pub fn scale(&self, k: usize) -> f64 {
        0.5 * (self.hi[k] - self.lo[k])
    }

    pub fn offset(&self, k: usize) -> f64 {
        0.5 * (self.hi[k] + self.lo[k])
    }

    /// Maps flattened physical states into model space.
    pub fn normalize(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.state_dim();
        flat.iter()
            .enumerate()
            .map(|(m, &v)| (v - self.offset(m % d)) / self.scale(m % d))
            .collect()
    }

    pub fn denormalize(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.state_dim();
        flat.iter()
            .enumerate()
            .map(|(m, &v)| v * self.scale(m % d) + self.offset(m % d))
            .collect()
    }

    pub fn encode(&self, traj: &Trajectory) -> Vec<f64> {
        self.normalize(traj.data())
    }

    pub fn decode(&self, flat: &[f64], rows: usize, dt: f64) -> Result<Trajectory> {
        Trajectory::new(rows, self.state_dim(), self.denormalize(flat), dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_finiteness_checked() {
        assert!(Trajectory::new(3, 2, vec![0.0; 5], 0.02).is_err());
        assert!(Trajectory::new(1, 2, vec![0.0, f64::NAN], 0.02).is_err());
        assert!(Trajectory::new(1, 3, vec![0.0; 3], 0.02).is_err());
        let t = Trajectory::new(2, 4, (0..8).map(f64::from).collect(), 0.02).unwrap();
        assert_eq!(t.positions(1), &[4.0, 5.0]);
        assert_eq!(t.velocities(0), &[2.0, 3.0]);
        assert_eq!(t.horizon(), 1);
    }

    #[test]
    fn normalized_training_data_is_inside_unit_box() {
        let a = Trajectory::new(2, 2, vec![0.0, -1.0, 2.0, 3.0], 0.02).unwrap();
        let b = Trajectory::new(2, 2, vec![1.0, 5.0, -2.0, 0.0], 0.02).unwrap();
        let n = Normalizer::fit(&[a.clone(), b], 0.05).unwrap();
        let z = n.encode(&a);
        assert!(z.iter().all(|v| v.abs() < 1.0));
        let back = n.decode(&z, 2, 0.02).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(Normalizer::fit(&[], 0.05).is_err());
    }
}
