//! Kinematic strike cost: squared distance between the end-effector and
//! the predicted object position, minimized over a feasible window.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::Trajectory;
use crate::error::{Error, Result};
use crate::kinematics::ArmSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeConstraint {
    window: (usize, usize),
    /// `targets[k]` is the object position at timestep `window.0 + k`.
    targets: Vec<[f64; 2]>,
    pub weight: f64,
}

impl StrikeConstraint {
    pub fn new(window: (usize, usize), targets: Vec<[f64; 2]>, weight: f64) -> Result<Self> {
        let (ts, te) = window;
        if ts > te {
            return Err(Error::Config(format!("strike window [{ts}, {te}] is reversed")));
        }
        if targets.len() != te - ts + 1 {
            return Err(Error::Config(format!(
                "strike window [{ts}, {te}] needs {} targets, got {}",
                te - ts + 1,
                targets.len()
            )));
        }
        if !(weight >= 0.0) {
            return Err(Error::Config(format!("constraint weight {weight} must be non-negative")));
        }
        Ok(StrikeConstraint {
            window,
            targets,
            weight,
        })
    }

    /// Builds the window from a full per-timestep prediction `b_0..b_H`.
    pub fn from_prediction(predicted: &[[f64; 2]], window: (usize, usize), weight: f64) -> Result<Self> {
        if window.1 >= predicted.len() {
            return Err(Error::OutOfRange {
                index: window.1,
                limit: predicted.len(),
            });
        }
        Self::new(window, predicted[window.0..=window.1].to_vec(), weight)
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn target(&self, t: usize) -> Option<[f64; 2]> {
        t.checked_sub(self.window.0).and_then(|k| self.targets.get(k)).copied()
    }

    fn check_horizon(&self, rows: usize) -> Result<()> {
        if self.window.1 >= rows {
            return Err(Error::OutOfRange {
                index: self.window.1,
                limit: rows,
            });
        }
        Ok(())
    }

    /// Unweighted squared distance per window timestep.
    fn distances(&self, arm: &ArmSpec, positions_at: impl Fn(usize) -> Vec<f64>) -> Result<Vec<f64>> {
        (self.window.0..=self.window.1)
            .zip(&self.targets)
            .map(|(t, b)| {
                let p = arm.forward_kinematics(&positions_at(t))?;
                Ok((p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2))
            })
            .collect()
    }

    /// Minimizing timestep; ties go to the earliest.
    fn argmin(dist: &[f64]) -> usize {
        let mut best = 0;
        for (k, &v) in dist.iter().enumerate() {
            if v < dist[best] {
                best = k;
            }
        }
        best
    }

    /// `λ · min_t ‖F(q_t) - b_t‖²` and the minimizing timestep.
    pub fn evaluate(&self, arm: &ArmSpec, traj: &Trajectory) -> Result<(f64, usize)> {
        self.check_horizon(traj.rows())?;
        let dist = self.distances(arm, |t| traj.positions(t).to_vec())?;
        let k = Self::argmin(&dist);
        Ok((self.weight * dist[k], self.window.0 + k))
    }

    /// Cost without building a graph.
    pub fn cost_forward(&self, arm: &ArmSpec, traj: &Trajectory) -> Result<f64> {
        self.evaluate(arm, traj).map(|(c, _)| c)
    }

    /// Differentiable cost summed over a batch `tau: [B, rows·d]` of
    /// physical-unit trajectories. The argmin timestep is chosen from the
    /// forward values; gradient flows through FK at that timestep only.
    pub fn cost(&self, g: &Graph, arm: &ArmSpec, tau: Var, rows: usize) -> Result<Var> {
        self.check_horizon(rows)?;
        let shape = g.shape(tau);
        let n = arm.joints();
        let d = 2 * n;
        if shape.len() != 2 || shape[1] != rows * d {
            return Err(Error::dims("strike cost input", &shape, &[0, rows * d]));
        }
        let batch = shape[0];
        let values = g.value(tau);
        let width = rows * d;

        let mut picks = Vec::with_capacity(batch * n);
        let mut bx = Vec::with_capacity(batch);
        let mut by = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &values.data()[b * width..(b + 1) * width];
            let dist = self.distances(arm, |t| row[t * d..t * d + n].to_vec())?;
            let t = self.window.0 + Self::argmin(&dist);
            picks.extend((0..n).map(|j| b * width + t * d + j));
            let target = self.targets[t - self.window.0];
            bx.push(target[0]);
            by.push(target[1]);
        }
        let q = g.gather(tau, picks, &[batch, n])?;
        let (x, y) = arm.forward_kinematics_graph(g, q)?;
        let dx = g.sub(x, g.constant(Tensor::raw(&[batch, 1], bx)))?;
        let dy = g.sub(y, g.constant(Tensor::raw(&[batch, 1], by)))?;
        let sq = g.add(g.mul(dx, dx)?, g.mul(dy, dy)?)?;
        Ok(g.scale(g.sum(sq), self.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn two_link() -> ArmSpec {
        ArmSpec {
            link_lengths: vec![1.0, 1.0],
            base_position: [0.0, 0.0],
            joint_limits: vec![[-PI, PI]; 2],
            velocity_limits: vec![3.0; 2],
        }
    }

    fn traj(qs: &[[f64; 2]]) -> Trajectory {
        let data = qs.iter().flat_map(|q| [q[0], q[1], 0.0, 0.0]).collect();
        Trajectory::new(qs.len(), 4, data, 0.02).unwrap()
    }

    #[test]
    fn single_step_window_distance() {
        let c = StrikeConstraint::new((0, 0), vec![[3.0, 0.0]], 2.5).unwrap();
        let cost = c.cost_forward(&two_link(), &traj(&[[0.0, 0.0]])).unwrap();
        assert!((cost - 2.5).abs() < 1e-15);
    }

    #[test]
    fn exact_intersection_costs_nothing() {
        let c = StrikeConstraint::new((1, 2), vec![[5.0, 5.0], [1.0, 1.0]], 1.0).unwrap();
        let t = traj(&[[0.0, 0.0], [0.3, 0.2], [0.0, PI / 2.0]]);
        let (cost, at) = c.evaluate(&two_link(), &t).unwrap();
        assert!(cost < 1e-24);
        assert_eq!(at, 2);
    }

    #[test]
    fn ties_pick_earliest() {
        let c = StrikeConstraint::new((0, 2), vec![[3.0, 0.0]; 3], 1.0).unwrap();
        let t = traj(&[[0.0, 0.0]; 3]);
        assert_eq!(c.evaluate(&two_link(), &t).unwrap().1, 0);
    }

    #[test]
    fn window_past_horizon_is_an_error() {
        let c = StrikeConstraint::new((0, 3), vec![[0.0, 0.0]; 4], 1.0).unwrap();
        assert!(c.cost_forward(&two_link(), &traj(&[[0.0, 0.0]; 2])).is_err());
        assert!(StrikeConstraint::new((2, 1), vec![], 1.0).is_err());
        assert!(StrikeConstraint::new((0, 1), vec![[0.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn doubling_weight_doubles_cost() {
        let t = traj(&[[0.1, 0.2], [0.4, -0.3]]);
        let a = StrikeConstraint::new((0, 1), vec![[1.0, 1.0], [0.5, 0.2]], 1.0).unwrap();
        let b = StrikeConstraint::new((0, 1), vec![[1.0, 1.0], [0.5, 0.2]], 2.0).unwrap();
        let (ca, cb) = (a.cost_forward(&two_link(), &t).unwrap(), b.cost_forward(&two_link(), &t).unwrap());
        assert!((cb - 2.0 * ca).abs() < 1e-15);
    }
}
