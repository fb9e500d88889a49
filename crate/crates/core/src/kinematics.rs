//! Planar serial-arm forward kinematics, in plain `f64` and on the autodiff
//! graph.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub link_lengths: Vec<f64>,
    pub base_position: [f64; 2],
    pub joint_limits: Vec<[f64; 2]>,
    pub velocity_limits: Vec<f64>,
}

impl Default for ArmSpec {
    /// Three-link arm sized like the simulated air-hockey manipulator,
    /// mounted just behind the defended end of the table.
    fn default() -> Self {
        ArmSpec {
            link_lengths: vec![0.55, 0.44, 0.44],
            base_position: [-0.2, 0.0],
            joint_limits: vec![[-2.0, 2.0], [-2.7, 2.7], [-2.7, 2.7]],
            velocity_limits: vec![10.0, 12.0, 12.0],
        }
    }
}

impl ArmSpec {
    pub fn joints(&self) -> usize {
        self.link_lengths.len()
    }

    /// State dimension `d = 2n` (positions then velocities).
    pub fn state_dim(&self) -> usize {
        2 * self.joints()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints();
        if n == 0 {
            return Err(Error::Config("arm needs at least one link".into()));
        }
        if self.joint_limits.len() != n || self.velocity_limits.len() != n {
            return Err(Error::Config(format!(
                "arm has {n} links but {} joint limits and {} velocity limits",
                self.joint_limits.len(),
                self.velocity_limits.len()
            )));
        }
        for (k, &l) in self.link_lengths.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("link {k} has non-positive length {l}")));
            }
        }
        for (k, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!("joint {k} limits [{lo}, {hi}] are empty")));
            }
        }
        for (k, &v) in self.velocity_limits.iter().enumerate() {
            if !(v > 0.0) {
                return Err(Error::Config(format!("joint {k} velocity limit {v} must be positive")));
            }
        }
        Ok(())
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.joints() {
            return Err(Error::dims("forward kinematics", &[q.len()], &[self.joints()]));
        }
        Ok(())
    }

    /// End-effector position for joint angles `q`.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<[f64; 2]> {
        self.check_dim(q)?;
        let [mut x, mut y] = self.base_position;
        let mut theta = 0.0;
        for (qk, lk) in q.iter().zip(&self.link_lengths) {
            theta += qk;
            x += lk * theta.cos();
            y += lk * theta.sin();
        }
        Ok([x, y])
    }

    /// Analytic Jacobian `∂x/∂q`, returned as rows `[∂x/∂q, ∂y/∂q]`.
    pub fn fk_jacobian(&self, q: &[f64]) -> Result<[Vec<f64>; 2]> {
        self.check_dim(q)?;
        let n = self.joints();
        let mut theta = 0.0;
        let mut terms = Vec::with_capacity(n);
        for (qk, lk) in q.iter().zip(&self.link_lengths) {
            theta += qk;
            terms.push((-lk * theta.sin(), lk * theta.cos()));
        }
        let mut jx = vec![0.0; n];
        let mut jy = vec![0.0; n];
        // Joint j moves every link distal to it.
        let (mut sx, mut sy) = (0.0, 0.0);
        for j in (0..n).rev() {
            sx += terms[j].0;
            sy += terms[j].1;
            jx[j] = sx;
            jy[j] = sy;
        }
        Ok([jx, jy])
    }

    /// Batched FK on the graph: `q` is `[B, n]`, result is `([B,1], [B,1])`
    /// for the x and y coordinates.
    pub fn forward_kinematics_graph(&self, g: &Graph, q: Var) -> Result<(Var, Var)> {
        let n = self.joints();
        let shape = g.shape(q);
        if shape.len() != 2 || shape[1] != n {
            return Err(Error::dims("forward kinematics", &shape, &[0, n]));
        }
        // Cumulative joint angles via an upper-triangular ones matrix.
        let mut cum = vec![0.0; n * n];
        for j in 0..n {
            for k in j..n {
                cum[j * n + k] = 1.0;
            }
        }
        let cum = g.constant(Tensor::raw(&[n, n], cum));
        let lengths = g.constant(Tensor::raw(&[n, 1], self.link_lengths.clone()));
        let theta = g.matmul(q, cum)?;
        let x = g.matmul(g.cos(theta), lengths)?;
        let y = g.matmul(g.sin(theta), lengths)?;
        let bx = g.constant(Tensor::scalar(self.base_position[0]));
        let by = g.constant(Tensor::scalar(self.base_position[1]));
        Ok((g.add(x, bx)?, g.add(y, by)?))
    }

    /// Clamps positions into the joint limits and velocities into
    /// `±velocity_limits`.
    pub fn clamp_to_limits(&self, state: &ArmState) -> ArmState {
        let q = state
            .q
            .iter()
            .zip(&self.joint_limits)
            .map(|(&v, [lo, hi])| v.clamp(*lo, *hi))
            .collect();
        let qdot = state
            .qdot
            .iter()
            .zip(&self.velocity_limits)
            .map(|(&v, &lim)| v.clamp(-lim, lim))
            .collect();
        ArmState { q, qdot }
    }

    pub fn within_limits(&self, state: &ArmState, tol: f64) -> bool {
        let q_ok = state
            .q
            .iter()
            .zip(&self.joint_limits)
            .all(|(&v, [lo, hi])| v >= lo - tol && v <= hi + tol);
        let v_ok = state
            .qdot
            .iter()
            .zip(&self.velocity_limits)
            .all(|(&v, &lim)| v.abs() <= lim + tol);
        q_ok && v_ok
    }

    /// Closed-form inverse kinematics for a three-link arm given the
    /// absolute orientation `tool_angle` of the last link. `elbow_up`
    /// selects the sign of the second joint. Returns `None` when the wrist
    /// point is out of reach.
    pub fn inverse_kinematics_3link(
        &self,
        target: [f64; 2],
        tool_angle: f64,
        elbow_up: bool,
    ) -> Option<Vec<f64>> {
        if self.joints() != 3 {
            return None;
        }
        let [l1, l2, l3] = [self.link_lengths[0], self.link_lengths[1], self.link_lengths[2]];
        let wx = target[0] - self.base_position[0] - l3 * tool_angle.cos();
        let wy = target[1] - self.base_position[1] - l3 * tool_angle.sin();
        let r2 = wx * wx + wy * wy;
        let c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
        if !(-1.0..=1.0).contains(&c2) {
            return None;
        }
        let s2 = (1.0 - c2 * c2).sqrt() * if elbow_up { 1.0 } else { -1.0 };
        let q2 = s2.atan2(c2);
        let q1 = wy.atan2(wx) - (l2 * s2).atan2(l1 + l2 * c2);
        let q3 = tool_angle - q1 - q2;
        Some(vec![q1, q2, wrap_angle(q3)])
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl ArmState {
    pub fn new(q: Vec<f64>, qdot: Vec<f64>) -> Result<Self> {
        if q.len() != qdot.len() {
            return Err(Error::dims("arm state", &[q.len()], &[qdot.len()]));
        }
        Ok(ArmState { q, qdot })
    }

    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        ArmState { q, qdot: vec![0.0; n] }
    }
}
