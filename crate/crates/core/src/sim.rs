//! Planar air-hockey "defend" environment.
//!
//! Frame: `x` runs along the table from the defended end (`x = 0`) to the
//! far end (`x = length`), `y` across it with the centre line at `y = 0`.
//! Pucks are launched from the far half towards the defended end.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::StrikeConstraint;
use crate::diffusion::{Model, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::kinematics::{ArmSpec, ArmState};
use crate::sampling::{self, SampleDiagnostics, SamplerConfig, StrikeGuidance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub length: f64,
    pub width: f64,
    pub goal_width: f64,
    pub puck_radius: f64,
    pub mallet_radius: f64,
    /// Fraction of velocity kept per second.
    pub damping: f64,
    pub defend_line_x: f64,
    /// Puck launch speed range (m/s).
    pub speed_range: [f64; 2],
    /// Launch angle magnitude limit relative to the table axis (degrees).
    pub max_angle_deg: f64,
    /// Range of times (s) after launch at which the puck reaches the
    /// defend line, ignoring damping and walls.
    pub arrival_range: [f64; 2],
}

impl Default for TableSpec {
    fn default() -> Self {
        TableSpec {
            length: 2.0,
            width: 1.0,
            goal_width: 0.25,
            puck_radius: 0.03,
            mallet_radius: 0.05,
            damping: 0.99,
            defend_line_x: 0.5,
            speed_range: [1.0, 2.5],
            max_angle_deg: 40.0,
            arrival_range: [0.28, 0.44],
        }
    }
}

impl TableSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.length > 0.0 && self.width > 0.0) {
            return bad("table dimensions must be positive".into());
        }
        if !(self.goal_width > 0.0 && self.goal_width < self.width) {
            return bad(format!("goal width {} must be inside (0, width)", self.goal_width));
        }
        if !(self.puck_radius > 0.0 && self.mallet_radius > 0.0) {
            return bad("puck and mallet radii must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return bad(format!("damping {} must be in [0, 1]", self.damping));
        }
        if !(self.defend_line_x > 0.0 && self.defend_line_x < self.length) {
            return bad(format!("defend line {} is off the table", self.defend_line_x));
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return bad("speed range must be positive and ordered".into());
        }
        if !(self.arrival_range[0] > 0.0 && self.arrival_range[0] <= self.arrival_range[1]) {
            return bad("arrival range must be positive and ordered".into());
        }
        Ok(())
    }

    pub fn contact_distance(&self) -> f64 {
        self.puck_radius + self.mallet_radius
    }

    /// Lateral limit on the puck centre.
    pub fn y_limit(&self) -> f64 {
        0.5 * self.width - self.puck_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuckState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl PuckState {
    pub fn to_array(self) -> [f64; 4] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        PuckState {
            position: [a[0], a[1]],
            velocity: [a[2], a[3]],
        }
    }

    /// One integration step: damping, straight-line motion, then specular
    /// reflection off the side walls.
    pub fn step(self, table: &TableSpec, dt: f64) -> Self {
        let decay = table.damping.powf(dt);
        let mut v = [self.velocity[0] * decay, self.velocity[1] * decay];
        let mut p = [self.position[0] + v[0] * dt, self.position[1] + v[1] * dt];
        let lim = table.y_limit();
        // A single step never crosses the table twice.
        if p[1] > lim {
            p[1] = 2.0 * lim - p[1];
            v[1] = -v[1];
        } else if p[1] < -lim {
            p[1] = -2.0 * lim - p[1];
            v[1] = -v[1];
        }
        PuckState {
            position: p,
            velocity: v,
        }
    }
}

/// Puck positions `b_0 … b_steps` (the initial position first).
pub fn predict_puck(table: &TableSpec, state: PuckState, steps: usize, dt: f64) -> Result<Vec<[f64; 2]>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step {dt} must be positive")));
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = state;
    out.push(s.position);
    for _ in 0..steps {
        s = s.step(table, dt);
        out.push(s.position);
    }
    Ok(out)
}

/// Distance band from the arm base the end-effector can comfortably reach.
pub fn reachable_annulus(arm: &ArmSpec) -> (f64, f64) {
    let l = &arm.link_lengths;
    let inner = (l[0] - l[1..].iter().sum::<f64>()).max(0.0) + 0.25;
    (inner, 0.95 * arm.reach())
}

/// First contiguous run of timesteps where the predicted puck is inside the
/// defend zone (`x ≤ defend_line_x`, on the table) and the reachable
/// annulus. `None` when no timestep qualifies.
pub fn strike_window(table: &TableSpec, arm: &ArmSpec, predicted: &[[f64; 2]]) -> Option<(usize, usize)> {
    let (r_in, r_out) = reachable_annulus(arm);
    let base = arm.base_position;
    let ok = |b: &[f64; 2]| {
        let r = ((b[0] - base[0]).powi(2) + (b[1] - base[1]).powi(2)).sqrt();
        b[0] <= table.defend_line_x && b[0] >= table.puck_radius && r >= r_in && r <= r_out
    };
    let start = predicted.iter().position(ok)?;
    let len = predicted[start..].iter().take_while(|b| ok(b)).count();
    Some((start, start + len - 1))
}

/// Seeded set of launch states shared by every method in an evaluation.
pub fn standard_episodes(table: &TableSpec, n: usize, seed: u64) -> Vec<PuckState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| launch(table, &mut rng)).collect()
}

/// One random launch heading towards the defended end.
pub fn launch<R: Rng>(table: &TableSpec, rng: &mut R) -> PuckState {
    let speed = rng.random_range(table.speed_range[0]..=table.speed_range[1]);
    let angle = rng.random_range(-table.max_angle_deg..=table.max_angle_deg).to_radians();
    let arrival = rng.random_range(table.arrival_range[0]..=table.arrival_range[1]);
    let v = [-speed * angle.cos(), speed * angle.sin()];
    let x = (table.defend_line_x - v[0] * arrival).min(table.length - table.puck_radius);
    let lim = 0.9 * table.y_limit();
    let y = rng.random_range(-lim..=lim);
    PuckState {
        position: [x, y],
        velocity: v,
    }
}

/// Kinematic execution of a plan: the commanded position is tracked
/// exactly when reachable within the joint velocity limits, otherwise the
/// joint moves at its limit towards it. Past the horizon the final state is
/// held.
pub fn tracking_controller(arm: &ArmSpec, plan: &Trajectory, previous: &ArmState, tick: usize) -> ArmState {
    let row = tick.min(plan.horizon());
    let dt = plan.dt;
    let target = arm.clamp_to_limits(&ArmState {
        q: plan.positions(row).to_vec(),
        qdot: if tick > plan.horizon() {
            vec![0.0; arm.joints()]
        } else {
            plan.velocities(row).to_vec()
        },
    });
    if tick == 0 {
        return target;
    }
    let mut q = Vec::with_capacity(arm.joints());
    let mut qdot = Vec::with_capacity(arm.joints());
    for j in 0..arm.joints() {
        let max_step = arm.velocity_limits[j] * dt;
        let delta = target.q[j] - previous.q[j];
        if delta.abs() <= max_step {
            q.push(target.q[j]);
            qdot.push(target.qdot[j]);
        } else {
            q.push(previous.q[j] + max_step.copysign(delta));
            qdot.push(arm.velocity_limits[j].copysign(delta));
        }
    }
    arm.clamp_to_limits(&ArmState { q, qdot })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTick {
    pub tick: usize,
    pub puck: PuckState,
    pub arm: ArmState,
    pub end_effector: [f64; 2],
    /// Largest joint-position gap between the executed and planned state.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub blocked: bool,
    /// Whether a strike window existed; infeasible episodes are planned
    /// unconstrained and excluded from the block rate.
    pub feasible: bool,
    pub contact_time: Option<f64>,
    pub min_distance: f64,
    pub plan_latency_ms: f64,
    pub diagnostics: Option<SampleDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<TraceTick>,
}

impl EpisodeResult {
    /// Copy with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.plan_latency_ms = 0.0;
        if let Some(d) = r.diagnostics.as_mut() {
            d.ms_per_step = 0.0;
        }
        r
    }

    /// Writes the trace as JSON lines, one tick per line.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        for tick in &self.trace {
            serde_json::to_writer(&mut w, tick)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// What an episode needs from a policy: one plan from the initial puck
/// observation.
pub trait Planner {
    fn plan(&self, request: &PlanRequest<'_>) -> Result<Plan>;
}

pub struct PlanRequest<'a> {
    pub table: &'a TableSpec,
    pub arm: &'a ArmSpec,
    pub puck: PuckState,
    pub predicted: &'a [[f64; 2]],
    pub constraint: Option<&'a StrikeConstraint>,
    pub seed: u64,
}

pub struct Plan {
    pub trajectory: Trajectory,
    pub diagnostics: Option<SampleDiagnostics>,
}

/// Samples a plan from a trained model with the configured method.
pub struct DiffusionPlanner<'a> {
    pub model: &'a Model,
    pub schedule: &'a NoiseSchedule,
    pub config: SamplerConfig,
    pub condition: sampling::Condition,
}

impl Planner for DiffusionPlanner<'_> {
    fn plan(&self, req: &PlanRequest<'_>) -> Result<Plan> {
        let mut config = self.config.clone();
        config.seed = req.seed;
        let guidance = req.constraint.map(|c| StrikeGuidance {
            constraint: c,
            arm: req.arm,
            normalizer: &self.model.normalizer,
            rows: self.model.rows,
            dt: self.model.dt,
        });
        if guidance.is_none() {
            config.method = sampling::Method::Unconstrained;
        }
        let cost = guidance.as_ref().map(|g| g as &dyn sampling::GuidanceCost);
        let outcome = sampling::sample_batch(&self.model.network, self.schedule, &config, self.condition, cost)?;
        Ok(Plan {
            trajectory: self.model.decode(outcome.best())?,
            diagnostics: Some(outcome.diagnostics),
        })
    }
}

/// Holds a fixed configuration for the whole episode.
pub struct HoldPlanner {
    pub q: Vec<f64>,
    pub rows: usize,
    pub dt: f64,
}

impl Planner for HoldPlanner {
    fn plan(&self, _req: &PlanRequest<'_>) -> Result<Plan> {
        let n = self.q.len();
        let mut data = Vec::with_capacity(self.rows * 2 * n);
        for _ in 0..self.rows {
            data.extend_from_slice(&self.q);
            data.extend(std::iter::repeat_n(0.0, n));
        }
        Ok(Plan {
            trajectory: Trajectory::new(self.rows, 2 * n, data, self.dt)?,
            diagnostics: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeOptions {
    pub horizon: usize,
    pub dt: f64,
    /// Ticks simulated at most; the episode also ends once the puck reaches
    /// the defended end.
    pub max_ticks: usize,
    pub constraint_weight: f64,
    pub record_trace: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            horizon: 31,
            dt: 0.02,
            max_ticks: 80,
            constraint_weight: 1.0,
            record_trace: false,
        }
    }
}

/// Derives the per-episode planner seed.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Plans once from the initial observation, then executes the plan while
/// integrating the puck, recording the first contact.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    table: &TableSpec,
    arm: &ArmSpec,
    planner: &dyn Planner,
    puck: PuckState,
    options: &EpisodeOptions,
    index: usize,
    seed: u64,
) -> Result<EpisodeResult> {
    if !(puck.velocity[0] < 0.0) {
        return Err(Error::Config("the puck must be moving towards the defended end".into()));
    }
    let predicted = predict_puck(table, puck, options.horizon, options.dt)?;
    let window = strike_window(table, arm, &predicted);
    let constraint = window
        .map(|w| StrikeConstraint::from_prediction(&predicted, w, options.constraint_weight))
        .transpose()?;

    let start = Instant::now();
    let plan = planner.plan(&PlanRequest {
        table,
        arm,
        puck,
        predicted: &predicted,
        constraint: constraint.as_ref(),
        seed,
    })?;
    let plan_latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut result = execute_plan(table, arm, &plan.trajectory, puck, options)?;
    result.index = index;
    result.feasible = window.is_some();
    result.plan_latency_ms = plan_latency_ms;
    result.diagnostics = plan.diagnostics;
    Ok(result)
}

/// Executes a fixed plan against a launched puck.
pub fn execute_plan(
    table: &TableSpec,
    arm: &ArmSpec,
    plan: &Trajectory,
    puck: PuckState,
    options: &EpisodeOptions,
) -> Result<EpisodeResult> {
    if plan.joints() != arm.joints() {
        return Err(Error::dims("plan", &[plan.joints()], &[arm.joints()]));
    }
    let contact = table.contact_distance();
    let mut state = tracking_controller(arm, plan, &ArmState::at_rest(vec![0.0; arm.joints()]), 0);
    let mut puck = puck;
    let mut min_distance = f64::INFINITY;
    let mut contact_time = None;
    let mut trace = Vec::new();

    for tick in 0..=options.max_ticks {
        if tick > 0 {
            state = tracking_controller(arm, plan, &state, tick);
            puck = puck.step(table, plan.dt);
        }
        let ee = arm.forward_kinematics(&state.q)?;
        let dist = ((ee[0] - puck.position[0]).powi(2) + (ee[1] - puck.position[1]).powi(2)).sqrt();
        min_distance = min_distance.min(dist);
        if options.record_trace {
            let planned = plan.positions(tick.min(plan.horizon()));
            let divergence = planned
                .iter()
                .zip(&state.q)
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            trace.push(TraceTick {
                tick,
                puck,
                arm: state.clone(),
                end_effector: ee,
                divergence,
            });
        }
        if dist <= contact {
            contact_time = Some(tick as f64 * plan.dt);
            break;
        }
        if puck.position[0] <= table.puck_radius {
            break;
        }
    }
    Ok(EpisodeResult {
        index: 0,
        blocked: contact_time.is_some(),
        feasible: true,
        contact_time,
        min_distance,
        plan_latency_ms: 0.0,
        diagnostics: None,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub feasible: usize,
    pub blocked: usize,
    pub block_rate: f64,
    /// Median planner step time over episodes, excluding the first.
    pub median_ms_per_step: f64,
    pub mean_cost: f64,
}

/// Runs every launch in `episodes` with the same planner and aggregates
/// the block rate over feasible episodes.
pub fn run_eval(
    table: &TableSpec,
    arm: &ArmSpec,
    planner: &dyn Planner,
    episodes: &[PuckState],
    options: &EpisodeOptions,
    seed: u64,
) -> Result<(EvalSummary, Vec<EpisodeResult>)> {
    if episodes.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let results = episodes
        .iter()
        .enumerate()
        .map(|(k, &puck)| run_episode(table, arm, planner, puck, options, k, episode_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize(&results), results))
}

pub fn summarize(results: &[EpisodeResult]) -> EvalSummary {
    let feasible = results.iter().filter(|r| r.feasible).count();
    let blocked = results.iter().filter(|r| r.feasible && r.blocked).count();
    let mut times: Vec<f64> = results
        .iter()
        .skip(1)
        .filter_map(|r| r.diagnostics.as_ref().map(|d| d.ms_per_step))
        .collect();
    times.sort_by(f64::total_cmp);
    let median = if times.is_empty() {
        0.0
    } else if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    let costs: Vec<f64> = results
        .iter()
        .filter_map(|r| r.diagnostics.as_ref().and_then(|d| d.costs.get(d.chosen).copied()))
        .collect();
    let mean_cost = if costs.is_empty() {
        0.0
    } else {
        costs.iter().sum::<f64>() / costs.len() as f64
    };
    EvalSummary {
        episodes: results.len(),
        feasible,
        blocked,
        block_rate: if feasible == 0 { 0.0 } else { blocked as f64 / feasible as f64 },
        median_ms_per_step: median,
        mean_cost,
    }
}
