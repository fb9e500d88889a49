//! Scripted-expert demonstrations in two stroke styles, and the dataset
//! file that stores them.
//!
//! The expert intercepts the predicted puck where it crosses the defend
//! line: a minimum-jerk joint-space move from the home pose to the
//! intercept configuration, a short hold while the puck arrives, then a
//! retreat along the puck's path. The two styles reach the same points with
//! opposite elbow configurations.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::checkpoint::{read_f64s, read_header};
use crate::diffusion::Trajectory;
use crate::error::{Error, Result};
use crate::kinematics::{wrap_angle, ArmSpec, ArmState};
use crate::sim::{self, EpisodeOptions, PuckState, TableSpec};

pub const DATASET_MAGIC: &[u8; 8] = b"KCGGDAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    SweepLow,
    SweepHigh,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::SweepLow, Style::SweepHigh];

    pub fn name(self) -> &'static str {
        match self {
            Style::SweepLow => "sweep_low",
            Style::SweepHigh => "sweep_high",
        }
    }

    pub fn label(self) -> u16 {
        self as u16
    }

    pub fn from_label(label: u16) -> Result<Self> {
        Style::ALL
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::UnknownCondition(format!("style label {label}")))
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    pub fn vocabulary() -> Vec<String> {
        Style::ALL.iter().map(|s| s.name().to_string()).collect()
    }

    fn elbow_up(self) -> bool {
        self == Style::SweepHigh
    }
}

/// Elbow-angle sign at mid-horizon: the feature that separates the styles.
pub fn classify_style(traj: &Trajectory) -> Style {
    let mid = traj.rows() / 2;
    if traj.positions(mid)[1] > 0.0 {
        Style::SweepHigh
    } else {
        Style::SweepLow
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertParams {
    /// End-effector rest point the strokes start from.
    pub home: [f64; 2],
    /// Distance from the arm base at which the IK places the wrist.
    pub wrist_radius: f64,
    /// Ticks the expert arrives ahead of the puck (drawn per demo).
    pub lead_ticks: [usize; 2],
    /// Ticks held at the intercept after the puck's crossing tick.
    pub hold_ticks: usize,
    /// How far the retreat follows the puck's path (m).
    pub retreat_distance: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            home: [-0.08, -0.35],
            wrist_radius: 0.6,
            lead_ticks: [2, 4],
            hold_ticks: 3,
            retreat_distance: 0.12,
        }
    }
}

impl ExpertParams {
    /// Joint configuration reaching `target` in the given style.
    pub fn solve(&self, arm: &ArmSpec, target: [f64; 2], style: Style) -> Option<Vec<f64>> {
        let base = arm.base_position;
        let (dx, dy) = (target[0] - base[0], target[1] - base[1]);
        let r = dx.hypot(dy);
        let l3 = *arm.link_lengths.last()?;
        let rw = self.wrist_radius;
        let cos_gamma = (r * r + rw * rw - l3 * l3) / (2.0 * r * rw);
        if !(-1.0..=1.0).contains(&cos_gamma) {
            return None;
        }
        let side = if style.elbow_up() { -1.0 } else { 1.0 };
        let psi = dy.atan2(dx) + side * cos_gamma.acos();
        let wrist = [base[0] + rw * psi.cos(), base[1] + rw * psi.sin()];
        let tool = (target[1] - wrist[1]).atan2(target[0] - wrist[0]);
        let mut q = arm.inverse_kinematics_3link(target, tool, style.elbow_up())?;
        q[0] = wrap_angle(q[0]);
        let inside = q
            .iter()
            .zip(&arm.joint_limits)
            .all(|(v, [lo, hi])| v >= lo && v <= hi);
        inside.then_some(q)
    }

    /// Home pose; the high style rests mirrored across the table axis.
    pub fn home_configuration(&self, arm: &ArmSpec, style: Style) -> Option<Vec<f64>> {
        let [x, y] = self.home;
        let y = match style {
            Style::SweepLow => y,
            Style::SweepHigh => 2.0 * arm.base_position[1] - y,
        };
        self.solve(arm, [x, y], style)
    }
}

/// Why the expert declined an episode.
#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    NoCrossing,
    TooEarly,
    Unreachable,
    LimitViolation,
    ReplayMissed,
}

/// Appends a minimum-jerk segment from `q0` to `q1` over `ticks` control
/// periods, writing rows `1..=ticks` of the segment.
fn min_jerk(rows: &mut Vec<Vec<f64>>, q0: &[f64], q1: &[f64], ticks: usize, dt: f64) {
    let duration = ticks as f64 * dt;
    for k in 1..=ticks {
        let s = k as f64 / ticks as f64;
        let pos = 10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5);
        let vel = (30.0 * s.powi(2) - 60.0 * s.powi(3) + 30.0 * s.powi(4)) / duration;
        let mut row: Vec<f64> = q0.iter().zip(q1).map(|(a, b)| a + (b - a) * pos).collect();
        row.extend(q0.iter().zip(q1).map(|(a, b)| (b - a) * vel));
        rows.push(row);
    }
}

fn hold(rows: &mut Vec<Vec<f64>>, q: &[f64], ticks: usize) {
    for _ in 0..ticks {
        let mut row = q.to_vec();
        row.extend(std::iter::repeat_n(0.0, q.len()));
        rows.push(row);
    }
}

/// Builds one demonstration, or explains why the episode was rejected.
pub fn scripted_expert(
    table: &TableSpec,
    arm: &ArmSpec,
    params: &ExpertParams,
    puck: PuckState,
    style: Style,
    options: &EpisodeOptions,
    seed: u64,
) -> std::result::Result<Trajectory, Rejection> {
    let h = options.horizon;
    let dt = options.dt;
    let predicted = sim::predict_puck(table, puck, h, dt).map_err(|_| Rejection::NoCrossing)?;
    let crossing = predicted
        .iter()
        .position(|b| b[0] <= table.defend_line_x)
        .ok_or(Rejection::NoCrossing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lead = rng.random_range(params.lead_ticks[0]..=params.lead_ticks[1]);
    let arrive = crossing.checked_sub(lead).filter(|&t| t >= 4).ok_or(Rejection::TooEarly)?;
    let release = (crossing + params.hold_ticks).min(h);

    let intercept = predicted[crossing];
    let speed = puck.velocity[0].hypot(puck.velocity[1]);
    let dir = [puck.velocity[0] / speed, puck.velocity[1] / speed];
    let retreat = [
        intercept[0] + params.retreat_distance * dir[0],
        intercept[1] + params.retreat_distance * dir[1],
    ];
    let q_home = params.home_configuration(arm, style).ok_or(Rejection::Unreachable)?;
    let q_hit = params.solve(arm, intercept, style).ok_or(Rejection::Unreachable)?;
    let q_ret = params.solve(arm, retreat, style).ok_or(Rejection::Unreachable)?;

    let mut rows = Vec::with_capacity(h + 1);
    hold(&mut rows, &q_home, 1);
    min_jerk(&mut rows, &q_home, &q_hit, arrive, dt);
    hold(&mut rows, &q_hit, release - arrive);
    if release < h {
        min_jerk(&mut rows, &q_hit, &q_ret, h - release, dt);
    }
    debug_assert_eq!(rows.len(), h + 1);

    for row in &rows {
        let n = arm.joints();
        let state = ArmState {
            q: row[..n].to_vec(),
            qdot: row[n..].to_vec(),
        };
        if !arm.within_limits(&state, 1e-9) {
            return Err(Rejection::LimitViolation);
        }
    }
    let traj = Trajectory::new(h + 1, arm.state_dim(), rows.concat(), dt).map_err(|_| Rejection::Unreachable)?;
    let replay = sim::execute_plan(table, arm, &traj, puck, options).map_err(|_| Rejection::ReplayMissed)?;
    if !replay.blocked {
        return Err(Rejection::ReplayMissed);
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub trajectory: Trajectory,
    pub style: Style,
    pub puck: PuckState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub arm: ArmSpec,
    pub table: TableSpec,
    pub horizon: usize,
    pub dt: f64,
    pub demos: Vec<Demo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    arm: ArmSpec,
    table: TableSpec,
    horizon: usize,
    dt: f64,
    styles: Vec<String>,
    counts: Vec<usize>,
}

impl DemoSet {
    pub fn counts(&self) -> Vec<usize> {
        Style::ALL
            .iter()
            .map(|s| self.demos.iter().filter(|d| d.style == *s).count())
            .collect()
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        self.demos.iter().map(|d| d.trajectory.clone()).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            arm: self.arm.clone(),
            table: self.table.clone(),
            horizon: self.horizon,
            dt: self.dt,
            styles: Style::vocabulary(),
            counts: self.counts(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for demo in &self.demos {
            buf.clear();
            buf.extend_from_slice(&demo.style.label().to_le_bytes());
            for v in demo.trajectory.data().iter().chain(&demo.puck.to_array()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a demonstration dataset (bad magic)".into()));
        }
        let header: DatasetHeader = serde_json::from_slice(&read_header(&mut r)?)?;
        if header.styles != Style::vocabulary() {
            return Err(Error::Format(format!("unexpected style vocabulary {:?}", header.styles)));
        }
        header.arm.validate()?;
        let rows = header.horizon + 1;
        let d = header.arm.state_dim();
        let total: usize = header.counts.iter().sum();
        let mut demos = Vec::with_capacity(total);
        for _ in 0..total {
            let mut label = [0u8; 2];
            r.read_exact(&mut label)
                .map_err(|_| Error::Format("dataset truncated".into()))?;
            let style = Style::from_label(u16::from_le_bytes(label))?;
            let traj = Trajectory::new(rows, d, read_f64s(&mut r, rows * d)?, header.dt)?;
            let puck = read_f64s(&mut r, 4)?;
            demos.push(Demo {
                trajectory: traj,
                style,
                puck: PuckState::from_array([puck[0], puck[1], puck[2], puck[3]]),
            });
        }
        let set = DemoSet {
            arm: header.arm,
            table: header.table,
            horizon: header.horizon,
            dt: header.dt,
            demos,
        };
        if set.counts() != header.counts {
            return Err(Error::Format("style counts disagree with header".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

/// Generation statistics alongside the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationStats {
    pub attempts: usize,
    pub rejected: usize,
}

/// `n_per_style` demos per style over seeded random launches. Aborts when
/// more than half of all attempts are rejected.
pub fn generate_dataset(
    table: &TableSpec,
    arm: &ArmSpec,
    params: &ExpertParams,
    options: &EpisodeOptions,
    n_per_style: usize,
    seed: u64,
) -> Result<(DemoSet, GenerationStats)> {
    if n_per_style == 0 {
        return Err(Error::Config("need at least one demo per style".into()));
    }
    table.validate()?;
    arm.validate()?;
    let mut stats = GenerationStats::default();
    let mut demos = Vec::with_capacity(2 * n_per_style);
    for style in Style::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(style.label() as u64);
        let mut accepted = 0;
        while accepted < n_per_style {
            stats.attempts += 1;
            let puck = sim::launch(table, &mut rng);
            let expert_seed = rng.random();
            match scripted_expert(table, arm, params, puck, style, options, expert_seed) {
                Ok(trajectory) => {
                    demos.push(Demo {
                        trajectory,
                        style,
                        puck,
                    });
                    accepted += 1;
                }
                Err(why) => {
                    stats.rejected += 1;
                    log::debug!("{} rejected launch {puck:?}: {why:?}", style.name());
                }
            }
            if stats.attempts >= 20 && 2 * stats.rejected > stats.attempts {
                return Err(Error::Config(format!(
                    "expert rejected {} of {} launches; the launch distribution does not suit the arm",
                    stats.rejected, stats.attempts
                )));
            }
        }
    }
    Ok((
        DemoSet {
            arm: arm.clone(),
            table: table.clone(),
            horizon: options.horizon,
            dt: options.dt,
            demos,
        },
        stats,
    ))
}
