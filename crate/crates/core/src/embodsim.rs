//! Kinematic toss-and-catch world shared by the expert and learner arms.
//!
//! Both arms are planar chains in the x-z plane rooted at the origin. A task
//! is fixed by the start position of the end effector: the arm carries the
//! ball to a release point, opens the hand, the ball flies ballistically and
//! the arm moves to meet it where it has dropped a fixed distance below the
//! release height, closing the hand there.

use std::sync::Arc;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use netcore::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajdata::{EmbodimentSpec, Trajectory, DEFAULT_STEPS};

pub const EXPERT_NAME: &str = "expert";
pub const LEARNER_NAME: &str = "learner";

/// Hand value above which the hand counts as closed.
pub const HAND_THRESHOLD: f64 = 0.5;
/// Per-step increase that counts as "closing".
pub const CLOSING_RATE: f64 = 0.05;
/// Steps either side of the closest approach searched for closing.
pub const CLOSING_SLACK: usize = 3;
/// Catch window height band (m).
pub const CATCH_BAND: (f64, f64) = (0.1, 1.5);

/// Release happens this long after the start (s).
pub const RELEASE_TIME: f64 = 0.24;
/// Vertical lift from start to release point (m).
pub const RELEASE_LIFT: f64 = 0.22;
/// Horizontal pull-back from start to release point (m).
pub const RELEASE_PULL: f64 = 0.05;
/// The ball is met this far below its release height (m).
pub const CATCH_DROP: f64 = 0.10;
/// Start positions are drawn uniformly from this box (x range, z range).
pub const START_BOX: ((f64, f64), (f64, f64)) = ((0.45, 0.65), (0.10, 0.30));

const FINGER_LENGTH: f64 = 0.04;
const FINGER_SPREAD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub gravity: f64,
    pub dt: f64,
    pub obs_noise_std: f64,
    pub catch_radius: f64,
    /// Trajectory length `T`.
    pub steps: usize,
    /// Acceleration noise std of the ball filter (m/s^2).
    pub process_noise_std: f64,
    pub expert_links: Vec<f64>,
    pub learner_links: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            gravity: 9.81,
            dt: 0.02,
            obs_noise_std: 0.05,
            catch_radius: 0.08,
            steps: DEFAULT_STEPS,
            process_noise_std: 0.2,
            expert_links: vec![0.32, 0.26, 0.18, 0.12, 0.07],
            learner_links: vec![0.22, 0.19, 0.16, 0.13, 0.11, 0.09, 0.06],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("sim config: {m}")));
        if !(self.gravity > 0.0) {
            return bad("gravity must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.catch_radius > 0.0) {
            return bad("catch_radius must be positive");
        }
        if !(self.obs_noise_std >= 0.0) || !(self.process_noise_std >= 0.0) {
            return bad("noise std must be non-negative");
        }
        if self.steps < 2 {
            return bad("steps must be at least 2");
        }
        if self.expert_links.len() < 2 || self.learner_links.len() < 2 {
            return bad("each arm needs at least 2 links");
        }
        if self.expert_links.iter().chain(&self.learner_links).any(|l| !(*l > 0.0)) {
            return bad("link lengths must be positive");
        }
        Ok(())
    }

    /// 31-channel expert layout for 5 links: joints, two fingers, ball,
    /// then x/y/z markers for joints 2..5, the wrist and two fingertips.
    pub fn expert_spec(&self) -> EmbodimentSpec {
        let n = self.expert_links.len();
        let mut labels: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        labels.extend(["finger_a", "finger_b", "ball_x", "ball_y", "ball_z"].map(String::from));
        let markers = (1..=n).map(|i| format!("p{i}")).chain(["tipa".to_string(), "tipb".to_string()]);
        for m in markers {
            for axis in ["x", "y", "z"] {
                labels.push(format!("{m}_{axis}"));
            }
        }
        arm_spec(EXPERT_NAME, &self.expert_links, labels, -1.2)
    }

    /// 12-channel learner layout for 7 links: joints, two synergies, ball.
    pub fn learner_spec(&self) -> EmbodimentSpec {
        let n = self.learner_links.len();
        let mut labels: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        labels.extend(["synergy_1", "synergy_2", "ball_x", "ball_y", "ball_z"].map(String::from));
        arm_spec(LEARNER_NAME, &self.learner_links, labels, -0.85)
    }

    pub fn ball_at(&self, initial: &BallState, t: f64) -> BallState {
        ballistic(initial, t, self.gravity)
    }
}

fn arm_spec(name: &str, links: &[f64], labels: Vec<String>, curl_min: f64) -> EmbodimentSpec {
    let mut limits = vec![(-0.6, 3.1)];
    limits.extend(std::iter::repeat_n((curl_min, 0.3), links.len() - 1));
    EmbodimentSpec {
        name: name.to_string(),
        state_dim: labels.len(),
        joint_count: links.len(),
        joint_limits: limits,
        channel_labels: labels,
        link_lengths: links.to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatchOutcome {
    pub success: bool,
    /// Closest end-effector to ball distance in the catch window; infinite
    /// when the window is empty.
    #[serde(with = "nonfinite")]
    pub miss_distance: f64,
    #[serde(with = "nonfinite")]
    pub release_time: f64,
    #[serde(with = "nonfinite")]
    pub catch_time: f64,
}

/// Stores non-finite floats as the strings `inf`, `-inf` and `nan`.
mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string().to_lowercase())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl CatchOutcome {
    fn failed(release_time: f64) -> Self {
        CatchOutcome {
            success: false,
            miss_distance: f64::INFINITY,
            release_time,
            catch_time: f64::NAN,
        }
    }
}

fn ballistic(b: &BallState, t: f64, g: f64) -> BallState {
    let p = b.position;
    let v = b.velocity;
    BallState {
        position: [p[0] + v[0] * t, p[1] + v[1] * t, p[2] + v[2] * t - 0.5 * g * t * t],
        velocity: [v[0], v[1], v[2] - g * t],
    }
}

/// Closed-form projectile sampled at `0, dt, ..., floor(duration/dt)*dt`.
pub fn simulate_ball(initial: &BallState, duration: f64, config: &SimConfig) -> Result<Vec<BallState>> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Invalid(format!("duration {duration} must be positive")));
    }
    if initial.position.iter().chain(&initial.velocity).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("ball state must be finite".into()));
    }
    let n = (duration / config.dt + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| ballistic(initial, k as f64 * config.dt, config.gravity)).collect())
}

/// Positions of every link end in the x-z plane (`[x, z]`), the last being
/// the end effector, plus the cumulative angle of the final link.
pub fn link_positions(links: &[f64], angles: &[f64]) -> (Vec<[f64; 2]>, f64) {
    let mut phi = 0.0;
    let mut p = [0.0, 0.0];
    let mut out = Vec::with_capacity(links.len());
    for (l, a) in links.iter().zip(angles) {
        phi += a;
        p = [p[0] + l * phi.cos(), p[1] + l * phi.sin()];
        out.push(p);
    }
    (out, phi)
}

/// End-effector position `(x, 0, z)`.
pub fn forward_kinematics(spec: &EmbodimentSpec, joint_angles: &[f64]) -> Result<[f64; 3]> {
    if joint_angles.len() != spec.joint_count {
        return Err(Error::Dimension(format!(
            "{} joint angles for `{}` with {} joints",
            joint_angles.len(),
            spec.name,
            spec.joint_count
        )));
    }
    if joint_angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::Invalid("joint angles must be finite".into()));
    }
    let (pos, _) = link_positions(&spec.link_lengths, joint_angles);
    let ee = pos[pos.len() - 1];
    Ok([ee[0], 0.0, ee[1]])
}

/// End effector of the chain with zero base angle and equal relative angle
/// `curl` on every other joint.
fn arc_tip(links: &[f64], curl: f64) -> [f64; 2] {
    let mut p = [0.0, 0.0];
    for (i, l) in links.iter().enumerate() {
        let phi = i as f64 * curl;
        p = [p[0] + l * phi.cos(), p[1] + l * phi.sin()];
    }
    p
}

fn norm2(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

/// Lower bound of the curl search; the relative-joint lower limit.
fn curl_min(spec: &EmbodimentSpec) -> f64 {
    spec.joint_limits[1].0
}

/// Reachable distance band `(min, max)` of the arc parametrisation.
pub fn reach_band(spec: &EmbodimentSpec) -> (f64, f64) {
    let links = &spec.link_lengths;
    (norm2(arc_tip(links, curl_min(spec))), norm2(arc_tip(links, 0.0)))
}

/// Deterministic elbow-up inverse kinematics: base angle plus one shared
/// curl angle on every other joint, solved by bisection on reach distance.
/// `None` when the target lies outside the reach band.
pub fn arc_ik(spec: &EmbodimentSpec, target: [f64; 2]) -> Option<Vec<f64>> {
    let links = &spec.link_lengths;
    let d = norm2(target);
    let (dmin, dmax) = reach_band(spec);
    if !(d >= dmin && d <= dmax) {
        return None;
    }
    let (mut lo, mut hi) = (curl_min(spec), 0.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if norm2(arc_tip(links, mid)) < d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let curl = 0.5 * (lo + hi);
    let tip = arc_tip(links, curl);
    let base = target[1].atan2(target[0]) - tip[1].atan2(tip[0]);
    let mut q = vec![curl; links.len()];
    q[0] = base;
    let within = q
        .iter()
        .zip(&spec.joint_limits)
        .all(|(a, (lo, hi))| *a >= *lo && *a <= *hi);
    within.then_some(q)
}

/// Moves `target` radially into the reach band (with a small margin).
pub fn clamp_to_workspace(spec: &EmbodimentSpec, target: [f64; 2]) -> [f64; 2] {
    let (dmin, dmax) = reach_band(spec);
    let d = norm2(target);
    let want = d.clamp(dmin * 1.001, dmax * 0.999);
    if d == 0.0 {
        return [want, 0.0];
    }
    [target[0] * want / d, target[1] * want / d]
}

/// Minimum-jerk position profile `10s^3 - 15s^4 + 6s^5` on `s` in [0, 1].
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Everything about one toss-and-catch task, derived from its start position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub start: [f64; 2],
    pub release_point: [f64; 2],
    pub toss_velocity: [f64; 3],
    pub release_step: usize,
    pub catch_step: usize,
    pub catch_point: [f64; 2],
}

impl TaskPlan {
    pub fn from_seed(task_seed: u64, config: &SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
        let ((x0, x1), (z0, z1)) = START_BOX;
        let start = [rng.random_range(x0..x1), rng.random_range(z0..z1)];
        Self::from_start(start, config)
    }

    /// The task is a deterministic function of the start position.
    pub fn from_start(start: [f64; 2], config: &SimConfig) -> Self {
        let release_point = [start[0] - RELEASE_PULL, start[1] + RELEASE_LIFT];
        let vx = -0.1 - 0.5 * (START_BOX.0 .1 - start[0]);
        let vz = 2.0 + 2.0 * (start[1] - START_BOX.1 .0);
        let toss_velocity = [vx, 0.0, vz];
        let release_step = (RELEASE_TIME / config.dt).round().max(1.0) as usize;
        let g = config.gravity;
        let flight = (vz + (vz * vz + 2.0 * g * CATCH_DROP).sqrt()) / g;
        let catch_step = release_step + (flight / config.dt).round() as usize;
        let ball = ballistic(
            &BallState {
                position: [release_point[0], 0.0, release_point[1]],
                velocity: toss_velocity,
            },
            (catch_step - release_step) as f64 * config.dt,
            g,
        );
        TaskPlan {
            start,
            release_point,
            toss_velocity,
            release_step,
            catch_step,
            catch_point: [ball.position[0], ball.position[2]],
        }
    }

    pub fn release_state(&self) -> BallState {
        BallState {
            position: [self.release_point[0], 0.0, self.release_point[1]],
            velocity: self.toss_velocity,
        }
    }
}

/// Scripted hand value at step `t` (1 closed, 0 open).
pub fn hand_profile(t: usize, release_step: usize, catch_step: usize) -> f64 {
    let r = release_step as i64;
    let c = catch_step as i64;
    let t = t as i64;
    match t {
        _ if t < r => 1.0,
        _ if t == r => 0.4,
        _ if t < c - 1 => 0.0f64.max(0.1 - 0.1 * (t - r - 1) as f64),
        _ if t == c - 1 => 0.2,
        _ if t == c => 0.6,
        _ if t == c + 1 => 0.9,
        _ => 1.0,
    }
}

/// Fills one state row from joint angles, hand value and ball position
/// according to the embodiment's channel labels.
pub fn compose_state(spec: &EmbodimentSpec, q: &[f64], hand: f64, ball: [f64; 3]) -> Result<Vec<f64>> {
    let (pos, phi) = link_positions(&spec.link_lengths, q);
    let ee = pos[pos.len() - 1];
    let tip = |sign: f64| {
        let a = phi + sign * FINGER_SPREAD * (1.0 - hand);
        [ee[0] + FINGER_LENGTH * a.cos(), ee[1] + FINGER_LENGTH * a.sin()]
    };
    let mut row = Vec::with_capacity(spec.state_dim);
    for label in &spec.channel_labels {
        let v = if let Some(i) = label.strip_prefix('q') {
            let i: usize = i.parse().map_err(|_| Error::Invalid(format!("bad joint label `{label}`")))?;
            q[i]
        } else if label.starts_with("finger_") || label == "synergy_1" {
            hand
        } else if label.starts_with("synergy_") {
            0.0
        } else if let Some(axis) = label.strip_prefix("ball_") {
            ball[axis_index(axis)?]
        } else if let Some((marker, axis)) = label.split_once('_') {
            let p = match marker {
                "tipa" => tip(1.0),
                "tipb" => tip(-1.0),
                m => {
                    let i: usize = m
                        .strip_prefix('p')
                        .and_then(|s| s.parse().ok())
                        .filter(|i| (1..=pos.len()).contains(i))
                        .ok_or_else(|| Error::Invalid(format!("unknown channel `{label}`")))?;
                    pos[i - 1]
                }
            };
            [p[0], 0.0, p[1]][axis_index(axis)?]
        } else {
            return Err(Error::Invalid(format!("unknown channel `{label}`")));
        };
        row.push(v);
    }
    Ok(row)
}

fn axis_index(axis: &str) -> Result<usize> {
    match axis {
        "x" => Ok(0),
        "y" => Ok(1),
        "z" => Ok(2),
        _ => Err(Error::Invalid(format!("unknown axis `{axis}`"))),
    }
}

fn registered(spec: &EmbodimentSpec, config: &SimConfig) -> bool {
    *spec == config.expert_spec() || *spec == config.learner_spec()
}

/// Scripted demonstration of task `task_seed` for either registered arm.
pub fn scripted_expert(spec: &EmbodimentSpec, task_seed: u64, config: &SimConfig) -> Result<(Trajectory, CatchOutcome)> {
    let plan = TaskPlan::from_seed(task_seed, config);
    let (traj, feasible) = scripted_plan(spec, &plan, config)?;
    let traj = traj.with_meta("seed", task_seed);
    let mut outcome = judge_catch(&traj, config)?;
    outcome.success &= feasible;
    Ok((traj, outcome))
}

/// Builds the demonstration for `plan`; the flag is the controller's own
/// verdict that the intercept is reachable within the horizon.
pub fn scripted_plan(spec: &EmbodimentSpec, plan: &TaskPlan, config: &SimConfig) -> Result<(Trajectory, bool)> {
    config.validate()?;
    if !registered(spec, config) {
        return Err(Error::Invalid(format!("`{}` is not a registered embodiment", spec.name)));
    }
    let t_len = config.steps;
    let r = plan.release_step;
    let c = plan.catch_step;
    let mut feasible = c + 1 < t_len;
    let mut solve = |p: [f64; 2]| match arc_ik(spec, p) {
        Some(q) => q,
        None => {
            feasible = false;
            arc_ik(spec, clamp_to_workspace(spec, p)).expect("clamped target is reachable")
        }
    };
    let q_start = solve(plan.start);
    let q_release = solve(plan.release_point);
    let q_catch = solve(plan.catch_point);
    let lerp = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + (y - x) * s).collect() };

    let release = plan.release_state();
    let shared = Arc::new(spec.clone());
    let mut steps = Mat::zeros(t_len, spec.state_dim);
    for t in 0..t_len {
        let q = if t <= r {
            lerp(&q_start, &q_release, min_jerk(t as f64 / r as f64))
        } else if t <= c {
            lerp(&q_release, &q_catch, min_jerk((t - r) as f64 / (c - r) as f64))
        } else {
            q_catch.clone()
        };
        let hand = hand_profile(t, r, c);
        let ee = forward_kinematics(spec, &q)?;
        let ball = if t < r || (t >= c && feasible) {
            ee
        } else {
            ballistic(&release, (t - r) as f64 * config.dt, config.gravity).position
        };
        let row = compose_state(spec, &q, hand, ball)?;
        steps.row_mut(t).copy_from_slice(&row);
    }
    let traj = Trajectory::new(shared, config.dt, steps)?;
    Ok((traj, feasible))
}

/// First step whose primary hand value drops below the threshold.
pub fn detect_release(traj: &Trajectory) -> Option<usize> {
    let h = *traj.embodiment.hand_channels().first()?;
    (1..traj.len()).find(|&t| traj.steps[(t - 1, h)] >= HAND_THRESHOLD && traj.steps[(t, h)] < HAND_THRESHOLD)
}

/// Catch verdict from the trajectory's own joint, hand and ball channels.
///
/// The window covers post-release steps (all steps when no release is
/// visible) where the ball is descending inside the height band. Success
/// needs the closest approach within `catch_radius` and the hand closing
/// within three steps of it.
pub fn judge_catch(traj: &Trajectory, config: &SimConfig) -> Result<CatchOutcome> {
    let spec = &traj.embodiment;
    let ball = spec
        .ball_channels()
        .ok_or_else(|| Error::Invalid(format!("`{}` has no ball channels", spec.name)))?;
    let hand = *spec
        .hand_channels()
        .first()
        .ok_or_else(|| Error::Invalid(format!("`{}` has no hand channel", spec.name)))?;
    let release = detect_release(traj);
    let release_time = release.map_or(0.0, |r| r as f64 * traj.dt);
    let from = release.unwrap_or(1).max(1);
    let mut best: Option<(usize, f64)> = None;
    for t in from..traj.len() {
        let bz = traj.steps[(t, ball[2])];
        let descending = bz < traj.steps[(t - 1, ball[2])];
        if !descending || bz < CATCH_BAND.0 || bz > CATCH_BAND.1 {
            continue;
        }
        let ee = forward_kinematics(spec, &traj.joints(t))?;
        let d = (0..3).map(|k| (ee[k] - traj.steps[(t, ball[k])]).powi(2)).sum::<f64>().sqrt();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((t, d));
        }
    }
    let Some((m, miss)) = best else {
        return Ok(CatchOutcome::failed(release_time));
    };
    let lo = m.saturating_sub(CLOSING_SLACK).max(1);
    let hi = (m + CLOSING_SLACK).min(traj.len() - 1);
    let closing = (lo..=hi).any(|t| traj.steps[(t, hand)] - traj.steps[(t - 1, hand)] > CLOSING_RATE);
    Ok(CatchOutcome {
        success: miss <= config.catch_radius && closing,
        miss_distance: miss,
        release_time,
        catch_time: m as f64 * traj.dt,
    })
}

/// Runs `traj` in the world: the ball sits in the hand until the hand
/// opens, then leaves the end effector with `toss_velocity` and flies
/// freely. Ball channels are overwritten with what actually happens.
pub fn execute_trajectory(traj: &Trajectory, toss_velocity: [f64; 3], config: &SimConfig) -> Result<(Trajectory, CatchOutcome)> {
    let spec = traj.embodiment.clone();
    let ball = spec
        .ball_channels()
        .ok_or_else(|| Error::Invalid(format!("`{}` has no ball channels", spec.name)))?;
    let release = detect_release(traj);
    let mut out = traj.clone();
    let ee: Vec<[f64; 3]> = (0..traj.len())
        .map(|t| forward_kinematics(&spec, &traj.joints(t)))
        .collect::<Result<_>>()?;
    for t in 0..traj.len() {
        let p = match release {
            Some(r) if t >= r => {
                let start = BallState {
                    position: ee[r],
                    velocity: toss_velocity,
                };
                ballistic(&start, (t - r) as f64 * traj.dt, config.gravity).position
            }
            _ => ee[t],
        };
        for k in 0..3 {
            out.steps[(t, ball[k])] = p[k];
        }
    }
    let outcome = match release {
        Some(_) => judge_catch(&out, config)?,
        None => CatchOutcome::failed(0.0),
    };
    Ok((out, outcome))
}

/// Noisy position observations of a ball path.
pub fn observe_ball(states: &[BallState], noise_std: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    states
        .iter()
        .map(|s| {
            let mut p = s.position;
            if noise_std > 0.0 {
                p.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            p
        })
        .collect()
}

/// Initial velocity variance of the ball filter ((m/s)^2).
pub const INITIAL_VELOCITY_VAR: f64 = 100.0;

/// Linear-Gaussian filter over `[position, velocity]` with gravity as a
/// known input.
#[derive(Debug, Clone)]
pub struct BallFilter {
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
    f: Matrix6<f64>,
    u: Vector6<f64>,
    q: Matrix6<f64>,
    r: Matrix3<f64>,
}

impl BallFilter {
    /// Starts at the first observation with zero velocity and a wide
    /// velocity prior.
    pub fn new(first: [f64; 3], config: &SimConfig) -> Self {
        let dt = config.dt;
        let mut f = Matrix6::identity();
        for k in 0..3 {
            f[(k, k + 3)] = dt;
        }
        let mut u = Vector6::zeros();
        u[2] = -0.5 * config.gravity * dt * dt;
        u[5] = -config.gravity * dt;
        let qa = config.process_noise_std.powi(2);
        let mut q = Matrix6::zeros();
        for k in 0..3 {
            q[(k, k)] = qa * dt.powi(4) / 4.0;
            q[(k, k + 3)] = qa * dt.powi(3) / 2.0;
            q[(k + 3, k)] = qa * dt.powi(3) / 2.0;
            q[(k + 3, k + 3)] = qa * dt * dt;
        }
        let var = config.obs_noise_std.powi(2);
        let r = Matrix3::identity() * var;
        let mut p = Matrix6::zeros();
        for k in 0..3 {
            p[(k, k)] = var;
            p[(k + 3, k + 3)] = INITIAL_VELOCITY_VAR;
        }
        let x = Vector6::new(first[0], first[1], first[2], 0.0, 0.0, 0.0);
        BallFilter { x, p, f, u, q, r }
    }

    pub fn state(&self) -> BallState {
        to_ball(&self.x)
    }

    pub fn covariance_trace(&self) -> f64 {
        self.p.trace()
    }

    /// One-step-ahead prediction without changing the filter.
    pub fn peek(&self) -> BallState {
        to_ball(&(self.f * self.x + self.u))
    }

    pub fn predict(&mut self) {
        self.x = self.f * self.x + self.u;
        self.p = self.f * self.p * self.f.transpose() + self.q;
    }

    pub fn update(&mut self, z: [f64; 3]) -> Result<()> {
        let h = Matrix3x6::new(
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
        );
        let s = h * self.p * h.transpose() + self.r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Invalid("singular innovation covariance".into()))?;
        let k = self.p * h.transpose() * s_inv;
        let innov = Vector3::from(z) - h * self.x;
        self.x += k * innov;
        // Joseph form keeps P symmetric positive semi-definite
        let ikh = Matrix6::identity() - k * h;
        self.p = ikh * self.p * ikh.transpose() + k * self.r * k.transpose();
        self.p = 0.5 * (self.p + self.p.transpose());
        Ok(())
    }
}

fn to_ball(x: &Vector6<f64>) -> BallState {
    BallState {
        position: [x[0], x[1], x[2]],
        velocity: [x[3], x[4], x[5]],
    }
}

/// Filter output for a whole observation sequence.
#[derive(Debug, Clone)]
pub struct BallTrack {
    pub estimates: Vec<BallState>,
    pub covariance_traces: Vec<f64>,
    pub filter: BallFilter,
}

impl BallTrack {
    /// State predicted one step after the last observation.
    pub fn predict_next(&self) -> BallState {
        self.filter.peek()
    }
}

/// Filters `observations` taken every `config.dt` seconds.
pub fn ekf_track(observations: &[[f64; 3]], config: &SimConfig) -> Result<BallTrack> {
    if observations.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 observations, got {}", observations.len())));
    }
    if observations.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("observations must be finite".into()));
    }
    let mut filter = BallFilter::new(observations[0], config);
    let mut estimates = vec![filter.state()];
    let mut covariance_traces = vec![filter.covariance_trace()];
    for z in &observations[1..] {
        filter.predict();
        filter.update(*z)?;
        estimates.push(filter.state());
        covariance_traces.push(filter.covariance_trace());
    }
    Ok(BallTrack {
        estimates,
        covariance_traces,
        filter,
    })
}
