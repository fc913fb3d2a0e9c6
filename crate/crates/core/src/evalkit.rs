//! Evaluation: success ratio, smoothness, generation time, kernel MMD,
//! PCA projection, end-to-end trials and report files.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use netcore::eigen::sym_eigen;
use netcore::Mat;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{rollout, BehaviorTransformer, RolloutConfig};
use crate::cyclevae::{infer_expert_state, infer_learner_trajectory, state_pool, CycleVaeModel, Domain};
use crate::embodsim::{execute_trajectory, scripted_plan, CatchOutcome, SimConfig, TaskPlan};
use crate::error::{DataError, Error, Result};
use crate::trajdata::{Dataset, EmbodimentSpec, Trajectory};

/// Sum of Euclidean norms of consecutive differences over `channels`.
pub fn smoothness(traj: &Trajectory, channels: &[usize]) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::Invalid("smoothness needs at least one channel".into()));
    }
    if let Some(c) = channels.iter().find(|&&c| c >= traj.embodiment.state_dim) {
        return Err(Error::Dimension(format!("channel {c} out of range")));
    }
    Ok((1..traj.len())
        .map(|t| {
            channels
                .iter()
                .map(|&c| (traj.steps[(t, c)] - traj.steps[(t - 1, c)]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

/// Smoothness over the embodiment's joint channels.
pub fn joint_smoothness(traj: &Trajectory) -> Result<f64> {
    let joints: Vec<usize> = traj.embodiment.joint_channels().collect();
    smoothness(traj, &joints)
}

/// Percentage of successful outcomes.
pub fn success_ratio(outcomes: &[CatchOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Invalid("success ratio of no trials".into()));
    }
    Ok(100.0 * outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    pub value: f64,
    pub sigma: f64,
    /// The median bandwidth was degenerate and σ = 1 was used.
    pub fallback: bool,
}

fn sq_dist(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median of pairwise distances over the rows of `a` and `b` pooled.
pub fn median_pairwise_distance(a: &Mat, b: &Mat) -> f64 {
    let rows: Vec<(&Mat, usize)> = (0..a.nrows()).map(|i| (a, i)).chain((0..b.nrows()).map(|i| (b, i))).collect();
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (x, &(m, i)) in rows.iter().enumerate() {
        for &(n, j) in &rows[x + 1..] {
            d.push(sq_dist(m, i, n, j).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Square root of the biased squared-MMD estimate with a Gaussian kernel.
pub fn kernel_mmd(a: &Mat, b: &Mat, bandwidth: Bandwidth) -> Result<Mmd> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Invalid("kernel_mmd needs at least two samples per side".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!("sample widths {} and {} differ", a.ncols(), b.ncols())));
    }
    let (sigma, fallback) = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 => (s, false),
        Bandwidth::Fixed(s) => return Err(Error::Invalid(format!("bandwidth {s} must be positive"))),
        Bandwidth::Median => {
            let m = median_pairwise_distance(a, b);
            if m > 0.0 {
                (m, false)
            } else {
                (1.0, true)
            }
        }
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let mean_k = |x: &Mat, y: &Mat| {
        let mut s = 0.0;
        for i in 0..x.nrows() {
            for j in 0..y.nrows() {
                s += (-gamma * sq_dist(x, i, y, j)).exp();
            }
        }
        s / (x.nrows() * y.nrows()) as f64
    };
    let sq = mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b);
    Ok(Mmd {
        value: sq.max(0.0).sqrt(),
        sigma,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `n x 2` coordinates.
    pub coords: Mat,
    /// Fraction of total variance on each axis.
    pub explained: [f64; 2],
    /// Fewer than two non-degenerate axes; the second coordinate is zero.
    pub rank_deficient: bool,
}

/// PCA onto the top two principal axes of the centred points.
pub fn project_2d(points: &Mat) -> Result<Projection> {
    let (n, k) = points.shape();
    if n < 3 {
        return Err(Error::Invalid("projection needs at least three points".into()));
    }
    let mean: Vec<f64> = (0..k).map(|j| points.column(j).mean()).collect();
    let centred = Mat::from_fn(n, k, |i, j| points[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = sym_eigen(&cov);
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let top = eig.values[0].max(0.0);
    let second = if k > 1 { eig.values[1].max(0.0) } else { 0.0 };
    let rank_deficient = k < 2 || second <= 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut coords = Mat::zeros(n, 2);
    coords.set_column(0, &(&centred * eig.vectors.column(0)));
    if !rank_deficient {
        coords.set_column(1, &(&centred * eig.vectors.column(1)));
    }
    let share = |v: f64| if total > 0.0 { v / total } else { 0.0 };
    Ok(Projection {
        coords,
        explained: [share(top), if rank_deficient { 0.0 } else { share(second) }],
        rank_deficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Before,
    After,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Before => "before",
            Stage::After => "after",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub domain: Domain,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// MMD of normalized states zero-padded to a common width.
    pub mmd_before: Mmd,
    /// MMD of encoded latent means.
    pub mmd_after: Mmd,
    pub n_eval: usize,
    /// `n_eval` exceeded a dataset and was reduced.
    pub clamped: bool,
    pub projection: Vec<ProjectedPoint>,
}

fn pick_rows(pool: &Mat, n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut idx = index::sample(rng, pool.nrows(), n).into_vec();
    idx.sort_unstable();
    Mat::from_fn(n, pool.ncols(), |i, j| pool[(idx[i], j)])
}

fn pad(m: &Mat, width: usize) -> Mat {
    Mat::from_fn(m.nrows(), width, |i, j| if j < m.ncols() { m[(i, j)] } else { 0.0 })
}

fn stack(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Latent alignment quality on normalized datasets: MMD before (padded
/// states) and after (latent means), plus PCA projections of both stages.
pub fn alignment_report(model: &CycleVaeModel, data_h: &Dataset, data_r: &Dataset, n_eval: usize, seed: u64) -> Result<AlignmentReport> {
    if data_h.norm_stats.is_none() || data_r.norm_stats.is_none() {
        return Err(Error::Invalid("alignment report needs normalized datasets".into()));
    }
    if data_h.is_empty() || data_r.is_empty() {
        return Err(Error::Data(DataError::Empty));
    }
    let pool_h = state_pool(data_h);
    let pool_r = state_pool(data_r);
    let n = n_eval.min(pool_h.nrows()).min(pool_r.nrows());
    if n < 3 {
        return Err(Error::Invalid(format!("alignment report needs at least 3 states per domain, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = pick_rows(&pool_h, n, &mut rng);
    let r = pick_rows(&pool_r, n, &mut rng);
    let width = h.ncols().max(r.ncols());
    let (ph, pr) = (pad(&h, width), pad(&r, width));
    let mmd_before = kernel_mmd(&ph, &pr, Bandwidth::Median)?;
    let (zh, _) = model.encode_mats(Domain::H, &h)?;
    let (zr, _) = model.encode_mats(Domain::R, &r)?;
    let mmd_after = kernel_mmd(&zh, &zr, Bandwidth::Median)?;
    let mut projection = Vec::with_capacity(4 * n);
    for (stage, a, b) in [(Stage::Before, &ph, &pr), (Stage::After, &zh, &zr)] {
        let p = project_2d(&stack(a, b))?;
        for i in 0..2 * n {
            projection.push(ProjectedPoint {
                x: p.coords[(i, 0)],
                y: p.coords[(i, 1)],
                domain: if i < n { Domain::H } else { Domain::R },
                stage,
            });
        }
    }
    Ok(AlignmentReport {
        mmd_before,
        mmd_after,
        n_eval: n,
        clamped: n < n_eval,
        projection,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Scripted expert demo mapped to the learner.
    Recorded,
    /// Transformer rollout from the mapped learner start state, mapped back.
    Transformer,
    /// Smoothed uniform joint noise with the scripted learner's hand timing.
    RandomBaseline,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Recorded => "recorded",
            Variant::Transformer => "transformer",
            Variant::RandomBaseline => "random_baseline",
        }
    }
}

/// Models and settings shared by all trials.
pub struct EvalContext<'a> {
    pub cyclevae: &'a CycleVaeModel,
    pub transformer: Option<&'a BehaviorTransformer>,
    pub sim: SimConfig,
    pub expert: Arc<EmbodimentSpec>,
    pub learner: Arc<EmbodimentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task_seed: u64,
    pub outcome: CatchOutcome,
    pub smoothness: f64,
    pub gen_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub trials: Vec<TrialResult>,
    pub success_ratio: f64,
    pub mean_smoothness: f64,
    pub mean_gen_time: f64,
    /// Sample standard deviation; `None` for a single trial.
    pub std_gen_time: Option<f64>,
}

/// Task seeds for evaluation trials, disjoint from the data-generation ranges.
pub fn eval_task_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE7A1);
    (0..n).map(|_| rng.random_range(1u64 << 40..1u64 << 41)).collect()
}

/// Joint channels drawn uniformly within limits and smoothed by a centred
/// 5-step moving average; every other channel (hand timing included) is
/// copied from `template`.
pub fn random_trajectory(template: &Trajectory, seed: u64) -> Result<Trajectory> {
    let spec = &template.embodiment;
    let steps = template.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = Mat::zeros(steps, spec.joint_count);
    for t in 0..steps {
        for (j, (lo, hi)) in spec.joint_limits.iter().enumerate() {
            raw[(t, j)] = rng.random_range(*lo..*hi);
        }
    }
    let mut out = template.steps.clone();
    for t in 0..steps {
        let lo = t.saturating_sub(2);
        let hi = (t + 2).min(steps - 1);
        for j in 0..spec.joint_count {
            out[(t, j)] = (lo..=hi).map(|s| raw[(s, j)]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    Ok(Trajectory::new(spec.clone(), template.dt, out)?)
}

fn run_trial(ctx: &EvalContext<'_>, variant: Variant, task_seed: u64) -> Result<TrialResult> {
    let sim = &ctx.sim;
    let plan = TaskPlan::from_seed(task_seed, sim);
    let (learner_traj, gen_time) = match variant {
        Variant::Recorded => {
            let (demo, _) = scripted_plan(&ctx.expert, &plan, sim)?;
            let (mapped, secs) = infer_learner_trajectory(ctx.cyclevae, &demo)?;
            // a recorded demo takes its own duration to produce
            (mapped, demo.len() as f64 * demo.dt + secs)
        }
        Variant::Transformer => {
            let model = ctx.transformer.ok_or(Error::Untrained)?;
            if !model.trained {
                return Err(Error::Untrained);
            }
            let (learner_demo, _) = scripted_plan(&ctx.learner, &plan, sim)?;
            let t0 = Instant::now();
            let start = infer_expert_state(ctx.cyclevae, &learner_demo.state(0))?;
            let seed_secs = t0.elapsed().as_secs_f64();
            let prefix = Mat::from_row_slice(1, start.len(), &start);
            let cfg = RolloutConfig {
                prefix_length: 1,
                horizon: sim.steps,
            };
            let (expert, roll_secs) = rollout(model, &prefix, sim.dt, &cfg)?;
            let (mapped, map_secs) = infer_learner_trajectory(ctx.cyclevae, &expert)?;
            (mapped, seed_secs + roll_secs + map_secs)
        }
        Variant::RandomBaseline => {
            let (learner_demo, _) = scripted_plan(&ctx.learner, &plan, sim)?;
            let t0 = Instant::now();
            let traj = random_trajectory(&learner_demo, task_seed)?;
            (traj, t0.elapsed().as_secs_f64())
        }
    };
    let (_, outcome) = execute_trajectory(&learner_traj, plan.toss_velocity, sim)?;
    Ok(TrialResult {
        task_seed,
        outcome,
        smoothness: joint_smoothness(&learner_traj)?,
        gen_time,
    })
}

/// Runs `n_trials` tasks through one pipeline variant and aggregates.
pub fn end_to_end_eval(ctx: &EvalContext<'_>, variant: Variant, n_trials: usize, seed: u64) -> Result<VariantReport> {
    if n_trials == 0 {
        return Err(Error::Invalid("n_trials must be positive".into()));
    }
    if variant != Variant::RandomBaseline && !ctx.cyclevae.trained {
        return Err(Error::Untrained);
    }
    let trials = eval_task_seeds(seed, n_trials)
        .into_iter()
        .map(|s| run_trial(ctx, variant, s))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<CatchOutcome> = trials.iter().map(|t| t.outcome).collect();
    let n = trials.len() as f64;
    let mean_gen_time = trials.iter().map(|t| t.gen_time).sum::<f64>() / n;
    let std_gen_time = (trials.len() > 1)
        .then(|| (trials.iter().map(|t| (t.gen_time - mean_gen_time).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(VariantReport {
        variant,
        success_ratio: success_ratio(&outcomes)?,
        mean_smoothness: trials.iter().map(|t| t.smoothness).sum::<f64>() / n,
        mean_gen_time,
        std_gen_time,
        trials,
    })
}

/// Everything written by the report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alignment: AlignmentReport,
    pub variants: Vec<VariantReport>,
}

pub const METRICS_FILE: &str = "report_metrics.csv";
pub const PROJECTION_FILE: &str = "report_projection.svg";
pub const TRACE_FILE: &str = "report_trace.csv";

/// Metrics table; with `timing = false` the wall-clock columns read `masked`
/// so reruns are byte-identical.
pub fn metrics_csv(report: &EvalReport, timing: bool) -> String {
    let mut out = String::from(
        "variant,n_trials,success_ratio,mean_smoothness,gen_time_mean_s,gen_time_std_s,mmd_before,mmd_after,mmd_bandwidth_fallback\n",
    );
    let a = &report.alignment;
    for v in &report.variants {
        let (mean, std) = if timing {
            (
                v.mean_gen_time.to_string(),
                v.std_gen_time.map_or_else(|| "undefined".to_string(), |s| s.to_string()),
            )
        } else {
            ("masked".to_string(), "masked".to_string())
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            v.variant.label(),
            v.trials.len(),
            v.success_ratio,
            v.mean_smoothness,
            mean,
            std,
            a.mmd_before.value,
            a.mmd_after.value,
            a.mmd_before.fallback || a.mmd_after.fallback
        );
    }
    out
}

/// Two-panel scatter (before | after), one colour per domain.
pub fn projection_svg(points: &[ProjectedPoint], mmd_before: f64, mmd_after: f64) -> String {
    const W: f64 = 420.0;
    const H: f64 = 420.0;
    const M: f64 = 30.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        2.0 * W,
        H + 20.0,
        2.0 * W,
        H + 20.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (panel, stage) in [Stage::Before, Stage::After].into_iter().enumerate() {
        let pts: Vec<&ProjectedPoint> = points.iter().filter(|p| p.stage == stage).collect();
        let ox = panel as f64 * W;
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &pts {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        let sx = if x1 > x0 { (W - 2.0 * M) / (x1 - x0) } else { 1.0 };
        let sy = if y1 > y0 { (H - 2.0 * M) / (y1 - y0) } else { 1.0 };
        let mmd = if stage == Stage::Before { mmd_before } else { mmd_after };
        let _ = writeln!(
            out,
            r##"<g><rect x="{ox}" y="0" width="{W}" height="{H}" fill="none" stroke="#888"/><text x="{}" y="18" font-family="sans-serif" font-size="13">{} alignment (MMD {:.4})</text>"##,
            ox + M,
            stage.label(),
            mmd
        );
        for p in pts {
            let cx = ox + M + (p.x - x0) * sx;
            let cy = H - M - (p.y - y0) * sy;
            let (fill, class) = match p.domain {
                Domain::H => ("#1f77b4", "H"),
                Domain::R => ("#d62728", "R"),
            };
            let _ = writeln!(out, r#"<circle class="{class}" cx="{cx:.3}" cy="{cy:.3}" r="2" fill="{fill}" fill-opacity="0.6"/>"#);
        }
        let _ = writeln!(out, "</g>");
    }
    let _ = writeln!(
        out,
        r##"<text x="{M}" y="{}" font-family="sans-serif" font-size="12"><tspan fill="#1f77b4">expert (H)</tspan>  <tspan fill="#d62728">learner (R)</tspan></text>"##,
        H + 14.0
    );
    out.push_str("</svg>\n");
    out
}

/// Writes the metrics table, the projection figure and the loss trace into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &EvalReport, trace_csv: &str, timing: bool) -> Result<()> {
    let dir = dir.as_ref();
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::Data(DataError::Io { path, source: e }))
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(DataError::Io {
        path: dir.to_path_buf(),
        source: e,
    }))?;
    write(METRICS_FILE, &metrics_csv(report, timing))?;
    let a = &report.alignment;
    write(PROJECTION_FILE, &projection_svg(&a.projection, a.mmd_before.value, a.mmd_after.value))?;
    write(TRACE_FILE, trace_csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_counts() {
        // distances 1, 2, 3 among (0), (1), (3)
        let a = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let b = Mat::from_row_slice(1, 1, &[3.0]);
        assert_eq!(median_pairwise_distance(&a, &b), 2.0);
        // distances 1, 2, 1, 3, 2, 1
        let b = Mat::from_row_slice(2, 1, &[2.0, 3.0]);
        assert_eq!(median_pairwise_distance(&a, &b), 1.5);
    }

    #[test]
    fn degenerate_pool_falls_back() {
        let a = Mat::from_element(3, 2, 0.5);
        let m = kernel_mmd(&a, &a, Bandwidth::Median).unwrap();
        assert!(m.fallback);
        assert_eq!((m.sigma, m.value), (1.0, 0.0));
    }

    #[test]
    fn empty_outcomes_are_an_error() {
        assert!(success_ratio(&[]).is_err());
    }

    #[test]
    fn timing_columns_can_be_masked() {
        let report = EvalReport {
            alignment: AlignmentReport {
                mmd_before: Mmd { value: 1.0, sigma: 1.0, fallback: false },
                mmd_after: Mmd { value: 0.1, sigma: 1.0, fallback: false },
                n_eval: 3,
                clamped: false,
                projection: vec![],
            },
            variants: vec![VariantReport {
                variant: Variant::Recorded,
                trials: vec![],
                success_ratio: 50.0,
                mean_smoothness: 1.0,
                mean_gen_time: 0.123,
                std_gen_time: None,
            }],
        };
        let masked = metrics_csv(&report, false);
        assert!(masked.contains("recorded,0,50,1,masked,masked,1,0.1,false"));
        assert!(metrics_csv(&report, true).contains("0.123,undefined"));
    }
}
