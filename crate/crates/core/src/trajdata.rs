//! Trajectory and dataset types, per-channel normalization, splitting and
//! the line-delimited `.traj.jsonl` file format.
//!
//! File layout: line 1 is a header record
//!
//! ```text
//! {"spec": {"name": ..., "state_dim": ..., "dt": ..., "channel_labels": [...],
//!           "joint_limits": [[min, max], ...], "joint_count": ..., "link_lengths": [...]},
//!  "norm_stats": {...}            // only when the dataset carries statistics
//! }
//! ```
//!
//! and every following line is one trajectory
//! `{"meta": {...}, "steps": [[v, ...], ...]}`. Step values are written with
//! 17 significant digits so loading reproduces them bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use netcore::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DataError, DataResult};

/// File suffix for dataset files.
pub const DATASET_SUFFIX: &str = ".traj.jsonl";

/// Default trajectory length.
pub const DEFAULT_STEPS: usize = 128;

/// Describes one embodiment's state vector.
///
/// Channel layout convention: the first `joint_count` channels are joint
/// angles (labels `q0`, `q1`, ...). Hand channels are labelled `finger_*` or
/// `synergy_*`, ball channels `ball_x`, `ball_y`, `ball_z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub name: String,
    pub state_dim: usize,
    pub joint_count: usize,
    pub joint_limits: Vec<(f64, f64)>,
    pub channel_labels: Vec<String>,
    pub link_lengths: Vec<f64>,
}

impl EmbodimentSpec {
    pub fn validate(&self) -> DataResult<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.state_dim == 0 || self.joint_count == 0 {
            return bad("state_dim and joint_count must be positive".into());
        }
        if self.channel_labels.len() != self.state_dim {
            return bad(format!(
                "{} channel labels for state_dim {}",
                self.channel_labels.len(),
                self.state_dim
            ));
        }
        if self.joint_count > self.state_dim {
            return bad(format!("joint_count {} exceeds state_dim {}", self.joint_count, self.state_dim));
        }
        if self.joint_limits.len() != self.joint_count || self.link_lengths.len() != self.joint_count {
            return bad("joint_limits and link_lengths need one entry per joint".into());
        }
        for (i, (lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return bad(format!("joint {i} limit [{lo}, {hi}] is empty"));
            }
        }
        if self.link_lengths.iter().any(|l| !(*l > 0.0)) {
            return bad("link lengths must be positive".into());
        }
        Ok(())
    }

    pub fn joint_channels(&self) -> std::ops::Range<usize> {
        0..self.joint_count
    }

    /// Hand channels in label order; the first is the primary open/close channel.
    pub fn hand_channels(&self) -> Vec<usize> {
        self.channel_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.starts_with("finger_") || l.starts_with("synergy_"))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn ball_channels(&self) -> Option<[usize; 3]> {
        let find = |name: &str| self.channel_labels.iter().position(|l| l == name);
        Some([find("ball_x")?, find("ball_y")?, find("ball_z")?])
    }

    /// Channels with an embodiment-independent meaning: primary hand, then
    /// ball x, y, z.
    pub fn role_channels(&self) -> [Option<usize>; 4] {
        let ball = self.ball_channels();
        [
            self.hand_channels().first().copied(),
            ball.map(|b| b[0]),
            ball.map(|b| b[1]),
            ball.map(|b| b[2]),
        ]
    }

    pub fn channel(&self, label: &str) -> Option<usize> {
        self.channel_labels.iter().position(|l| l == label)
    }

    /// Sum of link lengths.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }
}

/// A fixed-length sequence of state vectors for one embodiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub embodiment: Arc<EmbodimentSpec>,
    pub dt: f64,
    /// `T x state_dim`.
    pub steps: Mat,
    pub meta: BTreeMap<String, Value>,
}

impl Trajectory {
    pub fn new(embodiment: Arc<EmbodimentSpec>, dt: f64, steps: Mat) -> DataResult<Self> {
        let t = Trajectory {
            embodiment,
            dt,
            steps,
            meta: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> DataResult<()> {
        if self.steps.ncols() != self.embodiment.state_dim {
            return Err(DataError::Invalid(format!(
                "trajectory has {} channels, spec `{}` expects {}",
                self.steps.ncols(),
                self.embodiment.name,
                self.embodiment.state_dim
            )));
        }
        if self.steps.nrows() < 2 {
            return Err(DataError::Invalid(format!("trajectory has {} steps, need at least 2", self.steps.nrows())));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DataError::Invalid(format!("dt {} must be positive", self.dt)));
        }
        if !netcore::all_finite(&self.steps) {
            return Err(DataError::Invalid("trajectory contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.nrows() == 0
    }

    pub fn state(&self, t: usize) -> Vec<f64> {
        self.steps.row(t).iter().copied().collect()
    }

    pub fn joints(&self, t: usize) -> Vec<f64> {
        self.embodiment.joint_channels().map(|j| self.steps[(t, j)]).collect()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

/// Per-channel z-scoring statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose variance was zero; their std is clamped to 1.
    pub clamped: Vec<bool>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }

    pub fn normalize_mat(&self, m: &Mat) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[j]) / self.std[j])
    }

    pub fn denormalize_mat(&self, m: &Mat) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.std[j] + self.mean[j])
    }
}

/// An ordered collection of trajectories sharing one embodiment and length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: Arc<EmbodimentSpec>,
    pub trajectories: Vec<Trajectory>,
    /// Present when `trajectories` are stored normalized.
    pub norm_stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(spec: Arc<EmbodimentSpec>, trajectories: Vec<Trajectory>) -> DataResult<Self> {
        let d = Dataset {
            spec,
            trajectories,
            norm_stats: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> DataResult<()> {
        self.spec.validate()?;
        let steps = self.trajectories.first().map(|t| t.len());
        let dt = self.trajectories.first().map(|t| t.dt);
        for (i, t) in self.trajectories.iter().enumerate() {
            if *t.embodiment != *self.spec {
                return Err(DataError::Invalid(format!("trajectory {i} belongs to `{}`", t.embodiment.name)));
            }
            t.validate().map_err(|e| DataError::Invalid(format!("trajectory {i}: {e}")))?;
            if Some(t.len()) != steps || Some(t.dt) != dt {
                return Err(DataError::Invalid(format!(
                    "trajectory {i} has {} steps at dt {}, expected {:?} at {:?}",
                    t.len(),
                    t.dt,
                    steps,
                    dt
                )));
            }
        }
        if let Some(ns) = &self.norm_stats {
            if ns.dim() != self.spec.state_dim || ns.std.iter().any(|s| !(*s > 0.0)) {
                return Err(DataError::Invalid("norm_stats must have positive std per channel".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Trajectory length `T` (0 for an empty dataset).
    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.len())
    }

    pub fn dt(&self) -> Option<f64> {
        self.trajectories.first().map(|t| t.dt)
    }

    /// All steps of all trajectories stacked into one `(N*T) x d` matrix.
    pub fn stacked_states(&self) -> Mat {
        let t = self.steps();
        let d = self.spec.state_dim;
        let mut out = Mat::zeros(self.len() * t, d);
        for (k, tr) in self.trajectories.iter().enumerate() {
            out.rows_mut(k * t, t).copy_from(&tr.steps);
        }
        out
    }

    fn with_trajectories(&self, trajectories: Vec<Trajectory>) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            trajectories,
            norm_stats: self.norm_stats.clone(),
        }
    }
}

/// Channels with a standard deviation at or below this are treated as constant.
pub const ZERO_VARIANCE_STD: f64 = 1e-12;

/// Per-channel mean and population standard deviation over every step of
/// every trajectory.
pub fn compute_norm_stats(dataset: &Dataset) -> DataResult<NormStats> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let d = dataset.spec.state_dim;
    let n = (dataset.len() * dataset.steps()) as f64;
    let mut mean = vec![0.0; d];
    for t in &dataset.trajectories {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += t.steps.column(j).sum();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for t in &dataset.trajectories {
        for (j, v) in var.iter_mut().enumerate() {
            *v += t.steps.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>();
        }
    }
    let mut std = Vec::with_capacity(d);
    let mut clamped = Vec::with_capacity(d);
    for v in var {
        let s = (v / n).sqrt();
        if s <= ZERO_VARIANCE_STD {
            std.push(1.0);
            clamped.push(true);
        } else {
            std.push(s);
            clamped.push(false);
        }
    }
    Ok(NormStats { mean, std, clamped })
}

/// Z-scores every channel with statistics computed from `dataset` itself.
pub fn normalize(dataset: &Dataset) -> DataResult<(Dataset, NormStats)> {
    let stats = compute_norm_stats(dataset)?;
    Ok((normalize_with(dataset, &stats)?, stats))
}

/// Z-scores with externally supplied statistics (e.g. from the training split).
pub fn normalize_with(dataset: &Dataset, stats: &NormStats) -> DataResult<Dataset> {
    if dataset.norm_stats.is_some() {
        return Err(DataError::Invalid("dataset is already normalized".into()));
    }
    if stats.dim() != dataset.spec.state_dim {
        return Err(DataError::Invalid("norm_stats width does not match the dataset".into()));
    }
    let trajectories = dataset
        .trajectories
        .iter()
        .map(|t| Trajectory {
            steps: stats.normalize_mat(&t.steps),
            ..t.clone()
        })
        .collect();
    Ok(Dataset {
        spec: dataset.spec.clone(),
        trajectories,
        norm_stats: Some(stats.clone()),
    })
}

/// Inverts [`normalize`].
pub fn denormalize(dataset: &Dataset) -> DataResult<Dataset> {
    let stats = dataset
        .norm_stats
        .as_ref()
        .ok_or_else(|| DataError::Invalid("dataset is not normalized".into()))?;
    let trajectories = dataset
        .trajectories
        .iter()
        .map(|t| Trajectory {
            steps: stats.denormalize_mat(&t.steps),
            ..t.clone()
        })
        .collect();
    Ok(Dataset {
        spec: dataset.spec.clone(),
        trajectories,
        norm_stats: None,
    })
}

/// Seeded disjoint partition into `round(n * (1 - f))` training trajectories
/// and the remaining holdout. Both parts keep the original relative order.
pub fn split(dataset: &Dataset, holdout_fraction: f64, seed: u64) -> DataResult<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "holdout fraction {holdout_fraction} must lie in (0, 1)"
        )));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(DataError::Invalid(format!("need at least 2 trajectories to split, got {n}")));
    }
    let (train_idx, hold_idx) = split_indices(n, holdout_fraction, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.trajectories[i].clone()).collect();
    Ok((
        dataset.with_trajectories(pick(&train_idx)),
        dataset.with_trajectories(pick(&hold_idx)),
    ))
}

/// Index form of [`split`]: sorted training and holdout indices.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_train = (n as f64 * (1.0 - holdout_fraction)).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut hold = idx[n_train..].to_vec();
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    name: String,
    state_dim: usize,
    dt: f64,
    channel_labels: Vec<String>,
    joint_limits: Vec<[f64; 2]>,
    joint_count: usize,
    link_lengths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeaderDoc {
    spec: SpecDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_stats: Option<NormStats>,
}

#[derive(Deserialize)]
struct RecordDoc {
    #[serde(default)]
    meta: BTreeMap<String, Value>,
    steps: Vec<Vec<f64>>,
}

/// Writes `dataset` as `.traj.jsonl`.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> DataResult<()> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    dataset.validate()?;
    let text = dataset_to_string(dataset)?;
    let file = fs::File::create(path.as_ref()).map_err(|e| DataError::io(path.as_ref(), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| DataError::io(path.as_ref(), e))
}

/// Serialized file contents of `dataset`.
pub fn dataset_to_string(dataset: &Dataset) -> DataResult<String> {
    let spec = &dataset.spec;
    let header = HeaderDoc {
        spec: SpecDoc {
            name: spec.name.clone(),
            state_dim: spec.state_dim,
            dt: dataset.dt().ok_or(DataError::Empty)?,
            channel_labels: spec.channel_labels.clone(),
            joint_limits: spec.joint_limits.iter().map(|&(a, b)| [a, b]).collect(),
            joint_count: spec.joint_count,
            link_lengths: spec.link_lengths.clone(),
        },
        norm_stats: dataset.norm_stats.clone(),
    };
    let mut out = serde_json::to_string(&header).map_err(|e| DataError::Invalid(e.to_string()))?;
    out.push('\n');
    for t in &dataset.trajectories {
        out.push_str("{\"meta\":");
        out.push_str(&serde_json::to_string(&t.meta).map_err(|e| DataError::Invalid(e.to_string()))?);
        out.push_str(",\"steps\":[");
        for r in 0..t.steps.nrows() {
            if r > 0 {
                out.push(',');
            }
            out.push('[');
            for c in 0..t.steps.ncols() {
                if c > 0 {
                    out.push(',');
                }
                // 17 significant digits
                write!(out, "{:.16e}", t.steps[(r, c)]).expect("write to String");
            }
            out.push(']');
        }
        out.push_str("]}\n");
    }
    Ok(out)
}

/// Reads a `.traj.jsonl` file; errors name the offending line (1-based).
pub fn load_dataset(path: impl AsRef<Path>) -> DataResult<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = match lines.next() {
        Some(l) => l.map_err(|e| DataError::io(path, e))?,
        None => return Err(DataError::parse(1, "missing header record")),
    };
    let header: HeaderDoc = serde_json::from_str(&header_line).map_err(|e| DataError::parse(1, e.to_string()))?;
    let h = header.spec;
    let spec = Arc::new(EmbodimentSpec {
        name: h.name,
        state_dim: h.state_dim,
        joint_count: h.joint_count,
        joint_limits: h.joint_limits.iter().map(|l| (l[0], l[1])).collect(),
        channel_labels: h.channel_labels,
        link_lengths: h.link_lengths,
    });
    spec.validate().map_err(|e| DataError::parse(1, e.to_string()))?;

    let mut trajectories = Vec::new();
    let mut expected_steps: Option<usize> = None;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordDoc = serde_json::from_str(&line).map_err(|e| DataError::parse(lineno, e.to_string()))?;
        let t = rec.steps.len();
        if t < 2 {
            return Err(DataError::parse(lineno, format!("{t} steps, need at least 2")));
        }
        match expected_steps {
            None => expected_steps = Some(t),
            Some(e) if e != t => {
                return Err(DataError::parse(lineno, format!("{t} steps, earlier records have {e}")));
            }
            _ => {}
        }
        let mut steps = Mat::zeros(t, spec.state_dim);
        for (r, row) in rec.steps.iter().enumerate() {
            if row.len() != spec.state_dim {
                return Err(DataError::parse(
                    lineno,
                    format!("step {r} has {} values, state_dim is {}", row.len(), spec.state_dim),
                ));
            }
            for (c, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::parse(lineno, format!("non-finite value at step {r}")));
                }
                steps[(r, c)] = *v;
            }
        }
        trajectories.push(Trajectory {
            embodiment: spec.clone(),
            dt: h.dt,
            steps,
            meta: rec.meta,
        });
    }
    let ds = Dataset {
        spec,
        trajectories,
        norm_stats: header.norm_stats,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embodsim::SimConfig;

    fn tiny_spec() -> Arc<EmbodimentSpec> {
        Arc::new(EmbodimentSpec {
            name: "tiny".into(),
            state_dim: 2,
            joint_count: 1,
            joint_limits: vec![(-1.0, 1.0)],
            channel_labels: vec!["q0".into(), "synergy_1".into()],
            link_lengths: vec![1.0],
        })
    }

    fn tiny_dataset(rows: &[&[f64]]) -> Dataset {
        let spec = tiny_spec();
        let t = Mat::from_fn(rows.len(), 2, |i, j| rows[i][j]);
        Dataset::new(spec.clone(), vec![Trajectory::new(spec, 0.02, t).unwrap()]).unwrap()
    }

    #[test]
    fn constant_channel_is_clamped() {
        let ds = tiny_dataset(&[&[5.0, 1.0], &[5.0, 2.0], &[5.0, 3.0]]);
        let (n, stats) = normalize(&ds).unwrap();
        assert!(stats.clamped[0]);
        assert!(!stats.clamped[1]);
        assert_eq!(stats.std[0], 1.0);
        assert!(n.trajectories[0].steps.column(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_pair_is_already_normalized() {
        let ds = tiny_dataset(&[&[-1.0, 0.0], &[1.0, 2.0]]);
        let (n, _) = normalize(&ds).unwrap();
        let col: Vec<f64> = n.trajectories[0].steps.column(0).iter().copied().collect();
        assert_eq!(col, vec![-1.0, 1.0]);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let (train, hold) = split_indices(10, 0.2, 7);
        assert_eq!((train.len(), hold.len()), (8, 2));
        assert!(hold.iter().all(|h| !train.contains(h)));
        assert_eq!(split_indices(10, 0.2, 7), (train, hold));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = tiny_dataset(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn spec_validation_catches_label_mismatch() {
        let mut s = SimConfig::default().learner_spec();
        s.channel_labels.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn registered_specs_are_valid() {
        let cfg = SimConfig::default();
        let h = cfg.expert_spec();
        let r = cfg.learner_spec();
        h.validate().unwrap();
        r.validate().unwrap();
        assert_eq!(h.state_dim, 31);
        assert_eq!(r.state_dim, 12);
        assert!(h.ball_channels().is_some() && r.ball_channels().is_some());
    }
}
