//! Causal decoder-only transformer over expert states: next-step prediction,
//! teacher-forced training and autoregressive rollout.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use netcore::checkpoint::Checkpoint;
use netcore::layers::{sinusoidal_positions, CausalSelfAttention, Dense, LayerNorm, Mlp};
use netcore::{optimizer_step, AdamConfig, Graph, Mat, ParamStore, ParamVars, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cyclevae::{canonical_order, from_meta, same_layout, step_rng, to_json, StopState, TrainObserver};
use crate::error::{Error, Result};
use crate::evalkit::smoothness;
use crate::trajdata::{Dataset, EmbodimentSpec, NormStats, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub t_max: usize,
    /// Trajectories per step.
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub log_every: u64,
    pub patience: usize,
    pub min_delta: f64,
    pub ma_window: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff: 128,
            t_max: 128,
            batch_size: 8,
            steps: 1500,
            lr: 1e-3,
            log_every: 10,
            patience: 0,
            min_delta: 1e-4,
            ma_window: 100,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("transformer config: {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.ff == 0 || self.t_max < 2 {
            return bad("ff must be positive and t_max at least 2");
        }
        if self.batch_size == 0 || self.log_every == 0 || self.ma_window == 0 || !(self.lr > 0.0) {
            return bad("batch_size, log_every, ma_window and lr must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerArch {
    pub d_h: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff: usize,
    pub t_max: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln_attn: LayerNorm,
    attn: CausalSelfAttention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

/// Parameter handles of the transformer.
#[derive(Debug, Clone)]
pub struct TransformerNet {
    embed: Dense,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    pub head: Dense,
    pub arch: TransformerArch,
    positions: Mat,
}

impl TransformerNet {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, arch: TransformerArch, rng: &mut R) -> Result<Self> {
        let d = arch.d_model;
        let embed = Dense::new(store, "embed", arch.d_h, d, 1.0, rng)?;
        let blocks = (0..arch.layers)
            .map(|i| {
                Ok(Block {
                    ln_attn: LayerNorm::new(store, &format!("block{i}.ln_attn"), d)?,
                    attn: CausalSelfAttention::new(store, &format!("block{i}.attn"), d, arch.heads, rng)?,
                    ln_ff: LayerNorm::new(store, &format!("block{i}.ln_ff"), d)?,
                    ff: Mlp::new(store, &format!("block{i}.ff"), &[d, arch.ff, d], rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, "ln_out", d)?;
        let head = Dense::new(store, "head", d, arch.d_h, 1.0, rng)?;
        Ok(TransformerNet {
            embed,
            blocks,
            ln_out,
            head,
            arch,
            positions: sinusoidal_positions(arch.t_max, d),
        })
    }

    /// `T x d_h` states to `T x d_h` next-step predictions; row `t` only
    /// sees rows `0..=t`.
    pub fn forward_g(&self, g: &mut Graph<'_>, p: &ParamVars, x: Var) -> Result<Var> {
        let (t, d) = g.shape(x);
        if d != self.arch.d_h {
            return Err(Error::Dimension(format!("sequence has {d} channels, model expects {}", self.arch.d_h)));
        }
        if t == 0 || t > self.arch.t_max {
            return Err(Error::Invalid(format!("sequence length {t} outside 1..={}", self.arch.t_max)));
        }
        let e = self.embed.forward(g, p, x);
        let pos = g.constant(self.positions.rows(0, t).into_owned());
        let mut h = g.add(e, pos);
        for b in &self.blocks {
            let n = b.ln_attn.forward(g, p, h);
            let a = b.attn.forward(g, p, n);
            h = g.add(h, a);
            let n = b.ln_ff.forward(g, p, h);
            let f = b.ff.forward(g, p, n);
            h = g.add(h, f);
        }
        let n = self.ln_out.forward(g, p, h);
        Ok(self.head.forward(g, p, n))
    }

    /// Mean squared next-step error of one model-space trajectory.
    pub fn teacher_forced_g(&self, g: &mut Graph<'_>, p: &ParamVars, traj: &Mat) -> Result<Var> {
        let t = traj.nrows();
        if t < 2 {
            return Err(Error::Invalid("teacher forcing needs at least two steps".into()));
        }
        let x = g.constant(traj.rows(0, t - 1).into_owned());
        let y = g.constant(traj.rows(1, t - 1).into_owned());
        let out = self.forward_g(g, p, x)?;
        let d = g.sub(out, y);
        let sq = g.square(d);
        Ok(g.mean(sq))
    }
}

/// Prefix length and total horizon of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub prefix_length: usize,
    pub horizon: usize,
}

impl RolloutConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.prefix_length == 0 || self.prefix_length >= self.horizon || self.horizon > t_max {
            return Err(Error::Invalid(format!(
                "rollout needs 1 <= prefix ({}) < horizon ({}) <= {t_max}",
                self.prefix_length, self.horizon
            )));
        }
        Ok(())
    }
}

/// The expert behavior model.
#[derive(Debug, Clone)]
pub struct BehaviorTransformer {
    pub params: ParamStore,
    pub net: TransformerNet,
    pub spec: Arc<EmbodimentSpec>,
    /// Statistics mapping raw states to model space; `None` means identity.
    pub norm: Option<NormStats>,
    pub trained: bool,
}

impl BehaviorTransformer {
    pub fn new(spec: Arc<EmbodimentSpec>, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = TransformerArch {
            d_h: spec.state_dim,
            d_model: cfg.d_model,
            heads: cfg.heads,
            layers: cfg.layers,
            ff: cfg.ff,
            t_max: cfg.t_max,
        };
        let mut params = ParamStore::new();
        let net = TransformerNet::build(&mut params, arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Ok(BehaviorTransformer {
            params,
            net,
            spec,
            norm: None,
            trained: false,
        })
    }

    pub fn arch(&self) -> TransformerArch {
        self.net.arch
    }

    /// Forward pass over a model-space sequence on frozen parameters.
    pub fn forward(&self, seq: &Mat) -> Result<Mat> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(seq.clone());
        let out = self.net.forward_g(&mut g, &p, x)?;
        g.check_finite()?;
        Ok(g.value(out).clone())
    }

    /// Next model-space state after `prefix` (`t x d_h`, model space).
    pub fn predict_next(&self, prefix: &Mat) -> Result<Vec<f64>> {
        let out = self.forward(prefix)?;
        Ok(out.row(out.nrows() - 1).iter().copied().collect())
    }

    pub fn to_model_space(&self, raw: &Mat) -> Mat {
        self.norm.as_ref().map_or_else(|| raw.clone(), |n| n.normalize_mat(raw))
    }

    pub fn from_model_space(&self, m: &Mat) -> Mat {
        self.norm.as_ref().map_or_else(|| m.clone(), |n| n.denormalize_mat(m))
    }

    /// Teacher-forced loss over model-space trajectories (mean of per-trajectory MSE).
    pub fn teacher_forced_loss(&self, trajs: &[Mat]) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let loss = batch_loss(&self.net, &mut g, &p, trajs)?;
        g.check_finite()?;
        Ok(g.scalar(loss))
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: BTreeMap<String, Value>) -> Result<()> {
        self.to_checkpoint(extra).save(path)?;
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: BTreeMap<String, Value>) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta = extra;
        ck.meta.insert("kind".into(), Value::from("behavior"));
        ck.meta.insert("arch".into(), to_json(&self.net.arch));
        ck.meta.insert("spec".into(), to_json(&*self.spec));
        ck.meta.insert("norm".into(), to_json(&self.norm));
        ck.meta.insert("trained".into(), Value::from(self.trained));
        ck
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, Value>)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, BTreeMap<String, Value>)> {
        let meta = ck.meta;
        if meta.get("kind").and_then(Value::as_str) != Some("behavior") {
            return Err(Error::Invalid("checkpoint is not a behavior model".into()));
        }
        let arch: TransformerArch = from_meta(&meta, "arch")?;
        let spec: EmbodimentSpec = from_meta(&meta, "spec")?;
        let norm: Option<NormStats> = from_meta(&meta, "norm")?;
        let trained: bool = from_meta(&meta, "trained")?;
        let mut scratch = ParamStore::new();
        let net = TransformerNet::build(&mut scratch, arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        same_layout(&scratch, &ck.params)?;
        Ok((
            BehaviorTransformer {
                params: ck.params,
                net,
                spec: Arc::new(spec),
                norm,
                trained,
            },
            meta,
        ))
    }
}

fn batch_loss(net: &TransformerNet, g: &mut Graph<'_>, p: &ParamVars, trajs: &[Mat]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in trajs {
        let l = net.teacher_forced_g(g, p, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l),
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty trajectory batch".into()))?;
    Ok(g.scale(total, 1.0 / trajs.len() as f64))
}

/// Extends raw expert states `prefix` to `cfg.horizon` steps by repeated
/// [`BehaviorTransformer::predict_next`]. Prefix rows are copied verbatim;
/// predicted rows are denormalized. Returns the trajectory and wall time.
pub fn rollout(model: &BehaviorTransformer, prefix: &Mat, dt: f64, cfg: &RolloutConfig) -> Result<(Trajectory, f64)> {
    cfg.validate(model.arch().t_max)?;
    if prefix.nrows() != cfg.prefix_length {
        return Err(Error::Invalid(format!(
            "prefix has {} rows, rollout expects {}",
            prefix.nrows(),
            cfg.prefix_length
        )));
    }
    if prefix.ncols() != model.arch().d_h {
        return Err(Error::Dimension(format!(
            "prefix has {} channels, model expects {}",
            prefix.ncols(),
            model.arch().d_h
        )));
    }
    let t0 = Instant::now();
    let d = prefix.ncols();
    let mut seq = Mat::zeros(cfg.horizon, d);
    seq.rows_mut(0, cfg.prefix_length).copy_from(&model.to_model_space(prefix));
    for t in cfg.prefix_length..cfg.horizon {
        let next = model.predict_next(&seq.rows(0, t).into_owned())?;
        seq.row_mut(t).copy_from_slice(&next);
    }
    let mut raw = model.from_model_space(&seq);
    raw.rows_mut(0, cfg.prefix_length).copy_from(prefix);
    let secs = t0.elapsed().as_secs_f64();
    Ok((Trajectory::new(model.spec.clone(), dt, raw)?, secs))
}

/// One logged transformer training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseRow {
    pub step: u64,
    pub mse: f64,
}

pub const MSE_TRACE_HEADER: &str = "step,mse";

pub fn mse_trace_csv(rows: &[MseRow]) -> String {
    let mut out = format!("{MSE_TRACE_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.step, r.mse));
    }
    out
}

pub fn parse_mse_trace_csv(text: &str) -> Result<Vec<MseRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(MSE_TRACE_HEADER) {
        return Err(Error::Invalid("unexpected trace header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Invalid(format!("trace row {}: malformed", i + 2));
            let (s, v) = l.split_once(',').ok_or_else(bad)?;
            Ok(MseRow {
                step: s.parse().map_err(|_| bad())?,
                mse: v.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TransformerOutcome {
    pub trace: Vec<MseRow>,
    pub stop: StopState,
    pub steps_run: u64,
    pub seconds: f64,
}

/// Fresh teacher-forced training run.
pub fn train_transformer(data: &Dataset, cfg: &TransformerConfig) -> Result<(BehaviorTransformer, Vec<MseRow>)> {
    let mut model = BehaviorTransformer::new(data.spec.clone(), cfg)?;
    let out = train_transformer_from(&mut model, data, cfg, StopState::default(), Vec::new(), &mut ())?;
    Ok((model, out.trace))
}

/// Continues training `model` from its optimizer step.
pub fn train_transformer_from(
    model: &mut BehaviorTransformer,
    data: &Dataset,
    cfg: &TransformerConfig,
    mut stop: StopState,
    mut trace: Vec<MseRow>,
    observer: &mut dyn TrainObserver<BehaviorTransformer, MseRow>,
) -> Result<TransformerOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(crate::DataError::Empty));
    }
    let Some(norm) = &data.norm_stats else {
        return Err(Error::Invalid("training dataset must be normalized".into()));
    };
    if *data.spec != *model.spec {
        return Err(Error::Dimension("dataset does not match the model's embodiment".into()));
    }
    if data.steps() - 1 > model.arch().t_max {
        return Err(Error::Invalid(format!(
            "trajectories of {} steps exceed t_max {}",
            data.steps(),
            model.arch().t_max
        )));
    }
    model.norm = Some(norm.clone());
    let pool: Vec<&Mat> = canonical_order(&data.trajectories)
        .into_iter()
        .map(|i| &data.trajectories[i].steps)
        .collect();
    let adam = cfg.adam();
    let started = Instant::now();
    let first = model.params.step();
    while model.params.step() < cfg.steps && !stop.stopped {
        let step = model.params.step();
        let mut rng = step_rng(cfg.seed, step);
        let batch: Vec<Mat> = (0..cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let (mse, mut grads) = {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let loss = batch_loss(&model.net, &mut g, &p, &batch)?;
            let mse = g.scalar(loss);
            let raw = g.backward(loss).map_err(|e| non_finite(step, e))?;
            (mse, p.collect(&model.params, raw))
        };
        if !mse.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("mse = {mse}"),
            });
        }
        if cfg.grad_clip > 0.0 {
            grads.clip_norm(cfg.grad_clip);
        }
        optimizer_step(&mut model.params, &grads, &adam).map_err(|e| non_finite(step, e))?;
        stop.push(mse, cfg.ma_window);
        if step % cfg.log_every == 0 || model.params.step() == cfg.steps {
            let row = MseRow { step, mse };
            observer.logged(&row);
            trace.push(row);
            stop.evaluate(cfg.patience, cfg.min_delta);
        }
        model.trained = true;
        observer.after_step(model, &stop, &trace)?;
    }
    Ok(TransformerOutcome {
        trace,
        stop,
        steps_run: model.params.step() - first,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn non_finite(step: u64, e: netcore::NetError) -> Error {
    match e {
        netcore::NetError::NonFinite { op, node } => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite value from `{op}` (node {node})"),
        },
        netcore::NetError::NonFiniteGradient(name) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for `{name}`"),
        },
        other => other.into(),
    }
}

/// Per-rollout timing and smoothness.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationBenchmark {
    /// (wall seconds, S_r) per rollout.
    pub trials: Vec<(f64, f64)>,
    pub mean_time: f64,
    /// Sample standard deviation; `None` with fewer than two rollouts.
    pub std_time: Option<f64>,
    pub mean_smoothness: f64,
}

impl GenerationBenchmark {
    pub fn csv(&self) -> String {
        let mut out = String::from("trial,wall_time_s,S_r\n");
        for (i, (t, s)) in self.trials.iter().enumerate() {
            out.push_str(&format!("{i},{t},{s}\n"));
        }
        out
    }
}

/// Times a rollout from each raw prefix.
pub fn generation_benchmark(model: &BehaviorTransformer, prefixes: &[Mat], dt: f64, cfg: &RolloutConfig) -> Result<GenerationBenchmark> {
    if prefixes.is_empty() {
        return Ok(GenerationBenchmark::default());
    }
    let joints: Vec<usize> = model.spec.joint_channels().collect();
    let trials = prefixes
        .iter()
        .map(|p| {
            let (traj, secs) = rollout(model, p, dt, cfg)?;
            Ok((secs, smoothness(&traj, &joints)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = trials.len() as f64;
    let mean_time = trials.iter().map(|t| t.0).sum::<f64>() / n;
    let std_time = (trials.len() > 1)
        .then(|| (trials.iter().map(|t| (t.0 - mean_time).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    let mean_smoothness = trials.iter().map(|t| t.1).sum::<f64>() / n;
    Ok(GenerationBenchmark {
        trials,
        mean_time,
        std_time,
        mean_smoothness,
    })
}
