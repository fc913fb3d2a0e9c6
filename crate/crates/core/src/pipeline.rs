//! Commands over one output directory: `data/`, `checkpoints/`, `reports/`
//! and `config.resolved`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use netcore::gradcheck::grad_check;
use netcore::{Graph, Mat, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::behavior::{
    mse_trace_csv, parse_mse_trace_csv, rollout, train_transformer_from, BehaviorTransformer, MseRow, RolloutConfig,
    TransformerConfig,
};
use crate::config::{RunConfig, LEARNER_SEED_OFFSET};
use crate::cyclevae::{
    infer_expert_state, infer_learner_trajectory, parse_trace_csv, trace_csv, train_from, CycleVaeConfig, CycleVaeModel,
    LossWeights, Noise, StopState, TraceRow, TrainObserver,
};
use crate::embodsim::scripted_expert;
use crate::error::{DataError, Error, Result};
use crate::evalkit::{alignment_report, end_to_end_eval, write_report, EvalContext, EvalReport, Variant};
use crate::trajdata::{load_dataset, normalize, normalize_with, save_dataset, Dataset, EmbodimentSpec};

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn expert_data(&self) -> PathBuf {
        self.data().join("expert.traj.jsonl")
    }

    pub fn learner_data(&self) -> PathBuf {
        self.data().join("learner.traj.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }

    pub fn cyclevae_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("cyclevae.ckpt.json")
    }

    pub fn transformer_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("transformer.ckpt.json")
    }

    pub fn cyclevae_trace(&self) -> PathBuf {
        self.checkpoints().join("cyclevae_trace.csv")
    }

    pub fn transformer_trace(&self) -> PathBuf {
        self.checkpoints().join("transformer_trace.csv")
    }

    pub fn eval_json(&self) -> PathBuf {
        self.reports().join("eval.json")
    }

    pub fn gradcheck_csv(&self) -> PathBuf {
        self.reports().join("gradcheck.csv")
    }

    pub fn resolved(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    /// Creates the directory tree and echoes the resolved config.
    pub fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        for dir in [self.data(), self.checkpoints(), self.reports()] {
            std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        write_file(&self.resolved(), &cfg.resolved_text())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes through a sibling temp file so an interrupted write never leaves
/// a truncated artifact.
fn write_file(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    require(path)?;
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn load_required(path: &Path) -> Result<Dataset> {
    require(path)?;
    Ok(load_dataset(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub embodiment: String,
    pub count: usize,
    pub first_seed: u64,
    pub last_seed: u64,
    /// Scripted demos whose own execution caught the ball.
    pub scripted_successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub steps: usize,
    pub dt: f64,
    pub expert: CorpusEntry,
    pub learner: CorpusEntry,
}

fn generate(spec: &Arc<EmbodimentSpec>, first_seed: u64, count: usize, cfg: &RunConfig) -> Result<(Dataset, usize)> {
    let mut trajs = Vec::with_capacity(count);
    let mut ok = 0;
    for i in 0..count as u64 {
        let (t, outcome) = scripted_expert(spec, first_seed + i, &cfg.sim)?;
        ok += usize::from(outcome.success);
        trajs.push(t);
    }
    Ok((Dataset::new(spec.clone(), trajs)?, ok))
}

/// Scripted expert and learner corpora on disjoint task-seed ranges.
pub fn gen_data(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<Manifest> {
    layout.prepare(cfg)?;
    for p in [layout.expert_data(), layout.learner_data(), layout.manifest()] {
        if p.exists() && !force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    let base = cfg.data_seed_base();
    let mut entries = Vec::new();
    for (spec, first, count, path) in [
        (cfg.sim.expert_spec(), base, cfg.n_expert, layout.expert_data()),
        (cfg.sim.learner_spec(), base + LEARNER_SEED_OFFSET, cfg.n_learner, layout.learner_data()),
    ] {
        let spec = Arc::new(spec);
        let (ds, ok) = generate(&spec, first, count, cfg)?;
        save_dataset(&ds, &path)?;
        entries.push(CorpusEntry {
            file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            embodiment: spec.name.clone(),
            count,
            first_seed: first,
            last_seed: first + count as u64 - 1,
            scripted_successes: ok,
        });
    }
    let learner = entries.pop().expect("two corpora");
    let expert = entries.pop().expect("two corpora");
    let manifest = Manifest {
        seed: cfg.seed,
        steps: cfg.sim.steps,
        dt: cfg.sim.dt,
        expert,
        learner,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    write_file(&layout.manifest(), &(text + "\n"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Cyclevae,
    Transformer,
    All,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Ignore existing checkpoints and start over.
    pub force: bool,
    /// Halt after this many optimizer steps in this invocation (checkpointed).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model: &'static str,
    /// Optimizer step the run started from.
    pub start_step: u64,
    pub end_step: u64,
    pub complete: bool,
    pub last_loss: Option<f64>,
}

/// Settings a checkpoint must share with the config to be resumed.
fn fingerprint(cfg: &RunConfig, prefix: &str) -> Value {
    let map: BTreeMap<String, Value> = cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| {
            (k.starts_with(prefix) && !k.ends_with(".steps")) || k.starts_with("sim.") || *k == "seed"
        })
        .map(|(k, v)| (k.to_string(), Value::from(v)))
        .collect();
    serde_json::to_value(map).unwrap_or(Value::Null)
}

struct Saver<'a> {
    path: PathBuf,
    every: u64,
    stop_at: Option<u64>,
    fingerprint: &'a Value,
}

impl Saver<'_> {
    fn extra(&self, stop: &StopState, trace: String) -> BTreeMap<String, Value> {
        let mut extra = BTreeMap::new();
        extra.insert("config".into(), self.fingerprint.clone());
        extra.insert("stop".into(), serde_json::to_value(stop).unwrap_or(Value::Null));
        extra.insert("trace".into(), Value::from(trace));
        extra
    }

    fn due(&self, step: u64) -> (bool, bool) {
        let halt = self.stop_at == Some(step);
        (halt || (self.every > 0 && step % self.every == 0), halt)
    }
}

fn halted(step: u64) -> Error {
    Error::Invalid(format!("{HALT_MARK}{step}"))
}

const HALT_MARK: &str = "halted at step ";

fn is_halt(e: &Error) -> bool {
    matches!(e, Error::Invalid(m) if m.starts_with(HALT_MARK))
}

impl TrainObserver<CycleVaeModel, TraceRow> for Saver<'_> {
    fn after_step(&mut self, model: &CycleVaeModel, stop: &StopState, trace: &[TraceRow]) -> Result<()> {
        let step = model.params.step();
        let (save, halt) = self.due(step);
        if save {
            model.save(&self.path, self.extra(stop, trace_csv(trace)))?;
        }
        if halt {
            return Err(halted(step));
        }
        Ok(())
    }
}

impl TrainObserver<BehaviorTransformer, MseRow> for Saver<'_> {
    fn after_step(&mut self, model: &BehaviorTransformer, stop: &StopState, trace: &[MseRow]) -> Result<()> {
        let step = model.params.step();
        let (save, halt) = self.due(step);
        if save {
            model.save(&self.path, self.extra(stop, mse_trace_csv(trace)))?;
        }
        if halt {
            return Err(halted(step));
        }
        Ok(())
    }
}

fn resume_state(meta: &BTreeMap<String, Value>, fp: &Value, path: &Path) -> Result<(StopState, String)> {
    if meta.get("config") != Some(fp) {
        return Err(Error::Config(format!(
            "{} was trained with different settings; pass --force to start over",
            path.display()
        )));
    }
    let stop = meta
        .get("stop")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Invalid(format!("checkpoint stop state: {e}")))?
        .unwrap_or_default();
    let trace = meta.get("trace").and_then(Value::as_str).unwrap_or("").to_string();
    Ok((stop, trace))
}

fn normalized(path: &Path) -> Result<Dataset> {
    Ok(normalize(&load_required(path)?)?.0)
}

/// Trains (or resumes) the cycle-VAE on the generated corpora.
pub fn train_cyclevae_cmd(cfg: &RunConfig, layout: &Layout, opts: &TrainOptions) -> Result<TrainSummary> {
    layout.prepare(cfg)?;
    let data_h = normalized(&layout.expert_data())?;
    let data_r = normalized(&layout.learner_data())?;
    let vcfg: CycleVaeConfig = cfg.cyclevae_config();
    let fp = fingerprint(cfg, "cyclevae.");
    let path = layout.cyclevae_checkpoint();
    let (mut model, stop, trace) = if path.exists() && !opts.force {
        let (model, meta) = CycleVaeModel::load(&path)?;
        let (stop, trace) = resume_state(&meta, &fp, &path)?;
        (model, stop, parse_trace_csv(&trace)?)
    } else {
        (CycleVaeModel::new(data_h.spec.clone(), data_r.spec.clone(), &vcfg)?, StopState::default(), Vec::new())
    };
    let start = model.params.step();
    let mut saver = Saver {
        path: path.clone(),
        every: cfg.checkpoint_every,
        stop_at: opts.stop_after.map(|n| start + n),
        fingerprint: &fp,
    };
    let outcome = train_from(&mut model, &data_h, &data_r, &vcfg, stop.clone(), trace.clone(), &mut saver);
    let (trace, stop) = match outcome {
        Ok(o) => (o.trace, o.stop),
        Err(e) if is_halt(&e) => {
            let (m, meta) = CycleVaeModel::load(&path)?;
            let (stop, trace) = resume_state(&meta, &fp, &path)?;
            write_file(&layout.cyclevae_trace(), &trace)?;
            return Ok(TrainSummary {
                model: "cyclevae",
                start_step: start,
                end_step: m.params.step(),
                complete: stop.stopped,
                last_loss: parse_trace_csv(&trace)?.last().map(|r| r.loss.total),
            });
        }
        Err(e) => return Err(e),
    };
    let text = trace_csv(&trace);
    model.save(&path, saver.extra(&stop, text.clone()))?;
    write_file(&layout.cyclevae_trace(), &text)?;
    Ok(TrainSummary {
        model: "cyclevae",
        start_step: start,
        end_step: model.params.step(),
        complete: true,
        last_loss: trace.last().map(|r| r.loss.total),
    })
}

/// Trains (or resumes) the behavior transformer on the expert corpus.
pub fn train_transformer_cmd(cfg: &RunConfig, layout: &Layout, opts: &TrainOptions) -> Result<TrainSummary> {
    layout.prepare(cfg)?;
    let data = normalized(&layout.expert_data())?;
    let tcfg: TransformerConfig = cfg.transformer_config();
    let fp = fingerprint(cfg, "transformer.");
    let path = layout.transformer_checkpoint();
    let (mut model, stop, trace) = if path.exists() && !opts.force {
        let (model, meta) = BehaviorTransformer::load(&path)?;
        let (stop, trace) = resume_state(&meta, &fp, &path)?;
        (model, stop, parse_mse_trace_csv(&trace)?)
    } else {
        (BehaviorTransformer::new(data.spec.clone(), &tcfg)?, StopState::default(), Vec::new())
    };
    let start = model.params.step();
    let mut saver = Saver {
        path: path.clone(),
        every: cfg.checkpoint_every,
        stop_at: opts.stop_after.map(|n| start + n),
        fingerprint: &fp,
    };
    let outcome = train_transformer_from(&mut model, &data, &tcfg, stop, trace, &mut saver);
    let (trace, stop) = match outcome {
        Ok(o) => (o.trace, o.stop),
        Err(e) if is_halt(&e) => {
            let (m, meta) = BehaviorTransformer::load(&path)?;
            let (stop, trace) = resume_state(&meta, &fp, &path)?;
            write_file(&layout.transformer_trace(), &trace)?;
            return Ok(TrainSummary {
                model: "transformer",
                start_step: start,
                end_step: m.params.step(),
                complete: stop.stopped,
                last_loss: parse_mse_trace_csv(&trace)?.last().map(|r| r.mse),
            });
        }
        Err(e) => return Err(e),
    };
    let text = mse_trace_csv(&trace);
    model.save(&path, saver.extra(&stop, text.clone()))?;
    write_file(&layout.transformer_trace(), &text)?;
    Ok(TrainSummary {
        model: "transformer",
        start_step: start,
        end_step: model.params.step(),
        complete: true,
        last_loss: trace.last().map(|r| r.mse),
    })
}

pub fn train(cfg: &RunConfig, layout: &Layout, which: Which, opts: &TrainOptions) -> Result<Vec<TrainSummary>> {
    let mut out = Vec::new();
    if matches!(which, Which::Cyclevae | Which::All) {
        out.push(train_cyclevae_cmd(cfg, layout, opts)?);
    }
    if matches!(which, Which::Transformer | Which::All) {
        out.push(train_transformer_cmd(cfg, layout, opts)?);
    }
    Ok(out)
}

fn load_cyclevae(layout: &Layout) -> Result<CycleVaeModel> {
    let path = layout.cyclevae_checkpoint();
    require(&path)?;
    Ok(CycleVaeModel::load(&path)?.0)
}

fn load_transformer(layout: &Layout) -> Result<BehaviorTransformer> {
    let path = layout.transformer_checkpoint();
    require(&path)?;
    Ok(BehaviorTransformer::load(&path)?.0)
}

/// Maps every expert trajectory in `input` to the learner; returns the output path.
pub fn infer_file(layout: &Layout, input: &Path, output: Option<PathBuf>) -> Result<PathBuf> {
    let model = load_cyclevae(layout)?;
    let expert = load_required(input)?;
    let trajs = expert
        .trajectories
        .iter()
        .map(|t| Ok(infer_learner_trajectory(&model, t)?.0))
        .collect::<Result<Vec<_>>>()?;
    let out = output.unwrap_or_else(|| layout.data().join("inferred_learner.traj.jsonl"));
    save_dataset(&Dataset::new(model.spec_r.clone(), trajs)?, &out)?;
    Ok(out)
}

/// Learner start state → expert state → transformer rollout → learner trajectory.
pub fn infer_from_state(cfg: &RunConfig, layout: &Layout, state: &[f64], output: Option<PathBuf>) -> Result<PathBuf> {
    let vae = load_cyclevae(layout)?;
    let behavior = load_transformer(layout)?;
    let start = infer_expert_state(&vae, state)?;
    let prefix = Mat::from_row_slice(1, start.len(), &start);
    let rc = RolloutConfig {
        prefix_length: 1,
        horizon: cfg.sim.steps,
    };
    let (expert, _) = rollout(&behavior, &prefix, cfg.sim.dt, &rc)?;
    let (learner, _) = infer_learner_trajectory(&vae, &expert)?;
    let out = output.unwrap_or_else(|| layout.data().join("from_state_learner.traj.jsonl"));
    save_dataset(&Dataset::new(vae.spec_r.clone(), vec![learner])?, &out)?;
    Ok(out)
}

/// Alignment metrics and end-to-end trials for every variant; writes the
/// report files.
pub fn eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport> {
    layout.prepare(cfg)?;
    let vae = load_cyclevae(layout)?;
    let behavior = if cfg.eval.transformer {
        Some(load_transformer(layout)?)
    } else {
        None
    };
    let missing_norm = || Error::Invalid("cyclevae checkpoint has no normalization statistics".into());
    let data_h = normalize_with(&load_required(&layout.expert_data())?, vae.norm_h.as_ref().ok_or_else(missing_norm)?)?;
    let data_r = normalize_with(&load_required(&layout.learner_data())?, vae.norm_r.as_ref().ok_or_else(missing_norm)?)?;
    let alignment = alignment_report(&vae, &data_h, &data_r, cfg.eval.n_eval, cfg.seed)?;
    let ctx = EvalContext {
        cyclevae: &vae,
        transformer: behavior.as_ref(),
        sim: cfg.sim.clone(),
        expert: vae.spec_h.clone(),
        learner: vae.spec_r.clone(),
    };
    let mut variants = vec![Variant::Recorded];
    if behavior.is_some() {
        variants.push(Variant::Transformer);
    }
    variants.push(Variant::RandomBaseline);
    let mut report = EvalReport {
        alignment,
        variants: variants
            .into_iter()
            .map(|v| end_to_end_eval(&ctx, v, cfg.eval.n_trials, cfg.seed))
            .collect::<Result<_>>()?,
    };
    if !cfg.eval.timing {
        for v in &mut report.variants {
            v.mean_gen_time = 0.0;
            v.std_gen_time = None;
            for t in &mut v.trials {
                t.gen_time = 0.0;
            }
        }
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Invalid(e.to_string()))?;
    write_file(&layout.eval_json(), &(text + "\n"))?;
    render(cfg, layout, &report)?;
    Ok(report)
}

fn render(cfg: &RunConfig, layout: &Layout, report: &EvalReport) -> Result<()> {
    let trace = read_file(&layout.cyclevae_trace())?;
    write_report(layout.reports(), report, &trace, cfg.eval.timing)
}

/// Rebuilds the report files from the stored evaluation.
pub fn report(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport> {
    layout.prepare(cfg)?;
    let text = read_file(&layout.eval_json())?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| Error::Data(DataError::Invalid(format!("eval.json: {e}"))))?;
    render(cfg, layout, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradTerm {
    pub name: String,
    pub passed: bool,
    pub max_rel_error: f64,
    /// Failing parameter entries.
    pub failing: Vec<String>,
}

pub fn gradcheck_csv(terms: &[GradTerm]) -> String {
    let mut out = String::from("term,passed,max_rel_error,failing_params\n");
    for t in terms {
        out.push_str(&format!("{},{},{:e},{}\n", t.name, t.passed, t.max_rel_error, t.failing.join(" ")));
    }
    out
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let v = store.get(id).map(|_| rng.random_range(-0.6..0.6));
        store.set(id, v)?;
    }
    Ok(())
}

fn toy_spec(name: &str, d: usize) -> Arc<EmbodimentSpec> {
    Arc::new(EmbodimentSpec {
        name: name.into(),
        state_dim: d,
        joint_count: 1,
        joint_limits: vec![(-1.0, 1.0)],
        channel_labels: (0..d).map(|i| format!("c{i}")).collect(),
        link_lengths: vec![0.1],
    })
}

/// Finite-difference checks of every loss term on toy sizes. With
/// `inject_fault`, the first parameter feeds each loss through a detached
/// copy, so its analytic gradient misses that path and the check must fail.
pub fn gradcheck(cfg: &RunConfig, inject_fault: bool) -> Result<Vec<GradTerm>> {
    let tol = cfg.eval.gradcheck_tol;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d_h, d_r, n) = (6, 4, 5);
    let vcfg = CycleVaeConfig {
        latent_dim: 2,
        hidden: 5,
        hidden_layers: 1,
        mapper_hidden: 3,
        batch_size: n,
        ..cfg.cyclevae_config()
    };
    let mut vae = CycleVaeModel::new(toy_spec("toy_h", d_h), toy_spec("toy_r", d_r), &vcfg)?;
    randomize(&mut vae.params, &mut rng)?;
    let bh = Mat::from_fn(n, d_h, |_, _| rng.random_range(-1.0..1.0));
    let br = Mat::from_fn(n, d_r, |_, _| rng.random_range(-1.0..1.0));
    let noise = Noise::seeded(n, n, vcfg.latent_dim, cfg.seed);
    let w = LossWeights::from(&vcfg);

    let tcfg = TransformerConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff: 8,
        t_max: 8,
        ..cfg.transformer_config()
    };
    let mut tf = BehaviorTransformer::new(toy_spec("toy_h", d_h), &tcfg)?;
    randomize(&mut tf.params, &mut rng)?;
    let traj = Mat::from_fn(8, d_h, |_, _| rng.random_range(-1.0..1.0));

    let fault = |g: &mut Graph<'_>, p: &netcore::ParamVars, store: &ParamStore, v: netcore::Var| {
        if !inject_fault {
            return v;
        }
        let id = store.ids().next().expect("parameters");
        let detached = g.constant(g.value(p[id]).clone());
        let sq = g.square(detached);
        let s = g.sum(sq);
        g.add(v, s)
    };

    let mut terms = Vec::new();
    let mut record = |name: String, report: netcore::gradcheck::GradCheckReport| {
        terms.push(GradTerm {
            name,
            passed: report.passed(),
            max_rel_error: report.max_rel_error(),
            failing: report.failures().map(|f| f.name.clone()).collect(),
        });
    };
    let names = {
        let mut g = Graph::new();
        let p = vae.params.bind_frozen(&mut g);
        vae.nets.loss_g(&mut g, &p, &bh, &br, &noise, &w)?.named().map(|(n, _)| n)
    };
    for (idx, name) in names.into_iter().enumerate() {
        let report = grad_check(
            &vae.params,
            |g, p| {
                let v = vae.nets.loss_g(g, p, &bh, &br, &noise, &w).map_err(Error::into_net)?;
                Ok(fault(g, p, &vae.params, v.named()[idx].1))
            },
            tol,
        )?;
        record(name.to_string(), report);
    }
    let report = grad_check(
        &tf.params,
        |g, p| {
            let v = tf.net.teacher_forced_g(g, p, &traj).map_err(Error::into_net)?;
            Ok(fault(g, p, &tf.params, v))
        },
        tol,
    )?;
    record("transformer_mse".into(), report);
    Ok(terms)
}

/// Runs [`gradcheck`] and writes `reports/gradcheck.csv`.
pub fn gradcheck_cmd(cfg: &RunConfig, layout: &Layout, inject_fault: bool) -> Result<(Vec<GradTerm>, f64)> {
    layout.prepare(cfg)?;
    let t0 = Instant::now();
    let terms = gradcheck(cfg, inject_fault)?;
    let secs = t0.elapsed().as_secs_f64();
    write_file(&layout.gradcheck_csv(), &gradcheck_csv(&terms))?;
    Ok((terms, secs))
}
