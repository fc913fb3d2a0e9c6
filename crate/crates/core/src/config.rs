//! Flat `key = value` run configuration with schema validation.
//!
//! Precedence, lowest first: built-in defaults, config file, `XEMBODY_*`
//! environment variables (`__` stands for `.`, so `XEMBODY_CYCLEVAE__LAMBDA2`
//! sets `cyclevae.lambda2`), then command-line overrides.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::behavior::TransformerConfig;
use crate::cyclevae::{CycleVaeConfig, Reduction};
use crate::embodsim::SimConfig;
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "XEMBODY_";

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_trials: usize,
    /// States per domain used by the alignment MMD and projection.
    pub n_eval: usize,
    /// Write wall-clock columns; off keeps reports byte-reproducible.
    pub timing: bool,
    /// Run the transformer-rollout variant.
    pub transformer: bool,
    pub gradcheck_tol: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_trials: 50,
            n_eval: 500,
            timing: false,
            transformer: true,
            gradcheck_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub n_expert: usize,
    pub n_learner: usize,
    pub cyclevae: CycleVaeConfig,
    pub transformer: TransformerConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
    /// Steps between resumable training checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            sim: SimConfig {
                steps: 64,
                ..SimConfig::default()
            },
            n_expert: 1000,
            n_learner: 200,
            cyclevae: CycleVaeConfig::default(),
            transformer: TransformerConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("out"),
            checkpoint_every: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (s, c, t, e) = (&mut self.sim, &mut self.cyclevae, &mut self.transformer, &mut self.eval);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "sim.gravity" => s.gravity = parse(key, v)?,
            "sim.dt" => s.dt = parse(key, v)?,
            "sim.obs_noise_std" => s.obs_noise_std = parse(key, v)?,
            "sim.process_noise_std" => s.process_noise_std = parse(key, v)?,
            "sim.catch_radius" => s.catch_radius = parse(key, v)?,
            "sim.steps" => s.steps = parse(key, v)?,
            "sim.expert_links" => s.expert_links = parse_list(key, v)?,
            "sim.learner_links" => s.learner_links = parse_list(key, v)?,
            "sim.n_expert" => self.n_expert = parse(key, v)?,
            "sim.n_learner" => self.n_learner = parse(key, v)?,
            "cyclevae.latent_dim" => c.latent_dim = parse(key, v)?,
            "cyclevae.hidden" => c.hidden = parse(key, v)?,
            "cyclevae.hidden_layers" => c.hidden_layers = parse(key, v)?,
            "cyclevae.mapper_hidden" => c.mapper_hidden = parse(key, v)?,
            "cyclevae.lambda1" => c.lambda1 = parse(key, v)?,
            "cyclevae.lambda2" => c.lambda2 = parse(key, v)?,
            "cyclevae.top_k" => c.top_k = if v == "all" { None } else { Some(parse(key, v)?) },
            "cyclevae.batch_size" => c.batch_size = parse(key, v)?,
            "cyclevae.steps" => c.steps = parse(key, v)?,
            "cyclevae.lr" => c.lr = parse(key, v)?,
            "cyclevae.log_every" => c.log_every = parse(key, v)?,
            "cyclevae.patience" => c.patience = parse(key, v)?,
            "cyclevae.min_delta" => c.min_delta = parse(key, v)?,
            "cyclevae.ma_window" => c.ma_window = parse(key, v)?,
            "cyclevae.grad_clip" => c.grad_clip = parse(key, v)?,
            "cyclevae.recon" => {
                c.recon = match v {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(Error::Config(format!("{key} must be sum or mean, got {v:?}"))),
                }
            }
            "cyclevae.tied_init" => c.tied_init = parse(key, v)?,
            "transformer.d_model" => t.d_model = parse(key, v)?,
            "transformer.heads" => t.heads = parse(key, v)?,
            "transformer.layers" => t.layers = parse(key, v)?,
            "transformer.ff" => t.ff = parse(key, v)?,
            "transformer.t_max" => t.t_max = parse(key, v)?,
            "transformer.batch_size" => t.batch_size = parse(key, v)?,
            "transformer.steps" => t.steps = parse(key, v)?,
            "transformer.lr" => t.lr = parse(key, v)?,
            "transformer.log_every" => t.log_every = parse(key, v)?,
            "transformer.patience" => t.patience = parse(key, v)?,
            "transformer.min_delta" => t.min_delta = parse(key, v)?,
            "transformer.ma_window" => t.ma_window = parse(key, v)?,
            "transformer.grad_clip" => t.grad_clip = parse(key, v)?,
            "eval.n_trials" => e.n_trials = parse(key, v)?,
            "eval.n_eval" => e.n_eval = parse(key, v)?,
            "eval.timing" => e.timing = parse(key, v)?,
            "eval.transformer" => e.transformer = parse(key, v)?,
            "eval.gradcheck_tol" => e.gradcheck_tol = parse(key, v)?,
            "io.out" => self.out = PathBuf::from(v),
            "io.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, c, t, e) = (&self.sim, &self.cyclevae, &self.transformer, &self.eval);
        vec![
            ("seed", self.seed.to_string()),
            ("sim.gravity", s.gravity.to_string()),
            ("sim.dt", s.dt.to_string()),
            ("sim.obs_noise_std", s.obs_noise_std.to_string()),
            ("sim.process_noise_std", s.process_noise_std.to_string()),
            ("sim.catch_radius", s.catch_radius.to_string()),
            ("sim.steps", s.steps.to_string()),
            ("sim.expert_links", list(&s.expert_links)),
            ("sim.learner_links", list(&s.learner_links)),
            ("sim.n_expert", self.n_expert.to_string()),
            ("sim.n_learner", self.n_learner.to_string()),
            ("cyclevae.latent_dim", c.latent_dim.to_string()),
            ("cyclevae.hidden", c.hidden.to_string()),
            ("cyclevae.hidden_layers", c.hidden_layers.to_string()),
            ("cyclevae.mapper_hidden", c.mapper_hidden.to_string()),
            ("cyclevae.lambda1", c.lambda1.to_string()),
            ("cyclevae.lambda2", c.lambda2.to_string()),
            ("cyclevae.top_k", c.top_k.map_or_else(|| "all".to_string(), |k| k.to_string())),
            ("cyclevae.batch_size", c.batch_size.to_string()),
            ("cyclevae.steps", c.steps.to_string()),
            ("cyclevae.lr", c.lr.to_string()),
            ("cyclevae.log_every", c.log_every.to_string()),
            ("cyclevae.patience", c.patience.to_string()),
            ("cyclevae.min_delta", c.min_delta.to_string()),
            ("cyclevae.ma_window", c.ma_window.to_string()),
            ("cyclevae.grad_clip", c.grad_clip.to_string()),
            (
                "cyclevae.recon",
                match c.recon {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .to_string(),
            ),
            ("cyclevae.tied_init", c.tied_init.to_string()),
            ("transformer.d_model", t.d_model.to_string()),
            ("transformer.heads", t.heads.to_string()),
            ("transformer.layers", t.layers.to_string()),
            ("transformer.ff", t.ff.to_string()),
            ("transformer.t_max", t.t_max.to_string()),
            ("transformer.batch_size", t.batch_size.to_string()),
            ("transformer.steps", t.steps.to_string()),
            ("transformer.lr", t.lr.to_string()),
            ("transformer.log_every", t.log_every.to_string()),
            ("transformer.patience", t.patience.to_string()),
            ("transformer.min_delta", t.min_delta.to_string()),
            ("transformer.ma_window", t.ma_window.to_string()),
            ("transformer.grad_clip", t.grad_clip.to_string()),
            ("eval.n_trials", e.n_trials.to_string()),
            ("eval.n_eval", e.n_eval.to_string()),
            ("eval.timing", e.timing.to_string()),
            ("eval.transformer", e.transformer.to_string()),
            ("eval.gradcheck_tol", e.gradcheck_tol.to_string()),
            ("io.out", self.out.display().to_string()),
            ("io.checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Applies a config file's text. Duplicate keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    /// Applies `XEMBODY_*` variables from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_lowercase().replace("__", "."), v)))
            .collect();
        vars.sort();
        for (k, v) in vars {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults, then `file_text`, then environment, then `overrides`.
    pub fn resolve(
        file_text: Option<&str>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        cfg.apply_env(env)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.sim.validate().map_err(wrap)?;
        self.cyclevae_config().validate().map_err(wrap)?;
        self.transformer_config().validate().map_err(wrap)?;
        if self.n_expert == 0 || self.n_learner == 0 {
            return Err(Error::Config("sim.n_expert and sim.n_learner must be positive".into()));
        }
        if self.n_learner as u64 >= LEARNER_SEED_OFFSET || self.n_expert as u64 >= LEARNER_SEED_OFFSET {
            return Err(Error::Config(format!("dataset counts must stay below {LEARNER_SEED_OFFSET}")));
        }
        if self.sim.steps > self.transformer.t_max {
            return Err(Error::Config(format!(
                "sim.steps ({}) exceeds transformer.t_max ({})",
                self.sim.steps, self.transformer.t_max
            )));
        }
        if self.eval.n_trials == 0 || self.eval.n_eval < 3 {
            return Err(Error::Config("eval.n_trials must be positive and eval.n_eval at least 3".into()));
        }
        if !(self.eval.gradcheck_tol > 0.0) {
            return Err(Error::Config("eval.gradcheck_tol must be positive".into()));
        }
        Ok(())
    }

    /// Cycle-VAE settings with the run seed.
    pub fn cyclevae_config(&self) -> CycleVaeConfig {
        CycleVaeConfig {
            seed: self.seed,
            ..self.cyclevae.clone()
        }
    }

    /// Transformer settings with a seed derived from the run seed.
    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            seed: self.seed.wrapping_add(1),
            ..self.transformer.clone()
        }
    }

    /// First task seed of the expert corpus; learner seeds follow at
    /// [`LEARNER_SEED_OFFSET`].
    pub fn data_seed_base(&self) -> u64 {
        self.seed.wrapping_mul(10 * LEARNER_SEED_OFFSET)
    }

    /// Text of `config.resolved`. `io.out` is left out so the echo is the
    /// same wherever the run lives.
    pub fn resolved_text(&self) -> String {
        let mut out = String::from("# resolved configuration; rerun with --config <this file> --out <dir>\n");
        for (k, v) in self.entries() {
            if k != "io.out" {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

/// Gap between expert and learner task seeds in generated corpora.
pub const LEARNER_SEED_OFFSET: u64 = 1_000_000;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let cfg = RunConfig::default();
        let mut back = RunConfig::default();
        back.seed = 99;
        back.cyclevae.top_k = Some(2);
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_entry_is_settable() {
        let mut cfg = RunConfig::default();
        for (k, v) in RunConfig::default().entries() {
            cfg.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }
}
