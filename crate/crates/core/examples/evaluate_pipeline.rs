//! Runs the whole pipeline through the library API at a reduced scale:
//! data generation, both trainings, evaluation and the report files.
//!
//! cargo run --release --example evaluate_pipeline [out_dir]

use xembody::config::RunConfig;
use xembody::evalkit::METRICS_FILE;
use xembody::pipeline::{self, Layout, TrainOptions, Which};

const CONFIG: &str = "
sim.n_expert = 300
sim.n_learner = 60
cyclevae.steps = 800
transformer.d_model = 32
transformer.ff = 64
transformer.steps = 300
eval.n_trials = 20
eval.n_eval = 200
";

fn main() -> xembody::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/example".into());
    let overrides = [("io.out".to_string(), out)];
    let cfg = RunConfig::resolve(Some(CONFIG), std::env::vars(), &overrides)?;
    let layout = Layout::new(&cfg.out);

    let manifest = pipeline::gen_data(&cfg, &layout, true)?;
    println!("corpora: {} expert, {} learner", manifest.expert.count, manifest.learner.count);
    let opts = TrainOptions {
        force: true,
        stop_after: None,
    };
    for s in pipeline::train(&cfg, &layout, Which::All, &opts)? {
        println!("trained {} for {} steps", s.model, s.end_step);
    }
    let report = pipeline::eval(&cfg, &layout)?;
    let a = &report.alignment;
    println!("latent MMD {:.4} -> {:.4}", a.mmd_before.value, a.mmd_after.value);
    print!(
        "{}",
        std::fs::read_to_string(layout.reports().join(METRICS_FILE)).map_err(|e| xembody::Error::Invalid(e.to_string()))?
    );
    println!("reports written to {}", layout.reports().display());
    Ok(())
}
