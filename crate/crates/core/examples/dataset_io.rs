//! Generates a small scripted corpus, normalizes it, splits it and
//! round-trips it through the JSON-lines format.
//!
//! cargo run --release --example dataset_io

use std::sync::Arc;

use xembody::embodsim::{scripted_expert, SimConfig};
use xembody::trajdata::{dataset_to_string, load_dataset, normalize, save_dataset, split, Dataset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        steps: 48,
        ..SimConfig::default()
    };
    let spec = Arc::new(sim.learner_spec());
    let trajs = (0..20)
        .map(|s| scripted_expert(&spec, s, &sim).map(|(t, _)| t))
        .collect::<xembody::Result<Vec<_>>>()?;
    let data = Dataset::new(spec.clone(), trajs)?;
    println!("{} trajectories of {} steps; channels {:?}", data.len(), data.steps(), spec.channel_labels);

    let (norm, stats) = normalize(&data)?;
    let pooled = norm.stacked_states();
    let mean0 = pooled.column(0).mean();
    println!("normalized channel 0 mean {mean0:.2e}; stats over {} channels", stats.dim());

    let (train, holdout) = split(&data, 0.25, 1)?;
    println!("split: {} train, {} holdout", train.len(), holdout.len());

    let dir = std::env::temp_dir().join("xembody_dataset_io");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("learner.traj.jsonl");
    save_dataset(&data, &path)?;
    let back = load_dataset(&path)?;
    println!(
        "round trip through {} identical: {}",
        path.display(),
        dataset_to_string(&back)? == dataset_to_string(&data)?
    );
    Ok(())
}
