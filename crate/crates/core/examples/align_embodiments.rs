//! Trains the cycle-consistent VAE pair on unpaired expert and learner
//! corpora, reports latent alignment, and transfers one expert demo.
//!
//! cargo run --release --example align_embodiments [steps]

use std::sync::Arc;

use xembody::cyclevae::{infer_learner_trajectory, train_cyclevae, CycleVaeConfig};
use xembody::embodsim::{execute_trajectory, scripted_expert, scripted_plan, SimConfig, TaskPlan};
use xembody::evalkit::alignment_report;
use xembody::trajdata::{normalize, Dataset, EmbodimentSpec};

fn corpus(spec: &Arc<EmbodimentSpec>, seeds: std::ops::Range<u64>, sim: &SimConfig) -> xembody::Result<Dataset> {
    let trajs = seeds
        .map(|s| scripted_expert(spec, s, sim).map(|(t, _)| t))
        .collect::<xembody::Result<Vec<_>>>()?;
    Ok(Dataset::new(spec.clone(), trajs)?)
}

fn main() -> xembody::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let sim = SimConfig {
        steps: 64,
        ..SimConfig::default()
    };
    let (sh, sr) = (Arc::new(sim.expert_spec()), Arc::new(sim.learner_spec()));
    let (data_h, _) = normalize(&corpus(&sh, 0..400, &sim)?)?;
    let (data_r, _) = normalize(&corpus(&sr, 1_000_000..1_000_100, &sim)?)?;

    let cfg = CycleVaeConfig {
        steps,
        log_every: steps / 5,
        ..CycleVaeConfig::default()
    };
    let (model, trace) = train_cyclevae(&data_h, &data_r, &cfg)?;
    for row in &trace {
        println!("step {:5}  total loss {:.4}", row.step, row.loss.total);
    }

    let report = alignment_report(&model, &data_h, &data_r, 300, 0)?;
    println!(
        "latent MMD: before {:.4}, after {:.4} (bandwidth {:.3})",
        report.mmd_before.value, report.mmd_after.value, report.mmd_after.sigma
    );

    let plan = TaskPlan::from_seed(2_000_000, &sim);
    let (demo, _) = scripted_plan(&sh, &plan, &sim)?;
    let (mapped, secs) = infer_learner_trajectory(&model, &demo)?;
    let (_, outcome) = execute_trajectory(&mapped, plan.toss_velocity, &sim)?;
    println!(
        "mapped a {}-step expert demo in {:.1} ms; learner catch: {} (miss {:.3} m)",
        demo.len(),
        secs * 1e3,
        outcome.success,
        outcome.miss_distance
    );
    Ok(())
}
