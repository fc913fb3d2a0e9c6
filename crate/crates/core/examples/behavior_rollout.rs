//! Trains the causal behavior transformer on scripted expert demos and
//! completes an unseen task from a short observed prefix.
//!
//! cargo run --release --example behavior_rollout [steps]

use std::sync::Arc;

use xembody::behavior::{rollout, train_transformer, RolloutConfig, TransformerConfig};
use xembody::embodsim::{execute_trajectory, scripted_expert, scripted_plan, SimConfig, TaskPlan};
use xembody::trajdata::{normalize, Dataset};

fn main() -> xembody::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let sim = SimConfig {
        steps: 48,
        ..SimConfig::default()
    };
    let spec = Arc::new(sim.expert_spec());
    let trajs = (0..200)
        .map(|s| scripted_expert(&spec, s, &sim).map(|(t, _)| t))
        .collect::<xembody::Result<Vec<_>>>()?;
    let (data, _) = normalize(&Dataset::new(spec.clone(), trajs)?)?;

    let cfg = TransformerConfig {
        d_model: 32,
        ff: 64,
        t_max: 48,
        steps,
        log_every: steps / 5,
        ..TransformerConfig::default()
    };
    let (model, trace) = train_transformer(&data, &cfg)?;
    for row in &trace {
        println!("step {:5}  teacher-forced mse {:.5}", row.step, row.mse);
    }

    let plan = TaskPlan::from_seed(9_000_000, &sim);
    let (demo, _) = scripted_plan(&spec, &plan, &sim)?;
    let rc = RolloutConfig {
        prefix_length: 4,
        horizon: sim.steps,
    };
    let prefix = demo.steps.rows(0, rc.prefix_length).into_owned();
    let (generated, secs) = rollout(&model, &prefix, sim.dt, &rc)?;
    let diff = &generated.steps - &demo.steps;
    let rmse = (diff.map(|v| v * v).mean()).sqrt();
    let (_, outcome) = execute_trajectory(&generated, plan.toss_velocity, &sim)?;
    println!(
        "rolled out {} steps in {:.1} ms; rmse to the scripted demo {rmse:.4}; catch: {}",
        generated.len(),
        secs * 1e3,
        outcome.success
    );
    Ok(())
}
