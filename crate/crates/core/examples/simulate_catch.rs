//! Scripted toss-and-catch on both embodiments, plus EKF tracking of the
//! noisy ball observations.
//!
//! cargo run --release --example simulate_catch [task_seed]

use std::sync::Arc;

use xembody::embodsim::{ekf_track, observe_ball, execute_trajectory, scripted_plan, simulate_ball, BallState, SimConfig, TaskPlan};

fn main() -> xembody::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let sim = SimConfig::default();
    let plan = TaskPlan::from_seed(seed, &sim);
    for spec in [Arc::new(sim.expert_spec()), Arc::new(sim.learner_spec())] {
        let (demo, feasible) = scripted_plan(&spec, &plan, &sim)?;
        let (traj, outcome) = execute_trajectory(&demo, plan.toss_velocity, &sim)?;
        println!(
            "{:8} {} steps x {} channels  feasible {feasible}  success {}  miss {:.3} m  release {:.2}s  catch {:.2}s",
            spec.name,
            traj.len(),
            spec.state_dim,
            outcome.success,
            outcome.miss_distance,
            outcome.release_time,
            outcome.catch_time
        );
    }

    let ball = BallState {
        position: [0.4, 0.0, 0.3],
        velocity: plan.toss_velocity,
    };
    let truth = simulate_ball(&ball, 1.0, &sim)?;
    let obs = observe_ball(&truth, sim.obs_noise_std, seed);
    let track = ekf_track(&obs, &sim)?;
    let rmse = |est: &mut dyn Iterator<Item = [f64; 3]>| {
        let (mut s, mut n) = (0.0, 0);
        for (e, t) in est.zip(&truth) {
            s += (0..3).map(|k| (e[k] - t.position[k]).powi(2)).sum::<f64>();
            n += 1;
        }
        (s / n as f64).sqrt()
    };
    let raw = rmse(&mut obs.iter().copied());
    let filtered = rmse(&mut track.estimates.iter().map(|e| e.position));
    println!("ball tracking over {} steps: raw rmse {raw:.4} m, EKF rmse {filtered:.4} m", truth.len());
    println!("final covariance trace {:.2e}", track.covariance_traces.last().copied().unwrap_or(f64::NAN));
    Ok(())
}
