use std::collections::BTreeMap;
use std::sync::Arc;

use netcore::gradcheck::grad_check;
use netcore::{Graph, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xembody::behavior::*;
use xembody::embodsim::{scripted_expert, SimConfig};
use xembody::trajdata::{normalize, Dataset};
use xembody::Error;

fn tiny_config() -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        ff: 24,
        t_max: 24,
        batch_size: 2,
        log_every: 5,
        ..TransformerConfig::default()
    }
}

fn expert_data(n: u64, steps: usize) -> Dataset {
    let sim = SimConfig {
        steps,
        ..SimConfig::default()
    };
    let spec = Arc::new(sim.expert_spec());
    let t = (0..n).map(|s| scripted_expert(&spec, s, &sim).unwrap().0).collect();
    normalize(&Dataset::new(spec, t).unwrap()).unwrap().0
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn outputs_ignore_future_inputs() {
    let data = expert_data(1, 8);
    let model = BehaviorTransformer::new(data.spec.clone(), &tiny_config()).unwrap();
    let d = data.spec.state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let len = rng.random_range(2..=24);
        let cut = rng.random_range(1..len);
        let seq = random_mat(&mut rng, len, d);
        let mut perturbed = seq.clone();
        for t in cut..len {
            for c in 0..d {
                perturbed[(t, c)] += rng.random_range(-5.0..5.0);
            }
        }
        let a = model.forward(&seq).unwrap();
        let b = model.forward(&perturbed).unwrap();
        assert_eq!(a.rows(0, cut), b.rows(0, cut), "len {len} cut {cut}");
    }
}

#[test]
fn rollout_keeps_prefix_and_appends_predictions() {
    let data = expert_data(2, 12);
    let (model, _) = train_transformer(
        &data,
        &TransformerConfig {
            steps: 5,
            ..tiny_config()
        },
    )
    .unwrap();
    let raw = data.norm_stats.as_ref().unwrap().denormalize_mat(&data.trajectories[0].steps);
    for t in 1..6 {
        let prefix = raw.rows(0, t).into_owned();
        let cfg = RolloutConfig {
            prefix_length: t,
            horizon: 12,
        };
        let (a, _) = rollout(&model, &prefix, 0.02, &cfg).unwrap();
        let (b, _) = rollout(&model, &prefix, 0.02, &cfg).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a.steps.rows(0, t), prefix.rows(0, t));
        assert_eq!(a.steps, b.steps);

        let (one, _) = rollout(
            &model,
            &prefix,
            0.02,
            &RolloutConfig {
                prefix_length: t,
                horizon: t + 1,
            },
        )
        .unwrap();
        assert_eq!(one.len(), t + 1);
        let next = model.predict_next(&model.to_model_space(&prefix)).unwrap();
        let expect = model.from_model_space(&Mat::from_row_slice(1, next.len(), &next));
        assert_eq!(one.steps.row(t), expect.row(0));
        assert_eq!(a.steps.row(t), expect.row(0));
    }
}

#[test]
fn rollout_rejects_bad_configs() {
    let data = expert_data(1, 8);
    let model = BehaviorTransformer::new(data.spec.clone(), &tiny_config()).unwrap();
    let prefix = Mat::zeros(2, data.spec.state_dim);
    let bad = [(0, 5), (2, 2), (2, 25), (3, 5)];
    for (p, h) in bad {
        let cfg = RolloutConfig {
            prefix_length: p,
            horizon: h,
        };
        assert!(rollout(&model, &prefix, 0.02, &cfg).is_err(), "{p} {h}");
    }
    let wrong_width = Mat::zeros(2, 3);
    let cfg = RolloutConfig {
        prefix_length: 2,
        horizon: 5,
    };
    assert!(matches!(rollout(&model, &wrong_width, 0.02, &cfg), Err(Error::Dimension(_))));
}

#[test]
fn overfits_a_single_trajectory() {
    let data = expert_data(1, 12);
    let cfg = TransformerConfig {
        d_model: 32,
        heads: 4,
        layers: 2,
        ff: 64,
        batch_size: 1,
        steps: 800,
        lr: 3e-3,
        log_every: 50,
        ..tiny_config()
    };
    let (model, trace) = train_transformer(&data, &cfg).unwrap();
    let mse = model.teacher_forced_loss(&[data.trajectories[0].steps.clone()]).unwrap();
    assert!(mse < 1e-3, "mse {mse}, trace tail {:?}", trace.last());
}

#[test]
fn gradients_match_finite_differences() {
    let data = expert_data(1, 6);
    let cfg = TransformerConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff: 8,
        t_max: 8,
        ..TransformerConfig::default()
    };
    let model = BehaviorTransformer::new(data.spec.clone(), &cfg).unwrap();
    // the head starts small; randomise everything so no path is trivial
    let mut params = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in params.ids().collect::<Vec<_>>() {
        let v = params.get(id).map(|_| rng.random_range(-0.5..0.5));
        params.set(id, v).unwrap();
    }
    let traj = data.trajectories[0].steps.clone();
    let report = grad_check(
        &params,
        |g: &mut Graph<'_>, p| model.net.teacher_forced_g(g, p, &traj).map_err(Error::into_net),
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn initial_loss_is_on_the_data_scale() {
    let data = expert_data(8, 20);
    let model = BehaviorTransformer::new(data.spec.clone(), &tiny_config()).unwrap();
    let trajs: Vec<Mat> = data.trajectories.iter().map(|t| t.steps.clone()).collect();
    let loss = model.teacher_forced_loss(&trajs).unwrap();
    let stacked = data.stacked_states();
    let n = stacked.len() as f64;
    let mean = stacked.sum() / n;
    let var = stacked.map(|x| (x - mean).powi(2)).sum() / n;
    assert!(loss > var / 4.0 && loss < 4.0 * var, "loss {loss} var {var}");
}

#[test]
fn training_is_deterministic_and_order_free() {
    let data = expert_data(4, 10);
    let cfg = TransformerConfig {
        steps: 12,
        ..tiny_config()
    };
    let (a, ta) = train_transformer(&data, &cfg).unwrap();
    let (b, tb) = train_transformer(&data, &cfg).unwrap();
    let mut shuffled = data.clone();
    shuffled.trajectories.reverse();
    let (c, tc) = train_transformer(&shuffled, &cfg).unwrap();
    assert_eq!(mse_trace_csv(&ta), mse_trace_csv(&tb));
    assert_eq!(mse_trace_csv(&ta), mse_trace_csv(&tc));
    assert_eq!(ta.len(), 4);
    for id in a.params.ids() {
        assert_eq!(a.params.get(id), b.params.get(id));
        assert_eq!(a.params.get(id), c.params.get(id));
    }
    let parsed = parse_mse_trace_csv(&mse_trace_csv(&ta)).unwrap();
    assert_eq!(parsed, ta);
}

#[test]
fn rejects_unusable_training_data() {
    let data = expert_data(2, 10);
    let cfg = tiny_config();
    let mut raw = data.clone();
    raw.norm_stats = None;
    assert!(train_transformer(&raw, &cfg).is_err());
    let long = expert_data(1, 40);
    assert!(train_transformer(&long, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_rollouts() {
    let data = expert_data(2, 10);
    let cfg = TransformerConfig {
        steps: 6,
        ..tiny_config()
    };
    let (model, _) = train_transformer(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("behavior.json");
    let mut extra = BTreeMap::new();
    extra.insert("note".to_string(), serde_json::Value::from("x"));
    model.save(&path, extra).unwrap();
    let (back, meta) = BehaviorTransformer::load(&path).unwrap();
    assert_eq!(meta["note"], "x");
    assert!(back.trained);
    let prefix = data.norm_stats.as_ref().unwrap().denormalize_mat(&data.trajectories[1].steps.rows(0, 2).into_owned());
    let rc = RolloutConfig {
        prefix_length: 2,
        horizon: 10,
    };
    assert_eq!(
        rollout(&model, &prefix, 0.02, &rc).unwrap().0.steps,
        rollout(&back, &prefix, 0.02, &rc).unwrap().0.steps
    );
}

#[test]
fn benchmark_summarises_rollouts() {
    let data = expert_data(3, 10);
    let model = BehaviorTransformer::new(data.spec.clone(), &tiny_config()).unwrap();
    let rc = RolloutConfig {
        prefix_length: 1,
        horizon: 8,
    };
    let empty = generation_benchmark(&model, &[], 0.02, &rc).unwrap();
    assert!(empty.trials.is_empty() && empty.std_time.is_none());

    let prefixes: Vec<Mat> = data.trajectories.iter().map(|t| t.steps.rows(0, 1).into_owned()).collect();
    let one = generation_benchmark(&model, &prefixes[..1], 0.02, &rc).unwrap();
    assert!(one.std_time.is_none());
    let all = generation_benchmark(&model, &prefixes, 0.02, &rc).unwrap();
    assert_eq!(all.trials.len(), 3);
    assert!(all.std_time.is_some());
    assert_eq!(all.csv().lines().count(), 4);
    assert!(all.mean_smoothness >= 0.0);
}
