use std::collections::BTreeMap;
use std::sync::Arc;

use netcore::gradcheck::grad_check;
use netcore::layers::Mlp;
use netcore::{Mat, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xembody::cyclevae::*;
use xembody::embodsim::{scripted_expert, SimConfig};
use xembody::trajdata::{normalize, Dataset, EmbodimentSpec};
use xembody::Error;

fn plain_spec(name: &str, d: usize) -> Arc<EmbodimentSpec> {
    Arc::new(EmbodimentSpec {
        name: name.into(),
        state_dim: d,
        joint_count: 1,
        joint_limits: vec![(-1.0, 1.0)],
        channel_labels: (0..d).map(|i| format!("c{i}")).collect(),
        link_lengths: vec![0.1],
    })
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn toy_config() -> CycleVaeConfig {
    CycleVaeConfig {
        latent_dim: 2,
        hidden: 5,
        hidden_layers: 1,
        mapper_hidden: 3,
        batch_size: 5,
        ..CycleVaeConfig::default()
    }
}

/// Tiny model with every parameter randomised, so no layer starts trivial.
fn toy_model(seed: u64, d_h: usize, d_r: usize, cfg: &CycleVaeConfig) -> CycleVaeModel {
    let mut m = CycleVaeModel::new(plain_spec("h", d_h), plain_spec("r", d_r), cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let (r, c) = m.params.get(id).shape();
        m.params.set(id, random_mat(&mut rng, r, c, 0.6)).unwrap();
    }
    m
}

fn kl_integrand_quadrature(mu: f64, sigma: f64) -> f64 {
    // Simpson's rule over +-14 sigma
    let n = 40_000;
    let (a, b) = (mu - 14.0 * sigma, mu + 14.0 * sigma);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let log_q = -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_q.exp() * (log_q - log_p)
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let sigma: f64 = rng.random_range(0.2..2.5);
        let lv = Mat::from_element(1, 1, 2.0 * sigma.ln());
        let (_, kl) = vae_loss(&Mat::zeros(1, 1), &Mat::zeros(1, 1), &Mat::from_element(1, 1, mu), &lv, Reduction::Sum).unwrap();
        let q = kl_integrand_quadrature(mu, sigma);
        assert!((kl - q).abs() < 1e-6, "mu {mu} sigma {sigma}: {kl} vs {q}");
    }
}

#[test]
fn kl_vanishes_only_at_the_prior() {
    let zero = Mat::zeros(3, 2);
    let (_, kl) = vae_loss(&zero, &zero, &zero, &zero, Reduction::Sum).unwrap();
    assert_eq!(kl, 0.0);
    for (m, lv) in [(0.1, 0.0), (0.0, 0.1), (0.0, -0.1)] {
        let (_, kl) = vae_loss(&zero, &zero, &Mat::from_element(3, 2, m), &Mat::from_element(3, 2, lv), Reduction::Sum).unwrap();
        assert!(kl > 0.0);
    }
}

/// Largest-magnitude component positive, first on ties.
fn sign_normalise(v: [f64; 2]) -> [f64; 2] {
    let i = if v[1].abs() > v[0].abs() { 1 } else { 0 };
    if v[i] < 0.0 {
        [-v[0], -v[1]]
    } else {
        v
    }
}

/// Eigenvectors of a 2x2 symmetric matrix in descending eigenvalue order.
fn brute_eigvecs(c: &Mat) -> [[f64; 2]; 2] {
    let (a, b, d) = (c[(0, 0)], c[(0, 1)], c[(1, 1)]);
    let l1 = 0.5 * (a + d) + (0.25 * (a - d).powi(2) + b * b).sqrt();
    let v = if b.abs() > 1e-300 {
        [b, l1 - a]
    } else if a >= d {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let v1 = [v[0] / n, v[1] / n];
    [sign_normalise(v1), sign_normalise([-v1[1], v1[0]])]
}

fn gaussian_2d(rng: &mut ChaCha8Rng, n: usize, angle: f64) -> Mat {
    let (s, c) = angle.sin_cos();
    let mut m = Mat::zeros(n, 2);
    for i in 0..n {
        let x = 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let y: f64 = rng.sample(rand_distr::StandardNormal);
        m[(i, 0)] = c * x - s * y + 0.3;
        m[(i, 1)] = s * x + c * y - 0.1;
    }
    m
}

#[test]
fn rotated_diagonal_covariance_gives_four() {
    let a = 3f64.sqrt();
    let b = 1.5f64.sqrt();
    let h = Mat::from_row_slice(4, 2, &[a, 0.0, -a, 0.0, 0.0, b, 0.0, -b]);
    let r = Mat::from_fn(4, 2, |i, j| if j == 0 { -h[(i, 1)] } else { h[(i, 0)] });
    let sh = LatentBatchStats::from_means(&h, 2).unwrap();
    let sr = LatentBatchStats::from_means(&r, 2).unwrap();
    assert!((&sh.covariance - Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).abs().max() < 1e-12);
    let loss = covariance_alignment_loss(&sh, &sr, 2).unwrap();
    assert!((loss - 4.0).abs() < 1e-9, "{loss}");
    assert_eq!(covariance_alignment_loss(&sh, &sh, 2).unwrap(), 0.0);
}

#[test]
fn covariance_alignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let ah: f64 = rng.random_range(-3.0..3.0);
        let ar: f64 = rng.random_range(-3.0..3.0);
        let h = gaussian_2d(&mut rng, 40, ah);
        let r = gaussian_2d(&mut rng, 40, ar);
        let sh = LatentBatchStats::from_means(&h, 2).unwrap();
        let sr = LatentBatchStats::from_means(&r, 2).unwrap();
        let (qh, qr) = (brute_eigvecs(&sh.covariance), brute_eigvecs(&sr.covariance));
        for top in 1..=2 {
            let expect: f64 = (0..top)
                .map(|j| (qh[j][0] - qr[j][0]).powi(2) + (qh[j][1] - qr[j][1]).powi(2))
                .sum();
            let got = covariance_alignment_loss(&sh, &sr, top).unwrap();
            assert!((got - expect).abs() < 1e-9, "trial {trial} top {top}: {got} vs {expect}");
        }
    }
}

#[test]
fn covariance_alignment_ignores_sign_flips_and_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = random_mat(&mut rng, 30, 4, 1.0);
    let r = random_mat(&mut rng, 30, 4, 1.0);
    let base = covariance_alignment_loss(
        &LatentBatchStats::from_means(&h, 3).unwrap(),
        &LatentBatchStats::from_means(&r, 3).unwrap(),
        3,
    )
    .unwrap();
    let flipped = -&h;
    let mut perm: Vec<usize> = (0..30).collect();
    perm.reverse();
    perm.swap(3, 17);
    let shuffled = Mat::from_fn(30, 4, |i, j| r[(perm[i], j)]);
    let other = covariance_alignment_loss(
        &LatentBatchStats::from_means(&flipped, 3).unwrap(),
        &LatentBatchStats::from_means(&shuffled, 3).unwrap(),
        3,
    )
    .unwrap();
    assert!((base - other).abs() < 1e-12, "{base} vs {other}");
    assert!(LatentBatchStats::from_means(&h.rows(0, 3).into_owned(), 3).is_err());
}

#[test]
fn mean_alignment_by_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random_mat(&mut rng, 9, 3, 1.0);
    let r = random_mat(&mut rng, 11, 3, 1.0);
    let got = mean_alignment_loss(
        &LatentBatchStats::from_means(&h, 1).unwrap(),
        &LatentBatchStats::from_means(&r, 1).unwrap(),
    )
    .unwrap();
    let mut expect = 0.0;
    for j in 0..3 {
        let a: f64 = (0..9).map(|i| h[(i, j)]).sum::<f64>() / 9.0;
        let b: f64 = (0..11).map(|i| r[(i, j)]).sum::<f64>() / 11.0;
        expect += (a - b).powi(2);
    }
    assert!((got - expect).abs() < 1e-12);
    let e1 = Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
    let zero = Mat::zeros(2, 2);
    let unit = mean_alignment_loss(
        &LatentBatchStats::from_means(&e1, 1).unwrap(),
        &LatentBatchStats::from_means(&zero, 1).unwrap(),
    )
    .unwrap();
    assert_eq!(unit, 1.0);
}

#[test]
fn latent_samples_have_the_encoded_moments() {
    let latent = GaussianLatent {
        mean: vec![0.5, -1.0, 2.0],
        log_variance: vec![0.0, -1.5, 1.0],
    };
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|s| sample_latent(&latent, s)).collect();
    let var = latent.variance();
    for i in 0..3 {
        let m = draws.iter().map(|d| d[i]).sum::<f64>() / n as f64;
        assert!((m - latent.mean[i]).abs() < 0.05 * var[i].sqrt());
        for j in 0..3 {
            let mj = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            let c = draws.iter().map(|d| (d[i] - m) * (d[j] - mj)).sum::<f64>() / (n - 1) as f64;
            if i == j {
                assert!((c / var[i] - 1.0).abs() < 0.05, "var {i}: {c} vs {}", var[i]);
            } else {
                assert!(c.abs() < 0.05 * (var[i] * var[j]).sqrt(), "cov {i}{j}: {c}");
            }
        }
    }
    assert_eq!(sample_latent(&latent, 7), sample_latent(&latent, 7));
}

/// d_H = d_R = k, no hidden layers, encoders emit (x, 0), decoders are identity.
fn identity_fixture(k: usize) -> CycleVaeModel {
    let cfg = CycleVaeConfig {
        latent_dim: k,
        hidden_layers: 0,
        batch_size: 4,
        ..CycleVaeConfig::default()
    };
    let mut m = CycleVaeModel::new(plain_spec("h", k), plain_spec("r", k), &cfg).unwrap();
    let enc = Mat::from_fn(k, 2 * k, |i, j| if i == j { 1.0 } else { 0.0 });
    for mlp in [&m.nets.enc_h, &m.nets.enc_r] {
        let l = mlp.layers[0];
        m.params.set(l.w, enc.clone()).unwrap();
        m.params.set(l.b, Mat::zeros(1, 2 * k)).unwrap();
    }
    for mlp in [&m.nets.dec_h, &m.nets.dec_r] {
        let l = mlp.layers[0];
        m.params.set(l.w, Mat::identity(k, k)).unwrap();
        m.params.set(l.b, Mat::zeros(1, k)).unwrap();
    }
    m
}

#[test]
fn identity_fixture_leaves_only_kl() {
    let m = identity_fixture(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_mat(&mut rng, 6, 3, 1.0);
    let w = LossWeights::new(1.0, 0.1);
    let b = m.loss_breakdown(&x, &x, &Noise::zeros(6, 6, 3), &w).unwrap();
    assert_eq!((b.recon_h, b.recon_r, b.cycle), (0.0, 0.0, 0.0));
    assert_eq!((b.mean_align, b.cov_align), (0.0, 0.0));
    let kl = 0.5 * x.iter().map(|v| v * v).sum::<f64>() / 6.0;
    assert!((b.kl_h - kl).abs() < 1e-12 && (b.kl_r - kl).abs() < 1e-12);
    assert!((b.total - (b.kl_h + b.kl_r)).abs() < 1e-12);
    // identity mappers leave codes unchanged
    assert_eq!(m.map_latent(Direction::HtoR, &x).unwrap(), x);
}

#[test]
fn decoder_offset_shows_up_in_each_cycle_path() {
    let mut m = identity_fixture(3);
    let c = Mat::from_row_slice(1, 3, &[0.5, -0.25, 1.0]);
    let norm2: f64 = c.iter().map(|v| v * v).sum();
    m.params.set(m.nets.dec_h.layers[0].b, c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, r) = (random_mat(&mut rng, 5, 3, 1.0), random_mat(&mut rng, 5, 3, 1.0));
    let cyc = cycle_loss(&m, &h, &r, 0, Reduction::Sum);
    // noise is irrelevant only when it is zero; use the breakdown directly
    let b = m.loss_breakdown(&h, &r, &Noise::zeros(5, 5, 3), &LossWeights::new(1.0, 0.0)).unwrap();
    assert!((b.cycle - 2.0 * norm2).abs() < 1e-12, "{}", b.cycle);
    assert!(cyc.unwrap() > 0.0);
}

fn mlp_forward(store: &ParamStore, mlp: &Mlp, x: &Mat) -> Mat {
    let n = mlp.layers.len();
    let mut h = x.clone();
    for (i, l) in mlp.layers.iter().enumerate() {
        let w = store.get(l.w);
        let b = store.get(l.b);
        let mut y = &h * w;
        for mut row in y.row_iter_mut() {
            row += b;
        }
        h = if i + 1 < n { y.map(f64::tanh) } else { y };
    }
    h
}

struct Plain<'a>(&'a CycleVaeModel);

impl Plain<'_> {
    fn encode(&self, d: Domain, x: &Mat) -> (Mat, Mat) {
        let mlp = if d == Domain::H { &self.0.nets.enc_h } else { &self.0.nets.enc_r };
        let out = mlp_forward(&self.0.params, mlp, x);
        let k = self.0.latent_dim();
        let lv = out.columns(k, k).map(|v| v.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1));
        (out.columns(0, k).into_owned(), lv)
    }
    fn decode(&self, d: Domain, z: &Mat) -> Mat {
        let mlp = if d == Domain::H { &self.0.nets.dec_h } else { &self.0.nets.dec_r };
        mlp_forward(&self.0.params, mlp, z)
    }
    fn map(&self, dir: Direction, z: &Mat) -> Mat {
        let mlp = if dir == Direction::HtoR { &self.0.nets.map_hr } else { &self.0.nets.map_rh };
        z + mlp_forward(&self.0.params, mlp, z)
    }
    fn sample(mean: &Mat, lv: &Mat, eps: &Mat) -> Mat {
        mean + lv.map(|v| (0.5 * v).exp()).component_mul(eps)
    }
}

fn sq_rows(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().map(|v| v * v).sum::<f64>() / a.nrows() as f64
}

#[test]
fn cycle_matches_step_by_step_evaluation() {
    let cfg = toy_config();
    let m = toy_model(5, 6, 4, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, r) = (random_mat(&mut rng, 4, 6, 1.0), random_mat(&mut rng, 4, 4, 1.0));
    let noise = Noise::seeded(4, 4, 2, 9);
    let w = LossWeights {
        top_k: Some(2),
        ..LossWeights::new(0.7, 0.3)
    };
    let b = m.loss_breakdown(&h, &r, &noise, &w).unwrap();
    let p = Plain(&m);

    let (mh, lh) = p.encode(Domain::H, &h);
    let (mr, lr) = p.encode(Domain::R, &r);
    let zh = Plain::sample(&mh, &lh, &noise.h);
    let zr = Plain::sample(&mr, &lr, &noise.r);
    let as_r = p.decode(Domain::R, &p.map(Direction::HtoR, &zh));
    let (m2, l2) = p.encode(Domain::R, &as_r);
    let back_h = p.decode(Domain::H, &p.map(Direction::RtoH, &Plain::sample(&m2, &l2, &noise.h_cycle)));
    let as_h = p.decode(Domain::H, &p.map(Direction::RtoH, &zr));
    let (m3, l3) = p.encode(Domain::H, &as_h);
    let back_r = p.decode(Domain::R, &p.map(Direction::HtoR, &Plain::sample(&m3, &l3, &noise.r_cycle)));
    let cycle = sq_rows(&back_h, &h) + sq_rows(&back_r, &r);
    assert!((b.cycle - cycle).abs() < 1e-12, "{} vs {cycle}", b.cycle);

    let (rec_h, kl_h) = vae_loss(&h, &p.decode(Domain::H, &zh), &mh, &lh, Reduction::Sum).unwrap();
    let (rec_r, kl_r) = vae_loss(&r, &p.decode(Domain::R, &zr), &mr, &lr, Reduction::Sum).unwrap();
    for (got, want) in [(b.recon_h, rec_h), (b.kl_h, kl_h), (b.recon_r, rec_r), (b.kl_r, kl_r)] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    let sh = LatentBatchStats::from_means(&mh, 2).unwrap();
    let sr = LatentBatchStats::from_means(&mr, 2).unwrap();
    assert!((b.mean_align - mean_alignment_loss(&sh, &sr).unwrap()).abs() < 1e-12);
    assert!((b.cov_align - covariance_alignment_loss(&sh, &sr, 2).unwrap()).abs() < 1e-12);
    assert!((b.total - b.recomputed_total()).abs() < 1e-12);
}

#[test]
fn zero_weights_leave_the_vae_terms() {
    let cfg = toy_config();
    let m = toy_model(7, 5, 3, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, r) = (random_mat(&mut rng, 5, 5, 1.0), random_mat(&mut rng, 5, 3, 1.0));
    let b = total_loss(&m, &h, &r, &LossWeights::new(0.0, 0.0), 3).unwrap();
    assert!((b.total - (b.recon_h + b.kl_h + b.recon_r + b.kl_r)).abs() < 1e-12);
    assert!(b.terms().iter().all(|v| *v >= 0.0));
    assert_eq!(b, total_loss(&m, &h, &r, &LossWeights::new(0.0, 0.0), 3).unwrap());
}

#[test]
fn every_loss_term_passes_gradient_check() {
    let cfg = toy_config();
    let m = toy_model(21, 5, 3, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (h, r) = (random_mat(&mut rng, 5, 5, 1.0), random_mat(&mut rng, 5, 3, 1.0));
    let noise = Noise::seeded(5, 5, 2, 23);
    let w = LossWeights::new(1.0, 0.1);
    for idx in 0..8 {
        let report = grad_check(
            &m.params,
            |g, p| {
                let v = m.nets.loss_g(g, p, &h, &r, &noise, &w).map_err(Error::into_net)?;
                Ok(if idx == 7 { v.total } else { v.named()[idx].1 })
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "term {idx}: {:?}", report.failures().collect::<Vec<_>>());
    }
}

#[test]
fn batches_must_match_the_domains() {
    let cfg = toy_config();
    let m = toy_model(1, 5, 3, &cfg);
    let h = Mat::zeros(5, 5);
    let w = LossWeights::new(1.0, 0.1);
    assert!(matches!(m.loss_breakdown(&h, &Mat::zeros(5, 4), &Noise::zeros(5, 5, 2), &w), Err(Error::Dimension(_))));
    assert!(m.loss_breakdown(&h, &Mat::zeros(2, 3), &Noise::zeros(5, 2, 2), &w).is_err());
}

fn corpora(n_h: u64, n_r: u64, steps: usize) -> (Dataset, Dataset) {
    let sim = SimConfig {
        steps,
        ..SimConfig::default()
    };
    let build = |spec: EmbodimentSpec, seeds: std::ops::Range<u64>| {
        let spec = Arc::new(spec);
        let t = seeds.map(|s| scripted_expert(&spec, s, &sim).unwrap().0).collect();
        normalize(&Dataset::new(spec, t).unwrap()).unwrap().0
    };
    (build(sim.expert_spec(), 0..n_h), build(sim.learner_spec(), 1_000_000..1_000_000 + n_r))
}

fn small_train_config(steps: u64) -> CycleVaeConfig {
    CycleVaeConfig {
        hidden: 24,
        batch_size: 32,
        steps,
        log_every: 5,
        ..CycleVaeConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_order_free() {
    let (dh, dr) = corpora(30, 10, 32);
    let cfg = small_train_config(40);
    let (a, ta) = train_cyclevae(&dh, &dr, &cfg).unwrap();
    let (b, tb) = train_cyclevae(&dh, &dr, &cfg).unwrap();
    assert_eq!(trace_csv(&ta), trace_csv(&tb));
    assert_eq!(ta.len(), 9);
    let mut shuffled = dh.clone();
    shuffled.trajectories.reverse();
    let (c, tc) = train_cyclevae(&shuffled, &dr, &cfg).unwrap();
    assert_eq!(trace_csv(&ta), trace_csv(&tc));
    for id in a.params.ids() {
        assert_eq!(a.params.get(id), b.params.get(id));
        assert_eq!(a.params.get(id), c.params.get(id));
    }
    let other = CycleVaeConfig { seed: 1, ..cfg };
    let (_, td) = train_cyclevae(&dh, &dr, &other).unwrap();
    assert_ne!(trace_csv(&ta), trace_csv(&td));
}

/// Saves the model, stop state and trace after a chosen step.
struct SnapshotAt {
    step: u64,
    saved: Option<(netcore::checkpoint::Checkpoint, StopState, Vec<TraceRow>)>,
}

impl TrainObserver<CycleVaeModel, TraceRow> for SnapshotAt {
    fn after_step(&mut self, model: &CycleVaeModel, stop: &StopState, trace: &[TraceRow]) -> xembody::Result<()> {
        if model.params.step() == self.step {
            self.saved = Some((model.to_checkpoint(BTreeMap::new())?, stop.clone(), trace.to_vec()));
        }
        Ok(())
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (dh, dr) = corpora(30, 10, 32);
    let cfg = small_train_config(30);
    let mut full = CycleVaeModel::new(dh.spec.clone(), dr.spec.clone(), &cfg).unwrap();
    let mut snap = SnapshotAt { step: 13, saved: None };
    let whole = train_from(&mut full, &dh, &dr, &cfg, StopState::default(), Vec::new(), &mut snap).unwrap();
    let (ck, stop, trace) = snap.saved.unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt.json");
    ck.save(&path).unwrap();
    let (mut back, _) = CycleVaeModel::load(&path).unwrap();
    let rest = train_from(&mut back, &dh, &dr, &cfg, stop, trace, &mut ()).unwrap();
    assert_eq!(rest.steps_run, 17);
    assert_eq!(trace_csv(&rest.trace), trace_csv(&whole.trace));
    for id in full.params.ids() {
        assert_eq!(full.params.get(id), back.params.get(id));
    }
}

#[test]
fn checkpoint_round_trip_preserves_inference() {
    let (dh, dr) = corpora(20, 8, 32);
    let (m, _) = train_cyclevae(&dh, &dr, &small_train_config(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt.json");
    let mut extra = BTreeMap::new();
    extra.insert("note".to_string(), serde_json::Value::from("kept"));
    m.save(&path, extra).unwrap();
    let (back, meta) = CycleVaeModel::load(&path).unwrap();
    assert_eq!(meta["note"], "kept");
    assert!(back.trained);
    let expert = &dh.trajectories[3];
    let raw = m.from_model_space(Domain::H, &expert.steps);
    let raw = xembody::trajdata::Trajectory::new(dh.spec.clone(), expert.dt, raw).unwrap();
    let (a, _) = infer_learner_trajectory(&m, &raw).unwrap();
    let (b, _) = infer_learner_trajectory(&back, &raw).unwrap();
    assert!(a.steps.iter().zip(b.steps.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let s = dr.trajectories[0].state(0).to_vec();
    assert_eq!(infer_expert_state(&m, &s).unwrap(), infer_expert_state(&back, &s).unwrap());
}

#[test]
fn inference_contracts() {
    let (dh, dr) = corpora(20, 8, 32);
    let fresh = CycleVaeModel::new(dh.spec.clone(), dr.spec.clone(), &small_train_config(5)).unwrap();
    assert!(matches!(infer_learner_trajectory(&fresh, &dh.trajectories[0]), Err(Error::Untrained)));
    let (m, _) = train_cyclevae(&dh, &dr, &small_train_config(5)).unwrap();
    let (out, secs) = infer_learner_trajectory(&m, &dh.trajectories[0]).unwrap();
    assert_eq!((out.len(), out.embodiment.state_dim), (32, 12));
    assert!(secs >= 0.0);
    // constant input gives constant output
    let row = dh.trajectories[0].steps.row(5).into_owned();
    let mut constant = dh.trajectories[0].clone();
    for t in 0..constant.len() {
        constant.steps.set_row(t, &row);
    }
    let (c, _) = infer_learner_trajectory(&m, &constant).unwrap();
    assert!((1..c.len()).all(|t| c.steps.row(t) == c.steps.row(0)));
    assert_eq!(infer_expert_state(&m, &[0.0; 12]).unwrap().len(), 31);
    assert!(matches!(infer_expert_state(&m, &[0.0; 11]), Err(Error::Dimension(_))));
    assert!(matches!(infer_learner_trajectory(&m, &dr.trajectories[0]), Err(Error::Dimension(_))));
}

#[test]
fn unnormalized_or_empty_data_is_rejected() {
    let (dh, dr) = corpora(5, 5, 16);
    let cfg = small_train_config(2);
    let mut raw = dh.clone();
    raw.norm_stats = None;
    assert!(train_cyclevae(&raw, &dr, &cfg).is_err());
    let mut empty = dr.clone();
    empty.trajectories.clear();
    assert!(train_cyclevae(&dh, &empty, &cfg).is_err());
}
