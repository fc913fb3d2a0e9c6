//! Two VAEs (expert domain H, learner domain R) joined by residual latent
//! mappers, trained with reconstruction, KL, cycle and latent alignment
//! losses on unpaired state batches.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use netcore::checkpoint::Checkpoint;
use netcore::eigen::sym_eigen;
use netcore::layers::Mlp;
use netcore::{optimizer_step, AdamConfig, Graph, Mat, ParamStore, ParamVars, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trajdata::{Dataset, EmbodimentSpec, NormStats, Trajectory};

/// Log-variance outputs are clamped to this range.
pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 10.0);
/// Eigenpairs closer than this exchange no gradient.
pub const EIGEN_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    H,
    R,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::H => "H",
            Domain::R => "R",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HtoR,
    RtoH,
}

/// How squared reconstruction errors are reduced over channels (batch is
/// always averaged).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(format!("expected `sum` or `mean`, got `{s}`")),
        }
    }
}

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub d_h: usize,
    pub d_r: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub mapper_hidden: usize,
}

impl Arch {
    pub fn new(d_h: usize, d_r: usize, cfg: &CycleVaeConfig) -> Self {
        Arch {
            d_h,
            d_r,
            latent_dim: cfg.latent_dim,
            hidden: cfg.hidden,
            hidden_layers: cfg.hidden_layers,
            mapper_hidden: cfg.mapper_hidden,
        }
    }

    pub fn dim(&self, d: Domain) -> usize {
        match d {
            Domain::H => self.d_h,
            Domain::R => self.d_r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleVaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub mapper_hidden: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Eigenvectors compared by the covariance term; `None` means all `k`.
    pub top_k: Option<usize>,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub log_every: u64,
    /// Early stopping: evaluations without a `min_delta` improvement of the
    /// moving-average total before stopping; 0 disables.
    pub patience: usize,
    pub min_delta: f64,
    /// Steps averaged by the early-stopping moving average.
    pub ma_window: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub recon: Reduction,
    /// Start both domains from shared weights on role channels (hand, ball)
    /// with other encoder inputs at zero.
    pub tied_init: bool,
    pub seed: u64,
}

impl Default for CycleVaeConfig {
    fn default() -> Self {
        CycleVaeConfig {
            latent_dim: 8,
            hidden: 64,
            hidden_layers: 2,
            mapper_hidden: 32,
            lambda1: 1.0,
            lambda2: 0.1,
            top_k: None,
            batch_size: 64,
            steps: 2000,
            lr: 1e-3,
            log_every: 10,
            patience: 0,
            min_delta: 1e-3,
            ma_window: 100,
            grad_clip: 10.0,
            recon: Reduction::Sum,
            tied_init: true,
            seed: 0,
        }
    }
}

impl CycleVaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("cyclevae config: {m}")));
        if self.latent_dim == 0 || self.batch_size < 2 || self.log_every == 0 {
            return bad("latent_dim, batch_size >= 2 and log_every must be positive".into());
        }
        if self.hidden == 0 || self.mapper_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda weights must be non-negative".into());
        }
        let top = self.top_k();
        if top == 0 || top > self.latent_dim {
            return bad(format!("top_k {top} must lie in 1..={}", self.latent_dim));
        }
        if self.batch_size < top + 1 {
            return bad(format!("batch_size {} too small for top_k {top}", self.batch_size));
        }
        if !(self.lr > 0.0) || self.ma_window == 0 {
            return bad("lr and ma_window must be positive".into());
        }
        Ok(())
    }

    pub fn top_k(&self) -> usize {
        self.top_k.unwrap_or(self.latent_dim)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Parameter handles of the six networks.
#[derive(Debug, Clone)]
pub struct Nets {
    pub enc_h: Mlp,
    pub dec_h: Mlp,
    pub enc_r: Mlp,
    pub dec_r: Mlp,
    pub map_hr: Mlp,
    pub map_rh: Mlp,
    pub arch: Arch,
}

fn widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat_n(hidden, layers));
    w.push(output);
    w
}

impl Nets {
    /// Glorot-initialised encoders and decoders; mapper output layers start
    /// at zero so both mappers begin as the identity.
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, arch: Arch, rng: &mut R) -> Result<Self> {
        let k = arch.latent_dim;
        let (h, l) = (arch.hidden, arch.hidden_layers);
        let enc_h = Mlp::new(store, "enc_h", &widths(arch.d_h, h, l, 2 * k), rng)?;
        let dec_h = Mlp::new(store, "dec_h", &widths(k, h, l, arch.d_h), rng)?;
        let enc_r = Mlp::new(store, "enc_r", &widths(arch.d_r, h, l, 2 * k), rng)?;
        let dec_r = Mlp::new(store, "dec_r", &widths(k, h, l, arch.d_r), rng)?;
        let map_hr = Mlp::new(store, "map_hr", &[k, arch.mapper_hidden, k], rng)?;
        let map_rh = Mlp::new(store, "map_rh", &[k, arch.mapper_hidden, k], rng)?;
        for m in [&map_hr, &map_rh] {
            let last = *m.last();
            store.set(last.w, Mat::zeros(last.fan_in, last.fan_out))?;
        }
        Ok(Nets {
            enc_h,
            dec_h,
            enc_r,
            dec_r,
            map_hr,
            map_rh,
            arch,
        })
    }

    /// Re-initialises encoders and decoders so both domains share hidden
    /// weights and role-channel weights; remaining encoder inputs start at
    /// zero. Role channels are given per domain in matching order.
    pub fn tie_roles<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        roles_h: &[Option<usize>],
        roles_r: &[Option<usize>],
        rng: &mut R,
    ) -> Result<()> {
        if roles_h.len() != roles_r.len() {
            return Err(Error::Dimension("role lists differ in length".into()));
        }
        let pairs: Vec<(usize, usize)> = roles_h
            .iter()
            .zip(roles_r)
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .collect();
        if pairs.is_empty() {
            return Ok(());
        }
        let (d_h, d_r) = (self.arch.d_h, self.arch.d_r);
        if pairs.iter().any(|&(a, b)| a >= d_h || b >= d_r) {
            return Err(Error::Dimension("role channel out of range".into()));
        }
        let glorot = |rows: usize, cols: usize, rng: &mut R| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
        };
        // encoders: first layer reads role channels only
        let (first_h, first_r) = (self.enc_h.layers[0], self.enc_r.layers[0]);
        let shared = glorot(pairs.len(), first_h.fan_out, rng);
        let mut w_h = Mat::zeros(d_h, first_h.fan_out);
        let mut w_r = Mat::zeros(d_r, first_r.fan_out);
        for (i, &(a, b)) in pairs.iter().enumerate() {
            w_h.set_row(a, &shared.row(i));
            w_r.set_row(b, &shared.row(i));
        }
        store.set(first_h.w, w_h)?;
        store.set(first_r.w, w_r)?;
        for (lh, lr) in self.enc_h.layers.iter().zip(&self.enc_r.layers).skip(1) {
            let v = store.get(lh.w).clone();
            store.set(lr.w, v)?;
        }
        // decoders: shared trunk, shared role output columns
        let n = self.dec_h.layers.len();
        for (lh, lr) in self.dec_h.layers.iter().zip(&self.dec_r.layers).take(n - 1) {
            let v = store.get(lh.w).clone();
            store.set(lr.w, v)?;
        }
        let (out_h, out_r) = (self.dec_h.layers[n - 1], self.dec_r.layers[n - 1]);
        let cols = glorot(out_h.fan_in, pairs.len(), rng);
        let mut o_h = store.get(out_h.w).clone();
        let mut o_r = store.get(out_r.w).clone();
        for (i, &(a, b)) in pairs.iter().enumerate() {
            o_h.set_column(a, &cols.column(i));
            o_r.set_column(b, &cols.column(i));
        }
        store.set(out_h.w, o_h)?;
        store.set(out_r.w, o_r)?;
        Ok(())
    }

    fn encoder(&self, d: Domain) -> &Mlp {
        match d {
            Domain::H => &self.enc_h,
            Domain::R => &self.enc_r,
        }
    }

    fn decoder(&self, d: Domain) -> &Mlp {
        match d {
            Domain::H => &self.dec_h,
            Domain::R => &self.dec_r,
        }
    }

    fn mapper(&self, dir: Direction) -> &Mlp {
        match dir {
            Direction::HtoR => &self.map_hr,
            Direction::RtoH => &self.map_rh,
        }
    }

    /// Mean and clamped log-variance of the domain encoder.
    pub fn encode_g(&self, g: &mut Graph<'_>, p: &ParamVars, d: Domain, x: Var) -> (Var, Var) {
        let k = self.arch.latent_dim;
        let out = self.encoder(d).forward(g, p, x);
        let mean = g.slice_cols(out, 0, k);
        let raw = g.slice_cols(out, k, k);
        let lv = g.clamp(raw, LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        (mean, lv)
    }

    pub fn decode_g(&self, g: &mut Graph<'_>, p: &ParamVars, d: Domain, z: Var) -> Var {
        self.decoder(d).forward(g, p, z)
    }

    /// Residual mapper `z + f(z)`.
    pub fn map_g(&self, g: &mut Graph<'_>, p: &ParamVars, dir: Direction, z: Var) -> Var {
        let f = self.mapper(dir).forward(g, p, z);
        g.add(z, f)
    }

    /// Reparameterised draw `mean + exp(lv / 2) * eps`.
    pub fn sample_g(&self, g: &mut Graph<'_>, mean: Var, lv: Var, eps: &Mat) -> Var {
        let half = g.scale(lv, 0.5);
        let std = g.exp(half);
        let e = g.constant(eps.clone());
        let noise = g.mul(std, e);
        g.add(mean, noise)
    }

    /// Builds every loss term for one pair of batches.
    pub fn loss_g(
        &self,
        g: &mut Graph<'_>,
        p: &ParamVars,
        batch_h: &Mat,
        batch_r: &Mat,
        noise: &Noise,
        w: &LossWeights,
    ) -> Result<LossVars> {
        check_width(batch_h, self.arch.d_h, "expert batch")?;
        check_width(batch_r, self.arch.d_r, "learner batch")?;
        noise.check(batch_h.nrows(), batch_r.nrows(), self.arch.latent_dim)?;
        let top = w.top_k.unwrap_or(self.arch.latent_dim);
        if batch_h.nrows() < top + 1 || batch_r.nrows() < top + 1 {
            return Err(Error::Invalid(format!("batches need at least {} rows for top_k {top}", top + 1)));
        }
        let xh = g.constant(batch_h.clone());
        let xr = g.constant(batch_r.clone());

        let (mu_h, lv_h) = self.encode_g(g, p, Domain::H, xh);
        let (mu_r, lv_r) = self.encode_g(g, p, Domain::R, xr);
        let z_h = self.sample_g(g, mu_h, lv_h, &noise.h);
        let z_r = self.sample_g(g, mu_r, lv_r, &noise.r);

        let rec_h = self.decode_g(g, p, Domain::H, z_h);
        let rec_r = self.decode_g(g, p, Domain::R, z_r);
        let recon_h = sq_err(g, rec_h, xh, w.recon);
        let recon_r = sq_err(g, rec_r, xr, w.recon);
        let kl_h = kl_g(g, mu_h, lv_h);
        let kl_r = kl_g(g, mu_r, lv_r);

        // H -> R -> H
        let zr_of_h = self.map_g(g, p, Direction::HtoR, z_h);
        let as_r = self.decode_g(g, p, Domain::R, zr_of_h);
        let (m2, l2) = self.encode_g(g, p, Domain::R, as_r);
        let z2 = self.sample_g(g, m2, l2, &noise.h_cycle);
        let back_h = self.map_g(g, p, Direction::RtoH, z2);
        let cyc_h = self.decode_g(g, p, Domain::H, back_h);
        // R -> H -> R
        let zh_of_r = self.map_g(g, p, Direction::RtoH, z_r);
        let as_h = self.decode_g(g, p, Domain::H, zh_of_r);
        let (m3, l3) = self.encode_g(g, p, Domain::H, as_h);
        let z3 = self.sample_g(g, m3, l3, &noise.r_cycle);
        let back_r = self.map_g(g, p, Direction::HtoR, z3);
        let cyc_r = self.decode_g(g, p, Domain::R, back_r);
        let ch = sq_err(g, cyc_h, xh, w.recon);
        let cr = sq_err(g, cyc_r, xr, w.recon);
        let cycle = g.add(ch, cr);

        let mh = g.col_mean(mu_h);
        let mr = g.col_mean(mu_r);
        let dm = g.sub(mh, mr);
        let dm2 = g.square(dm);
        let mean_align = g.sum(dm2);

        let qh = top_eigvecs_g(g, mu_h, top);
        let qr = top_eigvecs_g(g, mu_r, top);
        let dq = g.sub(qh, qr);
        let dq2 = g.square(dq);
        let cov_align = g.sum(dq2);

        let mut total = g.add(recon_h, kl_h);
        total = g.add(total, recon_r);
        total = g.add(total, kl_r);
        let c = g.scale(cycle, w.lambda1);
        total = g.add(total, c);
        let align = g.add(mean_align, cov_align);
        let a = g.scale(align, w.lambda2);
        total = g.add(total, a);
        Ok(LossVars {
            recon_h,
            kl_h,
            recon_r,
            kl_r,
            cycle,
            mean_align,
            cov_align,
            total,
        })
    }
}

fn check_width(m: &Mat, d: usize, what: &str) -> Result<()> {
    if m.ncols() != d {
        return Err(Error::Dimension(format!("{what} has width {}, expected {d}", m.ncols())));
    }
    Ok(())
}

/// Squared error summed (or averaged) over channels, averaged over rows.
fn sq_err(g: &mut Graph<'_>, a: Var, b: Var, red: Reduction) -> Var {
    let (n, d) = g.shape(a);
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    let s = g.sum(sq);
    let denom = match red {
        Reduction::Sum => n as f64,
        Reduction::Mean => (n * d) as f64,
    };
    g.scale(s, 1.0 / denom)
}

/// Batch mean of `0.5 * sum(mu^2 + exp(lv) - 1 - lv)`.
fn kl_g(g: &mut Graph<'_>, mu: Var, lv: Var) -> Var {
    let (n, k) = g.shape(mu);
    let m2 = g.square(mu);
    let e = g.exp(lv);
    let a = g.add(m2, e);
    let b = g.sub(a, lv);
    let s = g.sum(b);
    let s = g.offset(s, -((n * k) as f64));
    g.scale(s, 0.5 / n as f64)
}

/// Top eigenvectors of the batch covariance (n - 1 denominator) of `mu`.
fn top_eigvecs_g(g: &mut Graph<'_>, mu: Var, top: usize) -> Var {
    let (n, _) = g.shape(mu);
    let m = g.col_mean(mu);
    let neg = g.neg(m);
    let c = g.add_row(mu, neg);
    let ct = g.transpose(c);
    let cov = g.matmul(ct, c);
    let cov = g.scale(cov, 1.0 / (n as f64 - 1.0));
    g.sym_eig_top(cov, top, EIGEN_GAP)
}

/// Graph handles of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon_h: Var,
    pub kl_h: Var,
    pub recon_r: Var,
    pub kl_r: Var,
    pub cycle: Var,
    pub mean_align: Var,
    pub cov_align: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph<'_>, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            recon_h: g.scalar(self.recon_h),
            kl_h: g.scalar(self.kl_h),
            recon_r: g.scalar(self.recon_r),
            kl_r: g.scalar(self.kl_r),
            cycle: g.scalar(self.cycle),
            mean_align: g.scalar(self.mean_align),
            cov_align: g.scalar(self.cov_align),
            total: g.scalar(self.total),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
        }
    }

    /// Named handles in report order.
    pub fn named(&self) -> [(&'static str, Var); 7] {
        [
            ("recon_H", self.recon_h),
            ("kl_H", self.kl_h),
            ("recon_R", self.recon_r),
            ("kl_R", self.kl_r),
            ("cycle", self.cycle),
            ("mean", self.mean_align),
            ("cov", self.cov_align),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub top_k: Option<usize>,
    pub recon: Reduction,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        LossWeights {
            lambda1,
            lambda2,
            top_k: None,
            recon: Reduction::Sum,
        }
    }
}

impl From<&CycleVaeConfig> for LossWeights {
    fn from(c: &CycleVaeConfig) -> Self {
        LossWeights {
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            top_k: c.top_k,
            recon: c.recon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_h: f64,
    pub kl_h: f64,
    pub recon_r: f64,
    pub kl_r: f64,
    pub cycle: f64,
    pub mean_align: f64,
    pub cov_align: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// The weighted sum recomputed from the terms.
    pub fn recomputed_total(&self) -> f64 {
        self.recon_h
            + self.kl_h
            + self.recon_r
            + self.kl_r
            + self.lambda1 * self.cycle
            + self.lambda2 * (self.mean_align + self.cov_align)
    }

    pub fn terms(&self) -> [f64; 8] {
        [
            self.recon_h,
            self.kl_h,
            self.recon_r,
            self.kl_r,
            self.cycle,
            self.mean_align,
            self.cov_align,
            self.total,
        ]
    }
}

/// Standard-normal draws for one loss evaluation: the two domain samples
/// and the two re-encodings inside the cycle paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub h: Mat,
    pub r: Mat,
    pub h_cycle: Mat,
    pub r_cycle: Mat,
}

impl Noise {
    pub fn zeros(n_h: usize, n_r: usize, k: usize) -> Self {
        Noise {
            h: Mat::zeros(n_h, k),
            r: Mat::zeros(n_r, k),
            h_cycle: Mat::zeros(n_h, k),
            r_cycle: Mat::zeros(n_r, k),
        }
    }

    pub fn draw<R: Rng + ?Sized>(n_h: usize, n_r: usize, k: usize, rng: &mut R) -> Self {
        let mut m = |n: usize| Mat::from_fn(n, k, |_, _| rng.sample(StandardNormal));
        let h = m(n_h);
        let r = m(n_r);
        let h_cycle = m(n_h);
        let r_cycle = m(n_r);
        Noise { h, r, h_cycle, r_cycle }
    }

    pub fn seeded(n_h: usize, n_r: usize, k: usize, seed: u64) -> Self {
        Self::draw(n_h, n_r, k, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check(&self, n_h: usize, n_r: usize, k: usize) -> Result<()> {
        let ok = self.h.shape() == (n_h, k)
            && self.h_cycle.shape() == (n_h, k)
            && self.r.shape() == (n_r, k)
            && self.r_cycle.shape() == (n_r, k);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("noise shapes do not match the batches".into()))
        }
    }
}

/// Diagonal Gaussian code of one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianLatent {
    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|l| l.exp()).collect()
    }
}

/// Reparameterised draw from `latent` with a seeded standard-normal stream.
/// Log-variance is clamped to [`LOGVAR_RANGE`] first.
pub fn sample_latent(latent: &GaussianLatent, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    latent
        .mean
        .iter()
        .zip(&latent.log_variance)
        .map(|(m, lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)).exp() * e
        })
        .collect()
}

/// Closed-form reconstruction and KL terms on plain matrices.
pub fn vae_loss(batch: &Mat, reconstruction: &Mat, mean: &Mat, log_variance: &Mat, red: Reduction) -> Result<(f64, f64)> {
    if batch.shape() != reconstruction.shape() || mean.shape() != log_variance.shape() || mean.nrows() != batch.nrows() {
        return Err(Error::Dimension("vae_loss shapes disagree".into()));
    }
    let n = batch.nrows() as f64;
    let sq: f64 = (batch - reconstruction).iter().map(|v| v * v).sum();
    let recon = match red {
        Reduction::Sum => sq / n,
        Reduction::Mean => sq / (n * batch.ncols() as f64),
    };
    let kl = mean
        .iter()
        .zip(log_variance.iter())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        * 0.5
        / n;
    Ok((recon, kl))
}

/// Mean, covariance and top eigenpairs of a batch of latent means.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatchStats {
    pub mean: Vec<f64>,
    pub covariance: Mat,
    pub eigenvalues: Vec<f64>,
    /// `k x top_k`, columns in descending eigenvalue order, sign-normalised.
    pub eigenvectors: Mat,
}

impl LatentBatchStats {
    pub fn from_means(means: &Mat, top_k: usize) -> Result<Self> {
        let (n, k) = means.shape();
        if top_k == 0 || top_k > k {
            return Err(Error::Invalid(format!("top_k {top_k} must lie in 1..={k}")));
        }
        if n < top_k + 1 {
            return Err(Error::Invalid(format!("{n} samples are too few for top_k {top_k}")));
        }
        let mean: Vec<f64> = (0..k).map(|j| means.column(j).mean()).collect();
        let centered = Mat::from_fn(n, k, |i, j| means[(i, j)] - mean[j]);
        let covariance = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = sym_eigen(&covariance);
        Ok(LatentBatchStats {
            mean,
            eigenvalues: eig.values[..top_k].to_vec(),
            eigenvectors: eig.vectors.columns(0, top_k).into_owned(),
            covariance,
        })
    }

    pub fn top_k(&self) -> usize {
        self.eigenvectors.ncols()
    }
}

/// `|mean_H - mean_R|^2`.
pub fn mean_alignment_loss(h: &LatentBatchStats, r: &LatentBatchStats) -> Result<f64> {
    if h.mean.len() != r.mean.len() {
        return Err(Error::Dimension("latent widths differ".into()));
    }
    Ok(h.mean.iter().zip(&r.mean).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Squared Frobenius distance between the leading `top_k` eigenvectors.
pub fn covariance_alignment_loss(h: &LatentBatchStats, r: &LatentBatchStats, top_k: usize) -> Result<f64> {
    if h.eigenvectors.nrows() != r.eigenvectors.nrows() {
        return Err(Error::Dimension("latent widths differ".into()));
    }
    if top_k == 0 || top_k > h.top_k().min(r.top_k()) {
        return Err(Error::Invalid(format!("top_k {top_k} exceeds the computed eigenvectors")));
    }
    let d = h.eigenvectors.columns(0, top_k) - r.eigenvectors.columns(0, top_k);
    Ok(d.iter().map(|v| v * v).sum())
}

/// The trained (or freshly initialised) alignment model.
#[derive(Debug, Clone)]
pub struct CycleVaeModel {
    pub params: ParamStore,
    pub nets: Nets,
    pub spec_h: Arc<EmbodimentSpec>,
    pub spec_r: Arc<EmbodimentSpec>,
    /// Statistics mapping raw states to model space; `None` means identity.
    pub norm_h: Option<NormStats>,
    pub norm_r: Option<NormStats>,
    pub trained: bool,
}

impl CycleVaeModel {
    pub fn new(spec_h: Arc<EmbodimentSpec>, spec_r: Arc<EmbodimentSpec>, cfg: &CycleVaeConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = Arch::new(spec_h.state_dim, spec_r.state_dim, cfg);
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nets = Nets::build(&mut params, arch, &mut rng)?;
        if cfg.tied_init {
            nets.tie_roles(&mut params, &spec_h.role_channels(), &spec_r.role_channels(), &mut rng)?;
        }
        Ok(CycleVaeModel {
            params,
            nets,
            spec_h,
            spec_r,
            norm_h: None,
            norm_r: None,
            trained: false,
        })
    }

    pub fn arch(&self) -> Arch {
        self.nets.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.nets.arch.latent_dim
    }

    fn norm(&self, d: Domain) -> Option<&NormStats> {
        match d {
            Domain::H => self.norm_h.as_ref(),
            Domain::R => self.norm_r.as_ref(),
        }
    }

    /// Forward pass on frozen parameters.
    fn eval<T>(&self, f: impl FnOnce(&mut Graph<'_>, &ParamVars) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let out = f(&mut g, &p)?;
        g.check_finite()?;
        Ok(out)
    }

    /// Latent mean and log-variance matrices for model-space states.
    pub fn encode_mats(&self, d: Domain, states: &Mat) -> Result<(Mat, Mat)> {
        check_width(states, self.arch().dim(d), "states")?;
        self.eval(|g, p| {
            let x = g.constant(states.clone());
            let (m, lv) = self.nets.encode_g(g, p, d, x);
            Ok((g.value(m).clone(), g.value(lv).clone()))
        })
    }

    pub fn encode(&self, d: Domain, states: &Mat) -> Result<Vec<GaussianLatent>> {
        let (m, lv) = self.encode_mats(d, states)?;
        Ok((0..m.nrows())
            .map(|i| GaussianLatent {
                mean: m.row(i).iter().copied().collect(),
                log_variance: lv.row(i).iter().copied().collect(),
            })
            .collect())
    }

    pub fn decode(&self, d: Domain, z: &Mat) -> Result<Mat> {
        check_width(z, self.latent_dim(), "latent batch")?;
        self.eval(|g, p| {
            let zv = g.constant(z.clone());
            let out = self.nets.decode_g(g, p, d, zv);
            Ok(g.value(out).clone())
        })
    }

    pub fn map_latent(&self, dir: Direction, z: &Mat) -> Result<Mat> {
        check_width(z, self.latent_dim(), "latent batch")?;
        self.eval(|g, p| {
            let zv = g.constant(z.clone());
            let out = self.nets.map_g(g, p, dir, zv);
            Ok(g.value(out).clone())
        })
    }

    /// Mean-latent translation of model-space states.
    pub fn translate(&self, from: Domain, states: &Mat) -> Result<Mat> {
        let (to, dir) = match from {
            Domain::H => (Domain::R, Direction::HtoR),
            Domain::R => (Domain::H, Direction::RtoH),
        };
        check_width(states, self.arch().dim(from), "states")?;
        self.eval(|g, p| {
            let x = g.constant(states.clone());
            let (m, _) = self.nets.encode_g(g, p, from, x);
            let z = self.nets.map_g(g, p, dir, m);
            let out = self.nets.decode_g(g, p, to, z);
            Ok(g.value(out).clone())
        })
    }

    pub fn to_model_space(&self, d: Domain, raw: &Mat) -> Mat {
        self.norm(d).map_or_else(|| raw.clone(), |n| n.normalize_mat(raw))
    }

    pub fn from_model_space(&self, d: Domain, m: &Mat) -> Mat {
        self.norm(d).map_or_else(|| m.clone(), |n| n.denormalize_mat(m))
    }

    pub fn loss_breakdown(&self, batch_h: &Mat, batch_r: &Mat, noise: &Noise, w: &LossWeights) -> Result<LossBreakdown> {
        self.eval(|g, p| {
            let vars = self.nets.loss_g(g, p, batch_h, batch_r, noise, w)?;
            Ok(vars.breakdown(g, w))
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: BTreeMap<String, Value>) -> Result<()> {
        self.to_checkpoint(extra)?.save(path)?;
        Ok(())
    }

    pub fn to_checkpoint(&self, extra: BTreeMap<String, Value>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta = extra;
        ck.meta.insert("kind".into(), Value::from("cyclevae"));
        ck.meta.insert("arch".into(), to_json(&self.nets.arch));
        ck.meta.insert("spec_h".into(), to_json(&*self.spec_h));
        ck.meta.insert("spec_r".into(), to_json(&*self.spec_r));
        ck.meta.insert("norm_h".into(), to_json(&self.norm_h));
        ck.meta.insert("norm_r".into(), to_json(&self.norm_r));
        ck.meta.insert("trained".into(), Value::from(self.trained));
        Ok(ck)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, Value>)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, BTreeMap<String, Value>)> {
        let meta = ck.meta;
        if meta.get("kind").and_then(Value::as_str) != Some("cyclevae") {
            return Err(Error::Invalid("checkpoint is not a cyclevae model".into()));
        }
        let arch: Arch = from_meta(&meta, "arch")?;
        let spec_h: EmbodimentSpec = from_meta(&meta, "spec_h")?;
        let spec_r: EmbodimentSpec = from_meta(&meta, "spec_r")?;
        let norm_h: Option<NormStats> = from_meta(&meta, "norm_h")?;
        let norm_r: Option<NormStats> = from_meta(&meta, "norm_r")?;
        let trained: bool = from_meta(&meta, "trained")?;
        let mut scratch = ParamStore::new();
        let nets = Nets::build(&mut scratch, arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        same_layout(&scratch, &ck.params)?;
        Ok((
            CycleVaeModel {
                params: ck.params,
                nets,
                spec_h: Arc::new(spec_h),
                spec_r: Arc::new(spec_r),
                norm_h,
                norm_r,
                trained,
            },
            meta,
        ))
    }
}

pub(crate) fn to_json<T: Serialize + ?Sized>(v: &T) -> Value {
    serde_json::to_value(v).expect("serialisable metadata")
}

pub(crate) fn from_meta<T: serde::de::DeserializeOwned>(meta: &BTreeMap<String, Value>, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Invalid(format!("checkpoint metadata lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Invalid(format!("checkpoint metadata `{key}`: {e}")))
}

pub(crate) fn same_layout(expect: &ParamStore, got: &ParamStore) -> Result<()> {
    let ok = expect.len() == got.len()
        && expect
            .ids()
            .zip(got.ids())
            .all(|(a, b)| expect.name(a) == got.name(b) && expect.get(a).shape() == got.get(b).shape());
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid("checkpoint parameters do not match the declared architecture".into()))
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: LossBreakdown,
}

pub const TRACE_HEADER: &str = "step,recon_H,kl_H,recon_R,kl_R,cycle,mean,cov,total";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.step.to_string());
        for v in r.loss.terms() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parses [`trace_csv`] output (weights are not stored and read back as 0).
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Invalid("unexpected trace header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Invalid(format!("trace row {}: malformed", i + 2));
            if f.len() != 9 {
                return Err(bad());
            }
            let step = f[0].parse().map_err(|_| bad())?;
            let v: Vec<f64> = f[1..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            Ok(TraceRow {
                step,
                loss: LossBreakdown {
                    recon_h: v[0],
                    kl_h: v[1],
                    recon_r: v[2],
                    kl_r: v[3],
                    cycle: v[4],
                    mean_align: v[5],
                    cov_align: v[6],
                    total: v[7],
                    lambda1: 0.0,
                    lambda2: 0.0,
                },
            })
        })
        .collect()
}

/// Moving-average early-stopping bookkeeping, carried across resumes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StopState {
    pub recent: VecDeque<f64>,
    pub best: Option<f64>,
    pub stale: usize,
    pub stopped: bool,
}

impl StopState {
    pub fn push(&mut self, total: f64, window: usize) {
        self.recent.push_back(total);
        while self.recent.len() > window {
            self.recent.pop_front();
        }
    }

    pub fn moving_average(&self) -> f64 {
        self.recent.iter().sum::<f64>() / self.recent.len().max(1) as f64
    }

    /// Called at each evaluation; returns true when training should stop.
    pub fn evaluate(&mut self, patience: usize, min_delta: f64) -> bool {
        if patience == 0 {
            return false;
        }
        let ma = self.moving_average();
        match self.best {
            Some(b) if ma > b - min_delta => self.stale += 1,
            _ => {
                self.best = Some(ma);
                self.stale = 0;
            }
        }
        self.stopped = self.stale >= patience;
        self.stopped
    }
}

/// Total order on trajectories by the bit patterns of their values, so
/// sampling does not depend on corpus order.
pub fn canonical_order(trajs: &[Trajectory]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..trajs.len()).collect();
    let key = |t: &Trajectory| -> Vec<u64> { t.steps.iter().map(|v| v.to_bits()).collect() };
    let keys: Vec<Vec<u64>> = trajs.iter().map(key).collect();
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(Ordering::Equal));
    idx
}

/// Every step of every trajectory in canonical order, as rows.
pub fn state_pool(ds: &Dataset) -> Mat {
    let order = canonical_order(&ds.trajectories);
    let t = ds.steps();
    let d = ds.spec.state_dim;
    let mut out = Mat::zeros(ds.len() * t, d);
    for (k, &i) in order.iter().enumerate() {
        out.rows_mut(k * t, t).copy_from(&ds.trajectories[i].steps);
    }
    out
}

/// Random generator for one training step of one run.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Rows drawn uniformly with replacement.
pub fn sample_rows<R: Rng + ?Sized>(pool: &Mat, n: usize, rng: &mut R) -> Mat {
    let d = pool.ncols();
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let r = rng.random_range(0..pool.nrows());
        out.row_mut(i).copy_from(&pool.row(r));
    }
    out
}

/// Progress of a (possibly resumed) training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub stop: StopState,
    pub steps_run: u64,
    pub seconds: f64,
}

/// Training hooks: progress reports and periodic checkpoints.
pub trait TrainObserver<M, R> {
    fn logged(&mut self, _row: &R) {}
    /// Called after every update with the model and run state.
    fn after_step(&mut self, _model: &M, _stop: &StopState, _trace: &[R]) -> Result<()> {
        Ok(())
    }
}

impl<M, R> TrainObserver<M, R> for () {}

/// Fresh run from a new model.
pub fn train_cyclevae(data_h: &Dataset, data_r: &Dataset, cfg: &CycleVaeConfig) -> Result<(CycleVaeModel, Vec<TraceRow>)> {
    let mut model = CycleVaeModel::new(data_h.spec.clone(), data_r.spec.clone(), cfg)?;
    let out = train_from(&mut model, data_h, data_r, cfg, StopState::default(), Vec::new(), &mut ())?;
    Ok((model, out.trace))
}

/// Continues training `model` from its optimizer step.
pub fn train_from(
    model: &mut CycleVaeModel,
    data_h: &Dataset,
    data_r: &Dataset,
    cfg: &CycleVaeConfig,
    mut stop: StopState,
    mut trace: Vec<TraceRow>,
    observer: &mut dyn TrainObserver<CycleVaeModel, TraceRow>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data_h.is_empty() || data_r.is_empty() {
        return Err(Error::Data(crate::DataError::Empty));
    }
    let (Some(nh), Some(nr)) = (&data_h.norm_stats, &data_r.norm_stats) else {
        return Err(Error::Invalid("training datasets must be normalized".into()));
    };
    if *data_h.spec != *model.spec_h || *data_r.spec != *model.spec_r {
        return Err(Error::Dimension("datasets do not match the model's embodiments".into()));
    }
    model.norm_h = Some(nh.clone());
    model.norm_r = Some(nr.clone());
    let pool_h = state_pool(data_h);
    let pool_r = state_pool(data_r);
    let w = LossWeights::from(cfg);
    let adam = cfg.adam();
    let k = model.latent_dim();
    let started = Instant::now();
    let first = model.params.step();
    while model.params.step() < cfg.steps && !stop.stopped {
        let step = model.params.step();
        let mut rng = step_rng(cfg.seed, step);
        let bh = sample_rows(&pool_h, cfg.batch_size, &mut rng);
        let br = sample_rows(&pool_r, cfg.batch_size, &mut rng);
        let noise = Noise::draw(cfg.batch_size, cfg.batch_size, k, &mut rng);
        let (total, breakdown, mut grads) = {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let vars = model.nets.loss_g(&mut g, &p, &bh, &br, &noise, &w)?;
            let breakdown = vars.breakdown(&g, &w);
            let raw = g.backward(vars.total).map_err(|e| non_finite(step, e.into()))?;
            (breakdown.total, breakdown, p.collect(&model.params, raw))
        };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total = {total}"),
            });
        }
        if cfg.grad_clip > 0.0 {
            grads.clip_norm(cfg.grad_clip);
        }
        optimizer_step(&mut model.params, &grads, &adam).map_err(|e| non_finite(step, e.into()))?;
        stop.push(total, cfg.ma_window);
        let done = model.params.step();
        if step % cfg.log_every == 0 || done == cfg.steps {
            let row = TraceRow { step, loss: breakdown };
            observer.logged(&row);
            trace.push(row);
            stop.evaluate(cfg.patience, cfg.min_delta);
        }
        model.trained = true;
        observer.after_step(model, &stop, &trace)?;
    }
    Ok(TrainOutcome {
        trace,
        stop,
        steps_run: model.params.step() - first,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn non_finite(step: u64, e: Error) -> Error {
    match e {
        Error::Net(netcore::NetError::NonFinite { op, node }) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite value from `{op}` (node {node})"),
        },
        Error::Net(netcore::NetError::NonFiniteGradient(name)) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for `{name}`"),
        },
        other => other,
    }
}

/// Cycle loss on fixed batches with seeded noise.
pub fn cycle_loss(model: &CycleVaeModel, batch_h: &Mat, batch_r: &Mat, seed: u64, red: Reduction) -> Result<f64> {
    let noise = Noise::seeded(batch_h.nrows(), batch_r.nrows(), model.latent_dim(), seed);
    let w = LossWeights {
        recon: red,
        ..LossWeights::new(1.0, 0.0)
    };
    Ok(model.loss_breakdown(batch_h, batch_r, &noise, &w)?.cycle)
}

/// All terms on fixed batches with seeded noise.
pub fn total_loss(model: &CycleVaeModel, batch_h: &Mat, batch_r: &Mat, w: &LossWeights, seed: u64) -> Result<LossBreakdown> {
    let noise = Noise::seeded(batch_h.nrows(), batch_r.nrows(), model.latent_dim(), seed);
    model.loss_breakdown(batch_h, batch_r, &noise, w)
}

fn require_trained(model: &CycleVaeModel) -> Result<()> {
    if model.trained {
        Ok(())
    } else {
        Err(Error::Untrained)
    }
}

/// Maps an expert trajectory step by step into the learner domain (mean
/// latents, no sampling). Returns the trajectory and the wall time spent.
pub fn infer_learner_trajectory(model: &CycleVaeModel, expert: &Trajectory) -> Result<(Trajectory, f64)> {
    require_trained(model)?;
    if expert.embodiment.state_dim != model.arch().d_h {
        return Err(Error::Dimension(format!(
            "expert trajectory has {} channels, model expects {}",
            expert.embodiment.state_dim,
            model.arch().d_h
        )));
    }
    let t0 = Instant::now();
    let x = model.to_model_space(Domain::H, &expert.steps);
    let y = model.translate(Domain::H, &x)?;
    let steps = model.from_model_space(Domain::R, &y);
    let secs = t0.elapsed().as_secs_f64();
    let mut out = Trajectory::new(model.spec_r.clone(), expert.dt, steps)?;
    out.meta = expert.meta.clone();
    Ok((out, secs))
}

/// Learner state to expert state through the shared latent space.
pub fn infer_expert_state(model: &CycleVaeModel, learner_state: &[f64]) -> Result<Vec<f64>> {
    require_trained(model)?;
    if learner_state.len() != model.arch().d_r {
        return Err(Error::Dimension(format!(
            "learner state has {} values, model expects {}",
            learner_state.len(),
            model.arch().d_r
        )));
    }
    let x = Mat::from_row_slice(1, learner_state.len(), learner_state);
    let x = model.to_model_space(Domain::R, &x);
    let y = model.translate(Domain::R, &x)?;
    Ok(model.from_model_space(Domain::H, &y).row(0).iter().copied().collect())
}
