//! Fits a small tanh MLP to a sine wave with the tape autodiff and Adam,
//! after checking its gradients against finite differences.
//!
//! cargo run -p netcore --example fit_mlp

use netcore::layers::Mlp;
use netcore::{grad_check, grad_of, optimizer_step, AdamConfig, Graph, Mat, ParamStore, ParamVars, Result, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph<'_>, p: &ParamVars, mlp: &Mlp, x: &Mat, y: &Mat) -> Result<Var> {
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let out = mlp.forward(g, p, xv);
    let err = g.sub(out, yv);
    let sq = g.square(err);
    Ok(g.mean(sq))
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[1, 32, 1], &mut rng)?;
    let x = Mat::from_fn(64, 1, |i, _| -3.0 + 6.0 * i as f64 / 63.0);
    let y = x.map(f64::sin);

    let report = grad_check(&store, |g, p| loss(g, p, &mlp, &x, &y), 1e-4)?;
    println!("gradient check passed: {} (max rel error {:.2e})", report.passed(), report.max_rel_error());

    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    for step in 0..=2000 {
        let (value, grads) = grad_of(&store, |g, p| loss(g, p, &mlp, &x, &y))?;
        if step % 400 == 0 {
            println!("step {step:4}  mse {value:.6}");
        }
        optimizer_step(&mut store, &grads, &adam)?;
    }
    Ok(())
}
