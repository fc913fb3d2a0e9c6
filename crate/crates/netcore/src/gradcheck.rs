//! Reverse-mode gradients of scalar losses and their central-difference check.

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Grads, ParamStore, ParamVars};

/// Central-difference step used by [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient comparisons switch from relative to absolute.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-5;

/// Evaluates `loss` over `store` and returns its value and per-entry gradients.
pub fn grad_of<'a, F>(store: &'a ParamStore, loss: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Graph<'a>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = loss(&mut g, &p)?;
    let (r, c) = g.shape(out);
    if r != 1 || c != 1 {
        return Err(NetError::NotScalar(r, c));
    }
    let value = g.scalar(out);
    let raw = g.backward(out)?;
    Ok((value, p.collect(store, raw)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Largest relative error over the entry's elements.
    pub max_rel_error: f64,
    /// Flat (column-major) index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            tolerance,
            abs_floor: DEFAULT_ABS_FLOOR,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `f`.
pub fn compare_gradients<F>(
    store: &ParamStore,
    analytic: &Grads,
    mut f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).len();
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for k in 0..n {
            let orig = store.get(id)[k];
            probe.value_mut(id)[k] = orig + cfg.step;
            let up = f(&probe)?;
            probe.value_mut(id)[k] = orig - cfg.step;
            let down = f(&probe)?;
            probe.value_mut(id)[k] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(analytic[id][k], numeric, cfg.abs_floor);
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f64::INFINITY } else { err };
                worst_index = k;
            }
        }
        entries.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_error: worst,
            worst_index,
            passed: worst <= cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        entries,
    })
}

/// Checks reverse-mode gradients of `loss` against central differences
/// (step 1e-5) for every parameter entry of `store`.
pub fn grad_check<F>(store: &ParamStore, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>, &ParamVars) -> Result<Var>,
{
    let (_, analytic) = grad_of(store, |g, p| loss(g, p))?;
    compare_gradients(
        store,
        &analytic,
        |s| scalar_loss(s, &loss),
        GradCheckConfig::with_tolerance(tolerance),
    )
}

/// Forward-only evaluation of a scalar loss.
pub fn scalar_loss<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let out = loss(&mut g, &p)?;
    g.check_finite()?;
    Ok(g.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Dense;
    use crate::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_model() -> (ParamStore, Dense, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let d = Dense::new(&mut s, "lin", 3, 2, 1.0, &mut rng).unwrap();
        let x = Mat::from_fn(5, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        let y = Mat::from_fn(5, 2, |i, j| ((i + 2 * j) as f64 * 0.91).cos());
        (s, d, x, y)
    }

    fn mse<'a>(g: &mut Graph<'a>, p: &ParamVars, d: &Dense, x: &Mat, y: &Mat) -> Result<Var> {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let pred = d.forward(g, p, xv);
        let diff = g.sub(pred, yv);
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    #[test]
    fn linear_mse_passes_tight_tolerance() {
        let (s, d, x, y) = linear_model();
        let report = grad_check(&s, |g, p| mse(g, p, &d, &x, &y), 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_adjoint_is_named() {
        let (s, d, x, y) = linear_model();
        let (_, mut analytic) = grad_of(&s, |g, p| mse(g, p, &d, &x, &y)).unwrap();
        analytic.get_mut(d.b)[(0, 1)] += 0.5;
        let report = compare_gradients(
            &s,
            &analytic,
            |st| scalar_loss(st, &|g: &mut Graph<'_>, p: &ParamVars| mse(g, p, &d, &x, &y)),
            GradCheckConfig::with_tolerance(1e-6),
        )
        .unwrap();
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|f| f.name.as_str()).collect();
        assert_eq!(failed, vec!["lin.b"]);
    }
}
