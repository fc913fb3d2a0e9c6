//! Layers built on [`Graph`] ops. Parameters live in a [`ParamStore`];
//! layer structs only hold [`ParamId`]s.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b`, batched over rows. `W` is `in x out`, `b` is `1 x out`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), fan_in, fan_out, gain, rng)?;
        let b = store.add(format!("{name}.b"), Mat::zeros(1, fan_out))?;
        Ok(Dense { w, b, fan_in, fan_out })
    }

    /// Zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Mat::zeros(fan_in, fan_out))?;
        let b = store.add(format!("{name}.b"), Mat::zeros(1, fan_out))?;
        Ok(Dense { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &ParamVars, x: Var) -> Var {
        let xw = g.matmul(x, p[self.w]);
        g.add_row(xw, p[self.b])
    }
}

/// Affine map with shape validation.
pub fn dense(g: &mut Graph<'_>, w: Var, b: Var, x: Var) -> Result<Var> {
    let (_, xin) = g.shape(x);
    let (win, wout) = g.shape(w);
    let (br, bc) = g.shape(b);
    if xin != win || br != 1 || bc != wout {
        return Err(shape_err(
            "dense",
            format!("x has {xin} columns, W is {win}x{wout}, b is {br}x{bc}"),
        ));
    }
    let xw = g.matmul(x, w);
    Ok(g.add_row(xw, b))
}

/// Stack of dense layers with tanh between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn last(&self) -> &Dense {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        h
    }

    /// Hidden representation after the last tanh (everything but the output layer).
    pub fn forward_hidden(&self, g: &mut Graph<'_>, p: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers[..self.layers.len() - 1] {
            h = layer.forward(g, p, h);
            h = g.tanh(h);
        }
        h
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Mat::from_element(1, dim, 1.0))?;
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, dim))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &ParamVars, x: Var) -> Var {
        layer_norm(g, x, p[self.gain], p[self.bias])
    }
}

/// Zero-mean, unit-variance normalization of each row (epsilon 1e-5), then `gain * y + bias`.
pub fn layer_norm(g: &mut Graph<'_>, x: Var, gain: Var, bias: Var) -> Var {
    let y = g.layer_norm_rows(x, LAYER_NORM_EPS);
    let scaled = g.mul_row(y, gain);
    g.add_row(scaled, bias)
}

/// Multi-head scaled dot-product self-attention with a strict causal mask.
#[derive(Debug, Clone, Copy)]
pub struct CausalSelfAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub out: Dense,
    pub heads: usize,
    pub dim: usize,
}

impl CausalSelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err(
                "masked_attention",
                format!("model width {dim} is not divisible by {heads} heads"),
            ));
        }
        Ok(CausalSelfAttention {
            query: Dense::new(store, &format!("{name}.q"), dim, dim, 1.0, rng)?,
            key: Dense::new(store, &format!("{name}.k"), dim, dim, 1.0, rng)?,
            value: Dense::new(store, &format!("{name}.v"), dim, dim, 1.0, rng)?,
            out: Dense::new(store, &format!("{name}.o"), dim, dim, 1.0, rng)?,
            heads,
            dim,
        })
    }

    /// `x` is `T x dim`; returns `T x dim`.
    pub fn forward(&self, g: &mut Graph<'_>, p: &ParamVars, x: Var) -> Var {
        let q = self.query.forward(g, p, x);
        let k = self.key.forward(g, p, x);
        let v = self.value.forward(g, p, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let weights = g.causal_softmax(scores);
            outs.push(g.matmul(weights, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, p, cat)
    }
}

/// Checked entry point for causal attention over a `T x d` sequence.
pub fn masked_attention(
    g: &mut Graph<'_>,
    p: &ParamVars,
    attn: &CausalSelfAttention,
    sequence: Var,
) -> Result<Var> {
    let (t, d) = g.shape(sequence);
    if t == 0 || d != attn.dim || d % attn.heads != 0 {
        return Err(shape_err(
            "masked_attention",
            format!("sequence {t}x{d}, layer width {} with {} heads", attn.dim, attn.heads),
        ));
    }
    Ok(attn.forward(g, p, sequence))
}

/// Fixed sinusoidal position table, `len x dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Mat::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let rate = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identity_dense_passes_through() {
        let mut s = ParamStore::new();
        let d = Dense::zeros(&mut s, "d", 3, 3).unwrap();
        s.set(d.w, Mat::identity(3, 3)).unwrap();
        let x = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let xv = g.input(&x);
        let y = d.forward(&mut g, &p, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn constant_dense_ignores_input() {
        let mut s = ParamStore::new();
        let d = Dense::zeros(&mut s, "d", 4, 2).unwrap();
        s.set(d.b, Mat::from_row_slice(1, 2, &[0.5, -2.0])).unwrap();
        let x = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let xv = g.input(&x);
        let y = d.forward(&mut g, &p, xv);
        for r in 0..3 {
            assert_eq!(g.value(y)[(r, 0)], 0.5);
            assert_eq!(g.value(y)[(r, 1)], -2.0);
        }
    }

    #[test]
    fn dense_matches_naive_loops() {
        let mut s = ParamStore::new();
        let d = Dense::new(&mut s, "d", 4, 3, 1.0, &mut rng()).unwrap();
        s.set(d.b, Mat::from_row_slice(1, 3, &[0.1, 0.2, -0.3])).unwrap();
        let x = Mat::from_row_slice(1, 4, &[0.3, -1.2, 2.0, 0.7]);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let xv = g.input(&x);
        let y = dense(&mut g, p[d.w], p[d.b], xv).unwrap();
        let w = s.get(d.w);
        let b = s.get(d.b);
        for o in 0..3 {
            let mut acc = b[(0, o)];
            for i in 0..4 {
                acc += w[(i, o)] * x[(0, i)];
            }
            assert!((g.value(y)[(0, o)] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        let d = Dense::zeros(&mut s, "d", 4, 3).unwrap();
        let x = Mat::zeros(2, 5);
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let xv = g.input(&x);
        assert!(dense(&mut g, p[d.w], p[d.b], xv).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let one = g.constant(Mat::from_element(1, 2, 1.0));
        let zero = g.constant(Mat::zeros(1, 2));
        let x = g.constant(Mat::from_row_slice(1, 2, &[-1.0, 1.0]));
        let y = layer_norm(&mut g, x, one, zero);
        let v = g.value(y);
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((v[(0, 0)] + expect).abs() < 1e-15);
        assert!((v[(0, 1)] - expect).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut s = ParamStore::new();
        assert!(CausalSelfAttention::new(&mut s, "a", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn sinusoid_first_row() {
        let t = sinusoidal_positions(4, 6);
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(t[(0, i)], expect);
        }
    }
}
