//! Parameterized building blocks on top of [`Graph`]. Each layer reads its
//! arrays as `<prefix>.<name>` and has a matching `init_*` function.

use rand::Rng;

use super::graph::{Graph, Mat, Var};
use super::params::{glorot, ParamStore};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), glorot(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Mat::zeros((1, fan_out)));
}

/// `x · W + b`.
pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w);
    Ok(g.add(y, b))
}

/// Bias-free projection `x · W`.
pub fn project(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(name)?;
    Ok(g.matmul(x, w))
}

pub fn init_conv1d<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c_in: usize, c_out: usize, kernel: usize) {
    store.insert(format!("{prefix}.w"), glorot(rng, kernel * c_in, c_out));
    store.insert(format!("{prefix}.b"), Mat::zeros((1, c_out)));
}

/// Same-padded 1-D convolution over independent `segments` of the rows.
pub fn conv1d(g: &mut Graph, x: Var, segments: &[usize], prefix: &str, kernel: usize) -> Result<Var> {
    if kernel == 1 {
        return linear(g, x, prefix);
    }
    let cols = g.im2col1d(x, segments, kernel, 1);
    linear(g, cols, prefix)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Mat::ones((1, dim)));
    store.insert(format!("{prefix}.beta"), Mat::zeros((1, dim)));
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    let n = g.norm_rows(x, LN_EPS);
    let y = g.mul(n, gamma);
    Ok(g.add(y, beta))
}

/// Sinusoidal position table, `len × dim`.
pub fn sinusoid_table(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(p, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = p as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

pub fn init_attention<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{p}"), dim, dim);
    }
}

/// Multi-head self-attention over the rows of `x` (`T × dim`).
pub fn self_attention(g: &mut Graph, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let dim = g.shape(x).1;
    let dh = dim / heads;
    let q = linear(g, x, &format!("{prefix}.q"))?;
    let k = linear(g, x, &format!("{prefix}.k"))?;
    let v = linear(g, x, &format!("{prefix}.v"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = g.softmax_rows(scores);
        outs.push(g.matmul(att, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, cat, &format!("{prefix}.o"))
}

pub fn init_transformer_block<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    kernel: usize,
) {
    init_attention(store, rng, &format!("{prefix}.attn"), dim);
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_conv1d(store, rng, &format!("{prefix}.ffn1"), dim, ffn_dim, kernel);
    init_conv1d(store, rng, &format!("{prefix}.ffn2"), ffn_dim, dim, 1);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
}

/// Self-attention and convolutional feed-forward, each with a residual
/// connection followed by layer normalization.
pub fn transformer_block(g: &mut Graph, x: Var, prefix: &str, heads: usize, kernel: usize) -> Result<Var> {
    let t = g.shape(x).0;
    let a = self_attention(g, x, &format!("{prefix}.attn"), heads)?;
    let r = g.add(x, a);
    let x = layer_norm(g, r, &format!("{prefix}.ln1"))?;
    let h = conv1d(g, x, &[t], &format!("{prefix}.ffn1"), kernel)?;
    let h = g.relu(h);
    let f = conv1d(g, h, &[t], &format!("{prefix}.ffn2"), 1)?;
    let r = g.add(x, f);
    layer_norm(g, r, &format!("{prefix}.ln2"))
}
