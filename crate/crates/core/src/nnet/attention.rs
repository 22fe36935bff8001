//! Scaled dot-product attention and its multi-head form.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::layers::Linear;
use super::params::{Layout, ParamSet};
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `softmax(Q·Kᵀ/√d)·V`.
pub fn attention(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = q.ncols();
    if k.ncols() != d || v.ncols() != d {
        return Err(Error::Shape(format!("attention width mismatch: q {}, k {}, v {}", d, k.ncols(), v.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::Shape(format!("attention has {} keys but {} values", k.nrows(), v.nrows())));
    }
    if q.nrows() == 0 || k.nrows() == 0 {
        return Err(Error::Shape("attention needs at least one query and one key".into()));
    }
    let (_, out) = attend(q, k, v);
    Ok(out)
}

/// Returns the attention weights and the output.
fn attend(q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut w = q.dot(&k.t());
    w /= (q.ncols() as f64).sqrt();
    softmax_rows(&mut w);
    let out = w.dot(v);
    (w, out)
}

/// Multi-head attention with input projections for queries, keys and
/// values and an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
    groups: usize,
}

impl MultiHeadAttention {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            wq: Linear::new(layout, &format!("{name}.q"), dim, dim),
            wk: Linear::new(layout, &format!("{name}.k"), dim, dim),
            wv: Linear::new(layout, &format!("{name}.v"), dim, dim),
            wo: Linear::new(layout, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut ParamSet, rng: &mut R, zero_output: bool) {
        self.wq.init_uniform(p, rng);
        self.wk.init_uniform(p, rng);
        self.wv.init_uniform(p, rng);
        if zero_output {
            self.wo.init_zero(p);
        } else {
            self.wo.init_uniform(p, rng);
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Attention from `x` onto `ctx`. Both are split row-wise into `groups`
    /// equal blocks and block `g` of `x` attends only to block `g` of `ctx`,
    /// so independent sequences can share one set of projections.
    pub fn forward(
        &self,
        p: &ParamSet,
        x: &ArrayView2<f64>,
        ctx: &ArrayView2<f64>,
        groups: usize,
    ) -> (Array2<f64>, AttentionCache) {
        debug_assert!(x.nrows().is_multiple_of(groups) && ctx.nrows().is_multiple_of(groups));
        let q = self.wq.forward(p, x);
        let k = self.wk.forward(p, ctx);
        let v = self.wv.forward(p, ctx);
        let hd = self.head_dim();
        let (nq, nk) = (x.nrows() / groups, ctx.nrows() / groups);
        let mut concat = Array2::zeros((x.nrows(), self.dim));
        let mut weights = Vec::with_capacity(groups * self.heads);
        for g in 0..groups {
            for h in 0..self.heads {
                let qs = s![g * nq..(g + 1) * nq, h * hd..(h + 1) * hd];
                let ks = s![g * nk..(g + 1) * nk, h * hd..(h + 1) * hd];
                let (w, o) = attend(&q.slice(qs), &k.slice(ks), &v.slice(ks));
                concat.slice_mut(qs).assign(&o);
                weights.push(w);
            }
        }
        let y = self.wo.forward(p, &concat.view());
        (y, AttentionCache { q, k, v, weights, concat, groups })
    }

    /// Returns gradients for the query input and the context input.
    pub fn backward(
        &self,
        p: &ParamSet,
        x: &ArrayView2<f64>,
        ctx: &ArrayView2<f64>,
        cache: &AttentionCache,
        dy: &ArrayView2<f64>,
        g: &mut ParamSet,
    ) -> (Array2<f64>, Array2<f64>) {
        let dconcat = self.wo.backward(p, &cache.concat.view(), dy, g);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let nq = cache.q.nrows() / cache.groups;
        let nk = cache.k.nrows() / cache.groups;
        for (i, w) in cache.weights.iter().enumerate() {
            let (g, h) = (i / self.heads, i % self.heads);
            let qs = s![g * nq..(g + 1) * nq, h * hd..(h + 1) * hd];
            let ks = s![g * nk..(g + 1) * nk, h * hd..(h + 1) * hd];
            let d_o = dconcat.slice(qs);
            dv.slice_mut(ks).assign(&w.t().dot(&d_o));
            let dw = d_o.dot(&cache.v.slice(ks).t());
            let row_dot = (&dw * w).sum_axis(Axis(1)).insert_axis(Axis(1));
            let mut ds = (&dw - &row_dot) * w;
            ds *= scale;
            dq.slice_mut(qs).assign(&ds.dot(&cache.k.slice(ks)));
            dk.slice_mut(ks).assign(&ds.t().dot(&cache.q.slice(qs)));
        }
        let dx = self.wq.backward(p, x, &dq.view(), g);
        let mut dctx = self.wk.backward(p, ctx, &dk.view(), g);
        dctx += &self.wv.backward(p, ctx, &dv.view(), g);
        (dx, dctx)
    }
}
