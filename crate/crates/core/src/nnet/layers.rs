//! Dense layers with hand-written backward passes. Each `forward` returns
//! the activations needed by the matching `backward`, which accumulates
//! parameter gradients into a [`ParamSet`] and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{Layout, ParamId, ParamSet};

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = layout.add(format!("{name}.w"), &[fan_in, fan_out]);
        let b = layout.add(format!("{name}.b"), &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    /// Uniform `±1/√fan_in` weights and zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(&self, p: &mut ParamSet, rng: &mut R) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        for w in p.slice_mut(self.w) {
            *w = bound * (2.0 * rng.random::<f64>() - 1.0);
        }
        p.slice_mut(self.b).fill(0.0);
    }

    pub fn init_zero(&self, p: &mut ParamSet) {
        p.slice_mut(self.w).fill(0.0);
        p.slice_mut(self.b).fill(0.0);
    }

    pub fn forward(&self, p: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    pub fn backward(&self, p: &ParamSet, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, g: &mut ParamSet) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.mat_mut(self.w));
        g.vec_mut(self.b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&p.mat(self.w).t())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(layout: &mut Layout, name: &str, dim: usize) -> Self {
        let gamma = layout.add(format!("{name}.gamma"), &[dim]);
        let beta = layout.add(format!("{name}.beta"), &[dim]);
        Self { gamma, beta, dim }
    }

    pub fn init(&self, p: &mut ParamSet) {
        p.slice_mut(self.gamma).fill(1.0);
        p.slice_mut(self.beta).fill(0.0);
    }

    pub fn forward(&self, p: &ParamSet, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = self.dim as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *s;
        }
        let mut y = &xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamSet, cache: &LayerNormCache, dy: &ArrayView2<f64>, g: &mut ParamSet) -> Array2<f64> {
        let d = self.dim as f64;
        g.vec_mut(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        g.vec_mut(self.gamma).scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
        let dxhat = dy * &p.vec(self.gamma);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, dxh), xh), &s) in
            dx.rows_mut().into_iter().zip(dxhat.rows()).zip(cache.xhat.rows()).zip(cache.inv_std.iter())
        {
            let sum = dxh.sum();
            let dot = dxh.dot(&xh);
            for ((o, &a), &b) in out.iter_mut().zip(dxh).zip(xh) {
                *o = s / d * (d * a - sum - b * dot);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Position-wise feed-forward network `linear → GELU → linear`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(layout, &format!("{name}.up"), dim, hidden),
            down: Linear::new(layout, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, p: &ParamSet, x: &ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.forward(p, x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(p, &act.view());
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        p: &ParamSet,
        x: &ArrayView2<f64>,
        cache: &FeedForwardCache,
        dy: &ArrayView2<f64>,
        g: &mut ParamSet,
    ) -> Array2<f64> {
        let mut dact = self.down.backward(p, &cache.act.view(), dy, g);
        dact.zip_mut_with(&cache.pre, |d, &z| *d *= gelu_grad(z));
        self.up.backward(p, x, &dact.view(), g)
    }
}
