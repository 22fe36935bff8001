//! Pre-norm transformer blocks.
//!
//! An encoder block computes `x + SAttn(LN(x))` followed by
//! `x + FFN(LN(x))`. A cross block replaces self-attention with attention
//! from `LN(x)` onto an un-normalized context.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layers::{FeedForward, FeedForwardCache, LayerNorm, LayerNormCache};
use super::params::{Layout, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub dim: usize,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    h1: Array2<f64>,
    ctx: Option<Array2<f64>>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    ffn: FeedForwardCache,
}

impl Block {
    pub fn new(layout: &mut Layout, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::new(layout, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(layout, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(layout, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(layout, &format!("{name}.ffn"), dim, hidden),
            dim,
        }
    }

    /// Fan-in uniform init; with `zero_output` the attention and FFN output
    /// projections start at zero so the block is the identity.
    pub fn init<R: Rng + ?Sized>(&self, p: &mut ParamSet, rng: &mut R, zero_output: bool) {
        self.ln1.init(p);
        self.ln2.init(p);
        self.attn.init(p, rng, zero_output);
        self.ffn.up.init_uniform(p, rng);
        if zero_output {
            self.ffn.down.init_zero(p);
        } else {
            self.ffn.down.init_uniform(p, rng);
        }
    }

    fn check(&self, x: &ArrayView2<f64>, ctx: Option<&ArrayView2<f64>>) -> Result<()> {
        if x.ncols() != self.dim || x.nrows() == 0 {
            return Err(Error::Shape(format!("block expects n×{} input, got {:?}", self.dim, x.dim())));
        }
        if let Some(c) = ctx {
            if c.ncols() != self.dim || c.nrows() == 0 {
                return Err(Error::Shape(format!("block expects m×{} context, got {:?}", self.dim, c.dim())));
            }
        }
        Ok(())
    }

    /// Self-attention block.
    pub fn encoder(&self, p: &ParamSet, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x, None)?;
        Ok(self.forward(p, x, None, 1).0)
    }

    /// Cross-attention block with `ctx` as keys and values.
    pub fn cross(&self, p: &ParamSet, x: &ArrayView2<f64>, ctx: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x, Some(ctx))?;
        Ok(self.forward(p, x, Some(ctx), 1).0)
    }

    /// Unchecked forward used inside models; `ctx = None` means
    /// self-attention. Rows form `groups` independent sequences of equal
    /// length (see [`MultiHeadAttention::forward`]).
    pub fn forward(
        &self,
        p: &ParamSet,
        x: &ArrayView2<f64>,
        ctx: Option<&ArrayView2<f64>>,
        groups: usize,
    ) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (a, attn) = match ctx {
            Some(c) => self.attn.forward(p, &h1.view(), c, groups),
            None => self.attn.forward(p, &h1.view(), &h1.view(), groups),
        };
        let x2 = x + &a;
        let (h2, ln2) = self.ln2.forward(p, &x2.view());
        let (f, ffn) = self.ffn.forward(p, &h2.view());
        let y = x2 + &f;
        let cache = BlockCache { ln1, h1, ctx: ctx.map(|c| c.to_owned()), attn, ln2, h2, ffn };
        (y, cache)
    }

    /// Returns the input gradient and, for cross blocks, the context gradient.
    pub fn backward(
        &self,
        p: &ParamSet,
        cache: &BlockCache,
        dy: &ArrayView2<f64>,
        g: &mut ParamSet,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        let dh2 = self.ffn.backward(p, &cache.h2.view(), &cache.ffn, dy, g);
        let mut dx2 = dy.to_owned();
        dx2 += &self.ln2.backward(p, &cache.ln2, &dh2.view(), g);
        let h1 = cache.h1.view();
        let (mut dh1, dctx) = match &cache.ctx {
            Some(c) => {
                let (dq, dc) = self.attn.backward(p, &h1, &c.view(), &cache.attn, &dx2.view(), g);
                (dq, Some(dc))
            }
            None => {
                let (dq, dk) = self.attn.backward(p, &h1, &h1, &cache.attn, &dx2.view(), g);
                (dq + &dk, None)
            }
        };
        dh1 = self.ln1.backward(p, &cache.ln1, &dh1.view(), g);
        (dx2 + &dh1, dctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use std::sync::Arc;

    fn setup(zero: bool) -> (Block, ParamSet) {
        let mut l = Layout::new();
        let b = Block::new(&mut l, "b", 64, 4, 256);
        let mut p = ParamSet::zeros(Arc::new(l));
        b.init(&mut p, &mut rng_from_seed(3), zero);
        (b, p)
    }

    fn random(rows: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((rows, 64), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn shapes_are_preserved() {
        let (b, p) = setup(false);
        let x = random(18, 1);
        assert_eq!(b.encoder(&p, &x.view()).unwrap().dim(), (18, 64));
        assert_eq!(b.cross(&p, &x.view(), &random(18, 2).view()).unwrap().dim(), (18, 64));
        assert!(b.encoder(&p, &random(18, 1).slice(ndarray::s![.., ..32])).is_err());
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (b, p) = setup(true);
        let x = random(18, 4);
        assert_eq!(b.encoder(&p, &x.view()).unwrap(), x);
        assert_eq!(b.cross(&p, &x.view(), &random(5, 5).view()).unwrap(), x);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (b, p) = setup(false);
        let x = random(4, 6);
        let perm = [2, 0, 3, 1];
        let xp = Array2::from_shape_fn((4, 64), |(i, j)| x[(perm[i], j)]);
        let y = b.encoder(&p, &x.view()).unwrap();
        let yp = b.encoder(&p, &xp.view()).unwrap();
        for i in 0..4 {
            for j in 0..64 {
                assert!((yp[(i, j)] - y[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_context_attends_to_its_value() {
        let (b, p) = setup(false);
        let x = random(6, 7);
        let ctx = random(1, 8);
        let (h1, _) = b.ln1.forward(&p, &x.view());
        let (a, _) = b.attn.forward(&p, &h1.view(), &ctx.view(), 1);
        let v = b.wo_of_value(&p, &ctx.view());
        for row in a.rows() {
            for (x, y) in row.iter().zip(v.row(0)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    impl Block {
        fn wo_of_value(&self, p: &ParamSet, ctx: &ArrayView2<f64>) -> Array2<f64> {
            let v = self.attn.wv.forward(p, ctx);
            self.attn.wo.forward(p, &v.view())
        }
    }
}
