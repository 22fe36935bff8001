//! Network architecture, feature preparation and the per-item loss with
//! its exact gradient.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::misalign::CorpusItem;
use crate::nnet::{gelu, gelu_grad, Block, Layout, Linear, ParamId, ParamSet, D_MODEL, FFN_HIDDEN, HEADS};
use crate::rng::{salt, sub_rng};
use crate::similarity::{fit_pose, pose_points, rotation, Mat2, SimTransform, Vec2};
use crate::skeleton::{common_keypoints, Keypoint, Pose, PoseSequence, NUM_KEYPOINTS};

pub const M_FEATURES: usize = 6;
pub const SVD_FEATURES: usize = 5;
pub const HEAD_HIDDEN: usize = 64;
pub const HEAD_OUTPUTS: usize = 4;
pub const ENCODER_M_BLOCKS: usize = 2;
pub const ENCODER_SVD_BLOCKS: usize = 2;
pub const FUSION_BLOCKS: usize = 4;
pub const POS_INIT_STD: f64 = 0.5;
/// Gain on the residual-to-reference features of the intermediate pose.
pub const RESIDUAL_FEATURE_GAIN: f64 = 10.0;

/// Tensor handles of the refinement network.
#[derive(Debug, Clone)]
pub struct AlignModel {
    layout: Arc<Layout>,
    pub token_embed: Linear,
    pub svd_embed: Linear,
    pub pos_embed: ParamId,
    pub encoder_m: Vec<Block>,
    pub encoder_svd: Vec<Block>,
    pub fusion: Vec<Block>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl Default for AlignModel {
    fn default() -> Self {
        Self::new()
    }
}

impl AlignModel {
    pub fn new() -> Self {
        let mut l = Layout::new();
        let d = D_MODEL;
        let token_embed = Linear::new(&mut l, "token_embed", M_FEATURES, d);
        let svd_embed = Linear::new(&mut l, "svd_embed", SVD_FEATURES, d);
        let pos_embed = l.add("pos_embed", &[NUM_KEYPOINTS, d]);
        let blocks = |l: &mut Layout, name: &str, n: usize| -> Vec<Block> {
            (0..n).map(|i| Block::new(l, &format!("{name}.{i}"), d, HEADS, FFN_HIDDEN)).collect()
        };
        let encoder_m = blocks(&mut l, "encoder_m", ENCODER_M_BLOCKS);
        let encoder_svd = blocks(&mut l, "encoder_svd", ENCODER_SVD_BLOCKS);
        let fusion = blocks(&mut l, "fusion", FUSION_BLOCKS);
        let head_hidden = Linear::new(&mut l, "head.0", d, HEAD_HIDDEN);
        let head_out = Linear::new(&mut l, "head.1", HEAD_HIDDEN, HEAD_OUTPUTS);
        Self { layout: Arc::new(l), token_embed, svd_embed, pos_embed, encoder_m, encoder_svd, fusion, head_hidden, head_out }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoder_m.iter().chain(&self.encoder_svd).chain(&self.fusion)
    }

    fn init_with(&self, seed: u64, zero_residual: bool) -> ParamSet {
        let mut rng = sub_rng(seed, salt::INIT);
        let mut p = ParamSet::zeros(self.layout.clone());
        self.token_embed.init_uniform(&mut p, &mut rng);
        self.svd_embed.init_uniform(&mut p, &mut rng);
        let normal = Normal::new(0.0, POS_INIT_STD).expect("finite std");
        for v in p.slice_mut(self.pos_embed) {
            *v = normal.sample(&mut rng);
        }
        for b in self.blocks() {
            b.init(&mut p, &mut rng, zero_residual);
        }
        self.head_hidden.init_uniform(&mut p, &mut rng);
        if zero_residual {
            self.head_out.init_zero(&mut p);
        } else {
            self.head_out.init_uniform(&mut p, &mut rng);
        }
        p
    }

    /// Training initialization: every residual branch and the head output
    /// start at zero, so the model reproduces the closed-form fit.
    pub fn init(&self, seed: u64) -> ParamSet {
        self.init_with(seed, true)
    }

    /// Fully random weights, used for gradient verification.
    pub fn init_random(&self, seed: u64) -> ParamSet {
        self.init_with(seed, false)
    }

    pub fn load_weights(&self, text: &str) -> Result<ParamSet> {
        ParamSet::from_weights_json(self.layout.clone(), text)
    }

    /// Raw head outputs `(Δθ, Δlog S, Δtx, Δty)` for a batch of items and
    /// the caches for backprop. Items are stacked row-wise, 18 tokens each.
    fn forward_net(&self, p: &ParamSet, batch: &[&Features]) -> (Vec<[f64; HEAD_OUTPUTS]>, NetCache) {
        let b = batch.len();
        let n = NUM_KEYPOINTS;
        let stack = |cols: usize, get: &dyn Fn(&Features) -> &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((b * n, cols));
            for (i, f) in batch.iter().enumerate() {
                out.slice_mut(s![i * n..(i + 1) * n, ..]).assign(get(f));
            }
            out
        };
        let m_tokens = stack(M_FEATURES, &|f| &f.m_tokens);
        let svd_tokens = stack(SVD_FEATURES, &|f| &f.svd_tokens);
        let pos = p.mat(self.pos_embed);
        let add_pos = |mut x: Array2<f64>| -> Array2<f64> {
            for mut chunk in x.axis_chunks_iter_mut(Axis(0), n) {
                chunk += &pos;
            }
            x
        };
        let mut x = add_pos(self.token_embed.forward(p, &m_tokens.view()));
        let mut c = add_pos(self.svd_embed.forward(p, &svd_tokens.view()));
        let mut m_caches = Vec::with_capacity(self.encoder_m.len());
        for blk in &self.encoder_m {
            let (y, cache) = blk.forward(p, &x.view(), None, b);
            m_caches.push(cache);
            x = y;
        }
        let mut svd_caches = Vec::with_capacity(self.encoder_svd.len());
        for blk in &self.encoder_svd {
            let (y, cache) = blk.forward(p, &c.view(), None, b);
            svd_caches.push(cache);
            c = y;
        }
        let mut fusion_caches = Vec::with_capacity(self.fusion.len());
        for blk in &self.fusion {
            let (y, cache) = blk.forward(p, &x.view(), Some(&c.view()), b);
            fusion_caches.push(cache);
            x = y;
        }
        let mut pooled = Array2::zeros((b, D_MODEL));
        for (mut row, chunk) in pooled.rows_mut().into_iter().zip(x.axis_chunks_iter(Axis(0), n)) {
            row.assign(&chunk.mean_axis(Axis(0)).expect("tokens"));
        }
        let pre = self.head_hidden.forward(p, &pooled.view());
        let act = pre.mapv(gelu);
        let out = self.head_out.forward(p, &act.view());
        let o = out.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
        (o, NetCache { m_tokens, svd_tokens, m_caches, svd_caches, fusion_caches, pooled, pre, act })
    }

    /// Accumulates into `g` the parameter gradient given `∂L/∂o` per item.
    fn backward_net(&self, p: &ParamSet, cache: &NetCache, d_out: &[[f64; HEAD_OUTPUTS]], g: &mut ParamSet) {
        let b = d_out.len();
        let n = NUM_KEYPOINTS;
        let d_out = Array2::from_shape_fn((b, HEAD_OUTPUTS), |(i, j)| d_out[i][j]);
        let mut d_act = self.head_out.backward(p, &cache.act.view(), &d_out.view(), g);
        d_act.zip_mut_with(&cache.pre, |d, &z| *d *= gelu_grad(z));
        let d_pooled = self.head_hidden.backward(p, &cache.pooled.view(), &d_act.view(), g);
        let mut dx = Array2::from_shape_fn((b * n, D_MODEL), |(r, j)| d_pooled[(r / n, j)] / n as f64);
        let mut dc = Array2::zeros((b * n, D_MODEL));
        for (blk, bc) in self.fusion.iter().zip(&cache.fusion_caches).rev() {
            let (dxi, dci) = blk.backward(p, bc, &dx.view(), g);
            dx = dxi;
            dc += &dci.expect("cross block context gradient");
        }
        for (blk, bc) in self.encoder_svd.iter().zip(&cache.svd_caches).rev() {
            dc = blk.backward(p, bc, &dc.view(), g).0;
        }
        for (blk, bc) in self.encoder_m.iter().zip(&cache.m_caches).rev() {
            dx = blk.backward(p, bc, &dx.view(), g).0;
        }
        {
            let mut dpos = g.mat_mut(self.pos_embed);
            for (a, c) in dx.axis_chunks_iter(Axis(0), n).zip(dc.axis_chunks_iter(Axis(0), n)) {
                dpos += &a;
                dpos += &c;
            }
        }
        self.token_embed.backward(p, &cache.m_tokens.view(), &dx.view(), g);
        self.svd_embed.backward(p, &cache.svd_tokens.view(), &dc.view(), g);
    }

    /// Refined transform for `driven` onto `reference`.
    pub fn forward(&self, p: &ParamSet, reference: &Pose, driven: &PoseSequence, conf_threshold: f64) -> Result<SimTransform> {
        let f = Features::new(reference, driven, conf_threshold)?;
        Ok(self.transform(p, &f))
    }

    pub fn transform(&self, p: &ParamSet, f: &Features) -> SimTransform {
        let (o, _) = self.forward_net(p, &[f]);
        f.compose(o[0])
    }

    /// Mean keypoint distance of the refined alignment.
    pub fn loss(&self, p: &ParamSet, item: &PreparedItem) -> f64 {
        self.batch_losses(p, &[item])[0]
    }

    /// Per-item losses for a batch evaluated in one pass.
    pub fn batch_losses(&self, p: &ParamSet, items: &[&PreparedItem]) -> Vec<f64> {
        let features: Vec<&Features> = items.iter().map(|it| &it.features).collect();
        let (o, _) = self.forward_net(p, &features);
        items.iter().zip(o).map(|(it, o)| it.loss_and_output_grad(o).0).collect()
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, p: &ParamSet, item: &PreparedItem) -> (f64, ParamSet) {
        let (l, g) = self.batch_loss_and_grad(p, &[item]);
        (l[0], g)
    }

    /// Per-item losses and the gradient of their sum.
    pub fn batch_loss_and_grad(&self, p: &ParamSet, items: &[&PreparedItem]) -> (Vec<f64>, ParamSet) {
        let features: Vec<&Features> = items.iter().map(|it| &it.features).collect();
        let (o, cache) = self.forward_net(p, &features);
        let (losses, d_out): (Vec<f64>, Vec<[f64; HEAD_OUTPUTS]>) =
            items.iter().zip(o).map(|(it, o)| it.loss_and_output_grad(o)).unzip();
        let mut g = p.zeros_like();
        self.backward_net(p, &cache, &d_out, &mut g);
        (losses, g)
    }
}

struct NetCache {
    m_tokens: Array2<f64>,
    svd_tokens: Array2<f64>,
    m_caches: Vec<crate::nnet::BlockCache>,
    svd_caches: Vec<crate::nnet::BlockCache>,
    fusion_caches: Vec<crate::nnet::BlockCache>,
    pooled: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// Network inputs derived from a (reference, driven) pair, plus the
/// closed-form transform the network refines.
#[derive(Debug, Clone)]
pub struct Features {
    /// Per keypoint: centered reference, centered driven frame 0 (both
    /// scaled by their RMS radius and zeroed when absent), and the two
    /// presence flags.
    pub m_tokens: Array2<f64>,
    /// Per keypoint: the intermediate pose in reference coordinates and
    /// its scaled offset from the reference, plus the driven presence flag.
    pub svd_tokens: Array2<f64>,
    pub svd: SimTransform,
    /// Reference centroid over the correspondences; the residual rotation
    /// and scale act about this point.
    pub pivot: Vec2,
    /// Reference RMS radius; unit of the residual translation.
    pub radius: f64,
}

fn flag(k: &Keypoint, thr: f64) -> f64 {
    if k.is_present() && k.conf >= thr {
        1.0
    } else {
        0.0
    }
}

fn centroid_radius(pts: &[Vec2], idx: &[usize]) -> (Vec2, f64) {
    let n = idx.len() as f64;
    let c = idx.iter().map(|&i| pts[i]).sum::<Vec2>() / n;
    let r = (idx.iter().map(|&i| (pts[i] - c).norm_squared()).sum::<f64>() / n).sqrt();
    (c, r)
}

impl Features {
    pub fn new(reference: &Pose, driven: &PoseSequence, conf_threshold: f64) -> Result<Self> {
        let d0 = driven.frames.first().ok_or(Error::Empty("driven sequence has no frames".into()))?;
        let svd = fit_pose(d0, reference, conf_threshold)?;
        let idx = common_keypoints(d0, reference, conf_threshold);
        let rp = pose_points(reference);
        let dp = pose_points(d0);
        let (pivot, radius) = centroid_radius(&rp, &idx);
        let (cd, rd) = centroid_radius(&dp, &idx);
        if !(radius > 0.0) || !(rd > 0.0) {
            return Err(Error::Degenerate("correspondences are coincident".into()));
        }
        let mut m_tokens = Array2::zeros((NUM_KEYPOINTS, M_FEATURES));
        let mut svd_tokens = Array2::zeros((NUM_KEYPOINTS, SVD_FEATURES));
        for i in 0..NUM_KEYPOINTS {
            let pr = flag(&reference.keypoints[i], conf_threshold);
            let pd = flag(&d0.keypoints[i], conf_threshold);
            let r = (rp[i] - pivot) / radius * pr;
            let d = (dp[i] - cd) / rd * pd;
            let bar = svd.apply_point(&dp[i]);
            let b = (bar - pivot) / radius * pd;
            let off = (bar - rp[i]) / radius * (pd * pr * RESIDUAL_FEATURE_GAIN);
            m_tokens.row_mut(i).assign(&ndarray::arr1(&[r.x, r.y, d.x, d.y, pr, pd]));
            svd_tokens.row_mut(i).assign(&ndarray::arr1(&[b.x, b.y, off.x, off.y, pd]));
        }
        Ok(Self { m_tokens, svd_tokens, svd, pivot, radius })
    }

    /// Residual `(Δθ, Δlog S, Δt)` composed onto the closed-form transform:
    /// `p ↦ e^Δs·R(Δθ)·(T_svd(p) − c) + c + ρ·Δt`.
    pub fn compose(&self, o: [f64; HEAD_OUTPUTS]) -> SimTransform {
        let r = rotation(o[0]);
        let k = o[1].exp();
        let shift = (self.pivot - (r * self.pivot) * k) + Vec2::new(o[2], o[3]) * self.radius;
        SimTransform {
            rotation: r * self.svd.rotation,
            scale: k * self.svd.scale,
            translation: (r * self.svd.translation) * k + shift,
        }
    }
}

/// A corpus item reduced to what the loss needs: features, and for every
/// comparable keypoint the closed-form aligned point and the target, both
/// relative to the pivot.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub features: Features,
    pub aligned: Vec<Vec2>,
    pub target: Vec<Vec2>,
    pub stratum: crate::misalign::Stratum,
}

impl PreparedItem {
    pub fn new(item: &CorpusItem, conf_threshold: f64) -> Result<Self> {
        let features = Features::new(&item.reference, &item.driven, conf_threshold)?;
        if item.driven.frames.len() != item.gt_aligned.frames.len() {
            return Err(Error::Shape("driven and ground truth frame counts differ".into()));
        }
        let (mut aligned, mut target) = (Vec::new(), Vec::new());
        for (d, g) in item.driven.frames.iter().zip(&item.gt_aligned.frames) {
            for (kd, kg) in d.keypoints.iter().zip(&g.keypoints) {
                if kd.is_present() && kg.is_present() {
                    aligned.push(features.svd.apply_point(&Vec2::new(kd.x, kd.y)) - features.pivot);
                    target.push(Vec2::new(kg.x, kg.y) - features.pivot);
                }
            }
        }
        if aligned.is_empty() {
            return Err(Error::NoComparableKeypoints);
        }
        Ok(Self { features, aligned, target, stratum: item.stratum })
    }

    /// Loss for head output `o` and `∂loss/∂o`.
    pub fn loss_and_output_grad(&self, o: [f64; HEAD_OUTPUTS]) -> (f64, [f64; HEAD_OUTPUTS]) {
        let r = rotation(o[0]);
        let dr = Mat2::new(-r[(1, 0)], -r[(0, 0)], r[(0, 0)], -r[(1, 0)]);
        let k = o[1].exp();
        let rho = self.features.radius;
        let shift = Vec2::new(o[2], o[3]) * rho;
        let n = self.aligned.len() as f64;
        let (mut loss, mut grad) = (0.0, [0.0; HEAD_OUTPUTS]);
        for (q, t) in self.aligned.iter().zip(&self.target) {
            let rq = (r * q) * k;
            let diff = rq + shift - t;
            let dist = diff.norm();
            loss += dist;
            if dist > 0.0 {
                let u = diff / dist;
                grad[0] += u.dot(&((dr * q) * k));
                grad[1] += u.dot(&rq);
                grad[2] += u.x * rho;
                grad[3] += u.y * rho;
            }
        }
        (loss / n, grad.map(|g| g / n))
    }

    /// Loss of the closed-form fit alone.
    pub fn baseline_loss(&self) -> f64 {
        self.loss_and_output_grad([0.0; HEAD_OUTPUTS]).0
    }
}
