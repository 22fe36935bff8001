//! Closed-form similarity alignment (rotation, uniform scale, translation)
//! between corresponding 2-D point sets.
//!
//! The fit centers both sets, builds the 2×2 cross-covariance
//! `K = Σ xd·xrᵀ`, takes its SVD `K = U·diag(s)·Vᵀ` and returns
//! `R = V·D·Uᵀ` with `D = diag(1, sign det(V·Uᵀ))`, `S = tr(R·K)/Σ‖xd‖²`
//! and `t = mean(r) − S·R·mean(d)`.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::skeleton::{common_keypoints, Pose, PoseSequence, NUM_KEYPOINTS};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Below this dispersion or leading singular value a configuration is
/// considered degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Tolerance for the proper-rotation invariant of [`SimTransform`].
pub const ROTATION_TOL: f64 = 1e-9;

pub fn rotation(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// A 2-D similarity transform `p ↦ S·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTransform {
    pub rotation: Mat2,
    pub scale: f64,
    pub translation: Vec2,
}

impl SimTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat2::identity(), scale: 1.0, translation: Vec2::zeros() }
    }

    /// Checked constructor.
    pub fn new(rotation: Mat2, scale: f64, translation: Vec2) -> Result<Self> {
        let t = Self { rotation, scale, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn from_params(theta: f64, scale: f64, translation: [f64; 2]) -> Self {
        Self { rotation: rotation(theta), scale, translation: Vec2::new(translation[0], translation[1]) }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Mat2::identity()).abs().max();
        let det = self.rotation.determinant();
        if !(orth < ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::Validation(format!("not a proper rotation (orth err {orth:e}, det {det})")));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Validation(format!("scale must be > 0, got {}", self.scale)));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite translation".into()));
        }
        Ok(())
    }

    /// Rotation angle in (−π, π].
    pub fn theta(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn apply_point(&self, p: &Vec2) -> Vec2 {
        (self.rotation * p) * self.scale + self.translation
    }

    pub fn apply(&self, points: &[Vec2]) -> Vec<Vec2> {
        points.iter().map(|p| self.apply_point(p)).collect()
    }

    /// Transforms present keypoints; missing ones pass through unchanged.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let mut out = pose.clone();
        for k in out.keypoints.iter_mut().filter(|k| k.is_present()) {
            let q = self.apply_point(&Vec2::new(k.x, k.y));
            k.x = q.x;
            k.y = q.y;
        }
        out
    }

    pub fn apply_sequence(&self, seq: &PoseSequence) -> PoseSequence {
        PoseSequence {
            fps: seq.fps,
            width: seq.width,
            height: seq.height,
            frames: seq.frames.iter().map(|p| self.apply_pose(p)).collect(),
        }
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &SimTransform) -> SimTransform {
        SimTransform {
            rotation: self.rotation * inner.rotation,
            scale: self.scale * inner.scale,
            translation: (self.rotation * inner.translation) * self.scale + self.translation,
        }
    }

    pub fn invert(&self) -> SimTransform {
        let rt = self.rotation.transpose();
        SimTransform { rotation: rt, scale: 1.0 / self.scale, translation: -(rt * self.translation) / self.scale }
    }

    /// Largest absolute difference over (θ, S, tx, ty).
    pub fn param_error(&self, other: &SimTransform) -> f64 {
        let dtheta =
            (self.theta() - other.theta() + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        dtheta.abs().max((self.scale - other.scale).abs()).max((self.translation - other.translation).abs().max())
    }
}

/// `compose(a, b)` applies `b` then `a`.
pub fn compose(a: &SimTransform, b: &SimTransform) -> SimTransform {
    a.compose(b)
}

pub fn invert(t: &SimTransform) -> SimTransform {
    t.invert()
}

#[derive(Serialize, Deserialize)]
struct WireTransform {
    theta: f64,
    scale: f64,
    t: [f64; 2],
}

impl Serialize for SimTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        WireTransform { theta: self.theta(), scale: self.scale, t: [self.translation.x, self.translation.y] }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SimTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = WireTransform::deserialize(d)?;
        let t = SimTransform::from_params(w.theta, w.scale, w.t);
        t.validate().map_err(serde::de::Error::custom)?;
        Ok(t)
    }
}

/// A point set with its centroid removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredSet {
    pub points: Vec<Vec2>,
    pub centroid: Vec2,
}

pub fn center(points: &[Vec2]) -> Result<CenteredSet> {
    center_weighted(points, None)
}

fn center_weighted(points: &[Vec2], weights: Option<&[f64]>) -> Result<CenteredSet> {
    if points.is_empty() {
        return Err(Error::Empty("cannot center an empty point set".into()));
    }
    let centroid = match weights {
        None => points.iter().sum::<Vec2>() / points.len() as f64,
        Some(w) => {
            let total: f64 = w.iter().sum();
            points.iter().zip(w).map(|(p, w)| p * *w).sum::<Vec2>() / total
        }
    };
    Ok(CenteredSet { points: points.iter().map(|p| p - centroid).collect(), centroid })
}

/// Cross-covariance `Σ xd_i · xr_iᵀ`.
pub fn covariance(xd: &CenteredSet, xr: &CenteredSet) -> Result<Mat2> {
    weighted_covariance(xd, xr, None)
}

fn weighted_covariance(xd: &CenteredSet, xr: &CenteredSet, weights: Option<&[f64]>) -> Result<Mat2> {
    if xd.points.len() != xr.points.len() {
        return Err(Error::Shape(format!("point counts differ: {} vs {}", xd.points.len(), xr.points.len())));
    }
    let mut k = Mat2::zeros();
    for (i, (d, r)) in xd.points.iter().zip(&xr.points).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        k += (d * r.transpose()) * w;
    }
    Ok(k)
}

/// Singular value decomposition of a 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd2 {
    pub u: Mat2,
    pub s: [f64; 2],
    pub v_t: Mat2,
}

impl Svd2 {
    pub fn reconstruct(&self) -> Mat2 {
        self.u * Mat2::from_diagonal(&Vec2::new(self.s[0], self.s[1])) * self.v_t
    }
}

/// Closed-form SVD. Splits `K` into a scaled rotation `Q·Rot(α₂)` and a
/// scaled reflection `P·Refl(α₁)`; then `U = Rot((α₂+α₁)/2)`,
/// `Vᵀ = Rot((α₂−α₁)/2)`, `s = (Q+P, |Q−P|)`.
pub fn svd2x2(k: &Mat2) -> Svd2 {
    let (a, b, c, d) = (k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]);
    let e = 0.5 * (a + d);
    let f = 0.5 * (a - d);
    let g = 0.5 * (c + b);
    let h = 0.5 * (c - b);
    let q = e.hypot(h);
    let p = f.hypot(g);
    let a1 = g.atan2(f);
    let a2 = h.atan2(e);
    let phi = 0.5 * (a2 + a1);
    let theta = 0.5 * (a2 - a1);
    let u = rotation(phi);
    let mut v_t = rotation(theta);
    let s2 = q - p;
    if s2 < 0.0 {
        v_t[(1, 0)] = -v_t[(1, 0)];
        v_t[(1, 1)] = -v_t[(1, 1)];
    }
    Svd2 { u, s: [q + p, s2.abs()], v_t }
}

/// Best proper rotation `R` maximizing `tr(R·K)`.
pub fn kabsch_rotation(k: &Mat2) -> Result<Mat2> {
    let svd = svd2x2(k);
    if svd.s[0] < DEGENERATE_EPS {
        return Err(Error::Degenerate("all points coincident (zero covariance)".into()));
    }
    let v = svd.v_t.transpose();
    let vu = v * svd.u.transpose();
    let sign = if vu.determinant() < 0.0 { -1.0 } else { 1.0 };
    Ok(v * Mat2::from_diagonal(&Vec2::new(1.0, sign)) * svd.u.transpose())
}

/// Detailed output of a fit, exposing the intermediate quantities.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub transform: SimTransform,
    pub covariance: Mat2,
    pub svd: Svd2,
    /// `Σ w‖xd‖²` over the selected correspondences.
    pub dispersion: f64,
}

/// Fits `T` such that `T(driven[i]) ≈ reference[i]` in the least-squares
/// sense over `indices`.
pub fn similarity_fit(driven: &[Vec2], reference: &[Vec2], indices: &[usize]) -> Result<SimTransform> {
    let d: Vec<Vec2> = indices.iter().map(|&i| driven[i]).collect();
    let r: Vec<Vec2> = indices.iter().map(|&i| reference[i]).collect();
    weighted_fit(&d, &r, None).map(|rep| rep.transform)
}

/// Weighted fit over paired points; `weights` default to 1.
pub fn weighted_fit(driven: &[Vec2], reference: &[Vec2], weights: Option<&[f64]>) -> Result<FitReport> {
    if driven.len() != reference.len() {
        return Err(Error::Shape(format!("point counts differ: {} vs {}", driven.len(), reference.len())));
    }
    if let Some(w) = weights {
        if w.len() != driven.len() || w.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("weights must be non-negative, one per point".into()));
        }
    }
    let used = weights.map_or(driven.len(), |w| w.iter().filter(|w| **w > 0.0).count());
    if used < 2 {
        return Err(Error::Degenerate(format!("need at least 2 correspondences, got {used}")));
    }
    let xd = center_weighted(driven, weights)?;
    let xr = center_weighted(reference, weights)?;
    let dispersion: f64 = xd.points.iter().enumerate().map(|(i, p)| weights.map_or(1.0, |w| w[i]) * p.norm_squared()).sum();
    if dispersion < DEGENERATE_EPS {
        return Err(Error::Degenerate("driven points are coincident".into()));
    }
    let k = weighted_covariance(&xd, &xr, weights)?;
    let svd = svd2x2(&k);
    let rot = kabsch_rotation(&k)?;
    let scale = (rot * k).trace() / dispersion;
    if !(scale > DEGENERATE_EPS) {
        return Err(Error::Degenerate(format!("non-positive optimal scale {scale:e}")));
    }
    let translation = xr.centroid - (rot * xd.centroid) * scale;
    Ok(FitReport { transform: SimTransform { rotation: rot, scale, translation }, covariance: k, svd, dispersion })
}

/// Which driven frames take part in a sequence fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameSelection {
    /// Correspondences from frame 0 only, unweighted.
    #[default]
    First,
    /// Every frame against the reference, weighted by `conf_d · conf_r`.
    WeightedStack,
}

pub fn pose_points(pose: &Pose) -> [Vec2; NUM_KEYPOINTS] {
    std::array::from_fn(|i| Vec2::new(pose.keypoints[i].x, pose.keypoints[i].y))
}

/// Fits a driven pose onto a reference pose over their common keypoints.
pub fn fit_pose(driven: &Pose, reference: &Pose, conf_threshold: f64) -> Result<SimTransform> {
    let idx = common_keypoints(driven, reference, conf_threshold);
    similarity_fit(&pose_points(driven), &pose_points(reference), &idx)
}

/// One transform for the whole driven sequence.
pub fn fit_sequence(
    driven: &PoseSequence,
    reference: &Pose,
    conf_threshold: f64,
    frames: FrameSelection,
) -> Result<SimTransform> {
    match frames {
        FrameSelection::First => fit_pose(&driven.frames[0], reference, conf_threshold),
        FrameSelection::WeightedStack => {
            let rp = pose_points(reference);
            let (mut d, mut r, mut w) = (Vec::new(), Vec::new(), Vec::new());
            for pose in &driven.frames {
                let dp = pose_points(pose);
                for i in common_keypoints(pose, reference, conf_threshold) {
                    d.push(dp[i]);
                    r.push(rp[i]);
                    w.push(pose.keypoints[i].conf * reference.keypoints[i].conf);
                }
            }
            weighted_fit(&d, &r, Some(&w)).map(|rep| rep.transform)
        }
    }
}

/// Mean Euclidean distance between paired points.
pub fn dis_points(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("point counts differ: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::NoComparableKeypoints);
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64)
}

/// Sum of squared distances, the objective the closed form minimizes.
pub fn sum_squared_residual(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    pred.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum()
}

/// Mean keypoint distance over keypoints present in both sequences.
pub fn dis_metric(pred: &PoseSequence, gt: &PoseSequence) -> Result<f64> {
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::Shape(format!("frame counts differ: {} vs {}", pred.frames.len(), gt.frames.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pred.frames.iter().zip(&gt.frames) {
        for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
            if ka.is_present() && kb.is_present() {
                sum += (ka.x - kb.x).hypot(ka.y - kb.y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoComparableKeypoints);
    }
    Ok(sum / n as f64)
}
