//! Parametric walking skeletons used when no recorded poses are supplied.

use rand::Rng;

use crate::skeleton::{Pose, PoseSequence, NUM_KEYPOINTS};

/// Default number of frames per generated sequence.
pub const DEFAULT_FRAMES: usize = 8;

/// Body and gait parameters of one synthetic subject.
#[derive(Debug, Clone, Copy)]
pub struct WalkParams {
    pub neck: [f64; 2],
    pub height: f64,
    pub phase: f64,
    pub swing: f64,
    pub cadence: f64,
    pub lean: f64,
}

impl WalkParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        Self {
            neck: [u(0.35, 0.65), u(0.3, 0.45)],
            height: u(0.45, 0.65),
            phase: u(0.0, std::f64::consts::TAU),
            swing: u(0.2, 0.6),
            cadence: u(0.5, 1.5),
            lean: u(-0.1, 0.1),
        }
    }
}

/// Keypoints of one frame at gait angle `w`. Image convention: y grows
/// downwards.
pub fn walking_pose(p: &WalkParams, w: f64) -> Pose {
    let h = p.height;
    let down = [p.lean.sin(), p.lean.cos()];
    // direction rotated by `a` from "down"
    let dir = |a: f64| {
        let (s, c) = a.sin_cos();
        [c * down[0] - s * down[1], s * down[0] + c * down[1]]
    };
    let step = |from: [f64; 2], len: f64, a: f64| {
        let d = dir(a);
        [from[0] + len * d[0], from[1] + len * d[1]]
    };
    let half_pi = std::f64::consts::FRAC_PI_2;
    let sw = p.swing * w.sin();

    let mut k = [[0.0; 2]; NUM_KEYPOINTS];
    k[1] = p.neck;
    k[0] = step(k[1], 0.12 * h, std::f64::consts::PI);
    k[2] = step(k[1], 0.1 * h, -half_pi - 0.15);
    k[5] = step(k[1], 0.1 * h, half_pi + 0.15);
    k[3] = step(k[2], 0.17 * h, -0.15 + sw);
    k[4] = step(k[3], 0.15 * h, -0.15 + sw + 0.3 * sw.abs() + 0.2);
    k[6] = step(k[5], 0.17 * h, 0.15 - sw);
    k[7] = step(k[6], 0.15 * h, 0.15 - sw - 0.3 * sw.abs() - 0.2);
    let hip = step(k[1], 0.3 * h, 0.0);
    k[8] = step(hip, 0.06 * h, -half_pi);
    k[11] = step(hip, 0.06 * h, half_pi);
    k[9] = step(k[8], 0.24 * h, -0.8 * sw);
    k[10] = step(k[9], 0.24 * h, -0.8 * sw + 0.3 * (-w.sin()).max(0.0));
    k[12] = step(k[11], 0.24 * h, 0.8 * sw);
    k[13] = step(k[12], 0.24 * h, 0.8 * sw + 0.3 * w.sin().max(0.0));
    k[14] = step(k[0], 0.03 * h, std::f64::consts::PI - 0.6);
    k[15] = step(k[0], 0.03 * h, std::f64::consts::PI + 0.6);
    k[16] = step(k[14], 0.05 * h, -half_pi);
    k[17] = step(k[15], 0.05 * h, half_pi);
    Pose::from_points(&k)
}

/// A normalized walking sequence with `frames` frames at 30 fps.
pub fn walking_sequence<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> PoseSequence {
    let p = WalkParams::sample(rng);
    let frames = (0..frames.max(1))
        .map(|f| walking_pose(&p, p.phase + std::f64::consts::TAU * p.cadence * f as f64 / frames.max(1) as f64))
        .collect();
    PoseSequence { fps: 30.0, width: 1, height: 1, frames }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::skeleton::LIMBS;

    #[test]
    fn generated_sequences_are_valid_and_on_canvas() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let seq = walking_sequence(&mut rng, DEFAULT_FRAMES);
            seq.validate().unwrap();
            assert_eq!(seq.len(), DEFAULT_FRAMES);
            for pose in &seq.frames {
                assert_eq!(pose.present_count(), NUM_KEYPOINTS);
                for k in &pose.keypoints {
                    assert!((-0.1..=1.1).contains(&k.x) && (-0.1..=1.1).contains(&k.y));
                }
            }
        }
    }

    #[test]
    fn limb_lengths_are_constant_over_time() {
        let mut rng = rng_from_seed(9);
        let seq = walking_sequence(&mut rng, 6);
        for &(a, b) in &LIMBS {
            let len = |p: &Pose| {
                let (pa, pb) = (p.point(a), p.point(b));
                (pa[0] - pb[0]).hypot(pa[1] - pb[1])
            };
            let l0 = len(&seq.frames[0]);
            for f in &seq.frames {
                assert!((len(f) - l0).abs() < 1e-12);
            }
        }
    }
}
