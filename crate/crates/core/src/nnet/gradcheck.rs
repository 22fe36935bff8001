//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_CHECKED_COORDS: usize = 200;

/// Compares `grad` against central differences of `f` at `point` and
/// returns the max of `|analytic − numeric| / max(1, |numeric|)`.
///
/// When `point` has more than `max_coords` entries a seeded random subset
/// of that size is checked.
pub fn grad_check<F>(mut f: F, point: &[f64], grad: &[f64], max_coords: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != grad.len() {
        return Err(Error::Shape(format!("point has {} entries, gradient {}", point.len(), grad.len())));
    }
    let n = point.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut idx = sample(&mut rng_from_seed(seed), n, max_coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let fp = f(&x)?;
        x[i] = orig - FD_STEP;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        worst = worst.max((grad[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
