//! Gaussian mixtures and their exact denoiser.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodes of the trapezoid rule used by [`gmm_denoiser_oracle`].
pub const ORACLE_NODES: usize = 200_001;
/// Half-width of the oracle grid in standard deviations.
pub const ORACLE_SPAN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Isotropic Gaussian mixture in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub components: Vec<GmmComponent>,
}

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let g = Self { components };
        g.validate()?;
        Ok(g)
    }

    /// Equal-weight mixture of isotropic components sharing one std.
    pub fn equal_weights(means: &[Vec<f64>], std: f64) -> Result<Self> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(means.iter().map(|m| GmmComponent { weight: w, mean: m.clone(), std }).collect())
    }

    pub fn single(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::new(vec![GmmComponent { weight: 1.0, mean, std }])
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Validation("mixture has no components".into()));
        }
        let d = self.dim();
        if !(1..=2).contains(&d) {
            return Err(Error::Validation(format!("mixture dimension must be 1 or 2, got {d}")));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::Validation(format!("component {i} has dimension {}, expected {d}", c.mean.len())));
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::Validation(format!("component {i} weight must be > 0")));
            }
            if !(c.std > 0.0) || !c.std.is_finite() || !c.mean.iter().all(|m| m.is_finite()) {
                return Err(Error::Validation(format!("component {i} needs std > 0 and a finite mean")));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// Index of the component whose mean is closest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let dist = |c: &GmmComponent| c.mean.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum::<f64>();
        (0..self.components.len())
            .min_by(|&a, &b| dist(&self.components[a]).total_cmp(&dist(&self.components[b])))
            .expect("non-empty mixture")
    }

    /// Log density of the mixture convolved with `N(0, t²I)` at `x`.
    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let logs: Vec<f64> = self.components.iter().map(|c| component_log_density(c, x, t)).collect();
        log_sum_exp(&logs)
    }
}

fn component_log_density(c: &GmmComponent, x: &[f64], t: f64) -> f64 {
    let v = c.std * c.std + t * t;
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(&c.mean).map(|(a, m)| (a - m) * (a - m)).sum();
    c.weight.ln() - 0.5 * d * (std::f64::consts::TAU * v).ln() - 0.5 * sq / v
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Exact posterior mean `E[x₀ | x₀ + t·ε = x]`.
pub fn gmm_denoiser(x: &[f64], t: f64, gmm: &GmmSpec) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Validation(format!("noise level must be > 0, got {t}")));
    }
    if x.len() != gmm.dim() {
        return Err(Error::Shape(format!("point has dimension {}, mixture {}", x.len(), gmm.dim())));
    }
    Ok(denoise(x, t, gmm))
}

/// Unchecked form of [`gmm_denoiser`].
pub(crate) fn denoise(x: &[f64], t: f64, gmm: &GmmSpec) -> Vec<f64> {
    let logs: Vec<f64> = gmm.components.iter().map(|c| component_log_density(c, x, t)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let resp: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let norm: f64 = resp.iter().sum();
    let t2 = t * t;
    let mut out = vec![0.0; x.len()];
    for (c, r) in gmm.components.iter().zip(&resp) {
        let s2 = c.std * c.std;
        let g = r / norm;
        for ((o, &xi), &mi) in out.iter_mut().zip(x).zip(&c.mean) {
            *o += g * (s2 * xi + t2 * mi) / (s2 + t2);
        }
    }
    out
}

/// Posterior mean by trapezoid integration over a grid spanning every
/// component (±10 std) and the likelihood around `x` (±10 t). One
/// dimension only.
pub fn gmm_denoiser_oracle(x: f64, t: f64, gmm: &GmmSpec) -> Result<f64> {
    if gmm.dim() != 1 {
        return Err(Error::Validation("the integration oracle is one-dimensional".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Validation(format!("noise level must be > 0, got {t}")));
    }
    let (mut lo, mut hi) = (x - ORACLE_SPAN * t, x + ORACLE_SPAN * t);
    for c in &gmm.components {
        lo = lo.min(c.mean[0] - ORACLE_SPAN * c.std);
        hi = hi.max(c.mean[0] + ORACLE_SPAN * c.std);
    }
    let h = (hi - lo) / (ORACLE_NODES - 1) as f64;
    let log_f: Vec<f64> = (0..ORACLE_NODES)
        .map(|j| {
            let x0 = lo + j as f64 * h;
            gmm.log_density(&[x0], 0.0) - 0.5 * ((x - x0) / t).powi(2)
        })
        .collect();
    let max = log_f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (j, l) in log_f.iter().enumerate() {
        let w = if j == 0 || j == ORACLE_NODES - 1 { 0.5 } else { 1.0 };
        let f = w * (l - max).exp();
        num += f * (lo + j as f64 * h);
        den += f;
    }
    Ok(num / den)
}
