//! EDM stochastic sampler with per-step guidance of the denoised
//! prediction.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gmm::{denoise, GmmSpec};
use crate::error::{Error, Result};
use crate::nnet::AdamState;
use crate::par::{try_map_indices, Execution};
use crate::rng::{salt, sub_rng, sub_seed};

/// A denoiser `D(x; t)` returning the estimate of the clean sample.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn denoise(&self, x: &[f64], t: f64) -> Vec<f64>;
}

impl Denoiser for GmmSpec {
    fn dim(&self) -> usize {
        GmmSpec::dim(self)
    }

    fn denoise(&self, x: &[f64], t: f64) -> Vec<f64> {
        denoise(x, t, self)
    }
}

/// Differentiable consistency loss on a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GuidanceLoss {
    /// `½‖A·x − y‖²`.
    Quadratic { a: Vec<Vec<f64>>, y: Vec<f64> },
    /// `|1 − cos(F·x, F·y)|`.
    Cosine { f: Vec<Vec<f64>>, y: Vec<f64> },
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn mat_t_vec(m: &[Vec<f64>], u: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (row, ui) in m.iter().zip(u) {
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * ui;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl GuidanceLoss {
    /// Quadratic pull toward `target` with `A = I`.
    pub fn quadratic_to(target: Vec<f64>) -> Self {
        let d = target.len();
        let a = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        GuidanceLoss::Quadratic { a, y: target }
    }

    fn parts(&self) -> (&[Vec<f64>], &[f64]) {
        match self {
            GuidanceLoss::Quadratic { a, y } => (a, y),
            GuidanceLoss::Cosine { f, y } => (f, y),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let (m, y) = self.parts();
        if m.is_empty() || m.iter().any(|row| row.len() != dim) {
            return Err(Error::Validation(format!("guidance matrix must have {dim} columns")));
        }
        let y_len = match self {
            GuidanceLoss::Quadratic { .. } => m.len(),
            GuidanceLoss::Cosine { .. } => dim,
        };
        if y.len() != y_len {
            return Err(Error::Validation(format!("guidance target must have {y_len} entries, got {}", y.len())));
        }
        if !m.iter().flatten().chain(y).all(|v| v.is_finite()) {
            return Err(Error::Validation("guidance loss has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_and_grad(x).0
    }

    /// Loss and its closed-form gradient.
    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            GuidanceLoss::Quadratic { a, y } => {
                let r: Vec<f64> = mat_vec(a, x).iter().zip(y).map(|(ax, y)| ax - y).collect();
                (0.5 * r.iter().map(|v| v * v).sum::<f64>(), mat_t_vec(a, &r, x.len()))
            }
            GuidanceLoss::Cosine { f, y } => {
                let u = mat_vec(f, x);
                let v = mat_vec(f, y);
                let (nu, nv) = (norm(&u), norm(&v));
                if nu == 0.0 || nv == 0.0 {
                    return (1.0, vec![0.0; x.len()]);
                }
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                let cos = dot / (nu * nv);
                let sign = if 1.0 - cos >= 0.0 { 1.0 } else { -1.0 };
                let du: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| -sign * (vi / (nu * nv) - cos * ui / (nu * nu))).collect();
                ((1.0 - cos).abs(), mat_t_vec(f, &du, x.len()))
            }
        }
    }
}

/// `k` Adam steps with learning rate `eta` on a detached copy of `x_pred`.
pub fn face_optimize(x_pred: &[f64], loss: &GuidanceLoss, k: usize, eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Validation(format!("guidance learning rate must be > 0, got {eta}")));
    }
    let mut x = x_pred.to_vec();
    let mut adam = AdamState::new(x.len(), eta);
    for _ in 0..k {
        let (l, g) = loss.value_and_grad(&x);
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("guidance loss is {l}")));
        }
        adam.step(&mut x, &g)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub loss: GuidanceLoss,
    /// Inner Adam steps per outer step.
    pub k: usize,
    pub eta: f64,
    /// Outer steps `[start, end)` during which guidance is active.
    pub window: [usize; 2],
}

impl GuidanceConfig {
    pub fn new(loss: GuidanceLoss) -> Self {
        Self { loss, k: 10, eta: 0.03, window: [0, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_tmin: f64,
    pub s_tmax: f64,
    pub guidance: Option<GuidanceConfig>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 40,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            s_churn: 0.0,
            s_noise: 1.0,
            s_tmin: 0.0,
            s_tmax: f64::MAX,
            guidance: None,
        }
    }
}

impl SamplerConfig {
    /// Churn settings used for guided runs.
    pub fn guided(guidance: GuidanceConfig) -> Self {
        Self { s_churn: 2.5, s_tmin: 0.05, s_tmax: 50.0, guidance: Some(guidance), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Validation("n_steps must be ≥ 1".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Validation(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::Validation(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.s_churn >= 0.0) || !(self.s_noise >= 0.0) || !self.s_churn.is_finite() || !self.s_noise.is_finite() {
            return Err(Error::Validation("s_churn and s_noise must be finite and ≥ 0".into()));
        }
        if !(self.s_tmin <= self.s_tmax) {
            return Err(Error::Validation(format!("need s_tmin ≤ s_tmax, got {} and {}", self.s_tmin, self.s_tmax)));
        }
        if let Some(g) = &self.guidance {
            if !(g.eta > 0.0) || !g.eta.is_finite() {
                return Err(Error::Validation(format!("guidance eta must be > 0, got {}", g.eta)));
            }
            let [a, b] = g.window;
            if a > b || b > self.n_steps {
                return Err(Error::Validation(format!("guidance window [{a}, {b}) not within [0, {})", self.n_steps)));
            }
        }
        Ok(())
    }
}

/// `t_i = (σ_max^{1/ρ} + i/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for
/// `i < N`, and `t_N = 0`. With `N = 1` the single step starts at σ_max.
pub fn karras_schedule(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let inv = 1.0 / cfg.rho;
    let (a, b) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut t: Vec<f64> = (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            (a + frac * (b - a)).powf(cfg.rho)
        })
        .collect();
    t.push(0.0);
    Ok(t)
}

/// Per-step record of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub chain: usize,
    pub step: usize,
    pub t: f64,
    pub gamma: f64,
    /// Guidance loss of the denoised prediction before and after the inner
    /// optimization; `None` when no guidance loss is configured.
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<Vec<f64>>,
    pub trace: Vec<TraceRow>,
}

impl SampleOutput {
    pub fn samples_csv(&self) -> String {
        let d = self.samples.first().map_or(1, |s| s.len());
        let mut out = String::from("chain");
        for j in 0..d {
            out.push_str(&format!(",dim{j}"));
        }
        out.push('\n');
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in s {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("chain,step,t,gamma,loss_before,loss_after\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.trace {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.chain, r.step, r.t, r.gamma, opt(r.loss_before), opt(r.loss_after)));
        }
        out
    }

    /// Fraction of samples nearest to each mixture component.
    pub fn mode_shares(&self, gmm: &GmmSpec) -> Vec<f64> {
        let mut counts = vec![0usize; gmm.components.len()];
        for s in &self.samples {
            counts[gmm.nearest_component(s)] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.samples.len().max(1) as f64).collect()
    }
}

fn check_finite(v: &[f64], what: &str, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at step {step}")))
    }
}

/// Runs one chain; pushes its trace rows when `trace` is given.
fn sample_chain(
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    ts: &[f64],
    rng: &mut crate::rng::Rng,
    chain: usize,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec<f64>> {
    let d = denoiser.dim();
    let n = cfg.n_steps;
    let mut noise = |scale: f64| -> Vec<f64> { (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut x = noise(ts[0]);
    let gamma_on = (cfg.s_churn / n as f64).min(std::f64::consts::SQRT_2 - 1.0);
    for i in 0..n {
        let (t, t_next) = (ts[i], ts[i + 1]);
        let gamma = if t >= cfg.s_tmin && t <= cfg.s_tmax { gamma_on } else { 0.0 };
        let eps = noise(cfg.s_noise);
        let t_hat = t + gamma * t;
        let lift = (t_hat * t_hat - t * t).sqrt();
        let x_hat: Vec<f64> = x.iter().zip(&eps).map(|(x, e)| x + lift * e).collect();
        let mut x_pred = denoiser.denoise(&x_hat, t_hat);
        check_finite(&x_pred, "denoiser output", i)?;
        let mut losses = (None, None);
        if let Some(g) = &cfg.guidance {
            let before = g.loss.value(&x_pred);
            if i >= g.window[0] && i < g.window[1] {
                x_pred = face_optimize(&x_pred, &g.loss, g.k, g.eta)?;
            }
            losses = (Some(before), Some(g.loss.value(&x_pred)));
        }
        let di: Vec<f64> = x_hat.iter().zip(&x_pred).map(|(a, b)| (a - b) / t_hat).collect();
        let h = t_next - t_hat;
        let mut next: Vec<f64> = x_hat.iter().zip(&di).map(|(a, d)| a + h * d).collect();
        if t_next != 0.0 {
            let p2 = denoiser.denoise(&next, t_next);
            check_finite(&p2, "denoiser output", i)?;
            next = x_hat
                .iter()
                .zip(&di)
                .zip(next.iter().zip(&p2))
                .map(|((a, d1), (xn, pn))| a + h * (0.5 * d1 + 0.5 * (xn - pn) / t_next))
                .collect();
        }
        x = next;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(TraceRow { chain, step: i, t, gamma, loss_before: losses.0, loss_after: losses.1 });
        }
    }
    Ok(x)
}

/// Draws `n_samples` independent chains. Chain `c` uses the stream
/// `sub_seed(sub_seed(seed, CHAINS), c)`, so results do not depend on
/// the execution mode.
pub fn edm_sample(
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    seed: u64,
    n_samples: usize,
    with_trace: bool,
    exec: Execution,
) -> Result<SampleOutput> {
    let ts = karras_schedule(cfg)?;
    if let Some(g) = &cfg.guidance {
        g.loss.validate(denoiser.dim())?;
    }
    let chain_seed = sub_seed(seed, salt::CHAINS);
    let runs = try_map_indices(n_samples, exec, |c| {
        let mut rng = sub_rng(chain_seed, c as u64);
        let mut trace = Vec::new();
        let x = sample_chain(denoiser, cfg, &ts, &mut rng, c, with_trace.then_some(&mut trace))?;
        Ok::<_, Error>((x, trace))
    })?;
    let mut samples = Vec::with_capacity(n_samples);
    let mut trace = Vec::new();
    for (x, t) in runs {
        samples.push(x);
        trace.extend(t);
    }
    Ok(SampleOutput { samples, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::grad_check;

    struct Constant(f64);

    impl Denoiser for Constant {
        fn dim(&self) -> usize {
            1
        }
        fn denoise(&self, _: &[f64], _: f64) -> Vec<f64> {
            vec![self.0]
        }
    }

    #[test]
    fn schedule_endpoints_and_linear_case() {
        let cfg = SamplerConfig { n_steps: 2, ..SamplerConfig::default() };
        let t = karras_schedule(&cfg).unwrap();
        assert!((t[0] - 80.0).abs() < 1e-12 && (t[1] - 0.002).abs() < 1e-15 && t[2] == 0.0);
        let cfg = SamplerConfig { n_steps: 3, rho: 1.0, sigma_min: 1.0, sigma_max: 5.0, ..SamplerConfig::default() };
        assert_eq!(karras_schedule(&cfg).unwrap(), vec![5.0, 3.0, 1.0, 0.0]);
        let cfg = SamplerConfig { n_steps: 1, ..SamplerConfig::default() };
        assert_eq!(karras_schedule(&cfg).unwrap().len(), 2);
        assert!(karras_schedule(&SamplerConfig { n_steps: 0, ..SamplerConfig::default() }).is_err());
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        for (n, rho, lo, hi) in [(5, 7.0, 0.002, 80.0), (40, 3.0, 0.1, 2.0), (100, 0.5, 1e-3, 1e3)] {
            let t = karras_schedule(&SamplerConfig { n_steps: n, rho, sigma_min: lo, sigma_max: hi, ..SamplerConfig::default() })
                .unwrap();
            assert!(t.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn constant_denoiser_lands_on_constant() {
        let cfg = SamplerConfig { n_steps: 6, s_churn: 1.0, ..SamplerConfig::default() };
        let out = edm_sample(&Constant(1.25), &cfg, 3, 16, false, Execution::Serial).unwrap();
        assert!(out.samples.iter().all(|s| s[0] == 1.25));
    }

    #[test]
    fn no_churn_means_no_gamma() {
        let gmm = GmmSpec::single(vec![0.0], 1.0).unwrap();
        let out = edm_sample(&gmm, &SamplerConfig::default(), 1, 4, true, Execution::Serial).unwrap();
        assert_eq!(out.trace.len(), 4 * 40);
        assert!(out.trace.iter().all(|r| r.gamma == 0.0 && r.loss_before.is_none()));
    }

    #[test]
    fn serial_and_parallel_agree() {
        let gmm = GmmSpec::equal_weights(&[vec![-2.0, 0.0], vec![2.0, 1.0]], 0.3).unwrap();
        let cfg = SamplerConfig::guided(GuidanceConfig::new(GuidanceLoss::quadratic_to(vec![2.0, 1.0])));
        let a = edm_sample(&gmm, &cfg, 9, 64, true, Execution::Serial).unwrap();
        let b = edm_sample(&gmm, &cfg, 9, 64, true, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples_csv(), b.samples_csv());
        assert!(a.samples_csv().starts_with("chain,dim0,dim1\n0,"));
    }

    #[test]
    fn face_optimize_examples() {
        let loss = GuidanceLoss::quadratic_to(vec![1.5, -0.5]);
        assert_eq!(face_optimize(&[0.3, 0.2], &loss, 0, 0.1).unwrap(), vec![0.3, 0.2]);
        assert_eq!(face_optimize(&[1.5, -0.5], &loss, 10, 0.1).unwrap(), vec![1.5, -0.5]);
        let x = face_optimize(&[0.0, 0.0], &loss, 2000, 0.1).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
        assert!(face_optimize(&[0.0, 0.0], &loss, 1, 0.0).is_err());
    }

    #[test]
    fn loss_gradients_are_exact() {
        let losses = [
            GuidanceLoss::Quadratic { a: vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.0, 1.0]], y: vec![0.2, 1.0, -1.0] },
            GuidanceLoss::Cosine { f: vec![vec![1.0, 0.4], vec![-0.2, 0.9]], y: vec![0.7, -1.1] },
        ];
        for loss in &losses {
            let x = [0.35, 0.8];
            let (l, g) = loss.value_and_grad(&x);
            assert!(l >= 0.0);
            let err = grad_check(|v| Ok(loss.value(v)), &x, &g, 10, 0).unwrap();
            assert!(err < 1e-8, "{loss:?}: {err}");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = SamplerConfig::guided(GuidanceConfig::new(GuidanceLoss::quadratic_to(vec![2.0])));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SamplerConfig>(&text).unwrap(), cfg);
        let partial: SamplerConfig = serde_json::from_str(r#"{"n_steps": 12}"#).unwrap();
        assert_eq!(partial.n_steps, 12);
        assert!(serde_json::from_str::<SamplerConfig>(r#"{"n_step": 12}"#).is_err());
    }
}
