//! Closed-form optimal control of `dX = c dt` with quadratic running cost
//! `½‖c‖²` and terminal cost `(r/2)‖X₁ − x₁‖²`.

use crate::error::{Error, Result};

/// `c*_t = r(x₁ − X_t)/(1 + r(1 − t))`.
pub fn optimal_control(x1: &[f64], xt: &[f64], t: f64, r: f64) -> Vec<f64> {
    let k = r / (1.0 + r * (1.0 - t));
    x1.iter().zip(xt).map(|(a, b)| k * (a - b)).collect()
}

/// Hamiltonian `−½‖c‖² + γ·c`.
pub fn hamiltonian(c: &[f64], gamma: &[f64]) -> f64 {
    c.iter().zip(gamma).map(|(c, g)| -0.5 * c * c + g * c).sum()
}

pub const MIN_ODE_STEPS: usize = 1000;

/// Integrates `dX/dt = c*_t(X)` from `t = 0` to `1` with classical RK4.
pub fn simulate_controlled_ode(x0: &[f64], x1: &[f64], r: f64, n_steps: usize) -> Result<Vec<f64>> {
    if n_steps < MIN_ODE_STEPS {
        return Err(Error::Validation(format!("need at least {MIN_ODE_STEPS} steps, got {n_steps}")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Validation(format!("terminal weight must be > 0, got {r}")));
    }
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!("state has dimension {}, target {}", x0.len(), x1.len())));
    }
    let h = 1.0 / n_steps as f64;
    let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
    let mut x = x0.to_vec();
    for i in 0..n_steps {
        let t = i as f64 * h;
        let k1 = optimal_control(x1, &x, t, r);
        let k2 = optimal_control(x1, &axpy(&x, &k1, 0.5 * h), t + 0.5 * h, r);
        let k3 = optimal_control(x1, &axpy(&x, &k2, 0.5 * h), t + 0.5 * h, r);
        let k4 = optimal_control(x1, &axpy(&x, &k3, h), t + h, r);
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    Ok(x)
}

/// Central-difference `∂H/∂c` at `c*_0`, with the costate `γ = −r(X₁ − x₁)`
/// taken from the simulated terminal state. Returns the largest component.
pub fn hamiltonian_stationarity(x0: &[f64], x1: &[f64], r: f64, n_steps: usize) -> Result<f64> {
    let terminal = simulate_controlled_ode(x0, x1, r, n_steps)?;
    let gamma: Vec<f64> = terminal.iter().zip(x1).map(|(x, y)| -r * (x - y)).collect();
    let c = optimal_control(x1, x0, 0.0, r);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..c.len() {
        let mut cp = c.clone();
        let mut cm = c.clone();
        cp[j] += h;
        cm[j] -= h;
        let d = (hamiltonian(&cp, &gamma) - hamiltonian(&cm, &gamma)) / (2.0 * h);
        worst = worst.max(d.abs());
    }
    Ok(worst)
}
