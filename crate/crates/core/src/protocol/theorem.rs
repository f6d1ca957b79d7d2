//! Convergence bound for EDiT with SGD inner and outer optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremParams {
    /// Base inner learning rate, decayed as `η / √(tτ + p + 1)`.
    pub eta: f64,
    /// Outer learning rate.
    pub nu: f64,
    pub tau: u64,
    /// Outer steps.
    pub t: u64,
    pub phi: f64,
    pub eps: f64,
    /// Parameter dimension.
    pub n: usize,
    pub smoothness_l: f64,
    pub ginf: f64,
    /// Loss at the initial parameters.
    pub loss_at_init: f64,
}

/// Right-hand side of the bound on `min_{t,p} E‖∇L(θ_{t,p})‖²`:
///
/// ```text
/// 1/(2√τ η (√T − 1)) · ( L₀/ν + L n G∞² τ φ η² (1 + ln τT)/ε
///                               + L ν n G∞² φ² η² (1 + ln τT)/(2ε²) )
/// ```
pub fn theorem_bound(p: &TheoremParams) -> Result<f64> {
    if p.t < 2 {
        return Err(Error::Domain(format!("theorem bound needs T >= 2, got {}", p.t)));
    }
    let positive = [p.eta, p.nu, p.phi, p.eps, p.smoothness_l, p.ginf];
    if positive.iter().any(|x| !(*x > 0.0)) || p.tau == 0 || p.n == 0 {
        return Err(Error::Domain("theorem parameters must be positive".into()));
    }
    if !(p.loss_at_init >= 0.0) {
        return Err(Error::Domain("initial loss must be non-negative".into()));
    }
    let tau = p.tau as f64;
    let t = p.t as f64;
    let n = p.n as f64;
    let log_term = 1.0 + (tau * t).ln();
    let common = p.smoothness_l * n * p.ginf * p.ginf * p.eta * p.eta * log_term;
    let inner = p.loss_at_init / p.nu
        + common * tau * p.phi / p.eps
        + common * p.nu * p.phi * p.phi / (2.0 * p.eps * p.eps);
    Ok(inner / (2.0 * tau.sqrt() * p.eta * (t.sqrt() - 1.0)))
}

/// Empirical side of the check: the seed mean of each run's minimum squared
/// gradient norm.
pub fn seed_mean_of_min(runs: &[Vec<f64>]) -> Option<f64> {
    if runs.is_empty() {
        return None;
    }
    let mins: Vec<f64> = runs
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    Some(mins.iter().sum::<f64>() / mins.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(t: u64) -> TheoremParams {
        TheoremParams {
            eta: 1.0,
            nu: 1.0,
            tau: 1,
            t,
            phi: 1.0,
            eps: 1.0,
            n: 1,
            smoothness_l: 1.0,
            ginf: 1.0,
            loss_at_init: 1.0,
        }
    }

    #[test]
    fn all_ones_example() {
        let b = theorem_bound(&ones(4)).unwrap();
        let expected = 0.5 * (1.0 + 1.5 * (1.0 + 4f64.ln()));
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 2.2897).abs() < 1e-4);
    }

    #[test]
    fn decreasing_in_t() {
        assert!(theorem_bound(&ones(4000)).unwrap() < theorem_bound(&ones(1000)).unwrap());
    }

    #[test]
    fn linear_in_n() {
        let mut p = ones(100);
        p.loss_at_init = 0.3;
        let b1 = theorem_bound(&p).unwrap();
        p.n = 2;
        let b2 = theorem_bound(&p).unwrap();
        // b(n) = c0 + n·c1, denominator 2·(√100 − 1) = 18
        let c0 = 0.3 / 18.0;
        let log_term = 1.0 + 100f64.ln();
        let c1 = 1.5 * log_term / 18.0;
        assert!((b1 - (c0 + c1)).abs() < 1e-12);
        assert!((b2 - (c0 + 2.0 * c1)).abs() < 1e-12);
    }

    #[test]
    fn small_t_is_domain_error() {
        assert!(matches!(theorem_bound(&ones(1)), Err(Error::Domain(_))));
    }
}
