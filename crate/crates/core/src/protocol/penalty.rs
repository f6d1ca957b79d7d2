//! Pseudo-gradient penalty: EMA z-score anomaly elimination, norm-softmax
//! weighting and clipping of the synchronized pseudo-gradient.

use serde::{Deserialize, Serialize};

use super::config::SyncConfig;
use crate::math::Vector;

/// EMA statistics of one (worker, layer) pseudo-gradient norm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EmaStat {
    pub mu: f64,
    pub sigma: f64,
    pub rounds_observed: u64,
}

impl EmaStat {
    /// `μ' = αG + (1 − α)μ`, `σ' = sqrt((1 − α)σ² + α(G − μ')²)`.
    ///
    /// Infinite (or NaN) norms leave the statistics untouched. The very first
    /// observation seeds `μ = G, σ = 0` instead of blending with the zero
    /// initial state.
    pub fn update(&mut self, g: f64, alpha: f64) {
        if !g.is_finite() {
            return;
        }
        if self.rounds_observed == 0 {
            self.mu = g;
            self.sigma = 0.0;
        } else {
            let mu = alpha * g + (1.0 - alpha) * self.mu;
            let d = g - mu;
            self.sigma = ((1.0 - alpha) * self.sigma * self.sigma + alpha * d * d).sqrt();
            self.mu = mu;
        }
        self.rounds_observed += 1;
    }

    /// z-test `(G − μ)/σ > δ`. Never fires during the EMA warmup or when
    /// `σ == 0`; an infinite norm past warmup always fires.
    pub fn is_anomaly(&self, g: f64, delta: f64, ema_warmup_rounds: u64) -> bool {
        if self.rounds_observed < ema_warmup_rounds {
            return false;
        }
        if g == f64::INFINITY || g.is_nan() {
            return true;
        }
        if self.sigma == 0.0 {
            return false;
        }
        (g - self.mu) / self.sigma > delta
    }
}

/// Per (worker, layer) EMA statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncStats {
    layers: usize,
    stats: Vec<EmaStat>,
}

impl SyncStats {
    pub fn new(workers: usize, layers: usize) -> Self {
        Self {
            layers,
            stats: vec![EmaStat::default(); workers * layers],
        }
    }

    pub fn get(&self, worker: usize, layer: usize) -> &EmaStat {
        &self.stats[worker * self.layers + layer]
    }

    pub fn get_mut(&mut self, worker: usize, layer: usize) -> &mut EmaStat {
        &mut self.stats[worker * self.layers + layer]
    }
}

pub fn ema_update(stats: &mut SyncStats, worker: usize, layer: usize, g: f64, alpha: f64) {
    stats.get_mut(worker, layer).update(g, alpha);
}

pub fn is_anomaly(stats: &SyncStats, worker: usize, layer: usize, g: f64, cfg: &SyncConfig) -> bool {
    stats.get(worker, layer).is_anomaly(g, cfg.delta, cfg.ema_warmup_rounds)
}

/// `w_i = exp(−G_i) / Σ_j exp(−G_j)` with the smallest finite norm
/// subtracted first. Infinite norms get weight exactly zero. Returns `None`
/// when every norm is infinite (the caller rolls back).
pub fn penalty_weights(norms: &[f64]) -> Option<Vec<f64>> {
    let g_min = norms
        .iter()
        .copied()
        .filter(|g| g.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !g_min.is_finite() {
        return None;
    }
    let e: Vec<f64> = norms
        .iter()
        .map(|&g| if g.is_finite() { (-(g - g_min)).exp() } else { 0.0 })
        .collect();
    let gamma = e.iter().fold(0.0, |a, x| a + x);
    Some(e.into_iter().map(|x| x / gamma).collect())
}

/// Uniform weights over the finite norms (weighted averaging disabled).
pub fn uniform_weights(norms: &[f64]) -> Option<Vec<f64>> {
    let count = norms.iter().filter(|g| g.is_finite()).count();
    if count == 0 {
        return None;
    }
    let w = 1.0 / count as f64;
    Some(norms.iter().map(|g| if g.is_finite() { w } else { 0.0 }).collect())
}

/// `β = min(φ / (Ḡ + ε), 1)`.
pub fn clip_coefficient(synced_norm: f64, phi: f64, eps: f64) -> f64 {
    (phi / (synced_norm + eps)).min(1.0)
}

/// Returns `(βΔ̄, β)`.
pub fn clip_pseudo(avg: &Vector, synced_norm: f64, cfg: &SyncConfig) -> (Vector, f64) {
    let beta = clip_coefficient(synced_norm, cfg.phi, cfg.eps);
    (avg.scaled(beta), beta)
}

/// Outcome of synchronizing one layer, as seen by one sync group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyOutcome {
    pub layer: usize,
    /// Sync group (mesh row).
    pub row: usize,
    /// Module-level pseudo-gradient norms per sync-group member, after
    /// anomalies were replaced by `+∞`.
    pub norms: Vec<f64>,
    pub anomalies: Vec<bool>,
    pub weights: Vec<f64>,
    pub synced_norm: f64,
    pub beta: f64,
    pub rollback: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warmed(mu: f64, sigma: f64) -> EmaStat {
        EmaStat {
            mu,
            sigma,
            rounds_observed: 100,
        }
    }

    #[test]
    fn ema_hand_example() {
        let mut s = warmed(1.0, 0.0);
        s.update(2.0, 0.02);
        assert!((s.mu - 1.02).abs() < 1e-15);
        let expected = (0.02f64 * 0.98 * 0.98).sqrt();
        assert!((s.sigma - expected).abs() < 1e-15);
        assert!((s.sigma - 0.138593).abs() < 1e-6);
    }

    #[test]
    fn ema_fixed_point_and_skip() {
        let mut s = warmed(1.5, 0.0);
        s.update(1.5, 0.02);
        assert_eq!((s.mu, s.sigma), (1.5, 0.0));
        let before = s;
        s.update(f64::INFINITY, 0.02);
        assert_eq!(s, before);
    }

    #[test]
    fn first_observation_seeds_mean() {
        let mut s = EmaStat::default();
        s.update(4.0, 0.02);
        assert_eq!((s.mu, s.sigma, s.rounds_observed), (4.0, 0.0, 1));
    }

    #[test]
    fn z_test_examples() {
        let s = warmed(1.0, 0.1);
        assert!(!s.is_anomaly(1.2, 3.0, 10));
        assert!(s.is_anomaly(1.4, 3.0, 10));
        assert!(s.is_anomaly(f64::INFINITY, 3.0, 10));
        let young = EmaStat {
            rounds_observed: 3,
            ..s
        };
        assert!(!young.is_anomaly(100.0, 3.0, 10));
        assert!(!warmed(1.0, 0.0).is_anomaly(50.0, 3.0, 10));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(penalty_weights(&[0.7; 4]).unwrap(), vec![0.25; 4]);
        let w = penalty_weights(&[1.0, 2.0]).unwrap();
        assert!((w[0] - 0.73106).abs() < 1e-5 && (w[1] - 0.26894).abs() < 1e-5);
        assert_eq!(penalty_weights(&[0.0, f64::INFINITY]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(penalty_weights(&[f64::INFINITY; 3]), None);
    }

    #[test]
    fn four_member_example() {
        // e^-1, e^-2, e^-3 normalized
        let w = penalty_weights(&[1.0, 2.0, 3.0, f64::INFINITY]).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|g| (-g).exp()).collect();
        let z: f64 = e.iter().sum();
        for k in 0..3 {
            assert!((w[k] - e[k] / z).abs() < 1e-15);
        }
        assert!((w[0] - 0.6652).abs() < 1e-4);
        assert!((w[1] - 0.2447).abs() < 1e-4);
        assert!((w[2] - 0.0900).abs() < 1e-4);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn huge_finite_norms_do_not_underflow() {
        let w = penalty_weights(&[1000.0, 1001.0]).unwrap();
        assert!((w[0] + w[1] - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn clip_examples() {
        let cfg = SyncConfig::default();
        let d = Vector::from_vec(vec![3.0, 4.0]);
        let (out, beta) = clip_pseudo(&d, 5.0, &cfg);
        assert!(beta == 1.0 && out == d);

        let d = Vector::from_vec(vec![12.0, 16.0]);
        let (out, beta) = clip_pseudo(&d, 20.0, &cfg);
        assert!((beta - 0.5).abs() < 1e-7);
        assert!((out.l2_norm() - 10.0).abs() < 1e-5);
        assert!(out.l2_norm() < cfg.phi);

        let (out, beta) = clip_pseudo(&Vector::zeros(3), 0.0, &cfg);
        assert_eq!((out, beta), (Vector::zeros(3), 1.0));
    }
}
