// Randomized checks of the pseudo-gradient penalty. Each returns the number
// of cases run, or the first counterexample.

use std::sync::Arc;

use edit_sim::math::Rng;
use edit_sim::mesh::DeviceMesh;
use edit_sim::optim::{InnerOptConfig, LrSchedule};
use edit_sim::protocol::{clip_pseudo, penalty_weights, Engine, EngineConfig, EmaStat, SyncConfig};
use edit_sim::task::{LayeredTask, QuadraticConfig};
use edit_sim::Vector;

fn random_norms(rng: &mut Rng) -> Vec<f64> {
    let n = 1 + rng.below(8);
    let mut g: Vec<f64> = (0..n)
        .map(|_| match rng.below(6) {
            0 => f64::INFINITY,
            1 => rng.uniform_range(0.0, 1e-3),
            2 => rng.uniform_range(100.0, 1e4),
            _ => rng.uniform_range(0.0, 20.0),
        })
        .collect();
    if g.iter().all(|x| x.is_infinite()) {
        g[rng.below(n)] = rng.uniform_range(0.0, 5.0);
    }
    g
}

pub fn weights_on_simplex(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = Rng::new(seed, 0x51);
    for c in 0..cases {
        let g = random_norms(&mut rng);
        let w = penalty_weights(&g).ok_or_else(|| format!("case {c}: no weights for {g:?}"))?;
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || w.iter().any(|&x| x < 0.0) {
            return Err(format!("case {c}: {g:?} -> {w:?} (sum {sum})"));
        }
        for (gi, wi) in g.iter().zip(&w) {
            if gi.is_infinite() && *wi != 0.0 {
                return Err(format!("case {c}: infinite norm got weight {wi}"));
            }
        }
    }
    if penalty_weights(&[f64::INFINITY; 4]).is_some() {
        return Err("all-infinite norms must signal rollback".into());
    }
    Ok(cases)
}

pub fn clip_bound(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = Rng::new(seed, 0xC1);
    for c in 0..cases {
        let cfg = SyncConfig {
            phi: rng.uniform_range(1e-3, 50.0),
            ..SyncConfig::default()
        };
        let scale = 10f64.powf(rng.uniform_range(-4.0, 4.0));
        let v = Vector::from_vec((0..1 + rng.below(16)).map(|_| scale * rng.standard_normal()).collect());
        let gbar = v.l2_norm();
        let (out, beta) = clip_pseudo(&v, gbar, &cfg);
        let bound = cfg.phi * gbar / (gbar + cfg.eps);
        if !(beta > 0.0 && beta <= 1.0) || out.l2_norm() > bound.max(gbar.min(cfg.phi)) * (1.0 + 1e-12) || out.l2_norm() > cfg.phi * (1.0 + 1e-12) {
            return Err(format!("case {c}: phi {} gbar {gbar} -> {} (beta {beta})", cfg.phi, out.l2_norm()));
        }
    }
    Ok(cases)
}

pub fn ema_matches_formula(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = Rng::new(seed, 0xE3);
    for c in 0..cases {
        let alpha = rng.uniform_range(1e-3, 1.0);
        let mu = rng.uniform_range(0.0, 10.0);
        let sigma = rng.uniform_range(0.0, 3.0);
        let g = rng.uniform_range(0.0, 20.0);
        let mut s = EmaStat {
            mu,
            sigma,
            rounds_observed: 1 + rng.below(50) as u64,
        };
        s.update(g, alpha);
        let mu2 = alpha * g + (1.0 - alpha) * mu;
        let sigma2 = ((1.0 - alpha) * sigma * sigma + alpha * (g - mu2) * (g - mu2)).sqrt();
        if (s.mu - mu2).abs() > 1e-12 || (s.sigma - sigma2).abs() > 1e-12 {
            return Err(format!("case {c}: ({mu},{sigma},{g},{alpha}) -> ({},{})", s.mu, s.sigma));
        }
        let before = s;
        s.update(f64::INFINITY, alpha);
        if s != before {
            return Err(format!("case {c}: infinite norm changed the statistics"));
        }
    }
    Ok(cases)
}

pub fn z_test_warmup(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = Rng::new(seed, 0x2E);
    for c in 0..cases {
        let warm = 1 + rng.below(20) as u64;
        let s = EmaStat {
            mu: rng.uniform_range(0.0, 5.0),
            sigma: rng.uniform_range(1e-6, 1.0),
            rounds_observed: rng.below(warm as usize) as u64,
        };
        let g = match rng.below(3) {
            0 => f64::INFINITY,
            _ => rng.uniform_range(0.0, 1e6),
        };
        if s.is_anomaly(g, 3.0, warm) {
            return Err(format!("case {c}: flagged during warmup ({}/{warm})", s.rounds_observed));
        }
        let ready = EmaStat {
            rounds_observed: warm,
            ..s
        };
        let expect = g.is_infinite() || (g - ready.mu) / ready.sigma > 3.0;
        if ready.is_anomaly(g, 3.0, warm) != expect {
            return Err(format!("case {c}: z-test disagrees for {g}"));
        }
    }
    Ok(cases)
}

fn flat(p: &[Vector]) -> Vec<f64> {
    LayeredTask::concat(p)
}

/// Random group-wide flag patterns on a live engine: rollback happens iff
/// every member of the layer's sync group is flagged, and then restores the
/// anchor, working parameters and outer momentum exactly.
pub fn rollback_iff_all_anomalous(cases: u64, seed: u64) -> Result<u64, String> {
    let mut rng = Rng::new(seed, 0x2B);
    let task = Arc::new(
        LayeredTask::quadratic(&QuadraticConfig {
            dim: 6,
            cond: 3.0,
            layers: 2,
            noise_std: 0.3,
            noise_clip: 1.0,
            seed,
        })
        .unwrap(),
    );
    let mut rollbacks = 0;
    for c in 0..cases {
        let cols = 1 + rng.below(3);
        let sync = SyncConfig {
            tau: 2,
            ema_warmup_rounds: 0,
            ..SyncConfig::default()
        };
        let cfg = EngineConfig {
            mesh: DeviceMesh::new(1, cols).unwrap(),
            sync,
            inner: InnerOptConfig::Sgd { lr: 0.05 },
            schedule: LrSchedule::constant(0.05),
            batch_size: 1,
            data_seed: c,
            corruption: None,
            track_true_grad: false,
        };
        let mut e = Engine::new(task.clone(), cfg).unwrap();
        e.run_round().unwrap();
        e.run_round().unwrap();
        let layers = task.num_layers();
        let anchor = e.anchor_params(0).unwrap();
        let momentum = e.outer_momentum(0).unwrap();
        let mut flagged = vec![vec![false; cols]; layers];
        for (l, row) in flagged.iter_mut().enumerate() {
            for (j, f) in row.iter_mut().enumerate() {
                *f = rng.below(3) > 0;
                let stat = e.stats_mut().get_mut(j, l);
                *stat = if *f {
                    EmaStat {
                        mu: 0.0,
                        sigma: 1e-300,
                        rounds_observed: 3,
                    }
                } else {
                    EmaStat {
                        mu: 1e6,
                        sigma: 1.0,
                        rounds_observed: 3,
                    }
                };
            }
        }
        let summary = e.finish().unwrap().ok_or("no sync happened")?;
        let after = e.anchor_params(0).unwrap();
        let after_m = e.outer_momentum(0).unwrap();
        let replica = e.replica_params(0).unwrap();
        for l in 0..layers {
            let all = flagged[l].iter().all(|&f| f);
            let o = &summary.outcomes[l];
            if o.rollback != all {
                return Err(format!("case {c} layer {l}: rollback {} vs all-flagged {all}", o.rollback));
            }
            if all {
                rollbacks += 1;
                if after[l] != anchor[l] || after_m[l] != momentum[l] || replica[l] != anchor[l] {
                    return Err(format!("case {c} layer {l}: rollback did not restore state"));
                }
            } else if flat(&[after[l].clone()]) == flat(&[anchor[l].clone()]) {
                return Err(format!("case {c} layer {l}: normal sync left the anchor unchanged"));
            }
        }
    }
    if rollbacks == 0 {
        return Err("no rollback case generated".into());
    }
    Ok(cases)
}
