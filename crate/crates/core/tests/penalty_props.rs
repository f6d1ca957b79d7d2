#[path = "support/penalty_cases.rs"]
mod penalty_cases;

use edit_sim::protocol::{clip_coefficient, penalty_weights};
use proptest::prelude::*;

#[test]
fn weights_stay_on_the_simplex() {
    penalty_cases::weights_on_simplex(10_000, 1).unwrap();
}

#[test]
fn clipped_norm_never_exceeds_phi() {
    penalty_cases::clip_bound(10_000, 2).unwrap();
}

#[test]
fn ema_update_matches_hand_formula() {
    penalty_cases::ema_matches_formula(10_000, 3).unwrap();
}

#[test]
fn z_test_respects_warmup() {
    penalty_cases::z_test_warmup(10_000, 4).unwrap();
}

#[test]
fn rollback_exactly_when_all_flagged() {
    penalty_cases::rollback_iff_all_anomalous(500, 5).unwrap();
}

proptest! {
    #[test]
    fn anomaly_weight_ratio_bound(normal in proptest::collection::vec(0.0f64..10.0, 1..6), extra in 0.0f64..30.0) {
        let g_max = normal.iter().copied().fold(0.0, f64::max);
        let g_anom = g_max + extra;
        let mut g = normal.clone();
        g.push(g_anom);
        let w = penalty_weights(&g).unwrap();
        let w_max = w.iter().copied().fold(0.0, f64::max);
        prop_assert!(w[w.len() - 1] / w_max <= (-(g_anom - g_max)).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn clip_coefficient_in_unit_interval(gbar in 0.0f64..1e9, phi in 1e-6f64..1e3) {
        let b = clip_coefficient(gbar, phi, 1e-6);
        prop_assert!(b > 0.0 && b <= 1.0);
    }
}
