#[path = "support/fd.rs"]
mod fd;

use edit_sim::task::{LayeredTask, QuadraticConfig};
use proptest::prelude::*;
use fd::mlp_relative_error;

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..100 {
        let err = mlp_relative_error(seed);
        assert!(err <= 1e-6, "seed {seed}: relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_loss_is_non_negative(seed in 0u64..1000, shift in -3.0f64..3.0) {
        let task = LayeredTask::quadratic(&QuadraticConfig {
            dim: 9, cond: 20.0, layers: 4, noise_std: 0.0, noise_clip: 1.0, seed,
        }).unwrap();
        let opt = task.optimum().unwrap();
        prop_assert_eq!(task.validation_loss(&opt).unwrap(), 0.0);
        let moved: Vec<_> = opt.iter().map(|l| {
            let mut l = l.clone();
            l.as_mut_slice().iter_mut().for_each(|x| *x += shift);
            l
        }).collect();
        prop_assert!(task.validation_loss(&moved).unwrap() >= 0.0);
    }

    #[test]
    fn quadratic_gradient_respects_box_bound(seed in 0u64..1000, radius in 0.1f64..2.0, noise in 0.0f64..1.0) {
        let task = LayeredTask::quadratic(&QuadraticConfig {
            dim: 8, cond: 10.0, layers: 2, noise_std: noise, noise_clip: 0.5, seed,
        }).unwrap();
        let opt = task.optimum().unwrap();
        let mut rng = edit_sim::Rng::new(seed, 1);
        let theta: Vec<_> = opt.iter().map(|l| {
            let mut l = l.clone();
            l.as_mut_slice().iter_mut().for_each(|x| *x += rng.uniform_range(-radius, radius));
            l
        }).collect();
        let exact = task.true_gradient(&theta).unwrap();
        prop_assert!(exact.iter().all(|g| g.abs() <= 10.0 * radius + 1e-12));
        let ginf = task.quadratic_ginf(radius).unwrap();
        let batch = task.sample_batch(&edit_sim::task::DataShard::new(0, seed), 0, 0, 3);
        let (_, g) = task.loss_and_grad(&theta, &batch).unwrap();
        for l in &g {
            prop_assert!(l.max_abs() <= ginf + 1e-12);
        }
    }
}
