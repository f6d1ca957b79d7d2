// Central finite-difference gradient check on random MLP instances.

use edit_sim::math::Rng;
use edit_sim::task::{DataShard, LayeredTask, MlpConfig};
use edit_sim::Vector;

pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error between the analytic gradient and central
/// differences for one random instance drawn from `seed`.
pub fn mlp_relative_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 0xFD);
    let depth = 1 + rng.below(3);
    let dims: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(5)).collect();
    let task = LayeredTask::mlp(&MlpConfig {
        dims,
        noise_std: 0.1,
        noise_clip: 3.0,
        seed,
        validation_size: 4,
        init_scale: 1.0,
    })
    .unwrap();
    let mut params = task.initial_params();
    for layer in &mut params {
        for x in layer.as_mut_slice() {
            *x += 0.3 * rng.standard_normal();
        }
    }
    let batch = task.sample_batch(&DataShard::new(0, seed), 0, 0, 1 + rng.below(4));
    let (_, grads) = task.loss_and_grad(&params, &batch).unwrap();
    let analytic = LayeredTask::concat(&grads);

    let mut numeric = Vec::with_capacity(analytic.len());
    for l in 0..params.len() {
        for k in 0..params[l].len() {
            let orig = params[l][k];
            params[l][k] = orig + FD_STEP;
            let up = task.loss(&params, &batch).unwrap();
            params[l][k] = orig - FD_STEP;
            let down = task.loss(&params, &batch).unwrap();
            params[l][k] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let diff = Vector::from_vec(analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect()).l2_norm();
    let scale = Vector::from_vec(analytic).l2_norm().max(Vector::from_vec(numeric).l2_norm());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
