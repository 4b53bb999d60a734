//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swingnet::nn::{MultitaskNet, TaskFeatures};

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Gradients smaller than this are compared absolutely: central differences
/// of an O(10) loss carry roundoff of order 1e-10 at the step used here, and the
/// input shift parameters have an exactly zero gradient.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Small enough that no ReLU pre-activation of the test nets crosses zero
/// inside the stencil (at 1e-4 one of the seeds straddles a kink).
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between reverse-mode and central differences.
pub fn max_relative_error(net: &mut MultitaskNet, seed: u64, features: &TaskFeatures) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = net.task_count();
    let states = random(16, net.architecture().input_dim, &mut rng, 2.0);
    let pp = random(16, tasks, &mut rng, 5.0);
    let pm = random(16, tasks, &mut rng, 5.0);
    let weights: Vec<f64> = (0..tasks).map(|_| rng.random_range(0.1..2.0)).collect();
    let loss = |net: &mut MultitaskNet| {
        net.loss_and_gradients(states.view(), features, pp.view(), pm.view(), &weights, false)
            .unwrap()
    };
    let grads = loss(net).grads;
    let h = FD_STEP;
    let mut worst: f64 = 0.0;
    for i in 0..grads.len() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let up = loss(net).global_loss;
        net.params_mut()[i] = orig - h;
        let down = loss(net).global_loss;
        net.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(grads[i].abs()).max(GRAD_FLOOR);
        worst = worst.max((fd - grads[i]).abs() / denom);
    }
    worst
}
