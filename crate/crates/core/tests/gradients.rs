mod common;

use common::fd::max_relative_error;
use swingnet::nn::{scalar_features, task_features, Architecture, MultitaskNet};

#[test]
fn reverse_mode_matches_finite_differences() {
    let features = task_features(&[0.1, 0.5, 0.9]);
    for seed in 0..20 {
        let mut net = MultitaskNet::new(Architecture::multitask(2, 5, 3), seed).unwrap();
        let err = max_relative_error(&mut net, 100 + seed, &features);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn scalar_net_matches_finite_differences() {
    for seed in 0..5 {
        let mut net = MultitaskNet::new(Architecture::scalar(3, 6), seed).unwrap();
        let err = max_relative_error(&mut net, 7 + seed, &scalar_features());
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}
