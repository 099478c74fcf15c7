mod support;

use support::{end_to_end_gradient_errors, primitive_gradient_errors};

const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_central_differences() {
    for seed in [1, 2] {
        let errs = primitive_gradient_errors(seed);
        for (name, err) in &errs {
            assert!(*err < TOL, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn dice_loss_through_depth_one_net_matches_central_differences() {
    let (input, params) = end_to_end_gradient_errors(7);
    assert!(input < TOL, "input gradient relative error {input:e}");
    assert!(params < TOL, "parameter gradient relative error {params:e}");
}
