mod common;

use common::grad::{all_op_checks, check_model, model_configs};

const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in all_op_checks() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_model_matches_finite_differences_under_every_flag_combination() {
    for (i, (name, cfg)) in model_configs().into_iter().enumerate() {
        let err = check_model(&cfg, i as u64);
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}
