mod support;

use support::gradcheck::{integrated_loss_case, op_cases, relative_error, TOLERANCE};

#[test]
fn every_operation_matches_finite_differences() {
    for seed in 0..20 {
        for case in op_cases(seed) {
            let err = relative_error(&case, seed).unwrap();
            assert!(err < TOLERANCE, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn integrated_loss_matches_finite_differences() {
    for seed in 0..20 {
        let case = integrated_loss_case(seed);
        let err = relative_error(&case, seed).unwrap();
        assert!(err < TOLERANCE, "seed {seed}: relative error {err:e}");
    }
}
