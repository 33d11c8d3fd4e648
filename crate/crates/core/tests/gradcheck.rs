//! Certifies every differentiable op and both end-to-end networks against
//! central finite differences in f64.

mod common;

use common::{dlf_full_check, op_checks, unet_composite_check, FD_TOL};

#[test]
fn every_op_gradient_matches_finite_differences() {
    for r in op_checks() {
        assert!(r.checked > 0, "{}: nothing checked", r.name);
        assert!(
            r.max_rel < FD_TOL,
            "{}: max relative error {:.3e} over {} coordinates",
            r.name,
            r.max_rel,
            r.checked
        );
    }
}

#[test]
fn segmentation_net_gradient_matches_finite_differences() {
    let r = unet_composite_check();
    assert!(
        r.max_rel < FD_TOL,
        "max relative error {:.3e} over {} coordinates",
        r.max_rel,
        r.checked
    );
}

#[test]
fn fusion_model_gradient_matches_finite_differences() {
    let r = dlf_full_check(12);
    assert!(
        r.max_rel < FD_TOL,
        "max relative error {:.3e} over {} coordinates",
        r.max_rel,
        r.checked
    );
}
