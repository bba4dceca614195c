//! Analytic gradients against finite differences in double precision.

mod common;

use common::oracles::{gradient_check_config, worst_gradient_error};

#[test]
fn analytic_gradients_match_central_differences() {
    assert!(gradient_check_config().parameter_count() <= 5000);
    let (worst, at) = worst_gradient_error();
    println!("worst relative error {worst:e} at {at}");
    assert!(worst <= 1e-5, "worst relative error {worst:e} at {at}");
}
