//! Analytic loss gradients against central finite differences.

#[allow(dead_code)]
#[path = "common/grad.rs"]
mod grad;

const FIXTURES: u64 = 20;
const TOL: f64 = 1e-3;

#[test]
fn every_loss_gradient_matches_finite_differences() {
    for (name, suite) in grad::SUITES {
        let e = suite(FIXTURES);
        assert!(e <= TOL, "{name}: worst relative error {e:.3e}");
    }
}
