mod common;

use p2i_core::gradcheck::{check_gradients, Objective};
use p2i_core::losses::LossWeights;

fn run<T: p2i_core::tensor::Real>(tol: f64, atol: f64) {
    let (b, y, real) = common::reference::gradient_fixture();
    let w = LossWeights::default();
    for obj in Objective::ALL {
        let checks = check_gradients::<T>(&b, &y, &real, &w, obj, 12, 1e-6, atol, 3).unwrap();
        assert!(!checks.is_empty());
        assert!(checks.iter().any(|c| c.numeric_norm > 0.0), "{} has no gradient", obj.name());
        for c in checks {
            assert!(
                c.rel_error <= tol,
                "{} / {}: rel error {:.3e} (analytic {:.3e}, numeric {:.3e})",
                obj.name(),
                c.name,
                c.rel_error,
                c.analytic_norm,
                c.numeric_norm
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_f64() {
    run::<f64>(1e-6, 1e-9);
}

#[test]
fn gradients_match_finite_differences_f32() {
    run::<f32>(1e-3, 1e-4);
}
