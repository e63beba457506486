use std::time::Instant;

use uifm::config::RunConfig;
use uifm::gradcheck::{check, rel_err, Problem, STEP, TOLERANCE};

#[test]
fn tiny_model_gradients_match_central_differences() {
    let t0 = Instant::now();
    let mut problem = Problem::tiny(&RunConfig::tiny(), 3).unwrap();
    assert_eq!(problem.model.catalog().len(), 20);
    let report = check(&mut problem, STEP, TOLERANCE).unwrap();
    println!("{report:?} in {:.1}s", t0.elapsed().as_secs_f64());
    assert!(report.n_scalars > 1000);
    assert!(report.pass, "{report:?}");
}

#[test]
fn relative_error_uses_floor_for_tiny_gradients() {
    assert_eq!(rel_err(2.0, 2.0), 0.0);
    assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    assert!((rel_err(0.0, 1e-9) - 1e-6).abs() < 1e-18);
}
