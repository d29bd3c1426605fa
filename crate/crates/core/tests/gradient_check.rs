#[path = "support/gradcheck.rs"]
mod gradcheck;

#[test]
fn every_primitive_matches_finite_differences() {
    let results = gradcheck::run_suite(2024);
    let mut failures = Vec::new();
    for r in &results {
        if !r.passed() {
            failures.push(format!("{} [{}]: {:.3e}", r.primitive, r.case, r.max_rel_err));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
    // each primitive is exercised on three random shapes
    let matmuls = results.iter().filter(|r| r.primitive == "matmul").count();
    assert_eq!(matmuls, 3);
}

#[test]
fn suite_is_seed_stable() {
    let a: Vec<f64> = gradcheck::run_suite(9).iter().map(|r| r.max_rel_err).collect();
    let b: Vec<f64> = gradcheck::run_suite(9).iter().map(|r| r.max_rel_err).collect();
    assert_eq!(a, b);
}
