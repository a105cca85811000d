use rial_core::diagnostics::{gradcheck_suite, table};

#[test]
fn every_layer_and_network_matches_finite_differences() {
    let rows = gradcheck_suite(7, 5).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "\n{}", table(&rows));
}
