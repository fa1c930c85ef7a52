use egonn::diagnostics::{gradient_suite, CaseKind};

#[test]
fn every_case_within_tolerance() {
    let results = gradient_suite(0).unwrap();
    for r in &results {
        println!("{:<20} {:<9} {:.3e} ({} coords)", r.name, r.kind.label(), r.max_rel_err, r.checked);
    }
    assert!(results.iter().any(|r| r.kind == CaseKind::Network));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:?}");
}
