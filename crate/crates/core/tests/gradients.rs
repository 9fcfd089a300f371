use speech_mamba_core::suite::gradient_suite;

#[test]
fn every_case_within_tolerance() {
    let cases = gradient_suite().unwrap();
    for c in &cases {
        println!("{:<28} {:?} rel {:.3e} over {} coords", c.name, c.kind, c.report.max_rel_err, c.report.coordinates);
    }
    let failed: Vec<_> = cases.iter().filter(|c| !c.passed()).map(|c| &c.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
