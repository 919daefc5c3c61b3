use dclip::gradcheck::suite::{check_names, run_check, run_suite, SuiteOptions, TOLERANCE};

#[test]
fn every_check_passes_on_twenty_seeds() {
    let opts = SuiteOptions::default();
    assert!(opts.seeds >= 20);
    let results = run_suite(&opts).unwrap();
    assert_eq!(results.len(), check_names().len());
    for r in &results {
        assert!(r.passed(), "{}: {:e} > {TOLERANCE:e}", r.name, r.max_rel_err);
        assert!(r.coords > 0);
    }
}

#[test]
fn unknown_check_is_rejected() {
    assert!(run_check("no_such_op", &SuiteOptions::default()).is_err());
}
