mod common;

#[test]
fn metrics_match_brute_force_on_random_fixtures() {
    for seed in 0..common::METRIC_FIXTURES {
        common::check_metric_fixture(seed).unwrap();
    }
}
