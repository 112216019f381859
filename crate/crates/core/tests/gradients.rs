use cae_anomaly::nn::gradcheck::{check_all, layer_cases};

#[test]
fn layers_and_toy_configs_match_finite_differences() {
    let results = check_all(1e-5, 1e-4, 3);
    assert_eq!(results.len(), layer_cases(0).len() + 9);
    for (name, report) in &results {
        assert!(report.passed(), "{name}\n{report}");
    }
}

#[test]
fn loose_probe_is_caught() {
    // a step this large leaves curvature error in the central difference
    let results = check_all(1e-1, 1e-10, 1);
    assert!(results.iter().any(|(_, r)| !r.passed()));
}
