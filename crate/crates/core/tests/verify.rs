use vicregl::verify::{run_suite, Fault, Group, SuiteConfig};

#[test]
fn suite_filters_groups() {
    let cfg = SuiteConfig {
        groups: vec![Group::Geometry, Group::Loss],
        geometry_instances: 50,
        loss_instances: 5,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg);
    assert!(report.passed(), "{report}");
    assert_eq!(report.checks.len(), 9);
    assert!(report
        .checks
        .iter()
        .all(|c| matches!(c.group, Group::Geometry | Group::Loss)));
}

#[test]
fn injected_fault_fails_the_gradient_checks() {
    let cfg = SuiteConfig {
        groups: vec![Group::Grad],
        fault: Some(Fault::CovGradSign),
        grad_instances: 3,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg);
    assert!(!report.passed());
    for name in ["fd_vicreg", "fd_two_view", "fd_multicrop"] {
        assert!(!report.get(name).unwrap().passed, "{name} should catch the fault");
    }
    // The fault is cleared afterwards.
    let clean = run_suite(&SuiteConfig { fault: None, ..cfg });
    assert!(clean.passed(), "{clean}");
}
