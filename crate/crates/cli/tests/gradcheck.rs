mod common;

use common::*;

#[test]
fn default_suite_passes() {
    let out = run(&["gradcheck", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reports = stdout_json(&out);
    assert_schema("gradcheck_report.schema.json", &reports);
    for r in reports.as_array().unwrap() {
        assert_eq!(r["passed"], true, "{r}");
        assert_eq!(r["trials"], 20);
    }
}

#[test]
fn injected_sign_error_is_caught() {
    let out = run(&["gradcheck", "--seed", "3", "--trials", "3", "--inject-fault"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("trial seeds"), "{stderr}");
    let reports = stdout_json(&out);
    assert_schema("gradcheck_report.schema.json", &reports);
    assert!(reports.as_array().unwrap().iter().any(|r| r["passed"] == false));
}

#[test]
fn zero_trials_is_a_usage_error() {
    let out = run(&["gradcheck", "--trials", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_same_report() {
    let a = run(&["gradcheck", "--seed", "8", "--trials", "2"]);
    let b = run(&["gradcheck", "--seed", "8", "--trials", "2"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}
