mod common;

use common::grad::{all_cases, MIN_ENTRIES, TOLERANCE};

#[test]
fn every_op_and_loss_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in all_cases() {
        let r = case.run();
        if !r.passed() {
            failures.push(format!("{}: {} entries, max rel err {:.3e}", case.name, r.checked, r.max_rel));
        }
    }
    assert!(
        failures.is_empty(),
        "need >= {MIN_ENTRIES} entries below {TOLERANCE:e}:\n{}",
        failures.join("\n")
    );
}

