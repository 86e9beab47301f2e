//! Finite-difference validation of every primitive's backward rule.

use fgp_core::reference::{run_gradient_suite, FD_TOLERANCE};

#[test]
fn all_primitives_pass_central_differences() {
    let reports = run_gradient_suite(100);
    let mut failures = Vec::new();
    for r in &reports {
        println!(
            "gradcheck {:<24} instances={} max_rel_err={:.3e}",
            r.primitive, r.instances, r.max_rel_err
        );
        if !r.passes() {
            failures.push(format!("{}: {:.3e}", r.primitive, r.max_rel_err));
        }
    }
    assert!(
        failures.is_empty(),
        "primitives over {FD_TOLERANCE:.0e}: {failures:?}"
    );
}
