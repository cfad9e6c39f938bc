//! Library surface of the experiment runner, used by the binary and by the
//! acceptance suite.

pub mod config;
pub mod runner;
pub mod svg;
pub mod sweeps;

pub use config::{DatasetSpec, ModelSpec, RunSpec};
pub use runner::run_to_dir;

use dtrg_core::verify::{gradient_report, GRAD_TOLERANCE};

/// Formats the finite-difference report; returns whether all terms passed.
pub fn gradcheck_report(corrupt_fixture: bool) -> (String, bool) {
    let rows = gradient_report(corrupt_fixture);
    let mut out = String::new();
    let mut ok = true;
    out.push_str(&format!("{:<16} {:>14}  status\n", "term", "max_rel_error"));
    for row in &rows {
        let pass = row.max_rel_error < GRAD_TOLERANCE;
        ok &= pass;
        out.push_str(&format!(
            "{:<16} {:>14.3e}  {}\n",
            row.term,
            row.max_rel_error,
            if pass { "pass" } else { "FAIL" }
        ));
    }
    (out, ok)
}
