//! Acceptance suite for `grpo-lab`; the criteria live in `tests/acceptance.rs`.
//!
//! `cargo test -p grpo-lab-validation --test acceptance` prints one pass/fail
//! line per criterion and a summary line.

/// Prints the verdict line for a criterion and returns whether it passed.
pub fn report(id: u32, name: &str, passed: bool, detail: &str) -> bool {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("criterion {id} [{name}]: {verdict} ({detail})");
    passed
}
