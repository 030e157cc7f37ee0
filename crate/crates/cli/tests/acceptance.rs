//! Every acceptance criterion, one line each, through the same code path as
//! `icu acceptance`.

use icu_cli::acceptance::{run_all, Options, CRITERIA};

#[test]
fn acceptance_criteria() {
    println!();
    let results = run_all(&[], &Options::default(), |r| println!("{}", r.line()));
    assert_eq!(results.len(), CRITERIA.len());
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
