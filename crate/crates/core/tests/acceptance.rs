//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure.

use mpflow::acceptance;

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    println!("running {} acceptance criteria", acceptance::TITLES.len());
    let outcomes = acceptance::run_all(work.path(), |o| println!("{o}"));
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        outcomes.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
