//! Runs every acceptance criterion and prints one line per criterion.
//! Set `ACCEPT_ONLY=1,5` to run a subset.

use std::process::ExitCode;

use explab::acceptance::{evaluate, Budget, CRITERIA};

fn main() -> ExitCode {
    let only: Vec<u8> = std::env::var("ACCEPT_ONLY")
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let budget = Budget::full();
    let mut failed = 0;
    for (id, _) in CRITERIA.iter().filter(|(id, _)| only.is_empty() || only.contains(id)) {
        let v = evaluate(*id, 1, workers, &budget);
        println!("{}", v.line());
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {failed} failing");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
