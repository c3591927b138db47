//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p tlkit --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Check;

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("gradient correctness", || common::gradient_criterion(20)),
        ("adam oracle", common::adam_criterion),
        ("metrics arithmetic", || common::metrics_criterion(1000)),
        ("hyperband schedule", || common::hyperband_criterion(10)),
        ("trainer convergence", common::trainer_criterion),
        ("split/augment contracts", || common::split_augment_criterion(10)),
        ("freeze contract", common::freeze_criterion),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {reason}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
