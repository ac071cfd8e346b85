// SPDX-License-Identifier: Apache-2.0

//! Finite-difference check of every primitive and composite block.
//!
//! cargo run --example gradient_check -- [seeds]

use fusepath::model::gradsuite::composite_cases;
use fusepath_autodiff::fdcheck::suite::primitive_cases;

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut failed = 0;
    for case in primitive_cases(seeds).into_iter().chain(composite_cases(seeds)) {
        match case.check() {
            Ok(r) => {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<26} {verdict:<4} entries {:>5}  max rel {:.1e}  max abs {:.1e}",
                    case.name, r.checked, r.max_rel_err, r.max_abs_err
                );
                failed += usize::from(!r.passed());
            }
            Err(e) => {
                println!("{:<26} error {e}", case.name);
                failed += 1;
            }
        }
    }
    std::process::exit(i32::from(failed > 0));
}
