//! Finite-difference check of every op and of each network's forward pass.

use thermoseg::gradsuite::{self, SuiteOptions, TOLERANCE};

fn main() -> thermoseg::Result<()> {
    let cases = gradsuite::run(&SuiteOptions::default())?;
    for c in &cases {
        println!(
            "{:<48} {:.2e}  ({} coords, {} skipped)",
            c.name, c.report.max_rel_error, c.report.checked, c.report.skipped
        );
    }
    let bad = cases.iter().filter(|c| !c.passed()).count();
    println!("{} of {} below {TOLERANCE:e}", cases.len() - bad, cases.len());
    Ok(())
}
