//! `swwae gradcheck`: run the finite-difference battery over every layer
//! type and the assembled model in hard and soft pooling modes.

use clap::Args;
use swwae_core::train::standard_battery;
use swwae_core::Result;

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cmd: &GradcheckCmd) -> Result<u8> {
    // Deliberate fault injection for verifying the harness: SWWAE_FAULT=conv
    // multiplies that check's analytic gradient by 1.01, which must fail.
    let fault = std::env::var("SWWAE_FAULT").ok();
    let reports = standard_battery(cmd.seed, fault.as_deref())?;

    let mut all_passed = true;
    for r in &reports {
        if r.passed() {
            println!(
                "PASS  {:<12} max rel {:.3e} over {} coords",
                r.name, r.max_rel_error, r.coords_checked
            );
        } else {
            all_passed = false;
            println!(
                "FAIL  {:<12} max rel {:.3e} at coordinate {} (analytic {:.6e}, numeric {:.6e}, tol {:.0e})",
                r.name, r.max_rel_error, r.worst_coordinate, r.worst_analytic, r.worst_numeric, r.tol
            );
        }
    }
    println!(
        "{} of {} gradient checks passed",
        reports.iter().filter(|r| r.passed()).count(),
        reports.len()
    );
    Ok(if all_passed { 0 } else { 1 })
}
