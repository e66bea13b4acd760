//! Saddle-point check of the insurer/market equilibrium by unilateral
//! deviations with common random numbers.

use std::time::Instant;

use regime_fbsde::grid::TimeGrid;
use regime_fbsde::insurance::{reference_market, verify_insurance_equilibrium};
use regime_fbsde::maxprinciple::VerifyOptions;

fn main() -> regime_fbsde::Result<()> {
    let (market, bounds) = reference_market()?;
    let model = market.model(TimeGrid::uniform(1.0, 50)?, 0)?;
    let start = Instant::now();
    let v = verify_insurance_equilibrium(&market, &bounds, &model, 1.0, 20_000, 17, 4, &VerifyOptions::default())?;
    let r = &v.report;
    println!("candidate J = {:.5} ± {:.5}", r.candidate_value[0].mean, r.candidate_value[0].stderr);
    for d in &r.deviations {
        println!("{:?} {:28} {:+.2e} ± {:.2e}  {:?}", d.player, d.label, d.improvement.mean, d.improvement.stderr, d.status);
    }
    for g in &r.gateaux {
        println!("Gateaux {:?}: {:+.2e} ± {:.2e}", g.player, g.estimate.mean, g.estimate.stderr);
    }
    for note in &r.notes {
        println!("note: {note}");
    }
    println!("passed = {} ({:.1?})", r.passed, start.elapsed());
    Ok(())
}
