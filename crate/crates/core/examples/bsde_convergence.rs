//! Regression error of the insurer's value BSDE against the closed form as the
//! grid is refined (paths grow with the square of the step count).

use std::time::Instant;

use regime_fbsde::insurance::{convergence_study, reference_market};

fn main() -> regime_fbsde::Result<()> {
    let (market, bounds) = reference_market()?;
    let start = Instant::now();
    let r = convergence_study(&market, &bounds, 1.0, 1.0, &[16, 32, 64, 128], 16_000, 2, 5, 4)?;
    for l in &r.levels {
        println!("M = {:4}  N = {:6}  rms = {:.3e}  Y(0) = {:.5} (exact {:.5})", l.steps, l.paths, l.rms, l.y0, l.y0_exact);
    }
    println!("order {:.2}, worst ratio {:.3} ({:.1?})", r.order, r.worst_ratio, start.elapsed());
    Ok(())
}
