//! Exact simulation of a two-state chain: occupation fractions against the
//! stationary law and the mean of the compensated chain martingale.

use std::time::Instant;

use regime_fbsde::chain::{martingale_part, simulate_chain, RateMatrix};
use regime_fbsde::grid::TimeGrid;
use regime_fbsde::rng::path_seed;
use regime_fbsde::stats::Estimate;

fn main() -> regime_fbsde::Result<()> {
    let rates = RateMatrix::two_state(1.0, 2.0)?;
    let grid = TimeGrid::uniform(100.0, 100)?;
    let paths = 1000;
    let start = Instant::now();
    let mut frac = Vec::with_capacity(paths);
    let mut mart = Vec::with_capacity(paths);
    for i in 0..paths {
        let p = simulate_chain(&rates, 0, &grid, path_seed(1, i as u64))?;
        frac.push(p.occupation(grid.steps())[0] / grid.horizon());
        mart.push(martingale_part(&p, &rates)?[grid.steps()][0]);
    }
    let f = Estimate::from_samples(&frac);
    let m = Estimate::from_samples(&mart);
    println!("stationary law      {:?}", rates.stationary()?);
    println!("time in regime 1    {:.4} ± {:.4}   ({paths} paths, {:.1?})", f.mean, f.stderr, start.elapsed());
    println!("E[M_1(T)]           {:+.4} ± {:.4}", m.mean, m.stderr);
    Ok(())
}
