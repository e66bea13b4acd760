//! Closed-form worst-case investment: π*, θ*, the bang-bang C*, the f-curves,
//! a search-based cross-check of π* and the ODE defect of the value ansatz.

use regime_fbsde::grid::TimeGrid;
use regime_fbsde::insurance::{
    ansatz_defect, exponential_claims_pi, reference_market, robust_pi_by_search, solve_equilibrium, OdeOptions, THETA_EPS,
};
use regime_fbsde::sde::ControlBox;

fn main() -> regime_fbsde::Result<()> {
    let (market, bounds) = reference_market()?;
    let grid = TimeGrid::uniform(1.0, 256)?;
    let eq = solve_equilibrium(&market, &bounds, &grid, &OdeOptions::default())?;
    let bx = ControlBox::new(-1.0 + THETA_EPS, 1.0)?;
    for n in 0..market.dim() {
        println!(
            "regime {}: pi* = {:.6} (search {:.6}, exponential formula {:.6}), theta* = {:.4}",
            n + 1,
            eq.pi[n],
            robust_pi_by_search(&market, n, &bx)?,
            exponential_claims_pi(market.claim_intensity[n], 3.0 + n as f64, market.beta, market.sigma[n])?,
            eq.theta[n]
        );
    }
    println!("C* at t = 0: {:?} ({} fixed-point rounds)", eq.c_matrix(0), eq.iterations);
    for k in [0, 128, 256] {
        println!("t = {:.2}: f = {:?}", grid.t(k), eq.f.values[k]);
    }
    let model = market.model(grid, 0)?;
    let points: Vec<_> = (0..=256).step_by(16).flat_map(|k| [(k, 0.0, 0), (k, 1.0, 1), (k, 2.0, 0)]).collect();
    let defect = ansatz_defect(&market, &eq, &model, &points)?;
    println!("max defect of f1(t, a) exp(-beta x): {:.2e}", defect.max_abs);
    Ok(())
}
