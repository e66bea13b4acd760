//! Change-of-measure densities: constant scenarios and the (θ, C) family,
//! exact log-space formula against the Euler recursion.

use regime_fbsde::insurance::reference_market;
use regime_fbsde::grid::TimeGrid;
use regime_fbsde::sde::{
    simulate_density_theta, simulate_density_theta_c, simulate_state, Control, ControlPair, RateFamily, RegimeScenario,
    ScenarioPoint,
};
use regime_fbsde::stats::Estimate;

fn main() -> regime_fbsde::Result<()> {
    let (market, _) = reference_market()?;
    let model = market.model(TimeGrid::uniform(1.0, 64)?, 0)?;
    let scenario = RegimeScenario(vec![
        ScenarioPoint::constant(0.4, vec![0.0, -0.3], 0.2),
        ScenarioPoint::constant(-0.2, vec![0.5, 0.0], -0.4),
    ]);
    let theta = Control::PerRegime(vec![0.34, 0.5]);
    let c = RateFamily::constant(vec![vec![-1.0, 1.0], vec![0.5, -0.5]])?;
    let (mut g1, mut g2, mut gap) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..20_000 {
        let p = model.sample_path(9, i)?;
        let x = simulate_state(&market, &ControlPair::zero(), &model, &p, 1.0)?.x;
        let (d, euler) = simulate_density_theta(&scenario, &model, &p, &x, 1e-6, true)?;
        g1.push(d.terminal());
        gap.push(d.terminal() - euler.unwrap()[model.grid.steps()]);
        g2.push(simulate_density_theta_c(&theta, &c, &model, &p, &x, false)?.0.terminal());
    }
    for (name, v) in [("E[G(T)], constant scenario", &g1), ("E[G(T)], (theta, C)", &g2), ("exact - Euler", &gap)] {
        let e = Estimate::from_samples(v);
        println!("{name:28} {:+.5} ± {:.5}", e.mean, e.stderr);
    }
    Ok(())
}
