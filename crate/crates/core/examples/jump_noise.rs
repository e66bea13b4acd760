//! Regime-modulated compound Poisson noise: event counts against the
//! compensator, and zero-mean compensated sums.

use regime_fbsde::chain::RateMatrix;
use regime_fbsde::drivers::{compensated_jump_increment, compensator_integral, JumpSizeDist, RegimeLevyMeasure, SizeFn};
use regime_fbsde::grid::TimeGrid;
use regime_fbsde::sde::RegimeModel;
use regime_fbsde::stats::Estimate;

fn main() -> regime_fbsde::Result<()> {
    let levy = RegimeLevyMeasure::new(
        vec![1.0, 4.0],
        vec![JumpSizeDist::Exponential { rate: 3.0 }, JumpSizeDist::Gamma { shape: 2.0, rate: 5.0 }],
    )?;
    let model = RegimeModel::new(RateMatrix::two_state(0.5, 1.0)?, levy.clone(), TimeGrid::uniform(2.0, 40)?, 0)?;
    let phi = SizeFn::linear(1.0);
    let nu_phi = levy.nu_integrals(&phi)?;
    let (mut excess, mut comp_sum) = (Vec::new(), Vec::new());
    for i in 0..20_000 {
        let p = model.sample_path(5, i)?;
        let t = model.grid.horizon();
        let count = p.noise.events.len() as f64;
        excess.push(count - compensator_integral(&levy, &p.chain, &SizeFn::constant(1.0), t)?);
        comp_sum.push((0..model.grid.steps()).map(|k| compensated_jump_increment(&p.chain, &p.noise, &phi, &nu_phi, k)).sum());
    }
    let a = Estimate::from_samples(&excess);
    let b = Estimate::from_samples(&comp_sum);
    println!("E[N(T) - compensator]   {:+.4} ± {:.4}", a.mean, a.stderr);
    println!("E[sum of zeta - comp.]  {:+.4} ± {:.4}", b.mean, b.stderr);
    println!("mean jump size by regime: {:.4}, {:.4}", nu_phi[0] / levy.intensity(0), nu_phi[1] / levy.intensity(1));
    Ok(())
}
