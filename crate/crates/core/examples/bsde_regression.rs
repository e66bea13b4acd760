//! Least-squares Monte Carlo for a linear BSDE with a closed form:
//! dX = 0.3 dB, Y(T) = X(T)², driver −κY, so Y(t) = e^{−κ(T−t)}(X(t)² + 0.09(T−t)).

use regime_fbsde::bsde::{solve_bsde_regression, BsdeSpec, DriverInput, PathBatch, PolynomialBasis, RegressionOptions, Terminal};
use regime_fbsde::chain::RateMatrix;
use regime_fbsde::drivers::RegimeLevyMeasure;
use regime_fbsde::grid::TimeGrid;
use regime_fbsde::sde::{AffineCoefficients, ControlPair, RegimeModel};

fn main() -> regime_fbsde::Result<()> {
    let kappa = 0.4;
    let x0 = 0.5;
    let mut coeffs = AffineCoefficients::zero(1);
    coeffs.vol = vec![0.3];
    for steps in [10, 20, 40, 80] {
        let model = RegimeModel::new(RateMatrix::single(), RegimeLevyMeasure::none(1), TimeGrid::uniform(1.0, steps)?, 0)?;
        let batch = PathBatch::simulate(&model, &coeffs, &ControlPair::zero(), x0, 20_000, 3, vec![], 1)?;
        let spec = BsdeSpec::with_driver(move |a: &DriverInput| -kappa * a.y, Terminal::map(|x, _| x * x), vec![]);
        let sol = solve_bsde_regression(&spec, &batch, &PolynomialBasis { degree: 2 }, &RegressionOptions::default())?;
        let exact = (-kappa).exp() * (x0 * x0 + 0.09);
        let y0 = sol.y0_estimate();
        println!("M = {steps:3}: Y(0) = {:.5} ± {:.5}, exact {exact:.5}", y0.mean, y0.stderr);
    }
    Ok(())
}
