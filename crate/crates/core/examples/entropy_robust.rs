//! Robust value under an entropy penalty: solve the reduced quadratic BSDE,
//! read off the optimal scenario and check it against fixed scenarios.

use std::sync::Arc;
use std::time::Instant;

use regime_fbsde::bsde::PolynomialBasis;
use regime_fbsde::robust_entropy::{entropy_identity, reference_problem, representation_value, solve_robust_value};
use regime_fbsde::sde::{RegimeScenario, ScenarioPoint};

fn main() -> regime_fbsde::Result<()> {
    let (model, cfg) = reference_problem(50)?;
    let paths = 20_000;
    let start = Instant::now();
    let sol = solve_robust_value(&cfg, &model, paths, 7, Arc::new(PolynomialBasis { degree: 3 }), 1)?;
    println!("Y*(0) = {:.5} ± {:.5}   ({:.1?})", sol.y0.mean, sol.y0.stderr, start.elapsed());
    println!("E[G*(T)] = {:.5} ± {:.5}", sol.density_mean.mean, sol.density_mean.stderr);
    for (n, th) in sol.theta_at_start.iter().enumerate() {
        println!(
            "regime {}: theta0 = {:+.4}, theta1 = {:?}, theta2 = {:+.4}",
            n + 1,
            th.theta0,
            th.theta1.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>(),
            th.theta2.eval(0.0)
        );
    }

    let star = representation_value(&cfg, &sol.scenario, &model, paths, 11, 1)?;
    println!("representation at theta*: {:.5} ± {:.5}", star.mean, star.stderr);
    for (t0, t1, t2) in [(0.0, 0.0, 0.0), (0.3, -0.2, 0.5), (-0.5, 0.4, -0.3)] {
        let th = RegimeScenario(vec![
            ScenarioPoint::constant(t0, vec![0.0, t1], t2),
            ScenarioPoint::constant(t0, vec![t1, 0.0], t2),
        ]);
        let v = representation_value(&cfg, &th, &model, paths, 11, 1)?;
        println!("fixed theta ({t0:+.1}, {t1:+.1}, {t2:+.1}): {:.5} ± {:.5}", v.mean, v.stderr);
    }

    let id = entropy_identity(&cfg, &sol.scenario, &model, paths, 13, 1)?;
    println!(
        "entropy identity: lhs {:.5}, rhs {:.5}, difference {:+.2e} ± {:.2e}",
        id.lhs.mean, id.rhs.mean, id.difference.mean, id.difference.stderr
    );
    Ok(())
}
