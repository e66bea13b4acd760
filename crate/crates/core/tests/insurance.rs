use proptest::prelude::*;

use regime_fbsde::drivers::JumpSizeDist;
use regime_fbsde::grid::TimeGrid;
use regime_fbsde::insurance::{
    exponential_claims_pi, reduced_hamiltonian, reference_market, simulate_surplus, solve_equilibrium, InsuranceGame,
    InsuranceHamiltonian, MarketStrategy, OdeOptions,
};
use regime_fbsde::maxprinciple::{Game, Hamiltonian, HamiltonianPoint, Player};
use regime_fbsde::parallel::map_paths;
use regime_fbsde::sde::Control;
use regime_fbsde::drivers::SizeFn;
use regime_fbsde::stats::Estimate;

#[test]
fn surplus_mean_follows_regime_occupation() {
    let (market, _) = reference_market().unwrap();
    let horizon = 2.0;
    let model = market.model(TimeGrid::uniform(horizon, 40).unwrap(), 0).unwrap();
    let pi = [0.7, 1.3];
    let xt = map_paths(40_000, 2, |i| {
        let p = model.sample_path(3, i as u64)?;
        Ok(*simulate_surplus(&market, &Control::PerRegime(pi.to_vec()), &model, &p, 1.0)?.x.last().unwrap())
    })
    .unwrap();
    let e = Estimate::from_samples(&xt);

    // P(α_t = 1) = b/(a+b) + a/(a+b)·e^{−(a+b)t} for rates a = 0.5 (1→2), b = 1 (2→1).
    // The Euler step freezes the regime at the left end, so integrate by the left Riemann sum.
    let (a, b) = (0.5, 1.0);
    let s = a + b;
    let dt = horizon / 40.0;
    let time_in_1: f64 = (0..40).map(|k| (b / s + a / s * (-s * k as f64 * dt).exp()) * dt).sum();
    let rate = |n: usize| market.premium[n] + pi[n] * market.mu[n] - market.claim_drain(n).unwrap();
    let exact = 1.0 + rate(0) * time_in_1 + rate(1) * (horizon - time_in_1);
    assert!((e.mean - exact).abs() <= 3.0 * e.stderr, "{} ± {} vs {exact}", e.mean, e.stderr);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn quadrature_investment_matches_exponential_formula(
        beta in 0.2f64..2.0,
        ratio in 1.2f64..6.0,
        l0 in 0.1f64..4.0,
        sigma in 0.1f64..1.0,
    ) {
        let (mut market, _) = reference_market().unwrap();
        let rate = beta * ratio;
        market.beta = beta;
        market.claims = vec![JumpSizeDist::Exponential { rate }; 2];
        market.claim_intensity = vec![l0; 2];
        market.sigma = vec![sigma; 2];
        let quad = market.levy().unwrap().nu_integral_map(0, |z| (beta * z).exp_m1()).unwrap() / (beta * sigma);
        let exact = exponential_claims_pi(l0, rate, beta, sigma).unwrap();
        prop_assert!((quad - exact).abs() <= 1e-10 * exact.max(1.0), "{quad} vs {exact}");
    }
}

#[test]
fn hamiltonian_is_concave_in_state_and_investment() {
    let (market, bounds) = reference_market().unwrap();
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let eq = solve_equilibrium(&market, &bounds, &grid, &OdeOptions::default()).unwrap();
    let ham = InsuranceHamiltonian { market: &market, c: eq.c_matrix(0) };
    let point = |x: f64, pi: f64, n: usize| HamiltonianPoint {
        t: 0.0,
        x,
        regime: n,
        y: -1.0,
        z: 0.3,
        k: vec![0.1],
        v: vec![0.0, 0.2],
        u: [pi, eq.theta[n]],
        a: 1.0,
        p: -0.8,
        q: 0.4,
        r: SizeFn::linear(-0.5),
        w: vec![0.0, 0.1],
    };
    let h = 1e-3;
    for n in 0..2 {
        for &(x, pi) in &[(0.0, 0.5), (1.0, 1.0), (-1.0, 2.0), (2.0, -0.5)] {
            let f = |dx: f64, dp: f64| ham.value(Player::One, &point(x + dx, pi + dp, n)).unwrap();
            let hxx = (f(h, 0.0) - 2.0 * f(0.0, 0.0) + f(-h, 0.0)) / (h * h);
            let hpp = (f(0.0, h) - 2.0 * f(0.0, 0.0) + f(0.0, -h)) / (h * h);
            let hxp = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
            assert!(hxx <= 1e-6 && hpp <= 1e-6, "diagonal ({hxx}, {hpp}) at x = {x}, pi = {pi}");
            assert!(hxx * hpp - hxp * hxp >= -1e-6, "determinant at x = {x}, pi = {pi}");
        }
        // The reduced problem is strictly concave in π.
        let g = |pi: f64| reduced_hamiltonian(&market, n, pi, eq.theta[n]).unwrap();
        for pi in [-1.0, 0.0, eq.pi[n], 3.0] {
            assert!(g(pi + 0.1) - 2.0 * g(pi) + g(pi - 0.1) < 0.0);
        }
    }
}

fn paired(game: &InsuranceGame, a: (&Control, &MarketStrategy), b: (&Control, &MarketStrategy)) -> Estimate {
    let ja = game.payoff_samples(a.0, a.1, 20_000, 17).unwrap().j1;
    let jb = game.payoff_samples(b.0, b.1, 20_000, 17).unwrap().j1;
    let d: Vec<f64> = ja.iter().zip(&jb).map(|(x, y)| x - y).collect();
    Estimate::from_samples(&d)
}

#[test]
fn scaling_investment_up_by_half_lowers_the_insurer_payoff() {
    let (market, bounds) = reference_market().unwrap();
    let model = market.model(TimeGrid::uniform(1.0, 20).unwrap(), 0).unwrap();
    let eq = solve_equilibrium(&market, &bounds, &model.grid, &OdeOptions::default()).unwrap();
    let game = InsuranceGame::new(market, bounds, model, 1.0, 2).unwrap();
    let pi = Control::PerRegime(eq.pi.clone());
    let bumped = Control::PerRegime(eq.pi.iter().map(|p| 1.5 * p).collect());
    let ms = MarketStrategy { theta: Control::PerRegime(eq.theta.clone()), c: eq.c.clone() };
    let d = paired(&game, (&bumped, &ms), (&pi, &ms));
    assert!(d.mean < -3.0 * d.stderr, "{} ± {}", d.mean, d.stderr);
}

#[test]
fn scenario_deviations_do_not_help_the_market() {
    let (market, bounds) = reference_market().unwrap();
    let model = market.model(TimeGrid::uniform(1.0, 20).unwrap(), 0).unwrap();
    let eq = solve_equilibrium(&market, &bounds, &model.grid, &OdeOptions::default()).unwrap();
    let game = InsuranceGame::new(market, bounds, model, 1.0, 2).unwrap();
    let pi = Control::PerRegime(eq.pi.clone());
    let ms = MarketStrategy { theta: Control::PerRegime(eq.theta.clone()), c: eq.c.clone() };
    for shift in [-0.3, -0.1, 0.1, 0.3] {
        let dev = MarketStrategy { theta: Control::PerRegime(eq.theta.iter().map(|t| t + shift).collect()), c: eq.c.clone() };
        // The market minimizes the insurer's payoff: a deviation helps only if it lowers it.
        let d = paired(&game, (&pi, &dev), (&pi, &ms));
        assert!(d.mean >= -3.0 * d.stderr - 1e-12, "shift {shift}: {} ± {}", d.mean, d.stderr);
    }
}
