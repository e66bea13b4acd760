//! Robust evaluation with an entropy penalty: the penalty `h₁`, the
//! scenario minimand `g`, its closed-form minimizer, the reduced quadratic
//! BSDE and the density of the optimal scenario.

use std::cell::Cell;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{solve_bsde_regression, Basis, BsdeSolution, BsdeSpec, DriverInput, PathBatch, RegressionOptions, Target, Terminal};
use crate::chain::RateMatrix;
use crate::drivers::{JumpSizeDist, RegimeLevyMeasure, SizeFn};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::parallel::map_paths;
use crate::sde::{
    check_scenario_point, simulate_density_theta, simulate_state, AffineCoefficients, ControlPair, PathNoise, RegimeModel,
    ScenarioPoint, ScenarioProcess,
};
use crate::stats::Estimate;

/// Default lower margin in `θ₂ ≥ −1 + ε`.
pub const THETA2_EPS: f64 = 1e-6;

fn entropy_term(v: f64) -> f64 {
    (1.0 + v) * v.ln_1p() - v
}

fn theta2_penalty(theta2: &SizeFn, regime: usize, levy: &RegimeLevyMeasure) -> Result<f64> {
    if levy.intensity(regime) == 0.0 {
        return Ok(0.0);
    }
    if let Some(c) = theta2.as_constant() {
        if c <= -1.0 {
            return Err(Error::Domain(format!("theta2 = {c} must exceed -1")));
        }
        return Ok(levy.intensity(regime) * entropy_term(c));
    }
    let bad = Cell::new(None);
    let v = levy.nu_integral_map(regime, |z| {
        let t = theta2.eval(z);
        if t <= -1.0 {
            bad.set(Some((z, t)));
            0.0
        } else {
            entropy_term(t)
        }
    })?;
    match bad.get() {
        Some((z, t)) => Err(Error::Domain(format!("theta2({z}) = {t} must exceed -1"))),
        None => Ok(v),
    }
}

/// `h₁(θ) = ½θ₀² + Σ_j [(1+θ₁ⱼ)ln(1+θ₁ⱼ) − θ₁ⱼ]λ_nj + ∫[(1+θ₂)ln(1+θ₂) − θ₂]ν_n`.
pub fn penalty_h1(pt: &ScenarioPoint, regime: usize, rates: &RateMatrix, levy: &RegimeLevyMeasure) -> Result<f64> {
    let mut h = 0.5 * pt.theta0 * pt.theta0;
    for j in 0..rates.dim() {
        if j == regime {
            continue;
        }
        let v = pt.theta1.get(j).copied().unwrap_or(0.0);
        if v <= -1.0 {
            return Err(Error::Domain(format!("theta1 into regime {} is {v}, must exceed -1", j + 1)));
        }
        h += entropy_term(v) * rates.rate(regime, j);
    }
    Ok(h + theta2_penalty(&pt.theta2, regime, levy)?)
}

/// `g(θ) = h₁(θ) + θ₀Z + Σ_j θ₁ⱼλ_njW_j + ∫θ₂Kν_n`.
pub fn g_functional(
    pt: &ScenarioPoint,
    z: f64,
    w: &[f64],
    k: &SizeFn,
    regime: usize,
    rates: &RateMatrix,
    levy: &RegimeLevyMeasure,
) -> Result<f64> {
    let mut g = penalty_h1(pt, regime, rates, levy)? + pt.theta0 * z;
    for j in 0..rates.dim() {
        if j != regime {
            g += pt.theta1.get(j).copied().unwrap_or(0.0) * rates.rate(regime, j) * w[j];
        }
    }
    Ok(g + levy.nu_integral(regime, &pt.theta2.mul(k))?)
}

/// Minimizer of `g`: `θ₀ = −Z`, `θ₁ⱼ = e^{−Wⱼ} − 1`, `θ₂ = e^{−K} − 1`.
pub fn optimal_theta(z: f64, w: &[f64], k: &SizeFn) -> ScenarioPoint {
    let theta2 = match k.as_constant() {
        Some(c) => SizeFn::constant((-c).exp_m1()),
        None => {
            let k = k.clone();
            SizeFn::custom(move |zeta| (-k.eval(zeta)).exp_m1())
        }
    };
    ScenarioPoint { theta0: -z, theta1: w.iter().map(|v| (-v).exp_m1()).collect(), theta2 }
}

/// `min_θ g(θ) = −½Z² + Σ_j λ_nj(1 − e^{−Wⱼ} − Wⱼ) + ∫(1 − e^{−K} − K)ν_n`.
pub fn min_g(z: f64, w: &[f64], k: &SizeFn, regime: usize, rates: &RateMatrix, levy: &RegimeLevyMeasure) -> Result<f64> {
    let mut g = -0.5 * z * z;
    for j in 0..rates.dim() {
        if j != regime {
            g += rates.rate(regime, j) * (1.0 - (-w[j]).exp() - w[j]);
        }
    }
    let jump = match k.as_constant() {
        Some(c) => levy.intensity(regime) * (1.0 - (-c).exp() - c),
        None => levy.nu_integral_map(regime, |zeta| {
            let v = k.eval(zeta);
            1.0 - (-v).exp() - v
        })?,
    };
    Ok(g + jump)
}

/// `−κY + a₀U₁ + min_θ g(θ)`.
#[allow(clippy::too_many_arguments)]
pub fn reduced_driver(
    y: f64,
    z: f64,
    w: &[f64],
    k: &SizeFn,
    kappa: f64,
    a0: f64,
    u1: f64,
    regime: usize,
    rates: &RateMatrix,
    levy: &RegimeLevyMeasure,
) -> Result<f64> {
    Ok(-kappa * y + a0 * u1 + min_g(z, w, k, regime, rates, levy)?)
}

/// `U(x, n) = intercept[n] + slope[n]·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPayoff {
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
}

impl LinearPayoff {
    pub fn constant(dim: usize, c: f64) -> Self {
        Self { intercept: vec![c; dim], slope: vec![0.0; dim] }
    }

    pub fn eval(&self, x: f64, n: usize) -> f64 {
        self.intercept[n] + self.slope[n] * x
    }
}

/// Robust evaluation problem: payoffs driven by an affine factor `X`, discount
/// rate `κ` per regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyModelConfig {
    pub kappa: Vec<f64>,
    pub a0: f64,
    pub a0_bar: f64,
    pub running: LinearPayoff,
    pub terminal: LinearPayoff,
    pub factor: AffineCoefficients,
    pub x0: f64,
}

impl EntropyModelConfig {
    pub fn dim(&self) -> usize {
        self.kappa.len()
    }

    /// All violations, not only the first.
    pub fn violations(&self, model: &RegimeModel) -> Vec<String> {
        let d = model.dim();
        let mut v = Vec::new();
        if self.kappa.len() != d {
            v.push(format!("kappa has {} entries for {d} regimes", self.kappa.len()));
        }
        if self.kappa.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            v.push("kappa must be finite and nonnegative".into());
        }
        if !(self.a0 >= 0.0 && self.a0.is_finite()) || !(self.a0_bar >= 0.0 && self.a0_bar.is_finite()) {
            v.push("payoff weights a0, a0_bar must be finite and nonnegative".into());
        }
        for (name, p) in [("running", &self.running), ("terminal", &self.terminal)] {
            if p.intercept.len() != d || p.slope.len() != d {
                v.push(format!("{name} payoff needs {d} intercepts and slopes"));
            }
        }
        if self.factor.dim() != d {
            v.push(format!("factor coefficients have {} regimes, chain has {d}", self.factor.dim()));
        } else if let Err(e) = self.factor.validate() {
            v.push(e.to_string());
        }
        if !self.x0.is_finite() {
            v.push("x0 must be finite".into());
        }
        for n in 0..d.min(model.levy.dim()) {
            if model.levy.intensity(n) > 0.0 {
                match model.levy.dist(n) {
                    JumpSizeDist::Discrete { atoms, .. } if atoms.len() == 1 => {}
                    _ => v.push(format!("regime {}: jump law must be a single atom for the regression solver", n + 1)),
                }
            }
        }
        v
    }

    pub fn validate(&self, model: &RegimeModel) -> Result<()> {
        let v = self.violations(model);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Two-regime reference problem used by the examples and the CLI defaults.
pub fn reference_problem(steps: usize) -> Result<(RegimeModel, EntropyModelConfig)> {
    let levy = RegimeLevyMeasure::new(vec![1.0, 2.0], vec![JumpSizeDist::point(0.5), JumpSizeDist::point(0.3)])?;
    let model = RegimeModel::new(RateMatrix::two_state(1.0, 2.0)?, levy, TimeGrid::uniform(1.0, steps)?, 0)?;
    let factor = AffineCoefficients {
        drift: vec![0.1, -0.05],
        mean_reversion: vec![-0.5, -0.5],
        vol: vec![0.3, 0.5],
        jump_scale: vec![1.0, -1.0],
        ..AffineCoefficients::zero(2)
    };
    let cfg = EntropyModelConfig {
        kappa: vec![0.05, 0.1],
        a0: 1.0,
        a0_bar: 1.0,
        running: LinearPayoff { intercept: vec![0.2, -0.1], slope: vec![0.5, 1.0] },
        terminal: LinearPayoff { intercept: vec![0.0, 0.3], slope: vec![1.0, 0.5] },
        factor,
        x0: 0.0,
    };
    Ok((model, cfg))
}

/// Optimal scenario read off the regression fits: `θ* = (−Z, e^{−W}−1, e^{−K}−1)`.
pub struct OptimalScenario {
    pub solution: Arc<BsdeSolution>,
    pub basis: Arc<dyn Basis>,
    /// `λ⁰_n` per regime (`K = ∫Kν / λ⁰_n` for single-atom laws).
    pub intensity: Vec<f64>,
}

impl OptimalScenario {
    fn predict(&self, k: usize, target: Target, x: f64, n: usize) -> f64 {
        // Regimes first reached inside a step have no fit there; use the next fitted step.
        let m = self.solution.fits.len();
        (k..m)
            .find_map(|kk| self.solution.predict(self.basis.as_ref(), kk, target, x, n, 1.0))
            .unwrap_or(0.0)
    }

    /// `(Z, W, K)` at step `k`.
    pub fn exposures(&self, k: usize, x: f64, n: usize) -> (f64, Vec<f64>, f64) {
        let d = self.solution.dim;
        let z = self.predict(k, Target::Z, x, n);
        let w: Vec<f64> = (0..d).map(|j| if j == n { 0.0 } else { self.predict(k, Target::V(j), x, n) }).collect();
        let lam = self.intensity[n];
        let kk = if lam > 0.0 { self.predict(k, Target::K(0), x, n) / lam } else { 0.0 };
        (z, w, kk)
    }
}

impl ScenarioProcess for OptimalScenario {
    fn point(&self, k: usize, _t: f64, x: f64, regime: usize) -> ScenarioPoint {
        let (z, w, kk) = self.exposures(k, x, regime);
        optimal_theta(z, &w, &SizeFn::constant(kk))
    }
}

/// Output of [`solve_robust_value`].
pub struct RobustSolution {
    /// `Y(0)` with the standard error of the pathwise estimator.
    pub y0: Estimate,
    pub solution: Arc<BsdeSolution>,
    pub scenario: OptimalScenario,
    /// `E[G^{θ*}(T)]` over the same paths.
    pub density_mean: Estimate,
    /// `θ*` at `t = 0`, `x = x₀` per regime (θ₀, θ₁ⱼ…, θ₂).
    pub theta_at_start: Vec<ScenarioPoint>,
}

/// Driver of the reduced BSDE with `K` passed through `∫Kν` (single atoms).
pub fn robust_driver(cfg: &EntropyModelConfig, model: &RegimeModel) -> impl Fn(&DriverInput) -> f64 + Send + Sync + 'static {
    let cfg = cfg.clone();
    let rates = model.rates.clone();
    let lam: Vec<f64> = (0..model.dim()).map(|n| model.levy.intensity(n)).collect();
    move |a: &DriverInput| {
        let n = a.regime;
        let mut g = -cfg.kappa[n] * a.y + cfg.a0 * cfg.running.eval(a.x, n) - 0.5 * a.z * a.z;
        for (j, w) in a.v.iter().enumerate() {
            if j != n {
                g += rates.rate(n, j) * (1.0 - (-w).exp() - w);
            }
        }
        if lam[n] > 0.0 {
            let k = a.k[0] / lam[n];
            g += lam[n] * (1.0 - (-k).exp() - k);
        }
        g
    }
}

/// Solve the reduced quadratic BSDE by regression and build the optimal scenario
/// and its density on the same paths.
pub fn solve_robust_value(
    cfg: &EntropyModelConfig,
    model: &RegimeModel,
    paths: usize,
    seed: u64,
    basis: Arc<dyn Basis>,
    workers: usize,
) -> Result<RobustSolution> {
    cfg.validate(model)?;
    let batch = PathBatch::simulate(
        model,
        &cfg.factor,
        &ControlPair::zero(),
        cfg.x0,
        paths,
        seed,
        vec![SizeFn::constant(1.0)],
        workers,
    )?;
    let terminal = {
        let (u2, a) = (cfg.terminal.clone(), cfg.a0_bar);
        Terminal::map(move |x, n| a * u2.eval(x, n))
    };
    let spec = BsdeSpec::with_driver(robust_driver(cfg, model), terminal, vec![SizeFn::constant(1.0)]);
    let sol = Arc::new(solve_bsde_regression(&spec, &batch, basis.as_ref(), &RegressionOptions::default())?);
    let scenario = OptimalScenario {
        solution: sol.clone(),
        basis: basis.clone(),
        intensity: (0..model.dim()).map(|n| model.levy.intensity(n)).collect(),
    };
    let gt = map_paths(paths, workers, |i| {
        let p = model.sample_path(seed, i as u64)?;
        let x: Vec<f64> = (0..=model.grid.steps()).map(|k| batch.x_at(k, i)).collect();
        let (g, _) = simulate_density_theta(&scenario, model, &p, &x, THETA2_EPS, false)?;
        Ok(g.terminal())
    })?;
    let theta_at_start = (0..model.dim()).map(|n| scenario.point(0, 0.0, cfg.x0, n)).collect();
    Ok(RobustSolution {
        y0: sol.y0_estimate(),
        density_mean: Estimate::from_samples(&gt),
        solution: sol,
        scenario,
        theta_at_start,
    })
}

fn exp_moments(beta: f64, len: f64) -> (f64, f64) {
    // ∫₀ᴸ e^{−βu} du and ∫₀ᴸ u e^{−βu} du.
    let bl = beta * len;
    if bl.abs() < 1e-4 {
        let i0 = len * (1.0 - bl / 2.0 + bl * bl / 6.0 - bl * bl * bl / 24.0);
        let i1 = len * len * (0.5 - bl / 3.0 + bl * bl / 8.0 - bl * bl * bl / 30.0);
        (i0, i1)
    } else {
        let e = (-bl).exp();
        let i0 = -(-bl).exp_m1() / beta;
        let i1 = (i0 - len * e) / beta;
        (i0, i1)
    }
}

/// Per-path integrals of the entropy identity and the representation formula,
/// with the Brownian factor of the current step integrated out.
#[derive(Debug, Clone, Copy, Default)]
pub struct PathIntegrals {
    /// `∫ κ S G ln G ds`.
    pub entropy_rate: f64,
    /// `S(T) G(T) ln G(T)` (conditional on the last step's start).
    pub terminal_entropy: f64,
    /// `∫ S G h₁(θ) ds`.
    pub penalty: f64,
    /// `∫ S G a₀U₁ ds` with `U₁` frozen at the left grid point.
    pub running: f64,
    /// `ā₀ S(T) G(T) U₂(X(T))`.
    pub terminal_payoff: f64,
    pub log_g_terminal: f64,
}

impl PathIntegrals {
    pub fn identity_lhs(&self) -> f64 {
        self.entropy_rate + self.terminal_entropy
    }

    pub fn representation(&self) -> f64 {
        self.running + self.penalty + self.terminal_payoff
    }
}

/// Integrals along one path for the scenario `θ` (with `θ₀` frozen at the
/// regime of each step's left end, `θ₁, θ₂` at the pre-jump regime).
pub fn path_integrals(
    cfg: &EntropyModelConfig,
    theta: &dyn ScenarioProcess,
    model: &RegimeModel,
    path: &PathNoise,
    x: &[f64],
) -> Result<PathIntegrals> {
    let grid = &model.grid;
    let m = grid.steps();
    let d = model.dim();
    let mut out = PathIntegrals::default();
    let mut lg = 0.0;
    let mut disc = 1.0;
    for k in 0..m {
        let t0 = grid.t(k);
        let t1 = grid.t(k + 1);
        let xk = x[k];
        let n0 = path.chain.regime(k);
        // (θ, compensator rate, penalty without the Brownian part) per regime.
        let mut pts: Vec<(ScenarioPoint, f64, f64)> = Vec::with_capacity(d);
        for r in 0..d {
            let pt = theta.point(k, t0, xk, r);
            check_scenario_point(&pt, r, model, THETA2_EPS)?;
            let mut comp = model.levy.nu_integral(r, &pt.theta2)?;
            for j in 0..d {
                if j != r {
                    comp += pt.theta1[j] * model.rates.rate(r, j);
                }
            }
            let pen = penalty_h1(&pt, r, &model.rates, &model.levy)? - 0.5 * pt.theta0 * pt.theta0;
            pts.push((pt, comp, pen));
        }
        let th0 = pts[n0].0.theta0;
        let half = 0.5 * th0 * th0;
        // Events inside the step, in time order.
        let mut events: Vec<(f64, Event)> = Vec::new();
        for e in path.noise.step_events(k) {
            events.push((e.time, Event::Claim(e.size, e.regime)));
        }
        for j in path.chain.jumps_in(t0, t1) {
            events.push((j.time, Event::Switch(j.from, j.to)));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut s = t0;
        let mut lj = 0.0;
        let mut r = n0;
        let piece = |s: f64, e: f64, r: usize, lj: f64, disc: &mut f64, out: &mut PathIntegrals| -> f64 {
            let (_, c, pen) = &pts[r];
            let kap = cfg.kappa[r];
            let len = e - s;
            let (i0, i1) = exp_moments(c + kap, len);
            let base = (lg + lj).exp() * *disc;
            out.penalty += base * (pen + half) * i0;
            out.running += base * cfg.a0 * cfg.running.eval(xk, r) * i0;
            out.entropy_rate += kap * base * ((lg + lj + half * (s - t0)) * i0 + (half - c) * i1);
            *disc *= (-kap * len).exp();
            lj - c * len
        };
        for (te, ev) in events {
            lj = piece(s, te, r, lj, &mut disc, &mut out);
            s = te;
            match ev {
                Event::Claim(size, reg) => {
                    let v = pts[reg].0.theta2.eval(size);
                    if !(v >= -1.0 + THETA2_EPS) {
                        return Err(Error::Admissibility(format!("theta2({size}) = {v}")));
                    }
                    lj += v.ln_1p();
                }
                Event::Switch(from, to) => {
                    lj += pts[from].0.theta1[to].ln_1p();
                    r = to;
                }
            }
        }
        lj = piece(s, t1, r, lj, &mut disc, &mut out);
        if k + 1 == m {
            let dt = t1 - t0;
            out.terminal_entropy = disc * (lg + lj).exp() * (lg + lj + half * dt);
        }
        lg += th0 * path.noise.brownian[k] - half * (t1 - t0) + lj;
        if !lg.is_finite() {
            return Err(Error::NonFinite(format!("log density at step {}", k + 1)));
        }
    }
    out.log_g_terminal = lg;
    out.terminal_payoff = cfg.a0_bar * disc * lg.exp() * cfg.terminal.eval(x[m], path.chain.regime(m));
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Claim(f64, usize),
    Switch(usize, usize),
}

/// Sides of the entropy identity
/// `E[∫κSG lnG ds + S(T)G(T)lnG(T)] = E[∫SG h₁(θ) ds]` at `t = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct EntropyIdentity {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Paired `lhs − rhs`.
    pub difference: Estimate,
}

pub fn entropy_identity(
    cfg: &EntropyModelConfig,
    theta: &dyn ScenarioProcess,
    model: &RegimeModel,
    paths: usize,
    seed: u64,
    workers: usize,
) -> Result<EntropyIdentity> {
    let ints = integrals_over_paths(cfg, theta, model, paths, seed, workers)?;
    let lhs: Vec<f64> = ints.iter().map(|p| p.identity_lhs()).collect();
    let rhs: Vec<f64> = ints.iter().map(|p| p.penalty).collect();
    Ok(EntropyIdentity {
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        difference: Estimate::paired_difference(&lhs, &rhs),
    })
}

/// `Y^θ(0) = E[∫ S G (a₀U₁ + h₁(θ)) ds + ā₀ S(T) G(T) U₂]`.
pub fn representation_value(
    cfg: &EntropyModelConfig,
    theta: &dyn ScenarioProcess,
    model: &RegimeModel,
    paths: usize,
    seed: u64,
    workers: usize,
) -> Result<Estimate> {
    let ints = integrals_over_paths(cfg, theta, model, paths, seed, workers)?;
    let v: Vec<f64> = ints.iter().map(|p| p.representation()).collect();
    Ok(Estimate::from_samples(&v))
}

fn integrals_over_paths(
    cfg: &EntropyModelConfig,
    theta: &dyn ScenarioProcess,
    model: &RegimeModel,
    paths: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<PathIntegrals>> {
    map_paths(paths, workers, |i| {
        let p = model.sample_path(seed, i as u64)?;
        let s = simulate_state(&cfg.factor, &ControlPair::zero(), model, &p, cfg.x0)?;
        path_integrals(cfg, theta, model, &p, &s.x)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::RegimeScenario;

    fn atom_levy(lam: f64, atom: f64, d: usize) -> RegimeLevyMeasure {
        RegimeLevyMeasure::homogeneous(d, lam, JumpSizeDist::point(atom)).unwrap()
    }

    #[test]
    fn h1_values() {
        let rates = RateMatrix::two_state(1.0, 2.0).unwrap();
        let levy = atom_levy(1.0, 0.5, 2);
        let z = ScenarioPoint::zero(2);
        assert_eq!(penalty_h1(&z, 0, &rates, &levy).unwrap(), 0.0);
        let p = ScenarioPoint::constant(2.0, vec![0.0, 0.0], 0.0);
        assert!((penalty_h1(&p, 0, &rates, &levy).unwrap() - 2.0).abs() < 1e-15);
        let q = ScenarioPoint::constant(0.0, vec![0.0, 0.0], (-1.0f64).exp() - 1.0);
        let expect = 1.0 - 2.0 * (-1.0f64).exp();
        assert!((penalty_h1(&q, 0, &rates, &levy).unwrap() - expect).abs() < 1e-12);
        let bad = ScenarioPoint::constant(0.0, vec![0.0, -1.0], 0.0);
        assert!(penalty_h1(&bad, 0, &rates, &levy).is_err());
    }

    #[test]
    fn optimal_theta_examples() {
        let t = optimal_theta(1.0, &[0.0, 0.0], &SizeFn::zero());
        assert_eq!(t.theta0, -1.0);
        let t = optimal_theta(0.0, &[0.0, 2f64.ln()], &SizeFn::zero());
        assert!((t.theta1[1] + 0.5).abs() < 1e-15);
        let t = optimal_theta(0.0, &[0.0, 0.0], &SizeFn::zero());
        assert_eq!(t.theta0, 0.0);
        assert_eq!(t.theta2.eval(1.0), 0.0);
    }

    #[test]
    fn reduced_driver_examples() {
        let rates = RateMatrix::two_state(1.0, 2.0).unwrap();
        let levy = atom_levy(1.0, 0.5, 2);
        let r = reduced_driver(0.0, 0.0, &[0.0, 0.0], &SizeFn::zero(), 0.0, 1.0, 0.0, 0, &rates, &levy).unwrap();
        assert_eq!(r, 0.0);
        let r = reduced_driver(0.0, 1.0, &[0.0, 0.0], &SizeFn::zero(), 0.0, 1.0, 0.0, 0, &rates, &levy).unwrap();
        assert!((r + 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_moments_match_series_branch() {
        for &(b, l) in &[(1e-6, 0.3), (0.7, 0.01), (2.0, 1.0), (-0.3, 0.5)] {
            let (i0, i1) = exp_moments(b, l);
            let n = 20000;
            let h = l / n as f64;
            let (mut q0, mut q1) = (0.0, 0.0);
            for i in 0..n {
                let u = (i as f64 + 0.5) * h;
                q0 += (-b * u).exp() * h;
                q1 += u * (-b * u).exp() * h;
            }
            assert!((i0 - q0).abs() < 1e-9 * (1.0 + q0.abs()));
            assert!((i1 - q1).abs() < 1e-9 * (1.0 + q1.abs()));
        }
    }

    #[test]
    fn zero_scenario_representation_is_discounted_payoff() {
        let model = RegimeModel::new(
            RateMatrix::two_state(1.0, 2.0).unwrap(),
            atom_levy(1.0, 0.5, 2),
            TimeGrid::uniform(1.0, 10).unwrap(),
            0,
        )
        .unwrap();
        let cfg = EntropyModelConfig {
            kappa: vec![0.0, 0.0],
            a0: 1.0,
            a0_bar: 2.0,
            running: LinearPayoff::constant(2, 0.0),
            terminal: LinearPayoff::constant(2, 1.5),
            factor: AffineCoefficients::zero(2),
            x0: 0.0,
        };
        let th = RegimeScenario(vec![ScenarioPoint::zero(2), ScenarioPoint::zero(2)]);
        let v = representation_value(&cfg, &th, &model, 50, 3, 1).unwrap();
        assert!((v.mean - 3.0).abs() < 1e-12);
        let id = entropy_identity(&cfg, &th, &model, 50, 3, 1).unwrap();
        assert!(id.lhs.mean.abs() < 1e-15 && id.rhs.mean.abs() < 1e-15);
    }
}
