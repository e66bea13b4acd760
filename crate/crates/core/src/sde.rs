//! Forward simulation: the controlled state, the scenario densities `G^θ` and
//! `G^{θ,C}`, and the adjoint forward process `A`.
//!
//! All Euler steps freeze coefficients at the left grid point. Jump and switch
//! terms are written against the compensated measures, so each step adds the
//! raw events and subtracts the compensator computed from the exact occupation
//! times of the step.

use std::fmt;
use std::sync::Arc;

use smallvec::SmallVec;

use crate::chain::{simulate_chain, ChainPath, RateMatrix};
use crate::drivers::{sample_noise, NoiseBundle, RegimeLevyMeasure, SizeFn};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::path_seed;

/// Control values of the two players at one instant.
pub type Controls = [f64; 2];

/// Coefficients `b, σ, γ(·, ζ), η_j` of the controlled state equation.
pub trait ForwardCoefficients: Send + Sync {
    fn drift(&self, t: f64, x: f64, regime: usize, u: Controls) -> f64;
    fn diffusion(&self, t: f64, x: f64, regime: usize, u: Controls) -> f64;
    /// Jump coefficient as a function of the jump size.
    fn jump(&self, _t: f64, _x: f64, _regime: usize, _u: Controls) -> SizeFn {
        SizeFn::zero()
    }
    /// Coefficient of `dΦ̃_target`.
    fn switch(&self, _t: f64, _x: f64, _regime: usize, _u: Controls, _target: usize) -> f64 {
        0.0
    }
}

/// Chain, jump measure and grid shared by every path of an experiment.
#[derive(Debug, Clone)]
pub struct RegimeModel {
    pub rates: RateMatrix,
    pub levy: RegimeLevyMeasure,
    pub grid: TimeGrid,
    pub initial_regime: usize,
}

/// The random inputs of one path.
#[derive(Debug, Clone)]
pub struct PathNoise {
    pub chain: ChainPath,
    pub noise: NoiseBundle,
}

impl RegimeModel {
    pub fn new(rates: RateMatrix, levy: RegimeLevyMeasure, grid: TimeGrid, initial_regime: usize) -> Result<Self> {
        rates.validate()?;
        if levy.dim() != rates.dim() {
            return Err(Error::Dimension(format!(
                "levy measure has {} regimes, rate matrix {}",
                levy.dim(),
                rates.dim()
            )));
        }
        if initial_regime >= rates.dim() {
            return Err(Error::Domain(format!("initial regime {} outside 1..={}", initial_regime + 1, rates.dim())));
        }
        Ok(Self { rates, levy, grid, initial_regime })
    }

    pub fn dim(&self) -> usize {
        self.rates.dim()
    }

    /// Same model on another grid.
    pub fn with_grid(&self, grid: TimeGrid) -> Self {
        Self { grid, ..self.clone() }
    }

    /// Chain and noise of path `index` in a run seeded with `seed`.
    pub fn sample_path(&self, seed: u64, index: u64) -> Result<PathNoise> {
        let s = path_seed(seed, index);
        let chain = simulate_chain(&self.rates, self.initial_regime, &self.grid, s)?;
        let noise = sample_noise(&self.grid, &chain, &self.levy, s)?;
        Ok(PathNoise { chain, noise })
    }
}

/// Admissible interval for one player's control.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControlBox {
    pub lo: f64,
    pub hi: f64,
}

impl ControlBox {
    pub fn unbounded() -> Self {
        Self { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || lo.is_nan() || hi.is_nan() {
            return Err(Error::Domain(format!("empty control box [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }
}

/// A control process of one player.
#[derive(Clone)]
pub enum Control {
    Constant(f64),
    /// One value per regime.
    PerRegime(Vec<f64>),
    /// Piecewise constant on the grid: value on interval `k`.
    OpenLoop(Vec<f64>),
    /// Markov feedback `u(t, x, regime)`.
    Feedback(Arc<dyn Fn(f64, f64, usize) -> f64 + Send + Sync>),
    /// `base + ell · direction` for combinations without a flat form.
    Shifted { base: Arc<Control>, direction: Arc<Control>, ell: f64 },
    /// Projection of a control on a box.
    Clamped(Arc<Control>, ControlBox),
}

impl fmt::Debug for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Constant(c) => write!(f, "Constant({c})"),
            Control::PerRegime(v) => write!(f, "PerRegime({v:?})"),
            Control::OpenLoop(v) => write!(f, "OpenLoop(len {})", v.len()),
            Control::Feedback(_) => f.write_str("Feedback(..)"),
            Control::Shifted { base, direction, ell } => write!(f, "{base:?} + {ell}*{direction:?}"),
            Control::Clamped(c, b) => write!(f, "clamp({c:?}, [{}, {}])", b.lo, b.hi),
        }
    }
}

impl Control {
    pub fn feedback<F: Fn(f64, f64, usize) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Control::Feedback(Arc::new(f))
    }

    /// Value on interval `k` starting at `t` with state `x` and regime `regime`.
    pub fn value(&self, k: usize, t: f64, x: f64, regime: usize) -> f64 {
        match self {
            Control::Constant(c) => *c,
            Control::PerRegime(v) => v[regime],
            Control::OpenLoop(v) => v[k.min(v.len() - 1)],
            Control::Feedback(f) => f(t, x, regime),
            Control::Shifted { base, direction, ell } => {
                base.value(k, t, x, regime) + ell * direction.value(k, t, x, regime)
            }
            Control::Clamped(c, b) => c.value(k, t, x, regime).clamp(b.lo, b.hi),
        }
    }

    /// Projection on `bx`.
    pub fn clamped(&self, bx: ControlBox) -> Control {
        Control::Clamped(Arc::new(self.clone()), bx)
    }

    /// `self + ell · direction`.
    pub fn perturbed(&self, direction: &Control, ell: f64) -> Control {
        match (self, direction) {
            (Control::Constant(a), Control::Constant(b)) => Control::Constant(a + ell * b),
            (Control::PerRegime(a), Control::Constant(b)) => Control::PerRegime(a.iter().map(|x| x + ell * b).collect()),
            (Control::PerRegime(a), Control::PerRegime(b)) if a.len() == b.len() => {
                Control::PerRegime(a.iter().zip(b).map(|(x, y)| x + ell * y).collect())
            }
            (Control::OpenLoop(a), Control::Constant(b)) => Control::OpenLoop(a.iter().map(|x| x + ell * b).collect()),
            (Control::OpenLoop(a), Control::OpenLoop(b)) if a.len() == b.len() => {
                Control::OpenLoop(a.iter().zip(b).map(|(x, y)| x + ell * y).collect())
            }
            _ => Control::Shifted { base: Arc::new(self.clone()), direction: Arc::new(direction.clone()), ell },
        }
    }

    /// Whether the control takes values in `bx` at the probe points.
    pub fn within(&self, bx: &ControlBox, dim: usize, probe_x: &[f64], grid: &TimeGrid) -> bool {
        match self {
            Control::Constant(c) => bx.contains(*c),
            Control::PerRegime(v) => v.iter().all(|c| bx.contains(*c)),
            Control::OpenLoop(v) => v.iter().all(|c| bx.contains(*c)),
            Control::Clamped(_, b) if b.lo >= bx.lo && b.hi <= bx.hi => true,
            _ => (0..grid.steps()).step_by((grid.steps() / 8).max(1)).all(|k| {
                let t = grid.t(k);
                (0..dim).all(|n| probe_x.iter().all(|&x| bx.contains(self.value(k, t, x, n))))
            }),
        }
    }
}

/// Controls of both players.
#[derive(Debug, Clone)]
pub struct ControlPair {
    pub u1: Control,
    pub u2: Control,
}

impl ControlPair {
    pub fn new(u1: Control, u2: Control) -> Self {
        Self { u1, u2 }
    }

    pub fn zero() -> Self {
        Self { u1: Control::Constant(0.0), u2: Control::Constant(0.0) }
    }

    pub fn at(&self, k: usize, t: f64, x: f64, regime: usize) -> Controls {
        [self.u1.value(k, t, x, regime), self.u2.value(k, t, x, regime)]
    }
}

/// State values on the grid and the controls used on each interval.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub x: Vec<f64>,
    pub u: Vec<Controls>,
}

/// Euler scheme for the controlled state equation on one path.
pub fn simulate_state(
    coeffs: &dyn ForwardCoefficients,
    controls: &ControlPair,
    model: &RegimeModel,
    path: &PathNoise,
    x0: f64,
) -> Result<StatePath> {
    let grid = &model.grid;
    let m = grid.steps();
    let d = model.dim();
    if path.chain.dim() != d {
        return Err(Error::Dimension("path and model disagree on the number of regimes".into()));
    }
    let mut x = Vec::with_capacity(m + 1);
    let mut us = Vec::with_capacity(m);
    x.push(x0);
    let mut xk = x0;
    for k in 0..m {
        let t = grid.t(k);
        let dt = grid.dt(k);
        let n = path.chain.regime(k);
        let u = controls.at(k, t, xk, n);
        let b = coeffs.drift(t, xk, n, u);
        let s = coeffs.diffusion(t, xk, n, u);
        let mut next = xk + b * dt + s * path.noise.brownian[k];
        let gamma = coeffs.jump(t, xk, n, u);
        if !gamma.is_zero() {
            for e in path.noise.step_events(k) {
                next += gamma.eval(e.size);
            }
            for (a, bnd, r) in path.chain.segments(k) {
                if model.levy.intensity(r) > 0.0 {
                    next -= model.levy.nu_integral(r, &gamma)? * (bnd - a);
                }
            }
        }
        if d > 1 {
            let eta: SmallVec<[f64; 4]> = (0..d).map(|j| coeffs.switch(t, xk, n, u, j)).collect();
            if eta.iter().any(|v| *v != 0.0) {
                let (t0, t1) = (t, grid.t(k + 1));
                for jump in path.chain.jumps_in(t0, t1) {
                    next += eta[jump.to];
                }
                for (a, bnd, r) in path.chain.segments(k) {
                    let comp: f64 = (0..d).filter(|&j| j != r).map(|j| eta[j] * model.rates.rate(r, j)).sum();
                    next -= comp * (bnd - a);
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("state at t = {} (step {}) is {next}", grid.t(k + 1), k + 1)));
        }
        us.push(u);
        x.push(next);
        xk = next;
    }
    Ok(StatePath { x, u: us })
}

/// Scenario control `θ = (θ₀, θ₁, θ₂)` at one instant.
#[derive(Debug, Clone)]
pub struct ScenarioPoint {
    pub theta0: f64,
    /// `θ₁ⱼ` for each target regime `j` (the entry of the current regime is unused).
    pub theta1: SmallVec<[f64; 4]>,
    /// `θ₂` as a function of the jump size.
    pub theta2: SizeFn,
}

impl ScenarioPoint {
    pub fn zero(dim: usize) -> Self {
        Self { theta0: 0.0, theta1: SmallVec::from_elem(0.0, dim), theta2: SizeFn::zero() }
    }

    pub fn constant(theta0: f64, theta1: Vec<f64>, theta2: f64) -> Self {
        Self { theta0, theta1: theta1.into_iter().collect(), theta2: SizeFn::constant(theta2) }
    }
}

/// A predictable scenario process, evaluated at the left end of each interval.
///
/// `regime` is the state the chain occupies when the value is used; the
/// density simulators call it with the pre-jump state of each event.
pub trait ScenarioProcess: Send + Sync {
    fn point(&self, k: usize, t: f64, x: f64, regime: usize) -> ScenarioPoint;
}

/// Scenario constant in time, one point per regime.
#[derive(Debug, Clone)]
pub struct RegimeScenario(pub Vec<ScenarioPoint>);

impl ScenarioProcess for RegimeScenario {
    fn point(&self, _k: usize, _t: f64, _x: f64, regime: usize) -> ScenarioPoint {
        self.0[regime].clone()
    }
}

impl<F> ScenarioProcess for F
where
    F: Fn(usize, f64, f64, usize) -> ScenarioPoint + Send + Sync,
{
    fn point(&self, k: usize, t: f64, x: f64, regime: usize) -> ScenarioPoint {
        self(k, t, x, regime)
    }
}

/// Density path on the grid, with its logarithm.
#[derive(Debug, Clone)]
pub struct DensityPath {
    pub log_g: Vec<f64>,
}

impl DensityPath {
    pub fn value(&self, k: usize) -> f64 {
        self.log_g[k].exp()
    }

    pub fn terminal(&self) -> f64 {
        self.log_g[self.log_g.len() - 1].exp()
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_g.iter().map(|v| v.exp()).collect()
    }
}

/// Check `θ₁ⱼ > −1` and `θ₂ ≥ −1 + ε` where it can be checked: at the atoms of
/// discrete size laws, or for constant `θ₂`.
pub fn check_scenario_point(pt: &ScenarioPoint, regime: usize, model: &RegimeModel, eps: f64) -> Result<()> {
    for (j, v) in pt.theta1.iter().enumerate() {
        if j != regime && model.rates.rate(regime, j) > 0.0 && !(*v >= -1.0) {
            return Err(Error::Admissibility(format!(
                "theta1 into regime {} is {v} (must be >= -1) in regime {}",
                j + 1,
                regime + 1
            )));
        }
    }
    if !pt.theta0.is_finite() {
        return Err(Error::Admissibility("theta0 is not finite".into()));
    }
    if model.levy.intensity(regime) > 0.0 {
        let check = |v: f64| {
            if v >= -1.0 + eps {
                Ok(())
            } else {
                Err(Error::Admissibility(format!(
                    "theta2 = {v} violates theta2 >= -1 + {eps} in regime {}",
                    regime + 1
                )))
            }
        };
        if let Some(c) = pt.theta2.as_constant() {
            check(c)?;
        } else if let crate::drivers::JumpSizeDist::Discrete { atoms, .. } = model.levy.dist(regime) {
            for a in atoms {
                check(pt.theta2.eval(*a))?;
            }
        }
    }
    Ok(())
}

struct StepScenario {
    points: SmallVec<[Option<ScenarioPoint>; 4]>,
    nu_theta2: SmallVec<[f64; 4]>,
}

impl StepScenario {
    fn new(d: usize) -> Self {
        Self { points: SmallVec::from_elem(None, d), nu_theta2: SmallVec::from_elem(0.0, d) }
    }

    fn get(
        &mut self,
        theta: &dyn ScenarioProcess,
        model: &RegimeModel,
        k: usize,
        t: f64,
        x: f64,
        n: usize,
        eps: f64,
    ) -> Result<&ScenarioPoint> {
        if self.points[n].is_none() {
            let pt = theta.point(k, t, x, n);
            check_scenario_point(&pt, n, model, eps)?;
            self.nu_theta2[n] = model.levy.nu_integral(n, &pt.theta2)?;
            self.points[n] = Some(pt);
        }
        Ok(self.points[n].as_ref().unwrap())
    }
}

/// `G^θ` on one path, by the exact exponential formula (log space) and,
/// optionally, by the Euler scheme of its SDE.
///
/// `x` supplies the state used by path-dependent scenarios (pass the grid values
/// of the factor process, or zeros).
pub fn simulate_density_theta(
    theta: &dyn ScenarioProcess,
    model: &RegimeModel,
    path: &PathNoise,
    x: &[f64],
    eps: f64,
    with_euler: bool,
) -> Result<(DensityPath, Option<Vec<f64>>)> {
    let grid = &model.grid;
    let m = grid.steps();
    let d = model.dim();
    let mut log_g = Vec::with_capacity(m + 1);
    let mut euler = if with_euler { Some(Vec::with_capacity(m + 1)) } else { None };
    log_g.push(0.0);
    if let Some(e) = euler.as_mut() {
        e.push(1.0);
    }
    let mut lg = 0.0;
    let mut ge = 1.0;
    for k in 0..m {
        let t = grid.t(k);
        let dt = grid.dt(k);
        let xk = x.get(k).copied().unwrap_or(0.0);
        let n0 = path.chain.regime(k);
        let mut cache = StepScenario::new(d);
        let th0 = cache.get(theta, model, k, t, xk, n0, eps)?.theta0;
        let db = path.noise.brownian[k];
        let mut dlog = th0 * db - 0.5 * th0 * th0 * dt;
        let mut deul = th0 * db;
        // Compensators over the constant-regime pieces of the step.
        for (a, b, r) in path.chain.segments(k) {
            let len = b - a;
            let nu2 = {
                cache.get(theta, model, k, t, xk, r, eps)?;
                cache.nu_theta2[r]
            };
            let pt = cache.points[r].as_ref().unwrap();
            let mut comp = nu2;
            for j in 0..d {
                if j != r {
                    comp += pt.theta1[j] * model.rates.rate(r, j);
                }
            }
            dlog -= comp * len;
            deul -= comp * len;
        }
        for e in path.noise.step_events(k) {
            let pt = cache.get(theta, model, k, t, xk, e.regime, eps)?;
            let v = pt.theta2.eval(e.size);
            if !(v >= -1.0 + eps) {
                return Err(Error::Admissibility(format!("theta2({}) = {v} below -1 + {eps}", e.size)));
            }
            dlog += v.ln_1p();
            deul += v;
        }
        for jump in path.chain.jumps_in(t, grid.t(k + 1)) {
            let pt = cache.get(theta, model, k, t, xk, jump.from, eps)?;
            let v = pt.theta1[jump.to];
            dlog += v.ln_1p();
            deul += v;
        }
        lg += dlog;
        if lg.is_nan() {
            return Err(Error::NonFinite(format!("log density at step {}", k + 1)));
        }
        log_g.push(lg);
        if let Some(e) = euler.as_mut() {
            ge *= 1.0 + deul;
            if !ge.is_finite() {
                return Err(Error::NonFinite(format!("Euler density at step {}", k + 1)));
            }
            e.push(ge);
        }
    }
    Ok((DensityPath { log_g }, euler))
}

/// A family of rate matrices `C(t)`, piecewise constant on the grid.
///
/// Only off-diagonal entries are used by the density; diagonals are carried as
/// supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFamily {
    dim: usize,
    /// One `D × D` row-major matrix per interval (a single entry means constant).
    steps: Vec<Vec<f64>>,
}

impl RateFamily {
    pub fn constant(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_flat(dim, vec![flat])
    }

    pub fn from_rate_matrix(m: &RateMatrix) -> Self {
        Self { dim: m.dim(), steps: vec![m.rows().into_iter().flatten().collect()] }
    }

    pub fn per_step(dim: usize, steps: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_flat(dim, steps)
    }

    fn from_flat(dim: usize, steps: Vec<Vec<f64>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Domain("empty rate family".into()));
        }
        for s in &steps {
            if s.len() != dim * dim {
                return Err(Error::Dimension(format!("rate family entry has {} values, expected {}", s.len(), dim * dim)));
            }
            for n in 0..dim {
                for j in 0..dim {
                    let v = s[n * dim + j];
                    if !v.is_finite() || (n != j && v < 0.0) {
                        return Err(Error::Domain(format!("rate family entry ({},{}) = {v} is invalid", n + 1, j + 1)));
                    }
                }
            }
        }
        Ok(Self { dim, steps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `C_nj` on interval `k`.
    pub fn rate(&self, k: usize, n: usize, j: usize) -> f64 {
        let s = &self.steps[k.min(self.steps.len() - 1)];
        s[n * self.dim + j]
    }

    /// `θ₁ⱼ = C_nj / λ_nj − 1` for every target `j ≠ n`.
    pub fn theta1(&self, k: usize, n: usize, rates: &RateMatrix) -> SmallVec<[f64; 4]> {
        (0..self.dim)
            .map(|j| if j == n { 0.0 } else { self.rate(k, n, j) / rates.rate(n, j) - 1.0 })
            .collect()
    }

    /// Reject families that need `C_nj / λ_nj` with `λ_nj = 0`.
    pub fn check_against(&self, rates: &RateMatrix) -> Result<()> {
        if rates.dim() != self.dim {
            return Err(Error::Dimension("rate family and rate matrix differ in size".into()));
        }
        for n in 0..self.dim {
            for j in 0..self.dim {
                if n != j && rates.rate(n, j) == 0.0 {
                    return Err(Error::Domain(format!(
                        "lambda_({},{}) = 0: the chain density C/lambda is undefined",
                        n + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scenario `(θ, C)`: scalar `θ` on the Brownian and jump parts and chain
/// rates distorted to `C`.
pub struct ThetaCScenario<'a> {
    pub theta: &'a Control,
    pub rates_c: &'a RateFamily,
    pub rates: &'a RateMatrix,
}

impl ScenarioProcess for ThetaCScenario<'_> {
    fn point(&self, k: usize, t: f64, x: f64, regime: usize) -> ScenarioPoint {
        let th = self.theta.value(k, t, x, regime);
        ScenarioPoint { theta0: th, theta1: self.rates_c.theta1(k, regime, self.rates), theta2: SizeFn::constant(th) }
    }
}

/// `G^{θ,C}` on one path (exact formula; optional Euler cross-check).
pub fn simulate_density_theta_c(
    theta: &Control,
    rates_c: &RateFamily,
    model: &RegimeModel,
    path: &PathNoise,
    x: &[f64],
    with_euler: bool,
) -> Result<(DensityPath, Option<Vec<f64>>)> {
    rates_c.check_against(&model.rates)?;
    let sc = ThetaCScenario { theta, rates_c, rates: &model.rates };
    simulate_density_theta(&sc, model, path, x, 0.0, with_euler)
}

/// Hamiltonian gradients driving `dA`, evaluated at the left end of an interval.
#[derive(Debug, Clone)]
pub struct AdjointGradients {
    /// `∂H/∂y`.
    pub dy: f64,
    /// `∂H/∂z`.
    pub dz: f64,
    /// Density of `∇_k H` with respect to `ν`, as a function of the jump size.
    pub dk: SizeFn,
    /// `∂H/∂v_j` for each target regime.
    pub dv: SmallVec<[f64; 4]>,
}

/// Euler scheme for `dA = ∂_yH dt + ∂_zH dB + ∫ (d∇_kH/dν) Ñ(dt,dζ) + ∇_vH · dΦ̃`,
/// `A(0) = a0`. The gradient callback receives `(k, t, regime, A(t_k))`.
pub fn simulate_adjoint_forward<F>(gradients: F, model: &RegimeModel, path: &PathNoise, a0: f64) -> Result<Vec<f64>>
where
    F: Fn(usize, f64, usize, f64) -> AdjointGradients,
{
    let grid = &model.grid;
    let m = grid.steps();
    let d = model.dim();
    let mut out = Vec::with_capacity(m + 1);
    out.push(a0);
    let mut a = a0;
    for k in 0..m {
        let t = grid.t(k);
        let dt = grid.dt(k);
        let n = path.chain.regime(k);
        let g = gradients(k, t, n, a);
        let mut next = a + g.dy * dt + g.dz * path.noise.brownian[k];
        if !g.dk.is_zero() {
            for e in path.noise.step_events(k) {
                next += g.dk.eval(e.size);
            }
            for (s0, s1, r) in path.chain.segments(k) {
                next -= model.levy.nu_integral(r, &g.dk)? * (s1 - s0);
            }
        }
        if d > 1 {
            for jump in path.chain.jumps_in(t, grid.t(k + 1)) {
                next += g.dv[jump.to];
            }
            for (s0, s1, r) in path.chain.segments(k) {
                let comp: f64 = (0..d).filter(|&j| j != r).map(|j| g.dv[j] * model.rates.rate(r, j)).sum();
                next -= comp * (s1 - s0);
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("adjoint A at step {}", k + 1)));
        }
        out.push(next);
        a = next;
    }
    Ok(out)
}

/// Per-regime affine coefficients
/// `b = drift[n] + mean_reversion[n]·x + load1·u₁ + load2·u₂`, `σ = vol[n]`,
/// `γ(ζ) = jump_scale[n]·ζ`, `η_j = switch_shift[j]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AffineCoefficients {
    pub drift: Vec<f64>,
    pub mean_reversion: Vec<f64>,
    pub vol: Vec<f64>,
    pub jump_scale: Vec<f64>,
    pub switch_shift: Vec<f64>,
    pub control_loading: [f64; 2],
}

impl AffineCoefficients {
    pub fn zero(dim: usize) -> Self {
        Self {
            drift: vec![0.0; dim],
            mean_reversion: vec![0.0; dim],
            vol: vec![0.0; dim],
            jump_scale: vec![0.0; dim],
            switch_shift: vec![0.0; dim],
            control_loading: [0.0, 0.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.drift.len();
        for (name, v) in [
            ("mean_reversion", &self.mean_reversion),
            ("vol", &self.vol),
            ("jump_scale", &self.jump_scale),
            ("switch_shift", &self.switch_shift),
        ] {
            if v.len() != d {
                return Err(Error::Dimension(format!("{name} has {} entries, expected {d}", v.len())));
            }
        }
        let all = self
            .drift
            .iter()
            .chain(&self.mean_reversion)
            .chain(&self.vol)
            .chain(&self.jump_scale)
            .chain(&self.switch_shift)
            .chain(self.control_loading.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("affine coefficients must be finite".into()));
        }
        Ok(())
    }
}

impl ForwardCoefficients for AffineCoefficients {
    fn drift(&self, _t: f64, x: f64, n: usize, u: Controls) -> f64 {
        self.drift[n] + self.mean_reversion[n] * x + self.control_loading[0] * u[0] + self.control_loading[1] * u[1]
    }
    fn diffusion(&self, _t: f64, _x: f64, n: usize, _u: Controls) -> f64 {
        self.vol[n]
    }
    fn jump(&self, _t: f64, _x: f64, n: usize, _u: Controls) -> SizeFn {
        SizeFn::linear(self.jump_scale[n])
    }
    fn switch(&self, _t: f64, _x: f64, _n: usize, _u: Controls, target: usize) -> f64 {
        self.switch_shift[target]
    }
}
