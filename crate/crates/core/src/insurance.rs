//! Worst-case investment of an insurer with exponential utility
//! `U(x) = −e^{−βx}`: surplus dynamics, closed-form strategies `(π*, θ*)`,
//! bang-bang chain distortion `C*`, the `f`-ODEs and the saddle-point check.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{residual_of_ansatz, BsdeSpec, CandidateSolution, DriverInput, ResidualReport, Terminal};
use crate::chain::RateMatrix;
use crate::drivers::{JumpSizeDist, RegimeLevyMeasure, SizeFn};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::maxprinciple::{
    control_deviations, gateaux_derivative, verify_saddle, DeviationSet, Game, GateauxOptions, Hamiltonian, HamiltonianPoint,
    PayoffSamples, Player, Unilateral, VerificationReport, VerifyOptions,
};
use crate::numerics::grid_then_golden_min;
use crate::parallel::map_paths;
use crate::sde::{
    simulate_density_theta_c, simulate_state, Control, ControlBox, ControlPair, Controls, ForwardCoefficients, PathNoise,
    RateFamily, RegimeModel,
};
use crate::stats::Estimate;

/// Lower margin for the market's `θ > −1`.
pub const THETA_EPS: f64 = 1e-6;

/// Regime-switching market and insurance book.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsuranceMarket {
    pub rates: RateMatrix,
    pub interest: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub premium: Vec<f64>,
    pub claim_intensity: Vec<f64>,
    pub claims: Vec<JumpSizeDist>,
    pub beta: f64,
}

impl InsuranceMarket {
    pub fn dim(&self) -> usize {
        self.rates.dim()
    }

    pub fn violations(&self) -> Vec<String> {
        let d = self.dim();
        let mut v = self.rates.violations();
        for (name, xs) in [
            ("interest", &self.interest),
            ("mu", &self.mu),
            ("sigma", &self.sigma),
            ("premium", &self.premium),
            ("claim_intensity", &self.claim_intensity),
        ] {
            if xs.len() != d {
                v.push(format!("{name} has {} entries for {d} regimes", xs.len()));
            } else if xs.iter().any(|x| !x.is_finite()) {
                v.push(format!("{name} must be finite"));
            }
        }
        if self.claims.len() != d {
            v.push(format!("claims has {} laws for {d} regimes", self.claims.len()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be positive, got {}", self.beta));
        }
        for (n, s) in self.sigma.iter().enumerate() {
            if !(*s > 0.0) {
                v.push(format!("regime {}: sigma must be positive, got {s}", n + 1));
            }
        }
        for (n, l) in self.claim_intensity.iter().enumerate() {
            if !(*l >= 0.0) {
                v.push(format!("regime {}: claim intensity must be nonnegative, got {l}", n + 1));
            }
        }
        for (n, f) in self.claims.iter().enumerate() {
            if let Err(e) = f.validate() {
                v.push(format!("regime {}: {e}", n + 1));
            }
            if let JumpSizeDist::Exponential { rate } = f {
                if !(*rate > 2.0 * self.beta) {
                    v.push(format!(
                        "regime {}: exponential claim rate {rate} must exceed 2*beta = {}",
                        n + 1,
                        2.0 * self.beta
                    ));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn levy(&self) -> Result<RegimeLevyMeasure> {
        RegimeLevyMeasure::new(self.claim_intensity.clone(), self.claims.clone())
    }

    pub fn model(&self, grid: TimeGrid, initial_regime: usize) -> Result<RegimeModel> {
        self.validate()?;
        RegimeModel::new(self.rates.clone(), self.levy()?, grid, initial_regime)
    }

    /// `∫ ζ ν_n(dζ)`.
    pub fn claim_drain(&self, n: usize) -> Result<f64> {
        if self.claim_intensity[n] == 0.0 {
            return Ok(0.0);
        }
        Ok(self.claim_intensity[n] * self.claims[n].expect(&SizeFn::linear(1.0))?)
    }

    /// `m_n = ∫ (e^{βζ} − 1) ν_n(dζ)`.
    pub fn jump_moment(&self, n: usize) -> Result<f64> {
        if self.claim_intensity[n] == 0.0 {
            return Ok(0.0);
        }
        let m = self.claims[n].expect(&SizeFn::exp_minus_one(self.beta)).map_err(|e| match e {
            Error::NonIntegrable(s) => Error::NonIntegrable(format!("regime {}: {s}", n + 1)),
            e => e,
        })?;
        Ok(self.claim_intensity[n] * m)
    }

    /// Coefficient of `f` in the `f`-ODE for regime `n`:
    /// `−β(P₀ + π(μ−r)) + r − βθσπ + ½β²σ²π² + (1+θ)m_n`, plus `−βrX` when a
    /// state is given.
    pub fn c_coefficient(&self, n: usize, pi: f64, theta: f64, rx_state: Option<f64>) -> Result<f64> {
        let b = self.beta;
        let (r, s) = (self.interest[n], self.sigma[n]);
        let mut c = -b * (self.premium[n] + pi * (self.mu[n] - r)) + r - b * theta * s * pi
            + 0.5 * b * b * s * s * pi * pi
            + (1.0 + theta) * self.jump_moment(n)?;
        if let Some(x) = rx_state {
            c -= b * r * x;
        }
        Ok(c)
    }

    /// `π*_n = m_n / (βσ_n)`.
    pub fn optimal_pi(&self) -> Result<Vec<f64>> {
        (0..self.dim()).map(|n| Ok(self.jump_moment(n)? / (self.beta * self.sigma[n]))).collect()
    }

    /// `θ*_n = −(μ_n − r_n − σ_n²π_nβ)/σ_n`.
    pub fn optimal_theta(&self, pi: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|n| {
                let s = self.sigma[n];
                -(self.mu[n] - self.interest[n] - s * s * pi[n] * self.beta) / s
            })
            .collect()
    }
}

impl ForwardCoefficients for InsuranceMarket {
    fn drift(&self, _t: f64, x: f64, n: usize, u: Controls) -> f64 {
        let drain = self.claim_drain(n).unwrap_or(f64::NAN);
        self.premium[n] + self.interest[n] * x + u[0] * (self.mu[n] - self.interest[n]) - drain
    }

    fn diffusion(&self, _t: f64, _x: f64, n: usize, u: Controls) -> f64 {
        self.sigma[n] * u[0]
    }

    fn jump(&self, _t: f64, _x: f64, _n: usize, _u: Controls) -> SizeFn {
        SizeFn::linear(-1.0)
    }
}

/// `λ⁰/((λ̃−β)σ)`: the optimal investment for exponential claims with rate `λ̃`.
pub fn exponential_claims_pi(claim_intensity: f64, claim_rate: f64, beta: f64, sigma: f64) -> Result<f64> {
    if claim_rate <= beta {
        return Err(Error::NonIntegrable(format!("claim rate {claim_rate} must exceed beta = {beta}")));
    }
    Ok(claim_intensity / ((claim_rate - beta) * sigma))
}

/// Euler path of the surplus with the running minimum (nonnegativity is reported, not enforced).
#[derive(Debug, Clone)]
pub struct SurplusPath {
    pub x: Vec<f64>,
    pub min: f64,
}

impl SurplusPath {
    pub fn went_negative(&self) -> bool {
        self.min < 0.0
    }
}

pub fn simulate_surplus(market: &InsuranceMarket, pi: &Control, model: &RegimeModel, path: &PathNoise, x0: f64) -> Result<SurplusPath> {
    let s = simulate_state(market, &ControlPair::new(pi.clone(), Control::Constant(0.0)), model, path, x0)?;
    let min = s.x.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SurplusPath { x: s.x, min })
}

/// Box `[Cˡ(n,j), Cᵘ(n,j)]` for every off-diagonal entry of the distorted rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl CBounds {
    pub fn new(lower: Vec<Vec<f64>>, upper: Vec<Vec<f64>>) -> Result<Self> {
        let b = Self { lower, upper };
        let v = b.violations();
        if v.is_empty() {
            Ok(b)
        } else {
            Err(Error::Config(v))
        }
    }

    /// Bounds for `C₁₂` and `C₂₁`.
    pub fn two_state(c12: (f64, f64), c21: (f64, f64)) -> Result<Self> {
        Self::new(vec![vec![0.0, c12.0], vec![c21.0, 0.0]], vec![vec![0.0, c12.1], vec![c21.1, 0.0]])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn violations(&self) -> Vec<String> {
        let d = self.lower.len();
        let mut v = Vec::new();
        if self.upper.len() != d || self.lower.iter().chain(&self.upper).any(|r| r.len() != d) {
            v.push("C bounds must be square matrices of equal size".into());
            return v;
        }
        for n in 0..d {
            for j in 0..d {
                if n == j {
                    continue;
                }
                let (l, u) = (self.lower[n][j], self.upper[n][j]);
                if !(l.is_finite() && u.is_finite()) {
                    v.push(format!("C bounds ({},{}) must be finite", n + 1, j + 1));
                } else if !(l < u) {
                    v.push(format!("C bounds ({},{}): need lower < upper, got [{l}, {u}]", n + 1, j + 1));
                } else if l < 0.0 {
                    v.push(format!("C bounds ({},{}): lower bound {l} is negative", n + 1, j + 1));
                }
            }
        }
        v
    }
}

/// Bang-bang solution for two regimes: `C*₂₁ = Cˡ` if `V₁ > V₂` (ties too),
/// `Cᵘ` if `V₁ < V₂`; `C*₁₂` by the same rule with `V₂ − V₁`; diagonals close
/// the rows.
pub fn optimal_c_two_state(v1: f64, v2: f64, bounds: &CBounds) -> Result<Vec<Vec<f64>>> {
    if bounds.dim() != 2 {
        return Err(Error::Dimension(format!("two-state rule needs 2 regimes, bounds have {}", bounds.dim())));
    }
    let pick = |diff: f64, n: usize, j: usize| if diff >= 0.0 { bounds.lower[n][j] } else { bounds.upper[n][j] };
    let c21 = pick(v1 - v2, 1, 0);
    let c12 = pick(v2 - v1, 0, 1);
    Ok(vec![vec![-c12, c12], vec![c21, -c21]])
}

/// Objective `Σ_j (C_nj − λ_nj) V_j` of the row-`n` problem with the diagonal
/// fixed by the zero row sum.
pub fn lp_objective(row: &[f64], v: &[f64], rates: &RateMatrix, n: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..v.len() {
        if j != n {
            s += (row[j] - rates.rate(n, j)) * (v[j] - v[n]);
        }
    }
    s
}

/// Row decision of [`optimal_c_lp`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpDecision {
    pub regime: usize,
    pub row: Vec<f64>,
    pub objective: f64,
    pub corners: usize,
    pub note: String,
}

/// Minimize [`lp_objective`] over the box by enumerating its corners (lower
/// bound first in each coordinate, so ties resolve to the lexicographically
/// smallest corner).
pub fn optimal_c_lp(v: &[f64], bounds: &CBounds, rates: &RateMatrix, n: usize) -> Result<LpDecision> {
    let d = rates.dim();
    if d < 2 || v.len() != d || bounds.dim() != d {
        return Err(Error::Dimension(format!("need D >= 2 and consistent sizes, got D = {d}, |V| = {}", v.len())));
    }
    if n >= d {
        return Err(Error::Domain(format!("regime index {n} out of range")));
    }
    let vio = bounds.violations();
    if !vio.is_empty() {
        return Err(Error::Config(vio));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("V values".into()));
    }
    let free: Vec<usize> = (0..d).filter(|&j| j != n).collect();
    let count = 1usize << free.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0..count {
        let mut row = vec![0.0; d];
        // Most significant bit on the first coordinate keeps lexicographic order.
        for (i, &j) in free.iter().enumerate() {
            let up = (mask >> (free.len() - 1 - i)) & 1 == 1;
            row[j] = if up { bounds.upper[n][j] } else { bounds.lower[n][j] };
        }
        row[n] = -free.iter().map(|&j| row[j]).sum::<f64>();
        let obj = lp_objective(&row, v, rates, n);
        if best.as_ref().is_none_or(|(_, b)| obj < *b) {
            best = Some((row, obj));
        }
    }
    let (row, objective) = best.expect("at least one corner");
    Ok(LpDecision {
        regime: n,
        row,
        objective,
        corners: count,
        note: "row-sum constraint used; the printed column-sum form is ambiguous".into(),
    })
}

/// `f(t_k, e_n)` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FCurve {
    pub times: Vec<f64>,
    /// `values[k][n]`.
    pub values: Vec<Vec<f64>>,
}

impl FCurve {
    pub fn at(&self, k: usize, n: usize) -> f64 {
        self.values[k][n]
    }
}

/// Options of [`solve_f_ode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    /// RK4 sub-steps per grid interval.
    pub substeps: usize,
    /// Keep the `−βrX` term with `X` frozen at this value.
    pub rx_state: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { substeps: 4, rx_state: None }
    }
}

/// Backward RK4 for `f'_n + c_n f_n + Σ_j C_nj (f_j − f_n) = 0`, `f(T) = terminal`,
/// with `C` piecewise constant on the grid.
pub fn solve_f_ode(
    market: &InsuranceMarket,
    pi: &[f64],
    theta: &[f64],
    c: &RateFamily,
    grid: &TimeGrid,
    terminal: f64,
    opts: &OdeOptions,
) -> Result<FCurve> {
    let d = market.dim();
    if pi.len() != d || theta.len() != d || c.dim() != d {
        return Err(Error::Dimension("strategy sizes must match the number of regimes".into()));
    }
    let coef: Vec<f64> = (0..d).map(|n| market.c_coefficient(n, pi[n], theta[n], opts.rx_state)).collect::<Result<_>>()?;
    let m = grid.steps();
    let sub = opts.substeps.max(1);
    let mut values = vec![vec![0.0; d]; m + 1];
    values[m] = vec![terminal; d];
    let mut f = values[m].clone();
    for k in (0..m).rev() {
        // Backward time s = T − t turns the system into g' = A g.
        let rhs = |g: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|n| {
                    let mut v = coef[n] * g[n];
                    for j in 0..d {
                        if j != n {
                            v += c.rate(k, n, j) * (g[j] - g[n]);
                        }
                    }
                    v
                })
                .collect()
        };
        let h = grid.dt(k) / sub as f64;
        for _ in 0..sub {
            let k1 = rhs(&f);
            let y2: Vec<f64> = (0..d).map(|n| f[n] + 0.5 * h * k1[n]).collect();
            let k2 = rhs(&y2);
            let y3: Vec<f64> = (0..d).map(|n| f[n] + 0.5 * h * k2[n]).collect();
            let k3 = rhs(&y3);
            let y4: Vec<f64> = (0..d).map(|n| f[n] + h * k3[n]).collect();
            let k4 = rhs(&y4);
            for n in 0..d {
                f[n] += h / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n]);
            }
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("f-ODE blew up at t = {}", grid.t(k))));
        }
        values[k] = f.clone();
    }
    Ok(FCurve { times: grid.times().to_vec(), values })
}

/// Candidate equilibrium `(π*, θ*, C*)` with `f₁` (terminal −1) and `f` (terminal +1).
#[derive(Debug, Clone)]
pub struct InsuranceEquilibrium {
    pub pi: Vec<f64>,
    pub theta: Vec<f64>,
    pub c: RateFamily,
    pub f1: FCurve,
    pub f: FCurve,
    pub iterations: usize,
}

impl InsuranceEquilibrium {
    /// `C*` on interval `k` as a matrix.
    pub fn c_matrix(&self, k: usize) -> Vec<Vec<f64>> {
        let d = self.pi.len();
        (0..d).map(|n| (0..d).map(|j| self.c.rate(k, n, j)).collect()).collect()
    }
}

/// Closed forms for `π*, θ*` and the fixed point `f₁ → V → C* → f₁`
/// (tolerance 1e-8, at most 100 rounds).
pub fn solve_equilibrium(market: &InsuranceMarket, bounds: &CBounds, grid: &TimeGrid, opts: &OdeOptions) -> Result<InsuranceEquilibrium> {
    market.validate()?;
    let d = market.dim();
    if bounds.dim() != d {
        return Err(Error::Dimension("C bounds and market differ in size".into()));
    }
    let pi = market.optimal_pi()?;
    let theta = market.optimal_theta(&pi);
    let m = grid.steps();
    let row_major = |rows: Vec<Vec<f64>>| rows.into_iter().flatten().collect::<Vec<f64>>();
    let start: Vec<Vec<f64>> = (0..d)
        .map(|n| {
            let mut r: Vec<f64> = (0..d).map(|j| if j == n { 0.0 } else { bounds.lower[n][j] }).collect();
            r[n] = -r.iter().sum::<f64>();
            r
        })
        .collect();
    let mut c = RateFamily::per_step(d, vec![row_major(start); m])?;
    let mut f1 = solve_f_ode(market, &pi, &theta, &c, grid, -1.0, opts)?;
    for it in 1..=100 {
        let mut steps = Vec::with_capacity(m);
        for k in 0..m {
            let v = &f1.values[k];
            let rows: Vec<Vec<f64>> = (0..d).map(|n| optimal_c_lp(v, bounds, &market.rates, n).map(|l| l.row)).collect::<Result<_>>()?;
            steps.push(row_major(rows));
        }
        let next = RateFamily::per_step(d, steps)?;
        let f1_next = solve_f_ode(market, &pi, &theta, &next, grid, -1.0, opts)?;
        let dc = (0..m)
            .flat_map(|k| (0..d).flat_map(move |n| (0..d).map(move |j| (k, n, j))))
            .map(|(k, n, j)| (next.rate(k, n, j) - c.rate(k, n, j)).abs())
            .fold(0.0, f64::max);
        let df = f1_next
            .values
            .iter()
            .zip(&f1.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        c = next;
        f1 = f1_next;
        if dc <= 1e-8 && df <= 1e-8 {
            let f = solve_f_ode(market, &pi, &theta, &c, grid, 1.0, opts)?;
            return Ok(InsuranceEquilibrium { pi, theta, c, f1, f, iterations: it });
        }
    }
    Err(Error::Convergence("C*/f1 fixed point did not settle in 100 rounds".into()))
}

/// Ansatz values along one path: value `(Y, Z, ∫Kν, V)` and adjoint `(p, q, r⁰, w)`.
#[derive(Debug, Clone)]
pub struct AnsatzPath {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// `r⁰(ζ) = p[(1+θ)(e^{βζ}−1) + θ]`.
    pub r0: Vec<SizeFn>,
    pub w: Vec<Vec<f64>>,
}

/// `Y = f₁e^{−βX}`, `Z = −βYσπ`, `K = Y(e^{βζ}−1)`, `V_j = (f₁(e_j) − f₁(α))e^{−βX}`,
/// `p = βfAe^{−βX}`, `q = (θ − βσπ)p`, `w_j = βAe^{−βX}(f(e_j)(C_αj/λ_αj) − f(α))`.
pub fn value_and_adjoint_ansatz(
    market: &InsuranceMarket,
    eq: &InsuranceEquilibrium,
    a: &[f64],
    x: &[f64],
    regimes: &[usize],
) -> Result<AnsatzPath> {
    let len = x.len();
    if a.len() != len || regimes.len() != len || eq.f1.values.len() != len {
        return Err(Error::Dimension("ansatz inputs must share the grid".into()));
    }
    let d = market.dim();
    let b = market.beta;
    let m = len - 1;
    let mut out = AnsatzPath {
        y: Vec::with_capacity(len),
        z: Vec::with_capacity(len),
        k: Vec::with_capacity(len),
        v: Vec::with_capacity(len),
        p: Vec::with_capacity(len),
        q: Vec::with_capacity(len),
        r0: Vec::with_capacity(len),
        w: Vec::with_capacity(len),
    };
    for i in 0..len {
        let n = regimes[i];
        let e = (-b * x[i]).exp();
        let (pi, th) = (eq.pi[n], eq.theta[n]);
        let y = eq.f1.at(i, n) * e;
        out.y.push(y);
        out.z.push(-b * y * market.sigma[n] * pi);
        out.k.push(y * market.jump_moment(n)?);
        out.v.push((0..d).map(|j| (eq.f1.at(i, j) - eq.f1.at(i, n)) * e).collect());
        let p1 = a[i] * e;
        let p = b * eq.f.at(i, n) * p1;
        out.p.push(p);
        out.q.push((th - b * market.sigma[n] * pi) * p);
        out.r0.push(SizeFn::exp_minus_one(b).scale(p * (1.0 + th)).add(&SizeFn::constant(p * th)));
        let kk = i.min(m.saturating_sub(1));
        out.w.push(
            (0..d)
                .map(|j| {
                    let ratio = eq.c.rate(kk, n, j) / market.rates.rate(n, j);
                    b * p1 * (eq.f.at(i, j) * ratio - eq.f.at(i, n))
                })
                .collect(),
        );
    }
    Ok(out)
}

/// The ansatz as a [`CandidateSolution`] of the value BSDE.
pub struct ValueAnsatz<'a> {
    pub market: &'a InsuranceMarket,
    pub eq: &'a InsuranceEquilibrium,
}

impl CandidateSolution for ValueAnsatz<'_> {
    fn y(&self, k: usize, x: f64, n: usize) -> f64 {
        self.eq.f1.at(k, n) * (-self.market.beta * x).exp()
    }

    fn z(&self, k: usize, x: f64, n: usize) -> f64 {
        -self.market.beta * self.y(k, x, n) * self.market.sigma[n] * self.eq.pi[n]
    }

    fn k_functionals(&self, k: usize, x: f64, n: usize) -> Vec<f64> {
        vec![self.y(k, x, n) * self.market.jump_moment(n).unwrap_or(f64::NAN)]
    }

    fn v(&self, k: usize, x: f64, n: usize) -> Vec<f64> {
        let e = (-self.market.beta * x).exp();
        (0..self.market.dim()).map(|j| (self.eq.f1.at(k, j) - self.eq.f1.at(k, n)) * e).collect()
    }
}

/// Value BSDE under `Q^{θ,C}`: driver `θZ + θ∫Kν + Σ_j (C_nj − λ_nj)V_j`,
/// terminal `U(X(T)) = −e^{−βX(T)}` (one functional, `ρ ≡ 1`).
pub fn value_bsde_spec(market: &InsuranceMarket, eq: &InsuranceEquilibrium, grid: &TimeGrid) -> BsdeSpec {
    let theta = eq.theta.clone();
    let c = eq.c.clone();
    let rates = market.rates.clone();
    let grid = grid.clone();
    let b = market.beta;
    let driver = move |a: &DriverInput| {
        let n = a.regime;
        let k = grid.interval_of(a.t).min(grid.steps() - 1);
        let mut g = theta[n] * (a.z + a.k[0]);
        for (j, v) in a.v.iter().enumerate() {
            if j != n {
                g += (c.rate(k, n, j) - rates.rate(n, j)) * v;
            }
        }
        g
    };
    BsdeSpec::with_driver(driver, Terminal::map(move |x, _| -(-b * x).exp()), vec![SizeFn::constant(1.0)])
}

/// The insurance Hamiltonian with the market's rate distortion fixed at `c_row`
/// (`u[0] = π`, `u[1] = θ`).
pub struct InsuranceHamiltonian<'a> {
    pub market: &'a InsuranceMarket,
    /// Distorted rates `C` (rows).
    pub c: Vec<Vec<f64>>,
}

impl InsuranceHamiltonian<'_> {
    /// `[a(θz + θ∫kν + Σ(C/λ−1)λv), (P₀ + rx + π(μ−r) − ∫ζν)p, σπq, −∫ζr⁰ν]`.
    pub fn blocks(&self, pt: &HamiltonianPoint) -> Result<[f64; 4]> {
        let mk = self.market;
        let n = pt.regime;
        let (pi, th) = (pt.u[0], pt.u[1]);
        let mut chain = 0.0;
        for j in 0..mk.dim() {
            let lam = mk.rates.rate(n, j);
            let cj = self.c[n][j];
            if lam != 0.0 {
                chain += (cj / lam - 1.0) * lam * pt.v[j];
            } else if cj != 0.0 {
                return Err(Error::Domain(format!("C({},{}) > 0 where lambda is 0", n + 1, j + 1)));
            }
        }
        let b1 = pt.a * (th * pt.z + th * pt.k[0] + chain);
        let b2 = (mk.premium[n] + mk.interest[n] * pt.x + pi * (mk.mu[n] - mk.interest[n]) - mk.claim_drain(n)?) * pt.p;
        let b3 = mk.sigma[n] * pi * pt.q;
        let b4 = if mk.claim_intensity[n] == 0.0 {
            0.0
        } else {
            -mk.levy()?.nu_integral(n, &pt.r.mul(&SizeFn::linear(1.0)))?
        };
        Ok([b1, b2, b3, b4])
    }
}

impl Hamiltonian for InsuranceHamiltonian<'_> {
    fn value(&self, _player: Player, pt: &HamiltonianPoint) -> Result<f64> {
        pt.check()?;
        Ok(self.blocks(pt)?.iter().sum())
    }
}

/// Generator of the value ansatz per unit `|f₁|e^{−βx}`, the scalar the
/// insurer maximizes and the market minimizes: `−c_n(π, θ)`.
pub fn reduced_hamiltonian(market: &InsuranceMarket, n: usize, pi: f64, theta: f64) -> Result<f64> {
    Ok(-market.c_coefficient(n, pi, theta, None)?)
}

/// `argmax_π min_{θ ∈ box} −c_n(π, θ)` by grid scan and golden section
/// (the inner problem is linear in `θ`, so its minimum sits at an end of the box).
pub fn robust_pi_by_search(market: &InsuranceMarket, n: usize, theta_box: &ControlBox) -> Result<f64> {
    let scale = 10.0 * (1.0 + market.jump_moment(n)? / (market.beta * market.sigma[n]));
    let worst = |pi: f64| -> f64 {
        let lo = reduced_hamiltonian(market, n, pi, theta_box.lo).unwrap_or(f64::NAN);
        let hi = reduced_hamiltonian(market, n, pi, theta_box.hi).unwrap_or(f64::NAN);
        lo.min(hi)
    };
    let (arg, val) = grid_then_golden_min(|p| -worst(p), -scale, scale, 201, 1e-12);
    if !val.is_finite() {
        return Err(Error::NonFinite("reduced Hamiltonian".into()));
    }
    Ok(arg)
}

/// Market strategy: scalar `θ` (Brownian and claims) and distorted rates `C`.
#[derive(Debug, Clone)]
pub struct MarketStrategy {
    pub theta: Control,
    pub c: RateFamily,
}

/// Zero-sum game with payoff `E_{Q^{θ,C}}[U(X(T))]` to the insurer.
pub struct InsuranceGame {
    pub market: InsuranceMarket,
    pub bounds: CBounds,
    pub model: RegimeModel,
    pub x0: f64,
    pub theta_box: ControlBox,
    pub workers: usize,
}

impl InsuranceGame {
    pub fn new(market: InsuranceMarket, bounds: CBounds, model: RegimeModel, x0: f64, workers: usize) -> Result<Self> {
        market.validate()?;
        let vio = bounds.violations();
        if !vio.is_empty() {
            return Err(Error::Config(vio));
        }
        Ok(Self { market, bounds, model, x0, theta_box: ControlBox::new(-1.0 + THETA_EPS, 1.0)?, workers })
    }

    fn probe_states(&self) -> Vec<f64> {
        let s = 1.0 + self.x0.abs();
        [-3.0, -1.0, 0.0, 1.0, 3.0].iter().map(|c| self.x0 + c * s).collect()
    }

    /// Share of paths whose surplus dips below zero under `π`.
    pub fn negative_surplus_share(&self, pi: &Control, paths: usize, seed: u64) -> Result<f64> {
        let neg = map_paths(paths, self.workers, |i| {
            let p = self.model.sample_path(seed, i as u64)?;
            Ok(simulate_surplus(&self.market, pi, &self.model, &p, self.x0)?.went_negative())
        })?;
        Ok(neg.iter().filter(|b| **b).count() as f64 / paths.max(1) as f64)
    }
}

impl Game for InsuranceGame {
    type S1 = Control;
    type S2 = MarketStrategy;

    fn zero_sum(&self) -> bool {
        true
    }

    fn payoff_samples(&self, s1: &Control, s2: &MarketStrategy, paths: usize, seed: u64) -> Result<PayoffSamples> {
        let b = self.market.beta;
        let j1 = map_paths(paths, self.workers, |i| {
            let p = self.model.sample_path(seed, i as u64)?;
            let s = simulate_surplus(&self.market, s1, &self.model, &p, self.x0)?;
            let (g, _) = simulate_density_theta_c(&s2.theta, &s2.c, &self.model, &p, &s.x, false)?;
            Ok(-g.terminal() * (-b * s.x[s.x.len() - 1]).exp())
        })?;
        let j2 = j1.iter().map(|v| -v).collect();
        Ok(PayoffSamples { j1, j2 })
    }

    fn perturb1(&self, s: &Control, d: &Control, ell: f64) -> Control {
        s.perturbed(d, ell)
    }

    fn perturb2(&self, s: &MarketStrategy, d: &MarketStrategy, ell: f64) -> MarketStrategy {
        MarketStrategy { theta: s.theta.perturbed(&d.theta, ell), c: s.c.clone() }
    }

    fn admissible1(&self, s: &Control) -> bool {
        s.within(&ControlBox::unbounded(), self.market.dim(), &self.probe_states(), &self.model.grid)
    }

    fn admissible2(&self, s: &MarketStrategy) -> bool {
        let d = self.market.dim();
        let rates_ok = (0..s.c.len()).all(|k| {
            (0..d).all(|n| {
                (0..d).all(|j| {
                    n == j || (s.c.rate(k, n, j) >= self.bounds.lower[n][j] && s.c.rate(k, n, j) <= self.bounds.upper[n][j])
                })
            })
        });
        rates_ok && s.theta.within(&self.theta_box, d, &self.probe_states(), &self.model.grid)
    }
}

/// Deviation set: insurer shifts and feedback perturbations of `π*`; market
/// `θ` constants across its box and feedback perturbations (with `C*`), plus
/// constant `C` corners and the box midpoint (with `θ*`).
pub fn insurance_deviations(game: &InsuranceGame, eq: &InsuranceEquilibrium, seed: u64) -> Result<DeviationSet<Control, MarketStrategy>> {
    let d = game.market.dim();
    let pi = Control::PerRegime(eq.pi.clone());
    let theta = Control::PerRegime(eq.theta.clone());
    let scale = eq.pi.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let player1 = control_deviations(&pi, scale, &ControlBox::unbounded(), seed);
    let mut player2: Vec<(String, MarketStrategy)> = control_deviations(&theta, 1.0, &game.theta_box, seed ^ 0x7e7a)
        .into_iter()
        .map(|(l, t)| (format!("theta {l}"), MarketStrategy { theta: t, c: eq.c.clone() }))
        .collect();
    let off: Vec<(usize, usize)> = (0..d).flat_map(|n| (0..d).filter(move |&j| j != n).map(move |j| (n, j))).collect();
    let b = &game.bounds;
    let matrix = |pick: &dyn Fn(usize, usize, usize) -> f64, tag: usize| -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; d]; d];
        for (i, &(n, j)) in off.iter().enumerate() {
            rows[n][j] = pick(i, n, j);
            let _ = tag;
        }
        for (n, row) in rows.iter_mut().enumerate() {
            row[n] = -(0..d).filter(|&j| j != n).map(|j| row[j]).sum::<f64>();
        }
        rows
    };
    let mut choices: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    if off.len() <= 6 {
        for mask in 0..(1usize << off.len()) {
            let rows = matrix(&|i, n, j| if (mask >> i) & 1 == 1 { b.upper[n][j] } else { b.lower[n][j] }, mask);
            choices.push((format!("C corner {mask:0width$b}", width = off.len()), rows));
        }
    } else {
        choices.push(("C all lower".into(), matrix(&|_, n, j| b.lower[n][j], 0)));
        choices.push(("C all upper".into(), matrix(&|_, n, j| b.upper[n][j], 1)));
    }
    choices.push(("C midpoint".into(), matrix(&|_, n, j| 0.5 * (b.lower[n][j] + b.upper[n][j]), 0)));
    for (label, rows) in choices {
        player2.push((label, MarketStrategy { theta: theta.clone(), c: RateFamily::constant(rows)? }));
    }
    Ok(DeviationSet { player1, player2 })
}

/// Result of [`verify_insurance_equilibrium`].
pub struct InsuranceVerification {
    pub equilibrium: InsuranceEquilibrium,
    pub report: VerificationReport,
}

/// Saddle check of `(π*, (θ*, C*))` on `paths` paths, with Gateaux derivatives in
/// the `π` and `θ` directions appended to the report (both must be within
/// `sigma_multiple` standard errors of zero).
pub fn verify_insurance_equilibrium(
    market: &InsuranceMarket,
    bounds: &CBounds,
    model: &RegimeModel,
    x0: f64,
    paths: usize,
    seed: u64,
    workers: usize,
    opts: &VerifyOptions,
) -> Result<InsuranceVerification> {
    let eq = solve_equilibrium(market, bounds, &model.grid, &OdeOptions::default())?;
    let game = InsuranceGame::new(market.clone(), bounds.clone(), model.clone(), x0, workers)?;
    let pi = Control::PerRegime(eq.pi.clone());
    let ms = MarketStrategy { theta: Control::PerRegime(eq.theta.clone()), c: eq.c.clone() };
    let devs = insurance_deviations(&game, &eq, seed)?;
    let mut report = verify_saddle(&game, &pi, &ms, &devs, paths, seed, opts)?;
    let gopts = GateauxOptions::default();
    let dirs = [
        Unilateral::One(Control::Constant(1.0)),
        Unilateral::Two(MarketStrategy { theta: Control::Constant(1.0), c: eq.c.clone() }),
    ];
    for dir in &dirs {
        let g = gateaux_derivative(&game, &pi, &ms, dir, paths, seed, &gopts)?;
        if g.estimate.mean.abs() > opts.sigma_multiple * g.estimate.stderr + opts.floor {
            report.passed = false;
            report.notes.push(format!("{:?} Gateaux derivative {:.3e} ± {:.3e} is not zero", g.player, g.estimate.mean, g.estimate.stderr));
        }
        report.gateaux.push(g);
    }
    report
        .notes
        .push("market Gateaux derivative taken in theta only; C* sits on the box boundary".into());
    let neg = game.negative_surplus_share(&pi, paths.min(10_000), seed)?;
    report.notes.push(format!("surplus below zero on {:.2}% of paths", 100.0 * neg));
    Ok(InsuranceVerification { equilibrium: eq, report })
}

/// Two-regime reference market: `π* = (1, 20/9)`, `θ* = (0.34, 0.5)`.
pub fn reference_market() -> Result<(InsuranceMarket, CBounds)> {
    let market = InsuranceMarket {
        rates: RateMatrix::two_state(0.5, 1.0)?,
        interest: vec![0.0, 0.0],
        mu: vec![0.08, 0.05],
        sigma: vec![0.5, 0.3],
        premium: vec![1.5, 1.0],
        claim_intensity: vec![1.0, 2.0],
        claims: vec![JumpSizeDist::Exponential { rate: 3.0 }, JumpSizeDist::Exponential { rate: 4.0 }],
        beta: 1.0,
    };
    market.validate()?;
    Ok((market, CBounds::two_state((0.25, 1.0), (0.5, 2.0))?))
}

/// Insurer's objective as a payoff-weighted estimate (for reports).
pub fn objective(game: &InsuranceGame, pi: &Control, market: &MarketStrategy, paths: usize, seed: u64) -> Result<Estimate> {
    Ok(Estimate::from_samples(&game.payoff_samples(pi, market, paths, seed)?.j1))
}

/// `dt`-defect of the ansatz `f₁(t, α)e^{−βx}` in the value BSDE under `π*`,
/// at the supplied `(k, x, regime)` points.
pub fn ansatz_defect(
    market: &InsuranceMarket,
    eq: &InsuranceEquilibrium,
    model: &RegimeModel,
    points: &[(usize, f64, usize)],
) -> Result<ResidualReport> {
    let spec = value_bsde_spec(market, eq, &model.grid);
    let controls = ControlPair::new(Control::PerRegime(eq.pi.clone()), Control::Constant(0.0));
    residual_of_ansatz(&spec, market, &controls, model, &ValueAnsatz { market, eq }, points)
}

/// One refinement level of [`convergence_study`].
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceLevel {
    pub steps: usize,
    pub paths: usize,
    /// Pooled RMS of `Y − f₁(t, α)e^{−βX}` over grid points, paths and replications.
    pub rms: f64,
    /// Regression `Y(0)` averaged over replications.
    pub y0: f64,
    /// Closed-form `f₁(0, α₀)e^{−βx₀}`.
    pub y0_exact: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub levels: Vec<ConvergenceLevel>,
    /// Log-log slope of RMS against `Δt`.
    pub order: f64,
    /// Largest ratio `rms(M_{l+1}) / rms(M_l)`.
    pub worst_ratio: f64,
}

/// Regression error against the closed form on a sequence of grids.
///
/// The finest level uses `paths` paths; coarser levels use
/// `paths·(M/M_max)²` (at least 100) so the Monte Carlo error shrinks at the
/// rate of the time-discretization error. Regression uses the basis
/// `{1, e^{−βx}}` with weights `e^{2βx}` and `reps` independent replications.
pub fn convergence_study(
    market: &InsuranceMarket,
    bounds: &CBounds,
    horizon: f64,
    x0: f64,
    levels: &[usize],
    paths: usize,
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<ConvergenceReport> {
    use crate::bsde::{solve_bsde_regression, ExponentialBasis, PathBatch, RegressionOptions};

    let finest = *levels.iter().max().ok_or_else(|| Error::Domain("no refinement levels".into()))?;
    if reps == 0 {
        return Err(Error::Domain("at least one replication is needed".into()));
    }
    let b = market.beta;
    let basis = ExponentialBasis { rates: vec![b] };
    let opts = RegressionOptions {
        keep_y: true,
        noise_scale: Some(Arc::new(move |x: f64, _| (-b * x).exp())),
        ..Default::default()
    };
    let mut out = Vec::new();
    for &m in levels {
        let ratio = m as f64 / finest as f64;
        let n = ((paths as f64 * ratio * ratio).round() as usize).max(100);
        let grid = TimeGrid::uniform(horizon, m)?;
        let model = market.model(grid.clone(), 0)?;
        let eq = solve_equilibrium(market, bounds, &grid, &OdeOptions::default())?;
        let spec = value_bsde_spec(market, &eq, &grid);
        let ctrl = ControlPair::new(Control::PerRegime(eq.pi.clone()), Control::Constant(0.0));
        let (mut ss, mut cnt, mut y0) = (0.0, 0usize, 0.0);
        for rep in 0..reps {
            let batch = PathBatch::simulate(
                &model,
                market,
                &ctrl,
                x0,
                n,
                seed.wrapping_add(1000 * rep as u64),
                vec![SizeFn::constant(1.0)],
                workers,
            )?;
            let sol = solve_bsde_regression(&spec, &batch, &basis, &opts)?;
            y0 += sol.y0[0] / reps as f64;
            for k in 0..=m {
                for i in 0..n {
                    let exact = eq.f1.at(k, batch.regime_at(k, i)) * (-b * batch.x_at(k, i)).exp();
                    let y = sol.y_at(k, i).ok_or_else(|| Error::Domain("regression did not keep Y".into()))?;
                    ss += (y - exact).powi(2);
                    cnt += 1;
                }
            }
        }
        out.push(ConvergenceLevel { steps: m, paths: n, rms: (ss / cnt as f64).sqrt(), y0, y0_exact: eq.f1.at(0, 0) * (-b * x0).exp() });
    }
    let dts: Vec<f64> = out.iter().map(|l| horizon / l.steps as f64).collect();
    let rms: Vec<f64> = out.iter().map(|l| l.rms).collect();
    let order = if out.len() > 1 { crate::stats::log_log_slope(&dts, &rms) } else { f64::NAN };
    let worst_ratio = rms.windows(2).map(|w| w[1] / w[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(ConvergenceReport { levels: out, order, worst_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_closed_forms() {
        let (m, _) = reference_market().unwrap();
        let pi = m.optimal_pi().unwrap();
        assert!((pi[0] - 1.0).abs() < 1e-12);
        assert!((pi[1] - 20.0 / 9.0).abs() < 1e-12);
        let th = m.optimal_theta(&pi);
        assert!((th[0] - 0.34).abs() < 1e-12);
        assert!((th[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn theta_instance() {
        let (mut m, _) = reference_market().unwrap();
        m.mu[0] = 0.08;
        m.interest[0] = 0.02;
        m.sigma[0] = 0.2;
        let th = m.optimal_theta(&[1.0, 1.0]);
        assert!((th[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn claim_rate_condition() {
        let (mut m, _) = reference_market().unwrap();
        m.claims[0] = JumpSizeDist::Exponential { rate: 1.5 };
        assert!(m.validate().is_err());
        assert!(exponential_claims_pi(1.0, 0.9, 1.0, 0.5).is_err());
    }

    #[test]
    fn no_claims_no_investment() {
        let (mut m, _) = reference_market().unwrap();
        m.claim_intensity = vec![0.0, 0.0];
        assert_eq!(m.optimal_pi().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_state_rule_and_ties() {
        let b = CBounds::two_state((0.25, 1.0), (0.5, 2.0)).unwrap();
        let c = optimal_c_two_state(1.0, 0.0, &b).unwrap();
        assert_eq!(c[1][0], 0.5);
        assert_eq!(c[0][1], 1.0);
        let c = optimal_c_two_state(0.3, 0.3, &b).unwrap();
        assert_eq!((c[0][1], c[1][0]), (0.25, 0.5));
        assert_eq!(c[0][0], -0.25);
    }

    #[test]
    fn lp_flat_objective_takes_lowest_corner() {
        let rates = RateMatrix::new(vec![vec![-2.0, 1.0, 1.0], vec![1.0, -2.0, 1.0], vec![1.0, 1.0, -2.0]]).unwrap();
        let lo = vec![vec![0.0, 0.1, 0.2], vec![0.1, 0.0, 0.2], vec![0.1, 0.2, 0.0]];
        let hi = vec![vec![0.0, 1.1, 1.2], vec![1.1, 0.0, 1.2], vec![1.1, 1.2, 0.0]];
        let b = CBounds::new(lo, hi).unwrap();
        let d = optimal_c_lp(&[0.5, 0.5, 0.5], &b, &rates, 0).unwrap();
        assert_eq!(d.row[1], 0.1);
        assert_eq!(d.row[2], 0.2);
        assert_eq!(d.corners, 4);
    }

    #[test]
    fn f_ode_trivial_and_scalar() {
        let mut m = InsuranceMarket {
            rates: RateMatrix::single(),
            interest: vec![0.0],
            mu: vec![0.0],
            sigma: vec![1.0],
            premium: vec![0.0],
            claim_intensity: vec![0.0],
            claims: vec![JumpSizeDist::Exponential { rate: 5.0 }],
            beta: 1.0,
        };
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let c = RateFamily::constant(vec![vec![0.0]]).unwrap();
        let f = solve_f_ode(&m, &[0.0], &[0.0], &c, &grid, 1.0, &OdeOptions::default()).unwrap();
        assert!(f.values.iter().all(|v| v[0] == 1.0));
        m.premium[0] = 0.7;
        let coef = m.c_coefficient(0, 0.0, 0.0, None).unwrap();
        let f = solve_f_ode(&m, &[0.0], &[0.0], &c, &grid, 1.0, &OdeOptions::default()).unwrap();
        for k in 0..=20 {
            let t = grid.t(k);
            assert!((f.at(k, 0) - (coef * (1.0 - t)).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn f_and_f1_are_mirror_images() {
        let (m, b) = reference_market().unwrap();
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let eq = solve_equilibrium(&m, &b, &grid, &OdeOptions::default()).unwrap();
        for k in 0..=50 {
            for n in 0..2 {
                assert!((eq.f.at(k, n) + eq.f1.at(k, n)).abs() < 1e-12);
            }
        }
        assert!(eq.f1.values.iter().flatten().all(|v| *v < 0.0));
    }

    #[test]
    fn focs_vanish_at_ansatz() {
        let (m, b) = reference_market().unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let eq = solve_equilibrium(&m, &b, &grid, &OdeOptions::default()).unwrap();
        let x = vec![1.0; 11];
        let a = vec![1.3; 11];
        let reg: Vec<usize> = (0..11).map(|i| i % 2).collect();
        let an = value_and_adjoint_ansatz(&m, &eq, &a, &x, &reg).unwrap();
        for i in 0..11 {
            let n = reg[i];
            let dpi = (m.mu[n] - m.interest[n]) * an.p[i] + m.sigma[n] * an.q[i];
            assert!(dpi.abs() < 1e-12);
            assert!((an.z[i] + an.k[i]).abs() < 1e-12);
        }
        assert!((an.y[10] + (-1.0f64).exp()).abs() < 1e-15);
    }
}
