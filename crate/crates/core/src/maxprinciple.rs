//! Hamiltonians, first-order conditions, Gateaux derivatives and Monte Carlo
//! verification of Nash equilibria and saddle points.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{solve_bsde_regression, Basis, BsdeSpec, DriverInput, PathBatch, RegressionOptions};
use crate::drivers::SizeFn;
use crate::error::{Error, Result};
use crate::numerics::grid_then_golden_min;
use crate::rng::mix64;
use crate::sde::{Control, ControlBox, ControlPair, Controls, ForwardCoefficients, RegimeModel};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Player::One => f.write_str("player 1"),
            Player::Two => f.write_str("player 2"),
        }
    }
}

/// Arguments of a Hamiltonian.
#[derive(Debug, Clone)]
pub struct HamiltonianPoint {
    pub t: f64,
    pub x: f64,
    pub regime: usize,
    pub y: f64,
    pub z: f64,
    /// Jump functionals `∫ k ρ_l ν`.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub u: Controls,
    pub a: f64,
    pub p: f64,
    pub q: f64,
    /// Adjoint jump integrand `r(ζ)`.
    pub r: SizeFn,
    pub w: Vec<f64>,
}

impl HamiltonianPoint {
    pub fn check(&self) -> Result<()> {
        let scalars = [self.t, self.x, self.y, self.z, self.u[0], self.u[1], self.a, self.p, self.q];
        let all = scalars.iter().chain(&self.k).chain(&self.v).chain(&self.w);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Hamiltonian argument".into()));
        }
        Ok(())
    }

    pub fn with_control(&self, player: Player, value: f64) -> Self {
        let mut p = self.clone();
        p.u[player.index()] = value;
        p
    }
}

pub trait Hamiltonian: Sync {
    fn value(&self, player: Player, pt: &HamiltonianPoint) -> Result<f64>;
}

impl<F> Hamiltonian for F
where
    F: Fn(Player, &HamiltonianPoint) -> f64 + Sync,
{
    fn value(&self, player: Player, pt: &HamiltonianPoint) -> Result<f64> {
        Ok(self(player, pt))
    }
}

/// `f(t, x, regime, u)`.
pub type RunningMap = Arc<dyn Fn(f64, f64, usize, Controls) -> f64 + Send + Sync>;
/// `φ(x, regime)`.
pub type TerminalMap = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;
/// `ψ(y)`.
pub type UtilityMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// One player's objective: `E[∫ f dt + φ(X(T), α(T)) + ψ(Y(0))]`, with `Y` the
/// solution of the player's BSDE.
#[derive(Clone)]
pub struct PlayerSpec {
    pub running: RunningMap,
    pub terminal: TerminalMap,
    pub utility: UtilityMap,
    pub utility_derivative: UtilityMap,
    pub bsde: BsdeSpec,
    pub control_box: ControlBox,
}

impl PlayerSpec {
    /// `f = φ = 0`, `ψ = id`.
    pub fn value_only(bsde: BsdeSpec) -> Self {
        Self {
            running: Arc::new(|_, _, _, _| 0.0),
            terminal: Arc::new(|_, _| 0.0),
            utility: Arc::new(|y| y),
            utility_derivative: Arc::new(|_| 1.0),
            bsde,
            control_box: ControlBox::unbounded(),
        }
    }
}

/// A forward-backward game with regression-based BSDE values.
#[derive(Clone)]
pub struct GameSpec {
    pub coefficients: Arc<dyn ForwardCoefficients>,
    pub model: RegimeModel,
    pub x0: f64,
    pub players: [PlayerSpec; 2],
    /// `J₂ = −J₁`; player 2's spec is then ignored for payoffs.
    pub zero_sum: bool,
    pub basis: Arc<dyn Basis>,
    pub workers: usize,
}

impl GameSpec {
    /// `ψ_i' ≥ 0` on a sample of arguments.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (i, p) in self.players.iter().enumerate() {
            for s in 0..=200 {
                let y = -10.0 + 0.1 * s as f64;
                let d = (p.utility_derivative)(y);
                if !(d >= 0.0) {
                    bad.push(format!("player {}: utility derivative {d} < 0 at {y}", i + 1));
                    break;
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    fn player_samples(&self, i: usize, s1: &Control, s2: &Control, paths: usize, seed: u64) -> Result<Vec<f64>> {
        let spec = &self.players[i];
        let controls = ControlPair::new(s1.clone(), s2.clone());
        let batch = PathBatch::simulate(
            &self.model,
            self.coefficients.as_ref(),
            &controls,
            self.x0,
            paths,
            seed,
            spec.bsde.functionals.clone(),
            self.workers,
        )?;
        let sol = solve_bsde_regression(&spec.bsde, &batch, self.basis.as_ref(), &RegressionOptions::default())?;
        let grid = &self.model.grid;
        let m = grid.steps();
        let ybar = sol.y0_samples.iter().sum::<f64>() / paths as f64;
        let psi = (spec.utility)(ybar);
        let dpsi = (spec.utility_derivative)(ybar);
        let mut out = Vec::with_capacity(paths);
        for (i, s) in sol.y0_samples.iter().enumerate() {
            let mut run = 0.0;
            for k in 0..m {
                let t = grid.t(k);
                let (x, n) = (batch.x_at(k, i), batch.regime_at(k, i));
                run += (spec.running)(t, x, n, controls.at(k, t, x, n)) * grid.dt(k);
            }
            let v = run + (spec.terminal)(batch.x_at(m, i), batch.regime_at(m, i)) + psi + dpsi * (s - ybar);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("performance sample of path {i}")));
            }
            out.push(v);
        }
        Ok(out)
    }
}

impl Hamiltonian for GameSpec {
    /// `f + a·g + p·b + q·σ + ∫ r γ ν + Σ_j η_j w_j λ_nj`.
    fn value(&self, player: Player, pt: &HamiltonianPoint) -> Result<f64> {
        pt.check()?;
        let spec = &self.players[player.index()];
        let (t, x, n, u) = (pt.t, pt.x, pt.regime, pt.u);
        let c = self.coefficients.as_ref();
        let g = match &spec.bsde.driver {
            None => 0.0,
            Some(g) => g.eval(&DriverInput {
                t,
                x,
                regime: n,
                y: pt.y,
                z: pt.z,
                k: &pt.k,
                v: &pt.v,
                u,
                scale: 1.0,
            }),
        };
        let mut h = (spec.running)(t, x, n, u) + pt.a * g + pt.p * c.drift(t, x, n, u) + pt.q * c.diffusion(t, x, n, u);
        let gamma = c.jump(t, x, n, u);
        if !gamma.is_zero() && !pt.r.is_zero() {
            h += self.model.levy.nu_integral(n, &pt.r.mul(&gamma))?;
        }
        for (j, w) in pt.w.iter().enumerate() {
            if j != n && *w != 0.0 {
                h += c.switch(t, x, n, u, j) * w * self.model.rates.rate(n, j);
            }
        }
        Ok(h)
    }
}

/// Per-path payoff samples of both players.
#[derive(Debug, Clone)]
pub struct PayoffSamples {
    pub j1: Vec<f64>,
    pub j2: Vec<f64>,
}

impl PayoffSamples {
    pub fn of(&self, p: Player) -> &[f64] {
        match p {
            Player::One => &self.j1,
            Player::Two => &self.j2,
        }
    }
}

/// A two-player game evaluated by Monte Carlo. Equal seeds must reproduce the
/// same underlying noise (common random numbers).
pub trait Game: Sync {
    type S1: Clone + Send + Sync + fmt::Debug;
    type S2: Clone + Send + Sync + fmt::Debug;

    fn zero_sum(&self) -> bool;
    fn payoff_samples(&self, s1: &Self::S1, s2: &Self::S2, paths: usize, seed: u64) -> Result<PayoffSamples>;
    fn perturb1(&self, s: &Self::S1, direction: &Self::S1, ell: f64) -> Self::S1;
    fn perturb2(&self, s: &Self::S2, direction: &Self::S2, ell: f64) -> Self::S2;
    fn admissible1(&self, s: &Self::S1) -> bool;
    fn admissible2(&self, s: &Self::S2) -> bool;
}

impl Game for GameSpec {
    type S1 = Control;
    type S2 = Control;

    fn zero_sum(&self) -> bool {
        self.zero_sum
    }

    fn payoff_samples(&self, s1: &Control, s2: &Control, paths: usize, seed: u64) -> Result<PayoffSamples> {
        let j1 = self.player_samples(0, s1, s2, paths, seed)?;
        let j2 = if self.zero_sum {
            j1.iter().map(|v| -v).collect()
        } else {
            self.player_samples(1, s1, s2, paths, seed)?
        };
        Ok(PayoffSamples { j1, j2 })
    }

    fn perturb1(&self, s: &Control, d: &Control, ell: f64) -> Control {
        s.perturbed(d, ell)
    }

    fn perturb2(&self, s: &Control, d: &Control, ell: f64) -> Control {
        s.perturbed(d, ell)
    }

    fn admissible1(&self, s: &Control) -> bool {
        s.within(&self.players[0].control_box, self.model.dim(), &probe_states(self.x0), &self.model.grid)
    }

    fn admissible2(&self, s: &Control) -> bool {
        s.within(&self.players[1].control_box, self.model.dim(), &probe_states(self.x0), &self.model.grid)
    }
}

fn probe_states(x0: f64) -> Vec<f64> {
    [-3.0, -1.0, 0.0, 1.0, 3.0].iter().map(|d| x0 + d * (1.0 + x0.abs())).collect()
}

/// `J_i(0)` for both players with standard errors.
pub fn estimate_performance<G: Game>(game: &G, s1: &G::S1, s2: &G::S2, paths: usize, seed: u64) -> Result<[Estimate; 2]> {
    let s = game.payoff_samples(s1, s2, paths, seed)?;
    Ok([Estimate::from_samples(&s.j1), Estimate::from_samples(&s.j2)])
}

/// First-order-condition residuals `∂H_i/∂u_i` at a set of points.
#[derive(Debug, Clone, Serialize)]
pub struct FocReport {
    pub player: Player,
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    /// Average over the points (the conditional expectation under full information).
    pub mean: Estimate,
    /// Points where the control sits on the boundary of its box (one-sided difference).
    pub boundary: Vec<bool>,
}

/// Central difference of `H_i` in `u_i` with step `1e-5·(1+|u|)`; one-sided
/// (and flagged) when a central step would leave `bx`.
pub fn foc_residual(ham: &dyn Hamiltonian, player: Player, points: &[HamiltonianPoint], bx: &ControlBox) -> Result<FocReport> {
    let i = player.index();
    let mut residuals = Vec::with_capacity(points.len());
    let mut boundary = Vec::with_capacity(points.len());
    for pt in points {
        let u = pt.u[i];
        let h = 1e-5 * (1.0 + u.abs());
        let up = bx.contains(u + h);
        let down = bx.contains(u - h);
        let (r, b) = match (up, down) {
            (true, true) => {
                let hp = ham.value(player, &pt.with_control(player, u + h))?;
                let hm = ham.value(player, &pt.with_control(player, u - h))?;
                ((hp - hm) / (2.0 * h), false)
            }
            (true, false) => {
                let hp = ham.value(player, &pt.with_control(player, u + h))?;
                ((hp - ham.value(player, pt)?) / h, true)
            }
            (false, true) => {
                let hm = ham.value(player, &pt.with_control(player, u - h))?;
                ((ham.value(player, pt)? - hm) / h, true)
            }
            (false, false) => return Err(Error::Domain(format!("control {u} is outside its box"))),
        };
        residuals.push(r);
        boundary.push(b);
    }
    let max_abs = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(FocReport { player, mean: Estimate::from_samples(&residuals), residuals, max_abs, boundary })
}

/// `sup_{u_i ∈ box} H_i`, by grid search and golden-section refinement.
/// Unbounded boxes are searched on `u_i ± radius`.
pub fn sup_hamiltonian(ham: &dyn Hamiltonian, player: Player, pt: &HamiltonianPoint, bx: &ControlBox, radius: f64) -> Result<(f64, f64)> {
    let u = pt.u[player.index()];
    let lo = if bx.lo.is_finite() { bx.lo } else { u - radius };
    let hi = if bx.hi.is_finite() { bx.hi } else { u + radius };
    let mut err = None;
    let (arg, neg) = grid_then_golden_min(
        |v| match ham.value(player, &pt.with_control(player, v)) {
            Ok(h) => -h,
            Err(e) => {
                err.get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
        64,
        1e-10,
    );
    match err {
        Some(e) => Err(e),
        None => Ok((arg, -neg)),
    }
}

/// Where a unilateral perturbation acts.
#[derive(Debug, Clone)]
pub enum Unilateral<A, B> {
    One(A),
    Two(B),
}

impl<A, B> Unilateral<A, B> {
    pub fn player(&self) -> Player {
        match self {
            Unilateral::One(_) => Player::One,
            Unilateral::Two(_) => Player::Two,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateauxOptions {
    pub ell: f64,
    pub richardson: bool,
    pub common_random_numbers: bool,
    pub min_ell: f64,
}

impl Default for GateauxOptions {
    fn default() -> Self {
        Self { ell: 1e-3, richardson: true, common_random_numbers: true, min_ell: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GateauxReport {
    pub player: Player,
    /// Richardson-extrapolated estimate when enabled, else the plain one.
    pub estimate: Estimate,
    pub plain: Estimate,
    pub half_step: Option<Estimate>,
    pub ell: f64,
}

/// `(J_i(u + ℓβ) − J_i(u − ℓβ)) / 2ℓ` for the perturbed player's objective,
/// with `ℓ` halved until both perturbations are admissible.
pub fn gateaux_derivative<G: Game>(
    game: &G,
    s1: &G::S1,
    s2: &G::S2,
    direction: &Unilateral<G::S1, G::S2>,
    paths: usize,
    seed: u64,
    opts: &GateauxOptions,
) -> Result<GateauxReport> {
    let player = direction.player();
    let eval = |ell: f64, seed: u64| -> Result<Vec<f64>> {
        let s = match direction {
            Unilateral::One(d) => game.payoff_samples(&game.perturb1(s1, d, ell), s2, paths, seed)?,
            Unilateral::Two(d) => game.payoff_samples(s1, &game.perturb2(s2, d, ell), paths, seed)?,
        };
        Ok(s.of(player).to_vec())
    };
    let feasible = |ell: f64| match direction {
        Unilateral::One(d) => game.admissible1(&game.perturb1(s1, d, ell)) && game.admissible1(&game.perturb1(s1, d, -ell)),
        Unilateral::Two(d) => game.admissible2(&game.perturb2(s2, d, ell)) && game.admissible2(&game.perturb2(s2, d, -ell)),
    };
    let mut ell = opts.ell;
    while !feasible(ell) {
        ell *= 0.5;
        if ell < opts.min_ell {
            return Err(Error::Admissibility(format!("no admissible perturbation size above {}", opts.min_ell)));
        }
    }
    let central = |ell: f64| -> Result<Estimate> {
        let (sp, sm) = if opts.common_random_numbers { (seed, seed) } else { (seed, mix64(seed ^ 0x5eed)) };
        let (a, b) = (eval(ell, sp)?, eval(-ell, sm)?);
        Ok(if opts.common_random_numbers {
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * ell)).collect();
            Estimate::from_samples(&d)
        } else {
            let (ea, eb) = (Estimate::from_samples(&a), Estimate::from_samples(&b));
            Estimate {
                mean: (ea.mean - eb.mean) / (2.0 * ell),
                stderr: (ea.stderr.powi(2) + eb.stderr.powi(2)).sqrt() / (2.0 * ell),
                n: paths,
            }
        })
    };
    let plain = central(ell)?;
    if !opts.richardson {
        return Ok(GateauxReport { player, estimate: plain.clone(), plain, half_step: None, ell });
    }
    let half = central(0.5 * ell)?;
    let estimate = Estimate {
        mean: (4.0 * half.mean - plain.mean) / 3.0,
        stderr: ((4.0 * half.stderr).powi(2) + plain.stderr.powi(2)).sqrt() / 3.0,
        n: paths,
    };
    Ok(GateauxReport { player, estimate, plain, half_step: Some(half), ell })
}

/// Unilateral deviations for each player, with labels.
#[derive(Debug, Clone)]
pub struct DeviationSet<A, B> {
    pub player1: Vec<(String, A)>,
    pub player2: Vec<(String, B)>,
}

/// Eight constant deviations spanning the box (or shifts of
/// `±{0.1, 0.25, 0.5, 1}·(1+|û|)` when unbounded) and eight seeded smooth
/// feedback perturbations, all projected on the box.
pub fn control_deviations(candidate: &Control, scale: f64, bx: &ControlBox, seed: u64) -> Vec<(String, Control)> {
    let mut out = Vec::new();
    if bx.is_bounded() {
        for i in 0..8 {
            let c = bx.lo + (bx.hi - bx.lo) * i as f64 / 7.0;
            out.push((format!("constant {c:.6}"), Control::Constant(c)));
        }
    } else {
        for s in [0.1, 0.25, 0.5, 1.0] {
            for sign in [1.0, -1.0] {
                let d = sign * s * (1.0 + scale.abs());
                out.push((format!("shift {d:+.6}"), candidate.perturbed(&Control::Constant(1.0), d).clamped(*bx)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..8 {
        let amp = rng.random_range(0.1..0.5) * (1.0 + scale.abs());
        let freq = rng.random_range(0.5..2.0);
        let tfreq = rng.random_range(0.0..3.0);
        let phase: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let dir = Control::feedback(move |t, x, n| amp * (freq * x + tfreq * t + phase[n % 8]).sin());
        out.push((format!("feedback #{}", i + 1), candidate.perturbed(&dir, 1.0).clamped(*bx)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DeviationStatus {
    /// The deviation does not improve the deviating player's objective.
    NoImprovement,
    /// A positive improvement within the noise threshold.
    WithinNoise,
    Violation,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationResult {
    pub player: Player,
    pub label: String,
    /// `J_i(deviation) − J_i(candidate)` with common random numbers.
    pub improvement: Estimate,
    pub threshold: f64,
    pub status: DeviationStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimaxCheck {
    /// `max_i min_j J(u₁ⁱ, u₂ʲ)` over the finite sets.
    pub lower: Estimate,
    /// `min_j max_i J(u₁ⁱ, u₂ʲ)`.
    pub upper: Estimate,
    pub agree: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub kind: String,
    pub paths: usize,
    pub seed: u64,
    pub sigma_multiple: f64,
    pub candidate_value: [Estimate; 2],
    pub deviations: Vec<DeviationResult>,
    pub worst: Option<DeviationResult>,
    pub inconclusive: usize,
    pub gateaux: Vec<GateauxReport>,
    pub minimax: Option<MinimaxCheck>,
    pub notes: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// Violation threshold in standard errors.
    pub sigma_multiple: f64,
    /// Absolute slack added to the threshold.
    pub floor: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { sigma_multiple: 3.0, floor: 1e-12 }
    }
}

/// Check every unilateral deviation against the candidate with common random
/// numbers: a deviation violates the equilibrium when it improves the
/// deviating player's objective by more than `k·stderr + floor`.
pub fn verify_nash<G: Game>(
    game: &G,
    s1: &G::S1,
    s2: &G::S2,
    deviations: &DeviationSet<G::S1, G::S2>,
    paths: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let base = game.payoff_samples(s1, s2, paths, seed)?;
    let mut results = Vec::new();
    let mut judge = |player: Player, label: &str, dev: &PayoffSamples| {
        let imp = Estimate::paired_difference(dev.of(player), base.of(player));
        let threshold = opts.sigma_multiple * imp.stderr + opts.floor;
        let status = if imp.mean > threshold {
            DeviationStatus::Violation
        } else if imp.mean > 0.0 {
            DeviationStatus::WithinNoise
        } else {
            DeviationStatus::NoImprovement
        };
        results.push(DeviationResult { player, label: label.to_string(), improvement: imp, threshold, status });
    };
    for (label, d) in &deviations.player1 {
        let s = game.payoff_samples(d, s2, paths, seed)?;
        judge(Player::One, label, &s);
    }
    for (label, d) in &deviations.player2 {
        let s = game.payoff_samples(s1, d, paths, seed)?;
        judge(Player::Two, label, &s);
    }
    let worst = results
        .iter()
        .max_by(|a, b| (a.improvement.mean - a.threshold).total_cmp(&(b.improvement.mean - b.threshold)))
        .cloned();
    let inconclusive = results.iter().filter(|r| r.status == DeviationStatus::WithinNoise).count();
    let passed = results.iter().all(|r| r.status != DeviationStatus::Violation);
    Ok(VerificationReport {
        kind: "nash".into(),
        paths,
        seed,
        sigma_multiple: opts.sigma_multiple,
        candidate_value: [Estimate::from_samples(&base.j1), Estimate::from_samples(&base.j2)],
        deviations: results,
        worst,
        inconclusive,
        gateaux: vec![],
        minimax: None,
        notes: vec![],
        passed,
    })
}

/// Saddle-point check `J(u₁, û₂) ≤ J(û₁, û₂) ≤ J(û₁, u₂)` for a zero-sum game.
pub fn verify_saddle<G: Game>(
    game: &G,
    s1: &G::S1,
    s2: &G::S2,
    deviations: &DeviationSet<G::S1, G::S2>,
    paths: usize,
    seed: u64,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    if !game.zero_sum() {
        return Err(Error::Domain("saddle verification needs a zero-sum game".into()));
    }
    let mut r = verify_nash(game, s1, s2, deviations, paths, seed, opts)?;
    r.kind = "saddle".into();
    Ok(r)
}

/// Lower and upper values of the payoff matrix `J₁(u₁ⁱ, u₂ʲ)` over finite sets.
pub fn minimax_matrix<G: Game>(
    game: &G,
    set1: &[G::S1],
    set2: &[G::S2],
    paths: usize,
    seed: u64,
    sigma_multiple: f64,
) -> Result<(Vec<Vec<Estimate>>, MinimaxCheck)> {
    let mut m = Vec::with_capacity(set1.len());
    for a in set1 {
        let mut row = Vec::with_capacity(set2.len());
        for b in set2 {
            row.push(Estimate::from_samples(&game.payoff_samples(a, b, paths, seed)?.j1));
        }
        m.push(row);
    }
    let lower = m
        .iter()
        .map(|row| row.iter().min_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap().clone())
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or_else(|| Error::Domain("empty strategy set".into()))?;
    let upper = (0..set2.len())
        .map(|j| m.iter().map(|row| row[j].clone()).max_by(|a, b| a.mean.total_cmp(&b.mean)).unwrap())
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or_else(|| Error::Domain("empty strategy set".into()))?;
    let se = (lower.stderr.powi(2) + upper.stderr.powi(2)).sqrt();
    let agree = (upper.mean - lower.mean).abs() <= sigma_multiple * se + 1e-12;
    Ok((m, MinimaxCheck { lower, upper, agree }))
}

/// Midpoint-concavity diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct ConcavityReport {
    pub segments: usize,
    pub violations: usize,
    /// Largest `½(f(a)+f(b)) − f(mid)` seen.
    pub worst_gap: f64,
}

/// Sample `segments` random segments in a box around `center` and test
/// `f(mid) ≥ ½(f(a) + f(b)) − tol` on each.
pub fn concavity_probe<F>(f: F, center: &[f64], radius: &[f64], segments: usize, seed: u64, tol: f64) -> Result<ConcavityReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let d = center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|i| center[i] + radius[i] * rng.random_range(-1.0..1.0)).collect()
    };
    for _ in 0..segments {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let (fa, fb, fm) = (f(&a)?, f(&b)?, f(&mid)?);
        let gap = 0.5 * (fa + fb) - fm;
        worst_gap = worst_gap.max(gap);
        if gap > tol * (1.0 + fa.abs().max(fb.abs())) {
            violations += 1;
        }
    }
    Ok(ConcavityReport { segments, violations, worst_gap })
}

/// Small games with known solutions.
pub mod toy {
    use super::*;
    use crate::bsde::{PolynomialBasis, Terminal};
    use crate::chain::RateMatrix;
    use crate::drivers::RegimeLevyMeasure;
    use crate::grid::TimeGrid;
    use crate::sde::AffineCoefficients;

    /// `dX = (u₁ + u₂) dt + σ dB`, `X(0) = 0`, on `[0, T]`.
    #[derive(Debug, Clone, Copy)]
    pub struct LqParams {
        pub horizon: f64,
        pub steps: usize,
        pub sigma: f64,
        pub c1: f64,
        pub c2: f64,
        /// Discount in player 2's recursive value.
        pub kappa: f64,
        /// Cross term of the zero-sum payoff.
        pub rho: f64,
    }

    impl Default for LqParams {
        fn default() -> Self {
            Self { horizon: 1.0, steps: 20, sigma: 0.5, c1: 2.0, c2: 1.5, kappa: 0.5, rho: 0.25 }
        }
    }

    fn model(p: &LqParams) -> Result<(RegimeModel, AffineCoefficients)> {
        let model = RegimeModel::new(
            RateMatrix::single(),
            RegimeLevyMeasure::none(1),
            TimeGrid::uniform(p.horizon, p.steps)?,
            0,
        )?;
        let mut c = AffineCoefficients::zero(1);
        c.vol = vec![p.sigma];
        c.control_loading = [1.0, 1.0];
        Ok((model, c))
    }

    /// Nonzero-sum game: `J₁ = E[X(T)] − ½c₁∫u₁²`,
    /// `J₂ = 2Y₂(0) − ½c₂∫u₂²` with `dY₂ = κY₂ dt + …`, `Y₂(T) = X(T)`.
    pub fn lq_game(p: &LqParams) -> Result<GameSpec> {
        let (model, c) = model(p)?;
        let (c1, c2, kappa) = (p.c1, p.c2, p.kappa);
        let p1 = PlayerSpec {
            running: Arc::new(move |_, _, _, u| -0.5 * c1 * u[0] * u[0]),
            terminal: Arc::new(|x, _| x),
            utility: Arc::new(|_| 0.0),
            utility_derivative: Arc::new(|_| 0.0),
            bsde: BsdeSpec::new(None, Terminal::map(|_, _| 0.0), vec![]),
            control_box: ControlBox::unbounded(),
        };
        let p2 = PlayerSpec {
            running: Arc::new(move |_, _, _, u| -0.5 * c2 * u[1] * u[1]),
            terminal: Arc::new(|_, _| 0.0),
            utility: Arc::new(|y| 2.0 * y),
            utility_derivative: Arc::new(|_| 2.0),
            bsde: BsdeSpec::with_driver(move |a: &DriverInput| -kappa * a.y, Terminal::map(|x, _| x), vec![]),
            control_box: ControlBox::unbounded(),
        };
        Ok(GameSpec {
            coefficients: Arc::new(c),
            model,
            x0: 0.0,
            players: [p1, p2],
            zero_sum: false,
            basis: Arc::new(PolynomialBasis::default()),
            workers: 1,
        })
    }

    /// Equilibrium of [`lq_game`] under the implicit backward scheme:
    /// `û₁ = 1/c₁`, `û₂ = 2(1+κΔt)^{−M}/c₂`.
    pub fn lq_equilibrium(p: &LqParams) -> (f64, f64) {
        let dt = p.horizon / p.steps as f64;
        (1.0 / p.c1, 2.0 * (1.0 + p.kappa * dt).powi(-(p.steps as i32)) / p.c2)
    }

    /// Zero-sum game `J = E[X(T) + ∫(−½c₁u₁² + ½c₂u₂² + ρu₁u₂) dt]`.
    pub fn lq_zero_sum(p: &LqParams) -> Result<GameSpec> {
        let (model, c) = model(p)?;
        let (c1, c2, rho) = (p.c1, p.c2, p.rho);
        let p1 = PlayerSpec {
            running: Arc::new(move |_, _, _, u| -0.5 * c1 * u[0] * u[0] + 0.5 * c2 * u[1] * u[1] + rho * u[0] * u[1]),
            terminal: Arc::new(|x, _| x),
            utility: Arc::new(|_| 0.0),
            utility_derivative: Arc::new(|_| 0.0),
            bsde: BsdeSpec::new(None, Terminal::map(|_, _| 0.0), vec![]),
            control_box: ControlBox::unbounded(),
        };
        let p2 = p1.clone();
        Ok(GameSpec {
            coefficients: Arc::new(c),
            model,
            x0: 0.0,
            players: [p1, p2],
            zero_sum: true,
            basis: Arc::new(PolynomialBasis::default()),
            workers: 1,
        })
    }

    /// Saddle of [`lq_zero_sum`]: `1 − c₁u₁ + ρu₂ = 0`, `1 + c₂u₂ + ρu₁ = 0`.
    pub fn lq_saddle(p: &LqParams) -> (f64, f64) {
        let det = -p.c1 * p.c2 - p.rho * p.rho;
        let u1 = (p.rho - p.c2) / det;
        let u2 = (p.c1 + p.rho) / det;
        (u1, u2)
    }

    /// State-free zero-sum game with payoff `−(u₁−a)² + (u₂−b)² + ρ(u₁−a)(u₂−b)`
    /// per unit time and a diffusive state that does not enter the payoff.
    pub fn matrix_game(a: f64, b: f64, rho: f64) -> Result<GameSpec> {
        let p = LqParams { steps: 4, ..Default::default() };
        let (model, mut c) = model(&p)?;
        c.control_loading = [0.0, 0.0];
        let p1 = PlayerSpec {
            running: Arc::new(move |_, _, _, u| {
                let (d1, d2) = (u[0] - a, u[1] - b);
                -d1 * d1 + d2 * d2 + rho * d1 * d2
            }),
            terminal: Arc::new(|_, _| 0.0),
            utility: Arc::new(|_| 0.0),
            utility_derivative: Arc::new(|_| 0.0),
            bsde: BsdeSpec::new(None, Terminal::map(|_, _| 0.0), vec![]),
            control_box: ControlBox::unbounded(),
        };
        Ok(GameSpec {
            coefficients: Arc::new(c),
            model,
            x0: 0.0,
            players: [p1.clone(), p1],
            zero_sum: true,
            basis: Arc::new(PolynomialBasis::default()),
            workers: 1,
        })
    }
}
