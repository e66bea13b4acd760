//! Backward SDEs
//! `dY = −g(t, X, α, Y, Z, ∫Kρν, V, u) dt + Z dB + ∫ K Ñ_α(dt,dζ) + V·dΦ̃`, `Y(T) = h`.
//!
//! The solver is a least-squares Monte Carlo scheme stratified by regime:
//! conditional expectations at each step are projections on a basis in `X`,
//! fitted separately for every regime.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use smallvec::SmallVec;

use crate::chain::{switch_increments, RateMatrix};
use crate::drivers::{compensated_jump_increment, SizeFn};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::parallel::map_paths;
use crate::sde::{simulate_state, ControlPair, Controls, ForwardCoefficients, PathNoise, RegimeModel};
use crate::stats::Estimate;

/// Arguments of a driver evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DriverInput<'a> {
    pub t: f64,
    pub x: f64,
    pub regime: usize,
    pub y: f64,
    pub z: f64,
    /// `∫ K ρ_l ν_α` for each declared functional `ρ_l`.
    pub k: &'a [f64],
    /// `V_j` for each regime (zero for the current one).
    pub v: &'a [f64],
    pub u: Controls,
    /// Per-path multiplier of the batch (the adjoint `A`), 1 when absent.
    pub scale: f64,
}

/// BSDE driver `g`.
pub trait Driver: Send + Sync {
    fn eval(&self, a: &DriverInput) -> f64;
}

impl<F> Driver for F
where
    F: Fn(&DriverInput) -> f64 + Send + Sync,
{
    fn eval(&self, a: &DriverInput) -> f64 {
        self(a)
    }
}

/// Terminal condition.
#[derive(Clone)]
pub enum Terminal {
    /// `h(x, regime)`.
    Map(Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>),
    /// One value per path of the batch.
    Values(Vec<f64>),
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Map(_) => f.write_str("Map(..)"),
            Terminal::Values(v) => write!(f, "Values(len {})", v.len()),
        }
    }
}

impl Terminal {
    pub fn map<F: Fn(f64, usize) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Terminal::Map(Arc::new(f))
    }
}

/// Driver, terminal map and the jump functionals `ρ_l` through which `K`
/// enters the driver.
#[derive(Clone)]
pub struct BsdeSpec {
    /// `None` is the zero driver.
    pub driver: Option<Arc<dyn Driver>>,
    pub terminal: Terminal,
    pub functionals: Vec<SizeFn>,
}

impl fmt::Debug for BsdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeSpec")
            .field("driver", &self.driver.as_ref().map(|_| ".."))
            .field("terminal", &self.terminal)
            .field("functionals", &self.functionals)
            .finish()
    }
}

impl BsdeSpec {
    pub fn new(driver: Option<Arc<dyn Driver>>, terminal: Terminal, functionals: Vec<SizeFn>) -> Self {
        Self { driver, terminal, functionals }
    }

    pub fn with_driver<D: Driver + 'static>(driver: D, terminal: Terminal, functionals: Vec<SizeFn>) -> Self {
        Self { driver: Some(Arc::new(driver)), terminal, functionals }
    }
}

/// Regression basis in the state variable. The fit always includes an intercept.
pub trait Basis: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, x: f64, out: &mut [f64]);
    fn describe(&self) -> String;
}

/// `1, x, …, x^degree`.
#[derive(Debug, Clone, Copy)]
pub struct PolynomialBasis {
    pub degree: usize,
}

impl Default for PolynomialBasis {
    fn default() -> Self {
        Self { degree: 3 }
    }
}

impl Basis for PolynomialBasis {
    fn dim(&self) -> usize {
        self.degree + 1
    }
    fn features(&self, x: f64, out: &mut [f64]) {
        let mut p = 1.0;
        for o in out.iter_mut().take(self.degree + 1) {
            *o = p;
            p *= x;
        }
    }
    fn describe(&self) -> String {
        format!("polynomial(degree={})", self.degree)
    }
}

/// `1, e^{−r₁x}, e^{−r₂x}, …`.
#[derive(Debug, Clone)]
pub struct ExponentialBasis {
    pub rates: Vec<f64>,
}

impl Basis for ExponentialBasis {
    fn dim(&self) -> usize {
        self.rates.len() + 1
    }
    fn features(&self, x: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for (o, r) in out[1..].iter_mut().zip(&self.rates) {
            *o = (-r * x).exp();
        }
    }
    fn describe(&self) -> String {
        format!("exponential(rates={:?})", self.rates)
    }
}

/// Arbitrary feature functions.
#[derive(Clone)]
pub struct FunctionBasis {
    pub functions: Vec<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    pub name: String,
}

impl Basis for FunctionBasis {
    fn dim(&self) -> usize {
        self.functions.len()
    }
    fn features(&self, x: f64, out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.functions) {
            *o = f(x);
        }
    }
    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// Simulated paths in time-major, struct-of-arrays layout.
///
/// Chain and jump-functional increments are stored sparsely: a step in which
/// no chain transition and no jump occurs has increments implied by the
/// regime at its left end.
pub struct PathBatch {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub rates: RateMatrix,
    /// State, index `k * n_paths + i`.
    pub x: Vec<f64>,
    /// Regime, index `k * n_paths + i`.
    pub regime: Vec<u8>,
    /// Brownian increments, index `k * n_paths + i`.
    pub db: Vec<f64>,
    pub functionals: Vec<SizeFn>,
    /// `∫ ρ_l ν_n`, indexed `[l][n]`.
    pub nu_rho: Vec<Vec<f64>>,
    /// Irregular steps: `(path, ΔΦ̃ per regime, compensated ρ_l increments)`.
    pub irregular: Vec<Vec<IrregularStep>>,
    /// Optional per-path multiplier of the basis, index `k * n_paths + i`.
    pub scale: Option<Vec<f64>>,
    /// Controls used to simulate `x` (re-evaluated when the driver needs `u`).
    pub controls: Option<ControlPair>,
}

#[derive(Debug, Clone)]
pub struct IrregularStep {
    pub path: u32,
    pub dphi: SmallVec<[f64; 4]>,
    pub djump: SmallVec<[f64; 2]>,
}

/// What one path contributes to a batch.
#[derive(Debug, Clone)]
pub struct PathRecord {
    pub x: Vec<f64>,
    pub regime: Vec<u8>,
    pub db: Vec<f64>,
    pub irregular: Vec<(usize, IrregularStep)>,
}

impl PathRecord {
    /// Extract the increments needed by the solver from a simulated path.
    pub fn new(model: &RegimeModel, path: &PathNoise, x: Vec<f64>, nu_rho: &[Vec<f64>], functionals: &[SizeFn]) -> Self {
        let m = model.grid.steps();
        let regime: Vec<u8> = path.chain.regimes().iter().map(|&r| r as u8).collect();
        let mut irregular = Vec::new();
        for k in 0..m {
            let (t0, t1) = (model.grid.t(k), model.grid.t(k + 1));
            let has_switch = !path.chain.jumps_in(t0, t1).is_empty();
            let has_jump = !path.noise.step_events(k).is_empty();
            if !(has_switch || has_jump) {
                continue;
            }
            let (dphi, dcomp) = switch_increments(&path.chain, &model.rates, k);
            let dphi: SmallVec<[f64; 4]> = dphi.iter().zip(&dcomp).map(|(a, b)| a - b).collect();
            let djump: SmallVec<[f64; 2]> = functionals
                .iter()
                .zip(nu_rho)
                .map(|(rho, nu)| compensated_jump_increment(&path.chain, &path.noise, rho, nu, k))
                .collect();
            irregular.push((k, IrregularStep { path: 0, dphi, djump }));
        }
        Self { x, regime, db: path.noise.brownian.clone(), irregular }
    }
}

impl PathBatch {
    /// Transpose per-path records into a batch.
    pub fn from_records(model: &RegimeModel, functionals: Vec<SizeFn>, records: Vec<PathRecord>) -> Result<Self> {
        let nu_rho = nu_table(model, &functionals)?;
        let n = records.len();
        let m = model.grid.steps();
        let mut x = vec![0.0; (m + 1) * n];
        let mut regime = vec![0u8; (m + 1) * n];
        let mut db = vec![0.0; m * n];
        let mut irregular: Vec<Vec<IrregularStep>> = vec![Vec::new(); m];
        for (i, r) in records.into_iter().enumerate() {
            if r.x.len() != m + 1 || r.regime.len() != m + 1 || r.db.len() != m {
                return Err(Error::Dimension(format!("path {i} does not match the grid")));
            }
            for k in 0..=m {
                x[k * n + i] = r.x[k];
                regime[k * n + i] = r.regime[k];
            }
            for k in 0..m {
                db[k * n + i] = r.db[k];
            }
            for (k, mut s) in r.irregular {
                s.path = i as u32;
                irregular[k].push(s);
            }
        }
        Ok(Self {
            grid: model.grid.clone(),
            n_paths: n,
            rates: model.rates.clone(),
            x,
            regime,
            db,
            functionals,
            nu_rho,
            irregular,
            scale: None,
            controls: None,
        })
    }

    /// Simulate `n_paths` state paths under `controls` and collect them.
    #[allow(clippy::too_many_arguments)]
    pub fn simulate(
        model: &RegimeModel,
        coeffs: &dyn ForwardCoefficients,
        controls: &ControlPair,
        x0: f64,
        n_paths: usize,
        seed: u64,
        functionals: Vec<SizeFn>,
        workers: usize,
    ) -> Result<Self> {
        let nu_rho = nu_table(model, &functionals)?;
        let records = map_paths(n_paths, workers, |i| {
            let p = model.sample_path(seed, i as u64)?;
            let s = simulate_state(coeffs, controls, model, &p, x0)?;
            Ok(PathRecord::new(model, &p, s.x, &nu_rho, &functionals))
        })?;
        let mut b = Self::from_records(model, functionals, records)?;
        b.controls = Some(controls.clone());
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.rates.dim()
    }

    pub fn x_at(&self, k: usize, i: usize) -> f64 {
        self.x[k * self.n_paths + i]
    }

    pub fn regime_at(&self, k: usize, i: usize) -> usize {
        self.regime[k * self.n_paths + i] as usize
    }

    pub fn terminal_states(&self) -> &[f64] {
        let m = self.grid.steps();
        &self.x[m * self.n_paths..]
    }

    fn scale_at(&self, k: usize, i: usize) -> f64 {
        self.scale.as_ref().map_or(1.0, |s| s[k * self.n_paths + i])
    }

    /// Dense `ΔΦ̃` and jump-functional increments of step `k` for every path.
    fn step_increments(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_paths;
        let d = self.dim();
        let l = self.functionals.len();
        let dt = self.grid.dt(k);
        let mut dphi = vec![0.0; n * d];
        let mut djump = vec![0.0; n * l];
        for i in 0..n {
            let r = self.regime_at(k, i);
            for j in 0..d {
                if j != r {
                    dphi[i * d + j] = -self.rates.rate(r, j) * dt;
                }
            }
            for f in 0..l {
                djump[i * l + f] = -self.nu_rho[f][r] * dt;
            }
        }
        for s in &self.irregular[k] {
            let i = s.path as usize;
            dphi[i * d..(i + 1) * d].copy_from_slice(&s.dphi);
            djump[i * l..(i + 1) * l].copy_from_slice(&s.djump);
        }
        (dphi, djump)
    }
}

fn nu_table(model: &RegimeModel, functionals: &[SizeFn]) -> Result<Vec<Vec<f64>>> {
    functionals.iter().map(|rho| model.levy.nu_integrals(rho)).collect()
}

/// Least-squares fit of one target in one regime stratum at one step:
/// `intercept + Σ slope_i · (φ_i − mean_i)/sd_i`.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

/// Standardization and the retained features of a stratum fit.
#[derive(Debug, Clone)]
pub struct StratumFit {
    /// Feature indices kept (non-constant columns).
    pub active: Vec<usize>,
    pub mean: Vec<f64>,
    pub inv_sd: Vec<f64>,
    /// Targets: `E[Y_{k+1}]`, `Z`, `K_l`, `V_j`.
    pub coef: Vec<Coefficients>,
}

impl StratumFit {
    fn evaluate(&self, target: usize, feats: &[f64]) -> f64 {
        let c = &self.coef[target];
        let mut v = c.intercept;
        for (s, (&a, (m, is))) in c.slopes.iter().zip(self.active.iter().zip(self.mean.iter().zip(&self.inv_sd))) {
            v += s * (feats[a] - m) * is;
        }
        v
    }
}

/// Indices of the regression targets stored in a [`StratumFit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Conditional expectation of `Y(t_{k+1})`.
    Continuation,
    Z,
    /// `∫ K ρ_l ν`.
    K(usize),
    /// `V_j`.
    V(usize),
}

/// Conditional noise scale `ψ(x, regime) > 0` of the regressands.
pub type NoiseScale = Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>;

/// Solver settings.
#[derive(Clone)]
pub struct RegressionOptions {
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Keep `Y` at every grid point and path.
    pub keep_y: bool,
    /// Relative eigenvalue cut-off for rank deficiency.
    pub rank_tol: f64,
    /// Weighted least squares with row weights `1/ψ²` when set.
    pub noise_scale: Option<NoiseScale>,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self { picard_tol: 1e-10, picard_max_iter: 50, keep_y: false, rank_tol: 1e-10, noise_scale: None }
    }
}

impl fmt::Debug for RegressionOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionOptions")
            .field("picard_tol", &self.picard_tol)
            .field("picard_max_iter", &self.picard_max_iter)
            .field("keep_y", &self.keep_y)
            .field("rank_tol", &self.rank_tol)
            .field("weighted", &self.noise_scale.is_some())
            .finish()
    }
}

/// Output of the regression solver.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub n_functionals: usize,
    /// `Y(0)` by path (identical for paths sharing the initial state and regime).
    pub y0: Vec<f64>,
    /// Pathwise samples `h + Σ g Δt` whose mean estimates `Y(0)`.
    pub y0_samples: Vec<f64>,
    /// `Y`, index `k * n_paths + i`, when requested.
    pub y: Option<Vec<f64>>,
    /// Fits by step then regime (`None` for regimes not visited at that step).
    pub fits: Vec<Vec<Option<StratumFit>>>,
    pub basis: String,
    pub warnings: Vec<String>,
}

impl BsdeSolution {
    /// Mean of `Y(0)` over paths with the Monte Carlo error of the pathwise samples.
    pub fn y0_estimate(&self) -> Estimate {
        let mean = self.y0.iter().sum::<f64>() / self.y0.len() as f64;
        let e = Estimate::from_samples(&self.y0_samples);
        Estimate { mean, stderr: e.stderr, n: e.n }
    }

    pub fn target_index(&self, t: Target) -> usize {
        match t {
            Target::Continuation => 0,
            Target::Z => 1,
            Target::K(l) => 2 + l,
            Target::V(j) => 2 + self.n_functionals + j,
        }
    }

    /// Fitted value of `target` at step `k` for state `x`, regime `regime`
    /// and basis multiplier `scale`; `None` when the regime was not visited.
    pub fn predict(&self, basis: &dyn Basis, k: usize, target: Target, x: f64, regime: usize, scale: f64) -> Option<f64> {
        let fit = self.fits.get(k)?.get(regime)?.as_ref()?;
        let mut f = vec![0.0; basis.dim()];
        basis.features(x, &mut f);
        for v in f.iter_mut() {
            *v *= scale;
        }
        Some(fit.evaluate(self.target_index(target), &f))
    }

    pub fn y_at(&self, k: usize, i: usize) -> Option<f64> {
        self.y.as_ref().map(|y| y[k * self.n_paths + i])
    }
}

/// Least-squares Monte Carlo solution of the BSDE on a batch.
pub fn solve_bsde_regression(
    spec: &BsdeSpec,
    batch: &PathBatch,
    basis: &dyn Basis,
    opts: &RegressionOptions,
) -> Result<BsdeSolution> {
    let n = batch.n_paths;
    let m = batch.grid.steps();
    let d = batch.dim();
    let nf = spec.functionals.len();
    let p = basis.dim();
    if nf != batch.functionals.len() {
        return Err(Error::Dimension(format!(
            "spec declares {nf} jump functionals, batch carries {}",
            batch.functionals.len()
        )));
    }
    if n < 10 * p {
        return Err(Error::Domain(format!("batch of {n} paths is below 10 x basis dimension {p}")));
    }
    let mut warnings = Vec::new();
    let mut y_next: Vec<f64> = match &spec.terminal {
        Terminal::Map(h) => (0..n).map(|i| h(batch.x_at(m, i), batch.regime_at(m, i))).collect(),
        Terminal::Values(v) => {
            if v.len() != n {
                return Err(Error::Dimension(format!("{} terminal values for {n} paths", v.len())));
            }
            v.clone()
        }
    };
    if let Some(i) = y_next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("terminal value of path {i}")));
    }
    let mut y_all = if opts.keep_y { Some(vec![0.0; (m + 1) * n]) } else { None };
    if let Some(y) = y_all.as_mut() {
        y[m * n..].copy_from_slice(&y_next);
    }
    let mut samples = y_next.clone();
    let mut fits: Vec<Vec<Option<StratumFit>>> = vec![Vec::new(); m];
    let n_targets = 2 + nf + d;
    let needs_u = spec.driver.is_some() && batch.controls.is_some();

    let mut y_cur = vec![0.0; n];
    let mut feats = vec![0.0; n * p];
    for k in (0..m).rev() {
        let t = batch.grid.t(k);
        let dt = batch.grid.dt(k);
        let (dphi, djump) = batch.step_increments(k);
        for i in 0..n {
            let s = batch.scale_at(k, i);
            let f = &mut feats[i * p..(i + 1) * p];
            basis.features(batch.x_at(k, i), f);
            if s != 1.0 {
                for v in f.iter_mut() {
                    *v *= s;
                }
            }
        }
        let weights: Option<Vec<f64>> = match &opts.noise_scale {
            None => None,
            Some(psi) => {
                let w: Vec<f64> = (0..n)
                    .map(|i| {
                        let s = psi(batch.x_at(k, i), batch.regime_at(k, i));
                        1.0 / (s * s)
                    })
                    .collect();
                if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::Domain(format!("noise scale at step {k}, path {i} gives weight {}", w[i])));
                }
                Some(w)
            }
        };
        let mut z = vec![0.0; n];
        let mut kf = vec![0.0; n * nf];
        let mut v = vec![0.0; n * d];
        let mut step_fits: Vec<Option<StratumFit>> = vec![None; d];
        for r in 0..d {
            let idx: Vec<usize> = (0..n).filter(|&i| batch.regime_at(k, i) == r).collect();
            if idx.is_empty() {
                continue;
            }
            let design = Design::new(&feats, p, &idx, weights.as_deref(), opts.rank_tol, k, r, &mut warnings);
            let cont = design.fit(&idx, |i| y_next[i]);
            let resid: Vec<f64> = idx.iter().map(|&i| y_next[i] - design.eval(&cont, &feats[i * p..(i + 1) * p])).collect();
            let mut coefs = vec![Coefficients { intercept: 0.0, slopes: vec![] }; n_targets];
            // Martingale-increment regressions on the centred continuation value.
            let cz = design.fit_indexed(&idx, |pos, i| resid[pos] * batch.db[k * n + i] / dt);
            for (pos, &i) in idx.iter().enumerate() {
                let _ = pos;
                z[i] = design.eval(&cz, &feats[i * p..(i + 1) * p]);
            }
            coefs[1] = cz;
            for l in 0..nf {
                let c = design.fit_indexed(&idx, |pos, i| resid[pos] * djump[i * nf + l] / dt);
                for &i in &idx {
                    kf[i * nf + l] = design.eval(&c, &feats[i * p..(i + 1) * p]);
                }
                coefs[2 + l] = c;
            }
            for j in 0..d {
                let rate = batch.rates.rate(r, j);
                if j == r || rate <= 0.0 {
                    coefs[2 + nf + j] = Coefficients { intercept: 0.0, slopes: vec![0.0; design.active.len()] };
                    continue;
                }
                let c = design.fit_indexed(&idx, |pos, i| resid[pos] * dphi[i * d + j] / (rate * dt));
                for &i in &idx {
                    v[i * d + j] = design.eval(&c, &feats[i * p..(i + 1) * p]);
                }
                coefs[2 + nf + j] = c;
            }
            for &i in &idx {
                y_cur[i] = design.eval(&cont, &feats[i * p..(i + 1) * p]);
            }
            coefs[0] = cont;
            step_fits[r] = Some(StratumFit {
                active: design.active.clone(),
                mean: design.mean.clone(),
                inv_sd: design.inv_sd.clone(),
                coef: coefs,
            });
        }
        fits[k] = step_fits;
        if let Some(g) = &spec.driver {
            for i in 0..n {
                let x = batch.x_at(k, i);
                let r = batch.regime_at(k, i);
                let u = if needs_u {
                    batch.controls.as_ref().unwrap().at(k, t, x, r)
                } else {
                    [0.0, 0.0]
                };
                let base = y_cur[i];
                let input = |y: f64| DriverInput {
                    t,
                    x,
                    regime: r,
                    y,
                    z: z[i],
                    k: &kf[i * nf..(i + 1) * nf],
                    v: &v[i * d..(i + 1) * d],
                    u,
                    scale: batch.scale_at(k, i),
                };
                let mut y = base;
                let mut gv = g.eval(&input(y));
                let mut converged = false;
                for _ in 0..opts.picard_max_iter {
                    let next = base + gv * dt;
                    let delta = (next - y).abs();
                    y = next;
                    gv = g.eval(&input(y));
                    if delta <= opts.picard_tol * y.abs().max(1.0) {
                        converged = true;
                        break;
                    }
                }
                if !converged || !y.is_finite() {
                    return Err(Error::Convergence(format!(
                        "implicit step for Y at t = {t}, path {i} did not converge in {} iterations",
                        opts.picard_max_iter
                    )));
                }
                y_cur[i] = y;
                samples[i] += gv * dt;
            }
        }
        if let Some(y) = y_all.as_mut() {
            y[k * n..(k + 1) * n].copy_from_slice(&y_cur);
        }
        std::mem::swap(&mut y_next, &mut y_cur);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(BsdeSolution {
        grid: batch.grid.clone(),
        n_paths: n,
        dim: d,
        n_functionals: nf,
        y0: y_next,
        y0_samples: samples,
        y: y_all,
        fits,
        basis: basis.describe(),
        warnings,
    })
}

/// Standardized (optionally weighted) design of one stratum and its
/// (pseudo-)inverse Gram matrix.
struct Design {
    p: usize,
    active: Vec<usize>,
    mean: Vec<f64>,
    inv_sd: Vec<f64>,
    /// Pseudo-inverse of `SᵀWS` for the standardized active columns.
    pinv: DMatrix<f64>,
    /// Columns of the standardized design, column-major over the stratum rows.
    cols: Vec<f64>,
    /// Row weights normalized to sum to one.
    w: Vec<f64>,
    rows: usize,
}

impl Design {
    #[allow(clippy::too_many_arguments)]
    fn new(
        feats: &[f64],
        p: usize,
        idx: &[usize],
        weights: Option<&[f64]>,
        rank_tol: f64,
        k: usize,
        r: usize,
        warnings: &mut Vec<String>,
    ) -> Self {
        let rows = idx.len();
        let mut w: Vec<f64> = match weights {
            Some(all) => idx.iter().map(|&i| all[i]).collect(),
            None => vec![1.0; rows],
        };
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        let mut mean = vec![0.0; p];
        for (row, &i) in idx.iter().enumerate() {
            for c in 0..p {
                mean[c] += w[row] * feats[i * p + c];
            }
        }
        let mut var = vec![0.0; p];
        for (row, &i) in idx.iter().enumerate() {
            for c in 0..p {
                let d = feats[i * p + c] - mean[c];
                var[c] += w[row] * d * d;
            }
        }
        let mut active = Vec::new();
        let mut inv_sd = Vec::new();
        let mut act_mean = Vec::new();
        for c in 0..p {
            let sd = var[c].sqrt();
            if sd > 1e-12 * (mean[c].abs() + 1e-300) && sd > 0.0 {
                active.push(c);
                inv_sd.push(1.0 / sd);
                act_mean.push(mean[c]);
            }
        }
        let has_spread = !active.is_empty();
        if rows < p + 1 {
            if has_spread {
                warnings.push(format!(
                    "step {k}, regime {}: {rows} paths for {p} basis functions, using the stratum mean",
                    r + 1
                ));
            }
            return Self::mean_only(p, rows, w);
        }
        let q = active.len();
        let mut cols = vec![0.0; q * rows];
        for (a, &c) in active.iter().enumerate() {
            for (row, &i) in idx.iter().enumerate() {
                cols[a * rows + row] = (feats[i * p + c] - act_mean[a]) * inv_sd[a];
            }
        }
        let mut gram = DMatrix::<f64>::zeros(q, q);
        for a in 0..q {
            for b in 0..=a {
                let s: f64 = cols[a * rows..(a + 1) * rows]
                    .iter()
                    .zip(&cols[b * rows..(b + 1) * rows])
                    .zip(&w)
                    .map(|((u, v), wt)| wt * u * v)
                    .sum();
                gram[(a, b)] = s;
                gram[(b, a)] = s;
            }
        }
        let pinv = if q == 0 {
            gram
        } else {
            let eig = SymmetricEigen::new(gram);
            let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
            let mut dropped = 0;
            let mut inv = DMatrix::<f64>::zeros(q, q);
            for (e, &lam) in eig.eigenvalues.iter().enumerate() {
                if lam > rank_tol * lmax {
                    let v = eig.eigenvectors.column(e);
                    inv += (v * v.transpose()) / lam;
                } else {
                    dropped += 1;
                }
            }
            if dropped > 0 {
                warnings.push(format!(
                    "step {k}, regime {}: rank-deficient design, basis reduced by {dropped}",
                    r + 1
                ));
            }
            inv
        };
        Self { p, active, mean: act_mean, inv_sd, pinv, cols, w, rows }
    }

    fn mean_only(p: usize, rows: usize, w: Vec<f64>) -> Self {
        Self { p, active: vec![], mean: vec![], inv_sd: vec![], pinv: DMatrix::zeros(0, 0), cols: vec![], w, rows }
    }

    fn fit(&self, idx: &[usize], target: impl Fn(usize) -> f64) -> Coefficients {
        self.fit_indexed(idx, |_, i| target(i))
    }

    fn fit_indexed(&self, idx: &[usize], target: impl Fn(usize, usize) -> f64) -> Coefficients {
        let ys: Vec<f64> = idx.iter().enumerate().map(|(pos, &i)| target(pos, i)).collect();
        let intercept = ys.iter().zip(&self.w).map(|(y, w)| w * y).sum::<f64>();
        let q = self.active.len();
        if q == 0 {
            return Coefficients { intercept, slopes: vec![] };
        }
        let mut rhs = nalgebra::DVector::<f64>::zeros(q);
        for a in 0..q {
            rhs[a] = self.cols[a * self.rows..(a + 1) * self.rows]
                .iter()
                .zip(&ys)
                .zip(&self.w)
                .map(|((u, y), w)| w * u * (y - intercept))
                .sum();
        }
        let beta = &self.pinv * rhs;
        Coefficients { intercept, slopes: beta.iter().copied().collect() }
    }

    fn eval(&self, c: &Coefficients, feats: &[f64]) -> f64 {
        debug_assert_eq!(feats.len(), self.p);
        let mut v = c.intercept;
        for (a, &col) in self.active.iter().enumerate() {
            v += c.slopes[a] * (feats[col] - self.mean[a]) * self.inv_sd[a];
        }
        v
    }
}

/// Closed-form candidate solution `(Y, Z, ∫Kρν, V)` indexed by grid point.
pub trait CandidateSolution: Sync {
    fn y(&self, k: usize, x: f64, regime: usize) -> f64;
    fn z(&self, k: usize, x: f64, regime: usize) -> f64;
    /// `∫ K ρ_l ν_regime` for each functional of the spec.
    fn k_functionals(&self, k: usize, x: f64, regime: usize) -> Vec<f64>;
    fn v(&self, k: usize, x: f64, regime: usize) -> Vec<f64>;
}

/// Defect statistics of a candidate solution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `(t_k, max |defect|)` by grid point.
    pub per_step: Vec<(f64, f64)>,
    pub points: usize,
}

/// `dt`-term defect of a candidate `Y = Φ(t, X, α)`:
/// `∂_tΦ + b∂_xΦ + ½σ²∂_xxΦ + ∫[Φ(x+γ) − Φ − γ∂_xΦ]ν + Σ_j [Φ(x+η_j, j) − Φ − η_j∂_xΦ]λ_nj + g`,
/// evaluated at the supplied `(k, x, regime)` points with the candidate's `Z, K, V`.
///
/// Time derivatives use five-point stencils over neighbouring grid points,
/// space derivatives five-point central differences.
pub fn residual_of_ansatz(
    spec: &BsdeSpec,
    coeffs: &dyn ForwardCoefficients,
    controls: &ControlPair,
    model: &RegimeModel,
    candidate: &dyn CandidateSolution,
    points: &[(usize, f64, usize)],
) -> Result<ResidualReport> {
    let grid = &model.grid;
    let m = grid.steps();
    let d = model.dim();
    let mut per_step: Vec<(f64, f64)> = (0..=m).map(|k| (grid.t(k), 0.0)).collect();
    let mut sum = 0.0;
    let mut max_abs = 0.0f64;
    for &(k, x, n) in points {
        let t = grid.t(k);
        let u = controls.at(k.min(m.saturating_sub(1)), t, x, n);
        let phi = |kk: usize, xx: f64, nn: usize| candidate.y(kk, xx, nn);
        let y = phi(k, x, n);
        let dt_phi = time_derivative(grid, k, |kk| phi(kk, x, n));
        let h1 = 1e-3 * (1.0 + x.abs());
        let dx = (phi(k, x - 2.0 * h1, n) - 8.0 * phi(k, x - h1, n) + 8.0 * phi(k, x + h1, n) - phi(k, x + 2.0 * h1, n))
            / (12.0 * h1);
        let h2 = 1e-2 * (1.0 + x.abs());
        let dxx = (-phi(k, x - 2.0 * h2, n) + 16.0 * phi(k, x - h2, n) - 30.0 * y + 16.0 * phi(k, x + h2, n)
            - phi(k, x + 2.0 * h2, n))
            / (12.0 * h2 * h2);
        let b = coeffs.drift(t, x, n, u);
        let s = coeffs.diffusion(t, x, n, u);
        let gamma = coeffs.jump(t, x, n, u);
        let mut drift = dt_phi + b * dx + 0.5 * s * s * dxx;
        if model.levy.intensity(n) > 0.0 && !gamma.is_zero() {
            drift += model.levy.nu_integral_map(n, |z| {
                let g = gamma.eval(z);
                phi(k, x + g, n) - y - g * dx
            })?;
        }
        for j in 0..d {
            if j == n {
                continue;
            }
            let rate = model.rates.rate(n, j);
            if rate == 0.0 {
                continue;
            }
            let eta = coeffs.switch(t, x, n, u, j);
            drift += (phi(k, x + eta, j) - y - eta * dx) * rate;
        }
        let g = match &spec.driver {
            None => 0.0,
            Some(g) => {
                let kf = candidate.k_functionals(k, x, n);
                let v = candidate.v(k, x, n);
                g.eval(&DriverInput {
                    t,
                    x,
                    regime: n,
                    y,
                    z: candidate.z(k, x, n),
                    k: &kf,
                    v: &v,
                    u,
                    scale: 1.0,
                })
            }
        };
        let defect = (drift + g).abs();
        if !defect.is_finite() {
            return Err(Error::NonFinite(format!("defect at t = {t}, x = {x}")));
        }
        sum += defect;
        max_abs = max_abs.max(defect);
        per_step[k].1 = per_step[k].1.max(defect);
    }
    Ok(ResidualReport {
        max_abs,
        mean_abs: if points.is_empty() { 0.0 } else { sum / points.len() as f64 },
        per_step,
        points: points.len(),
    })
}

/// Fourth-order finite difference in time over grid values (uniform spacing
/// assumed locally; one-sided near the ends).
fn time_derivative<F: Fn(usize) -> f64>(grid: &TimeGrid, k: usize, f: F) -> f64 {
    let m = grid.steps();
    if m < 4 {
        let (a, b) = if k == m { (k - 1, k) } else { (k, k + 1) };
        return (f(b) - f(a)) / (grid.t(b) - grid.t(a));
    }
    let h = if k < m { grid.dt(k) } else { grid.dt(k - 1) };
    let s = if k >= 2 && k + 2 <= m {
        (f(k - 2) - 8.0 * f(k - 1) + 8.0 * f(k + 1) - f(k + 2)) / 12.0
    } else if k < 2 {
        (-25.0 * f(k) + 48.0 * f(k + 1) - 36.0 * f(k + 2) + 16.0 * f(k + 3) - 3.0 * f(k + 4)) / 12.0
    } else {
        (25.0 * f(k) - 48.0 * f(k - 1) + 36.0 * f(k - 2) - 16.0 * f(k - 3) + 3.0 * f(k - 4)) / 12.0
    };
    s / h
}

/// Solve the adjoint BSDE `dp = −∂_xH dt + q dB + ∫ r Ñ + w·dΦ̃` with terminal
/// values `p(T)` per path, using the regression machinery with the adjoint
/// `A` as basis multiplier. `dh_dx` is `∂H/∂x` as a driver (its `y, z, k, v`
/// arguments are `p, q, ∫rρν, w`, and `scale` is `A`).
pub fn solve_adjoint_bsde(
    dh_dx: Option<Arc<dyn Driver>>,
    terminal: Vec<f64>,
    adjoint_a: Option<Vec<f64>>,
    mut batch: PathBatch,
    basis: &dyn Basis,
    opts: &RegressionOptions,
) -> Result<(BsdeSolution, PathBatch)> {
    if let Some(a) = &adjoint_a {
        if a.len() != batch.x.len() {
            return Err(Error::Dimension("adjoint multiplier does not match the batch".into()));
        }
    }
    batch.scale = adjoint_a;
    let spec = BsdeSpec::new(dh_dx, Terminal::Values(terminal), batch.functionals.clone());
    let sol = solve_bsde_regression(&spec, &batch, basis, opts)?;
    Ok((sol, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{JumpSizeDist, RegimeLevyMeasure};
    use crate::sde::AffineCoefficients;

    fn bm_model(steps: usize) -> RegimeModel {
        RegimeModel::new(
            RateMatrix::single(),
            RegimeLevyMeasure::none(1),
            TimeGrid::uniform(1.0, steps).unwrap(),
            0,
        )
        .unwrap()
    }

    fn bm_coeffs() -> AffineCoefficients {
        let mut c = AffineCoefficients::zero(1);
        c.vol = vec![1.0];
        c
    }

    #[test]
    fn constant_driver_integrates_exactly() {
        let model = bm_model(16);
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.0, 200, 1, vec![], 1).unwrap();
        let c = 0.7;
        let spec = BsdeSpec::with_driver(move |_: &DriverInput| c, Terminal::map(|_, _| 0.0), vec![]);
        let opts = RegressionOptions { keep_y: true, ..Default::default() };
        let sol = solve_bsde_regression(&spec, &b, &PolynomialBasis::default(), &opts).unwrap();
        for k in 0..=16 {
            let expect = c * (1.0 - model.grid.t(k));
            for i in 0..200 {
                assert!((sol.y_at(k, i).unwrap() - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn terminal_condition_is_exact() {
        let model = bm_model(8);
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.3, 100, 2, vec![], 1).unwrap();
        let spec = BsdeSpec::new(None, Terminal::map(|x, _| x.sin()), vec![]);
        let opts = RegressionOptions { keep_y: true, ..Default::default() };
        let sol = solve_bsde_regression(&spec, &b, &PolynomialBasis::default(), &opts).unwrap();
        for i in 0..100 {
            assert_eq!(sol.y_at(8, i).unwrap(), b.x_at(8, i).sin());
        }
    }

    #[test]
    fn too_small_batch_is_rejected() {
        let model = bm_model(4);
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.0, 30, 2, vec![], 1).unwrap();
        let spec = BsdeSpec::new(None, Terminal::map(|x, _| x), vec![]);
        assert!(solve_bsde_regression(&spec, &b, &PolynomialBasis::default(), &Default::default()).is_err());
    }

    #[test]
    fn duplicate_features_reduce_basis_with_warning() {
        let model = bm_model(4);
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.0, 400, 3, vec![], 1).unwrap();
        let basis = FunctionBasis {
            functions: vec![Arc::new(|_| 1.0), Arc::new(|x| x), Arc::new(|x| 2.0 * x)],
            name: "dup".into(),
        };
        let spec = BsdeSpec::new(None, Terminal::map(|x, _| x), vec![]);
        let sol = solve_bsde_regression(&spec, &b, &basis, &Default::default()).unwrap();
        assert!(sol.warnings.iter().any(|w| w.contains("rank-deficient")));
    }

    #[test]
    fn zero_driver_constant_candidate_has_zero_defect() {
        struct Const;
        impl CandidateSolution for Const {
            fn y(&self, _k: usize, _x: f64, _n: usize) -> f64 {
                2.5
            }
            fn z(&self, _k: usize, _x: f64, _n: usize) -> f64 {
                0.0
            }
            fn k_functionals(&self, _k: usize, _x: f64, _n: usize) -> Vec<f64> {
                vec![]
            }
            fn v(&self, _k: usize, _x: f64, _n: usize) -> Vec<f64> {
                vec![0.0, 0.0]
            }
        }
        let levy = RegimeLevyMeasure::homogeneous(2, 1.0, JumpSizeDist::Exponential { rate: 2.0 }).unwrap();
        let model =
            RegimeModel::new(RateMatrix::two_state(1.0, 2.0).unwrap(), levy, TimeGrid::uniform(1.0, 8).unwrap(), 0)
                .unwrap();
        let mut c = AffineCoefficients::zero(2);
        c.vol = vec![0.3, 0.5];
        c.jump_scale = vec![1.0, -1.0];
        let spec = BsdeSpec::new(None, Terminal::map(|_, _| 2.5), vec![]);
        let pts: Vec<_> = (0..=8).map(|k| (k, 0.1 * k as f64, k % 2)).collect();
        let r = residual_of_ansatz(&spec, &c, &ControlPair::zero(), &model, &Const, &pts).unwrap();
        assert!(r.max_abs < 1e-12, "{}", r.max_abs);
    }

    #[test]
    fn weighted_design_matches_normal_equations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, p) = (300, 3);
        let basis = PolynomialBasis { degree: 2 };
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.3 * x + 0.5 * x * x + rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        let mut feats = vec![0.0; n * p];
        for (i, x) in xs.iter().enumerate() {
            basis.features(*x, &mut feats[i * p..(i + 1) * p]);
        }
        let idx: Vec<usize> = (0..n).collect();
        let design = Design::new(&feats, p, &idx, Some(&ws), 1e-12, 0, 0, &mut Vec::new());
        let c = design.fit(&idx, |i| ys[i]);

        let x = DMatrix::from_fn(n, p, |i, c| feats[i * p + c]);
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ws.clone()));
        let lhs = x.transpose() * &w * &x;
        let rhs = x.transpose() * &w * nalgebra::DVector::from_vec(ys.clone());
        let beta = lhs.lu().solve(&rhs).unwrap();
        for i in 0..n {
            let direct: f64 = (0..p).map(|c| beta[c] * feats[i * p + c]).sum();
            assert!((design.eval(&c, &feats[i * p..(i + 1) * p]) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_fit_is_unbiased_with_matched_noise_scale() {
        let model = bm_model(8);
        let n = 5000;
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.2, n, 6, vec![], 1).unwrap();
        let spec = BsdeSpec::new(None, Terminal::map(|x, _| x * x), vec![]);
        let basis = PolynomialBasis { degree: 2 };
        // The increment of X² has conditional sd of order √(x² + Δt).
        let opts = RegressionOptions { noise_scale: Some(Arc::new(|x: f64, _| (x * x + 0.125).sqrt())), ..Default::default() };
        let e = solve_bsde_regression(&spec, &b, &basis, &opts).unwrap().y0_estimate();
        assert!((e.mean - 1.04).abs() < 4.0 * e.stderr, "{e:?}");
        let bad = RegressionOptions { noise_scale: Some(Arc::new(|_: f64, _| 0.0)), ..Default::default() };
        assert!(matches!(solve_bsde_regression(&spec, &b, &basis, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn affine_reparametrized_basis_gives_same_fit() {
        let model = bm_model(8);
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.0, 2000, 4, vec![], 1).unwrap();
        let spec = BsdeSpec::with_driver(
            |a: &DriverInput| -0.5 * a.y + 0.1 * a.z,
            Terminal::map(|x, _| (x * 0.7).cos() + x * x),
            vec![],
        );
        let opts = RegressionOptions { keep_y: true, ..Default::default() };
        let s1 = solve_bsde_regression(&spec, &b, &PolynomialBasis::default(), &opts).unwrap();
        let shifted = FunctionBasis {
            functions: vec![
                Arc::new(|_| 3.0),
                Arc::new(|x| 2.0 * x - 1.0),
                Arc::new(|x| 5.0 + x - 0.5 * x * x),
                Arc::new(|x| -x * x * x + 4.0 * x),
            ],
            name: "affine".into(),
        };
        let s2 = solve_bsde_regression(&spec, &b, &shifted, &opts).unwrap();
        let (y1, y2) = (s1.y.unwrap(), s2.y.unwrap());
        let gap = y1.iter().zip(&y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10, "{gap}");
    }

    #[test]
    fn trivial_adjoint_stays_at_one() {
        let model = bm_model(8);
        let b = PathBatch::simulate(&model, &bm_coeffs(), &ControlPair::zero(), 0.0, 200, 5, vec![], 1).unwrap();
        let opts = RegressionOptions { keep_y: true, ..Default::default() };
        let (sol, _) = solve_adjoint_bsde(None, vec![1.0; 200], None, b, &PolynomialBasis::default(), &opts).unwrap();
        for v in sol.y.as_ref().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let z = sol.predict(&PolynomialBasis::default(), 3, Target::Z, 0.4, 0, 1.0).unwrap();
        assert!(z.abs() < 1e-12);
    }
}
