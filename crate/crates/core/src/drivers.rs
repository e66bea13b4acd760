//! Brownian and regime-modulated compound Poisson noise, and the compensator
//! `ν_α(dζ)dt = λ⁰_{α} F_{α}(dζ) dt` of the jump measure.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::chain::ChainPath;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::numerics::{integrate, integrate_half_line, QUAD_REL_TOL};
use crate::rng::{stream_rng, Stream};

/// One term `coef · ζ^power · e^{rate·ζ}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub power: u32,
    pub rate: f64,
}

/// A function of the jump size `ζ`.
///
/// Sums of `ζ^k e^{aζ}` terms are closed under sums and products and have
/// analytic moments under the exponential and gamma laws; anything else is a
/// `Custom` closure integrated numerically.
#[derive(Clone)]
pub enum SizeFn {
    Terms(SmallVec<[Term; 3]>),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for SizeFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeFn::Terms(t) => f.debug_tuple("Terms").field(t).finish(),
            SizeFn::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl SizeFn {
    pub fn zero() -> Self {
        SizeFn::Terms(SmallVec::new())
    }

    pub fn constant(c: f64) -> Self {
        Self::term(c, 0, 0.0)
    }

    /// `c · ζ`.
    pub fn linear(c: f64) -> Self {
        Self::term(c, 1, 0.0)
    }

    /// `c · ζ^power · e^{rate·ζ}`.
    pub fn term(coef: f64, power: u32, rate: f64) -> Self {
        if coef == 0.0 {
            return Self::zero();
        }
        SizeFn::Terms(smallvec![Term { coef, power, rate }])
    }

    /// `e^{βζ} − 1`.
    pub fn exp_minus_one(beta: f64) -> Self {
        Self::term(1.0, 0, beta).add(&Self::constant(-1.0))
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        SizeFn::Custom(Arc::new(f))
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            SizeFn::Terms(ts) => ts.iter().map(|t| eval_term(t, z)).sum(),
            SizeFn::Custom(f) => f(z),
        }
    }

    /// `Some(c)` when the function is the constant `c`.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            SizeFn::Terms(ts) => {
                if ts.iter().all(|t| t.power == 0 && t.rate == 0.0) {
                    Some(ts.iter().map(|t| t.coef).sum())
                } else {
                    None
                }
            }
            SizeFn::Custom(_) => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SizeFn::Terms(ts) if ts.iter().all(|t| t.coef == 0.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        match self {
            SizeFn::Terms(ts) => {
                if c == 0.0 {
                    return Self::zero();
                }
                SizeFn::Terms(ts.iter().map(|t| Term { coef: t.coef * c, ..*t }).collect())
            }
            SizeFn::Custom(f) => {
                let f = f.clone();
                SizeFn::custom(move |z| c * f(z))
            }
        }
    }

    pub fn add(&self, other: &SizeFn) -> Self {
        match (self, other) {
            (SizeFn::Terms(a), SizeFn::Terms(b)) => {
                let mut out: SmallVec<[Term; 3]> = a.clone();
                for t in b {
                    push_term(&mut out, *t);
                }
                SizeFn::Terms(out)
            }
            _ => {
                let (a, b) = (self.clone(), other.clone());
                SizeFn::custom(move |z| a.eval(z) + b.eval(z))
            }
        }
    }

    pub fn mul(&self, other: &SizeFn) -> Self {
        match (self, other) {
            (SizeFn::Terms(a), SizeFn::Terms(b)) => {
                let mut out: SmallVec<[Term; 3]> = SmallVec::new();
                for x in a {
                    for y in b {
                        push_term(&mut out, Term { coef: x.coef * y.coef, power: x.power + y.power, rate: x.rate + y.rate });
                    }
                }
                SizeFn::Terms(out)
            }
            _ => {
                let (a, b) = (self.clone(), other.clone());
                SizeFn::custom(move |z| a.eval(z) * b.eval(z))
            }
        }
    }
}

fn push_term(out: &mut SmallVec<[Term; 3]>, t: Term) {
    if t.coef == 0.0 {
        return;
    }
    if let Some(e) = out.iter_mut().find(|e| e.power == t.power && e.rate == t.rate) {
        e.coef += t.coef;
    } else {
        out.push(t);
    }
}

#[inline]
fn eval_term(t: &Term, z: f64) -> f64 {
    let mut v = t.coef;
    if t.power > 0 {
        v *= z.powi(t.power as i32);
    }
    if t.rate != 0.0 {
        v *= (t.rate * z).exp();
    }
    v
}

/// Jump-size law `F` of one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpSizeDist {
    /// Density `rate · e^{−rate·ζ}` on `(0, ∞)`.
    Exponential { rate: f64 },
    /// Gamma law with the given shape and rate.
    Gamma { shape: f64, rate: f64 },
    /// Uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
    /// Finitely many atoms with probabilities summing to one.
    Discrete { atoms: Vec<f64>, weights: Vec<f64> },
}

impl JumpSizeDist {
    pub fn point(at: f64) -> Self {
        JumpSizeDist::Discrete { atoms: vec![at], weights: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            JumpSizeDist::Exponential { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::Domain(format!("exponential rate must be positive, got {rate}")));
                }
            }
            JumpSizeDist::Gamma { shape, rate } => {
                if !(shape.is_finite() && *shape > 0.0 && rate.is_finite() && *rate > 0.0) {
                    return Err(Error::Domain(format!("gamma parameters must be positive, got ({shape}, {rate})")));
                }
            }
            JumpSizeDist::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return Err(Error::Domain(format!("uniform needs low < high, got [{low}, {high}]")));
                }
            }
            JumpSizeDist::Discrete { atoms, weights } => {
                if atoms.is_empty() || atoms.len() != weights.len() {
                    return Err(Error::Domain("discrete law needs matching non-empty atoms and weights".into()));
                }
                if atoms.iter().any(|a| !a.is_finite()) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(Error::Domain("discrete atoms must be finite and weights non-negative".into()));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("discrete weights sum to {s}, not 1")));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            JumpSizeDist::Exponential { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
            JumpSizeDist::Gamma { shape, rate } => Gamma::new(*shape, 1.0 / rate).expect("validated").sample(rng),
            JumpSizeDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            JumpSizeDist::Discrete { atoms, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (a, w) in atoms.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return *a;
                    }
                }
                *atoms.last().unwrap()
            }
        }
    }

    /// `∫ φ dF`.
    pub fn expect(&self, phi: &SizeFn) -> Result<f64> {
        match phi {
            SizeFn::Terms(ts) => {
                let mut s = 0.0;
                for t in ts {
                    s += t.coef * self.term_moment(t.power, t.rate)?;
                }
                Ok(s)
            }
            SizeFn::Custom(f) => self.expect_map(|z| f(z)),
        }
    }

    /// `∫ f dF` for an arbitrary closure (numerical unless the law is discrete).
    pub fn expect_map<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let v = match self {
            JumpSizeDist::Exponential { rate } => {
                let r = *rate;
                integrate_half_line(|z| f(z) * r * (-r * z).exp(), 0.0, QUAD_REL_TOL)?
            }
            JumpSizeDist::Gamma { shape, rate } => {
                let (s, r) = (*shape, *rate);
                let log_norm = s * r.ln() - ln_gamma(s);
                integrate_half_line(
                    |z| {
                        if z <= 0.0 {
                            return 0.0;
                        }
                        f(z) * (log_norm + (s - 1.0) * z.ln() - r * z).exp()
                    },
                    0.0,
                    QUAD_REL_TOL,
                )?
            }
            JumpSizeDist::Uniform { low, high } => integrate(&f, *low, *high, QUAD_REL_TOL)? / (high - low),
            JumpSizeDist::Discrete { atoms, weights } => atoms.iter().zip(weights).map(|(a, w)| w * f(*a)).sum(),
        };
        if !v.is_finite() {
            return Err(Error::NonIntegrable("expectation is not finite".into()));
        }
        Ok(v)
    }

    /// `E[ζ^k e^{aζ}]`.
    fn term_moment(&self, k: u32, a: f64) -> Result<f64> {
        match self {
            JumpSizeDist::Exponential { rate } => {
                if a >= *rate {
                    return Err(Error::NonIntegrable(format!("exponential moment e^({a} z) diverges for rate {rate}")));
                }
                let d = rate - a;
                Ok(rate * factorial(k) / d.powi(k as i32 + 1))
            }
            JumpSizeDist::Gamma { shape, rate } => {
                if a >= *rate {
                    return Err(Error::NonIntegrable(format!("gamma moment e^({a} z) diverges for rate {rate}")));
                }
                let d = rate - a;
                let rising: f64 = (0..k).map(|i| shape + i as f64).product();
                Ok((rate / d).powf(*shape) * rising / d.powi(k as i32))
            }
            JumpSizeDist::Uniform { low, high } => {
                let t = Term { coef: 1.0, power: k, rate: a };
                Ok(integrate(|z| eval_term(&t, z), *low, *high, QUAD_REL_TOL)? / (high - low))
            }
            JumpSizeDist::Discrete { atoms, weights } => {
                let t = Term { coef: 1.0, power: k, rate: a };
                Ok(atoms.iter().zip(weights).map(|(z, w)| w * eval_term(&t, *z)).sum())
            }
        }
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regime-indexed finite-activity jump measure: intensity `λ⁰_n` and size law `F_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLevyMeasure {
    intensity: Vec<f64>,
    dists: Vec<JumpSizeDist>,
}

impl RegimeLevyMeasure {
    pub fn new(intensity: Vec<f64>, dists: Vec<JumpSizeDist>) -> Result<Self> {
        if intensity.len() != dists.len() || intensity.is_empty() {
            return Err(Error::Dimension(format!(
                "{} intensities for {} size laws",
                intensity.len(),
                dists.len()
            )));
        }
        for (n, l) in intensity.iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(Error::Domain(format!("jump intensity of regime {} must be finite and >= 0", n + 1)));
            }
        }
        for d in &dists {
            d.validate()?;
        }
        Ok(Self { intensity, dists })
    }

    /// No jumps in any of `dim` regimes.
    pub fn none(dim: usize) -> Self {
        Self { intensity: vec![0.0; dim], dists: vec![JumpSizeDist::point(0.0); dim] }
    }

    /// Same intensity and law in every regime.
    pub fn homogeneous(dim: usize, intensity: f64, dist: JumpSizeDist) -> Result<Self> {
        Self::new(vec![intensity; dim], vec![dist; dim])
    }

    pub fn dim(&self) -> usize {
        self.intensity.len()
    }

    pub fn intensity(&self, n: usize) -> f64 {
        self.intensity[n]
    }

    pub fn dist(&self, n: usize) -> &JumpSizeDist {
        &self.dists[n]
    }

    /// `∫ φ dF_n`.
    pub fn expect(&self, n: usize, phi: &SizeFn) -> Result<f64> {
        self.dists[n].expect(phi)
    }

    /// `∫ φ ν_n(dζ) = λ⁰_n ∫ φ dF_n` (zero without evaluating when `λ⁰_n = 0`).
    pub fn nu_integral(&self, n: usize, phi: &SizeFn) -> Result<f64> {
        if self.intensity[n] == 0.0 || phi.is_zero() {
            return Ok(0.0);
        }
        Ok(self.intensity[n] * self.dists[n].expect(phi)?)
    }

    /// `∫ f(ζ) ν_n(dζ)` for an arbitrary closure.
    pub fn nu_integral_map<F: Fn(f64) -> f64>(&self, n: usize, f: F) -> Result<f64> {
        if self.intensity[n] == 0.0 {
            return Ok(0.0);
        }
        Ok(self.intensity[n] * self.dists[n].expect_map(f)?)
    }

    /// `∫ φ ν_n` for every regime.
    pub fn nu_integrals(&self, phi: &SizeFn) -> Result<Vec<f64>> {
        (0..self.dim()).map(|n| self.nu_integral(n, phi)).collect()
    }
}

/// One jump of the Poisson random measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpEvent {
    pub time: f64,
    pub size: f64,
    /// Chain state just before the event.
    pub regime: usize,
}

/// Brownian increments on the grid and the jump events of one path.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub grid: TimeGrid,
    /// `ΔB_k = B(t_{k+1}) − B(t_k)`.
    pub brownian: Vec<f64>,
    /// Events in time order.
    pub events: Vec<JumpEvent>,
}

impl NoiseBundle {
    /// Events with time in `(a, b]`.
    pub fn events_in(&self, a: f64, b: f64) -> &[JumpEvent] {
        let lo = self.events.partition_point(|e| e.time <= a);
        let hi = self.events.partition_point(|e| e.time <= b);
        &self.events[lo..hi]
    }

    /// Events in grid interval `k`.
    pub fn step_events(&self, k: usize) -> &[JumpEvent] {
        self.events_in(self.grid.t(k), self.grid.t(k + 1))
    }
}

/// Draw Brownian increments and the regime-modulated compound Poisson events.
pub fn sample_noise(grid: &TimeGrid, chain: &ChainPath, levy: &RegimeLevyMeasure, seed: u64) -> Result<NoiseBundle> {
    if levy.dim() != chain.dim() {
        return Err(Error::Dimension(format!("levy measure has {} regimes, chain {}", levy.dim(), chain.dim())));
    }
    let mut rng = stream_rng(seed, Stream::Noise);
    let brownian = (0..grid.steps())
        .map(|k| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * grid.dt(k).sqrt()
        })
        .collect();
    let horizon = grid.horizon();
    let mut events = Vec::new();
    let mut start = 0.0;
    let mut state = chain.initial();
    let mut pieces: Vec<(f64, f64, usize)> = Vec::with_capacity(chain.jumps().len() + 1);
    for j in chain.jumps() {
        pieces.push((start, j.time, state));
        start = j.time;
        state = j.to;
    }
    pieces.push((start, horizon, state));
    for (a, b, n) in pieces {
        let rate = levy.intensity(n);
        if rate <= 0.0 {
            continue;
        }
        let mut t = a;
        loop {
            let e: f64 = Exp1.sample(&mut rng);
            t += e / rate;
            if t > b {
                break;
            }
            let size = levy.dist(n).sample(&mut rng);
            events.push(JumpEvent { time: t, size, regime: n });
        }
    }
    Ok(NoiseBundle { grid: grid.clone(), brownian, events })
}

/// `∫₀ᵗ ∫ φ(ζ) ν_{α(s)}(dζ) ds = Σ_j λ⁰_j (∫ φ dF_j) 𝒥_j(t)`.
pub fn compensator_integral(levy: &RegimeLevyMeasure, chain: &ChainPath, phi: &SizeFn, t: f64) -> Result<f64> {
    if levy.dim() != chain.dim() {
        return Err(Error::Dimension(format!("levy measure has {} regimes, chain {}", levy.dim(), chain.dim())));
    }
    let occ = chain.occupation_at(t);
    let mut s = 0.0;
    for (n, o) in occ.iter().enumerate() {
        if *o > 0.0 {
            s += levy.nu_integral(n, phi)? * o;
        }
    }
    Ok(s)
}

/// Compensated jump sum of `φ` over grid interval `k`, given the per-regime
/// integrals `nu_phi[n] = ∫ φ ν_n`.
pub fn compensated_jump_increment(chain: &ChainPath, noise: &NoiseBundle, phi: &SizeFn, nu_phi: &[f64], k: usize) -> f64 {
    let raw: f64 = noise.step_events(k).iter().map(|e| phi.eval(e.size)).sum();
    let comp: f64 = chain.segments(k).map(|(a, b, n)| nu_phi[n] * (b - a)).sum();
    raw - comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{simulate_chain, RateMatrix};

    #[test]
    fn exponential_moments_are_analytic() {
        let d = JumpSizeDist::Exponential { rate: 3.0 };
        assert!((d.expect(&SizeFn::linear(1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.expect(&SizeFn::exp_minus_one(1.0)).unwrap() - 0.5).abs() < 1e-15);
        assert!(d.expect(&SizeFn::exp_minus_one(3.0)).is_err());
    }

    #[test]
    fn analytic_and_numeric_moments_agree() {
        let phi = SizeFn::term(2.0, 2, 0.7).add(&SizeFn::linear(-1.0));
        let g = phi.clone();
        let custom = SizeFn::custom(move |z| g.eval(z));
        for d in [
            JumpSizeDist::Exponential { rate: 2.5 },
            JumpSizeDist::Gamma { shape: 1.7, rate: 3.0 },
            JumpSizeDist::Uniform { low: 0.2, high: 1.3 },
            JumpSizeDist::Discrete { atoms: vec![0.5, 1.0], weights: vec![0.25, 0.75] },
        ] {
            let a = d.expect(&phi).unwrap();
            let b = d.expect(&custom).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{d:?}: {a} vs {b}");
        }
    }

    #[test]
    fn products_stay_closed() {
        let a = SizeFn::exp_minus_one(0.5);
        let b = SizeFn::linear(2.0);
        let p = a.mul(&b);
        assert!(matches!(p, SizeFn::Terms(_)));
        for z in [0.0, 0.3, 2.0] {
            assert!((p.eval(z) - a.eval(z) * b.eval(z)).abs() < 1e-14);
        }
    }

    #[test]
    fn no_intensity_no_events() {
        let r = RateMatrix::two_state(1.0, 1.0).unwrap();
        let g = TimeGrid::uniform(2.0, 8).unwrap();
        let c = simulate_chain(&r, 0, &g, 5).unwrap();
        let n = sample_noise(&g, &c, &RegimeLevyMeasure::none(2), 5).unwrap();
        assert!(n.events.is_empty());
        assert_eq!(n.brownian.len(), 8);
    }

    #[test]
    fn event_regimes_match_chain() {
        let r = RateMatrix::two_state(2.0, 3.0).unwrap();
        let g = TimeGrid::uniform(3.0, 12).unwrap();
        let levy = RegimeLevyMeasure::new(
            vec![1.0, 4.0],
            vec![JumpSizeDist::Exponential { rate: 2.0 }, JumpSizeDist::point(0.5)],
        )
        .unwrap();
        for seed in 0..20 {
            let c = simulate_chain(&r, 1, &g, seed).unwrap();
            let n = sample_noise(&g, &c, &levy, seed).unwrap();
            for e in &n.events {
                assert!(e.time >= 0.0 && e.time <= 3.0);
                assert_eq!(e.regime, c.regime_before(e.time));
            }
        }
    }

    #[test]
    fn compensator_examples() {
        let g = TimeGrid::uniform(2.0, 4).unwrap();
        let c = simulate_chain(&RateMatrix::single(), 0, &g, 0).unwrap();
        let levy = RegimeLevyMeasure::new(vec![1.5], vec![JumpSizeDist::Exponential { rate: 4.0 }]).unwrap();
        let v = compensator_integral(&levy, &c, &SizeFn::constant(1.0), 1.2).unwrap();
        assert!((v - 1.5 * 1.2).abs() < 1e-14);
        let v = compensator_integral(&levy, &c, &SizeFn::linear(1.0), 1.2).unwrap();
        assert!((v - 1.5 * 1.2 / 4.0).abs() < 1e-14);
        let v = compensator_integral(&levy, &c, &SizeFn::exp_minus_one(1.0), 1.2).unwrap();
        assert!((v - 1.5 * 1.2 / 3.0).abs() < 1e-14);
        let bad = compensator_integral(&levy, &c, &SizeFn::custom(|z| (5.0 * z).exp()), 1.0);
        assert!(bad.is_err());
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }
}
