//! Continuous-time Markov chains: exact simulation, occupation times and the
//! compensated counting processes of the chain.
//!
//! Regimes are 0-based indices in the API; messages report them 1-based.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::{stream_rng, Stream};

/// Intensity matrix `Λ = [λ_nj]` of a finite-state chain, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct RateMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl RateMatrix {
    /// Build and validate from rows.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self::from_rows_unchecked(rows)?;
        m.validate()?;
        Ok(m)
    }

    /// Build without checking the generator properties (shape is still checked).
    pub fn from_rows_unchecked(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return Err(Error::RateMatrix("empty matrix".into()));
        }
        let mut entries = Vec::with_capacity(dim * dim);
        for (n, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::RateMatrix(format!(
                    "row {} has {} entries, expected {dim}",
                    n + 1,
                    row.len()
                )));
            }
            entries.extend_from_slice(row);
        }
        if let Some(p) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::RateMatrix(format!(
                "non-finite entry at ({},{})",
                p / dim + 1,
                p % dim + 1
            )));
        }
        Ok(Self { dim, entries })
    }

    /// Two-state generator with off-diagonal rates `λ_12`, `λ_21`.
    pub fn two_state(l12: f64, l21: f64) -> Result<Self> {
        Self::new(vec![vec![-l12, l12], vec![l21, -l21]])
    }

    /// The trivial one-state chain.
    pub fn single() -> Self {
        Self { dim: 1, entries: vec![0.0] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rate(&self, n: usize, j: usize) -> f64 {
        self.entries[n * self.dim + j]
    }

    /// Total exit rate `-λ_nn` of state `n`.
    pub fn exit_rate(&self, n: usize) -> f64 {
        -self.rate(n, n)
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.entries[n * self.dim..(n + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|n| self.row(n).to_vec()).collect()
    }

    /// Check the generator properties; the message names the first offending
    /// row or entry (1-based).
    pub fn validate(&self) -> Result<()> {
        let violations = self.violations();
        match violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(Error::RateMatrix(v)),
        }
    }

    /// Every generator violation, in row order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for n in 0..self.dim {
            for j in 0..self.dim {
                if j != n && self.rate(n, j) < 0.0 {
                    out.push(format!("negative off-diagonal at ({},{})", n + 1, j + 1));
                }
            }
            let row = self.row(n);
            let sum: f64 = row.iter().sum();
            let scale: f64 = 1.0 + row.iter().map(|v| v.abs()).sum::<f64>();
            if sum.abs() > 1e-12 * scale {
                out.push(format!("row-sum violation at row {} (sum {sum})", n + 1));
            }
        }
        out
    }

    /// Stationary distribution, from `πᵀΛ = 0`, `Σπ = 1` (dense solve).
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut a = nalgebra::DMatrix::<f64>::zeros(d, d);
        let mut b = nalgebra::DVector::<f64>::zeros(d);
        for j in 0..d {
            for n in 0..d {
                a[(j, n)] = self.rate(n, j);
            }
        }
        for n in 0..d {
            a[(d - 1, n)] = 1.0;
        }
        b[d - 1] = 1.0;
        a.lu()
            .solve(&b)
            .map(|v| v.iter().copied().collect())
            .ok_or_else(|| Error::Domain("stationary distribution is not unique".into()))
    }
}

impl TryFrom<Vec<Vec<f64>>> for RateMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<RateMatrix> for Vec<Vec<f64>> {
    fn from(m: RateMatrix) -> Self {
        m.rows()
    }
}

/// One transition of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub from: usize,
    pub to: usize,
}

/// A simulated chain path: exact jump records plus the grid view.
#[derive(Debug, Clone)]
pub struct ChainPath {
    grid: TimeGrid,
    dim: usize,
    initial: usize,
    /// Regime at each grid point (right-continuous).
    regimes: Vec<usize>,
    jumps: Vec<Jump>,
    /// Occupation times at grid points, `(M+1) × D` row-major.
    occupation: Vec<f64>,
}

impl ChainPath {
    /// Assemble a path from its jump records.
    pub fn from_jumps(grid: TimeGrid, dim: usize, initial: usize, jumps: Vec<Jump>) -> Result<Self> {
        if initial >= dim {
            return Err(Error::Domain(format!("initial regime {} outside 1..={dim}", initial + 1)));
        }
        let mut state = initial;
        for j in &jumps {
            if j.from != state || j.to >= dim || j.to == j.from {
                return Err(Error::Domain(format!("inconsistent jump record {j:?}")));
            }
            state = j.to;
        }
        let times = grid.times();
        let m = grid.steps();
        let mut regimes = Vec::with_capacity(m + 1);
        let mut occupation = vec![0.0; (m + 1) * dim];
        let mut state = initial;
        let mut next = 0;
        regimes.push(initial);
        for k in 0..m {
            let (t0, t1) = (times[k], times[k + 1]);
            let (prev, cur) = occupation.split_at_mut((k + 1) * dim);
            cur[..dim].copy_from_slice(&prev[k * dim..(k + 1) * dim]);
            if next >= jumps.len() || jumps[next].time > t1 {
                cur[state] += t1 - t0;
            } else {
                let mut s = t0;
                while next < jumps.len() && jumps[next].time <= t1 {
                    cur[state] += jumps[next].time - s;
                    s = jumps[next].time;
                    state = jumps[next].to;
                    next += 1;
                }
                cur[state] += t1 - s;
            }
            regimes.push(state);
        }
        Ok(Self { grid, dim, initial, regimes, jumps, occupation })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    /// Regime at grid point `k`.
    pub fn regime(&self, k: usize) -> usize {
        self.regimes[k]
    }

    pub fn regimes(&self) -> &[usize] {
        &self.regimes
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    /// Jumps with time in `(a, b]`.
    pub fn jumps_in(&self, a: f64, b: f64) -> &[Jump] {
        let lo = self.jumps.partition_point(|j| j.time <= a);
        let hi = self.jumps.partition_point(|j| j.time <= b);
        &self.jumps[lo..hi]
    }

    /// Regime at time `t` (right-continuous).
    pub fn regime_at(&self, t: f64) -> usize {
        let i = self.jumps.partition_point(|j| j.time <= t);
        if i == 0 {
            self.initial
        } else {
            self.jumps[i - 1].to
        }
    }

    /// Left limit `α(t−)`.
    pub fn regime_before(&self, t: f64) -> usize {
        let i = self.jumps.partition_point(|j| j.time < t);
        if i == 0 {
            self.initial
        } else {
            self.jumps[i - 1].to
        }
    }

    /// Occupation times `𝒥_j(t_k)` at grid point `k`.
    pub fn occupation(&self, k: usize) -> &[f64] {
        &self.occupation[k * self.dim..(k + 1) * self.dim]
    }

    /// Occupation times at an arbitrary `t ∈ [0, T]`, computed from the jump records.
    pub fn occupation_at(&self, t: f64) -> Vec<f64> {
        let mut occ = vec![0.0; self.dim];
        let mut s = 0.0;
        let mut state = self.initial;
        for j in &self.jumps {
            if j.time > t {
                break;
            }
            occ[state] += j.time - s;
            s = j.time;
            state = j.to;
        }
        occ[state] += t - s;
        occ
    }

    /// Occupation increments over interval `k`.
    pub fn occupation_increment(&self, k: usize) -> Vec<f64> {
        let a = self.occupation(k);
        let b = self.occupation(k + 1);
        b.iter().zip(a).map(|(x, y)| x - y).collect()
    }

    /// Constant-regime pieces `(start, end, regime)` of interval `k`.
    pub fn segments(&self, k: usize) -> Segments<'_> {
        let t0 = self.grid.t(k);
        let t1 = self.grid.t(k + 1);
        Segments { jumps: self.jumps_in(t0, t1), start: t0, end: t1, state: self.regimes[k], done: false }
    }

    /// `J^{nj}(t)`: number of `n → j` jumps up to `t`, as a `D × D` matrix.
    pub fn jump_counts(&self, t: f64) -> Vec<Vec<u64>> {
        let mut c = vec![vec![0u64; self.dim]; self.dim];
        for j in self.jumps.iter().take_while(|j| j.time <= t) {
            c[j.from][j.to] += 1;
        }
        c
    }
}

/// Iterator over the constant-regime pieces of one grid interval.
pub struct Segments<'a> {
    jumps: &'a [Jump],
    start: f64,
    end: f64,
    state: usize,
    done: bool,
}

impl Iterator for Segments<'_> {
    type Item = (f64, f64, usize);
    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.jumps.split_first() {
            Some((j, rest)) => {
                let piece = (self.start, j.time, self.state);
                self.start = j.time;
                self.state = j.to;
                self.jumps = rest;
                Some(piece)
            }
            None => {
                self.done = true;
                Some((self.start, self.end, self.state))
            }
        }
    }
}

/// Exact event-driven simulation of the chain on `[0, T]`, sampled onto `grid`.
pub fn simulate_chain(rates: &RateMatrix, initial: usize, grid: &TimeGrid, seed: u64) -> Result<ChainPath> {
    let dim = rates.dim();
    if initial >= dim {
        return Err(Error::Domain(format!("initial regime {} outside 1..={dim}", initial + 1)));
    }
    let mut rng = stream_rng(seed, Stream::Chain);
    let jumps = sample_jumps(rates, initial, grid.horizon(), &mut rng);
    ChainPath::from_jumps(grid.clone(), dim, initial, jumps)
}

fn sample_jumps<R: Rng>(rates: &RateMatrix, initial: usize, horizon: f64, rng: &mut R) -> Vec<Jump> {
    let dim = rates.dim();
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut state = initial;
    loop {
        let q = rates.exit_rate(state);
        if q <= 0.0 {
            break;
        }
        let e: f64 = Exp1.sample(rng);
        t += e / q;
        if t > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * q;
        let mut acc = 0.0;
        let mut to = state;
        for j in 0..dim {
            if j == state {
                continue;
            }
            let r = rates.rate(state, j);
            if r <= 0.0 {
                continue;
            }
            acc += r;
            to = j;
            if u < acc {
                break;
            }
        }
        jumps.push(Jump { time: t, from: state, to });
        state = to;
    }
    jumps
}

/// `M(t) = e_{α(t)} − e_{α(0)} − ∫₀ᵗ Λᵀ e_{α(s)} ds` at every grid point.
pub fn martingale_part(path: &ChainPath, rates: &RateMatrix) -> Result<Vec<Vec<f64>>> {
    check_dim(path, rates)?;
    let d = path.dim();
    let out = (0..=path.grid().steps())
        .map(|k| {
            let occ = path.occupation(k);
            (0..d)
                .map(|j| {
                    let drift: f64 = (0..d).map(|n| rates.rate(n, j) * occ[n]).sum();
                    indicator(path.regime(k) == j) - indicator(path.initial() == j) - drift
                })
                .collect()
        })
        .collect();
    Ok(out)
}

/// Counting processes of jumps into each state, their compensators and the
/// compensated martingales, at grid points.
#[derive(Debug, Clone)]
pub struct CountingProcesses {
    /// `Φ_j(t_k)`, indexed `[k][j]`.
    pub counts: Vec<Vec<f64>>,
    /// `λ_j(t_k) = Σ_{n≠j} λ_nj 𝒥_n(t_k)`.
    pub compensators: Vec<Vec<f64>>,
    /// `Φ̃_j = Φ_j − λ_j`.
    pub compensated: Vec<Vec<f64>>,
}

pub fn compensated_counting(path: &ChainPath, rates: &RateMatrix) -> Result<CountingProcesses> {
    check_dim(path, rates)?;
    let d = path.dim();
    let m = path.grid().steps();
    let mut counts = Vec::with_capacity(m + 1);
    let mut compensators = Vec::with_capacity(m + 1);
    let mut compensated = Vec::with_capacity(m + 1);
    let mut into = vec![0.0; d];
    let mut next = 0;
    let jumps = path.jumps();
    for k in 0..=m {
        let t = path.grid().t(k);
        while next < jumps.len() && jumps[next].time <= t {
            into[jumps[next].to] += 1.0;
            next += 1;
        }
        let occ = path.occupation(k);
        let comp: Vec<f64> = (0..d)
            .map(|j| (0..d).filter(|&n| n != j).map(|n| rates.rate(n, j) * occ[n]).sum())
            .collect();
        compensated.push(into.iter().zip(&comp).map(|(a, b)| a - b).collect());
        counts.push(into.clone());
        compensators.push(comp);
    }
    Ok(CountingProcesses { counts, compensators, compensated })
}

/// Jump counts into each state over interval `k` and the matching compensator
/// increments `Σ_{n≠j} λ_nj Δ𝒥_n`.
pub fn switch_increments(path: &ChainPath, rates: &RateMatrix, k: usize) -> (Vec<f64>, Vec<f64>) {
    let d = path.dim();
    let mut dphi = vec![0.0; d];
    let mut dcomp = vec![0.0; d];
    for (a, b, n) in path.segments(k) {
        let len = b - a;
        for j in 0..d {
            if j != n {
                dcomp[j] += rates.rate(n, j) * len;
            }
        }
    }
    let (t0, t1) = (path.grid().t(k), path.grid().t(k + 1));
    for jump in path.jumps_in(t0, t1) {
        dphi[jump.to] += 1.0;
    }
    (dphi, dcomp)
}

fn check_dim(path: &ChainPath, rates: &RateMatrix) -> Result<()> {
    if path.dim() != rates.dim() {
        return Err(Error::Dimension(format!("path has {} regimes, rate matrix {}", path.dim(), rates.dim())));
    }
    Ok(())
}

#[inline]
fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_messages_name_offender() {
        assert!(RateMatrix::new(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]).is_ok());
        let e = RateMatrix::new(vec![vec![-1.0, 0.5], vec![2.0, -2.0]]).unwrap_err();
        assert!(e.to_string().contains("row-sum violation at row 1"), "{e}");
        let e = RateMatrix::new(vec![vec![1.0, -1.0], vec![2.0, -2.0]]).unwrap_err();
        assert!(e.to_string().contains("negative off-diagonal at (1,2)"), "{e}");
    }

    #[test]
    fn single_state_chain_is_constant() {
        let g = TimeGrid::uniform(3.0, 30).unwrap();
        let p = simulate_chain(&RateMatrix::single(), 0, &g, 1).unwrap();
        assert!(p.jumps().is_empty());
        assert!(p.regimes().iter().all(|&r| r == 0));
        let m = martingale_part(&p, &RateMatrix::single()).unwrap();
        assert!(m.iter().all(|v| v[0] == 0.0));
        let c = compensated_counting(&p, &RateMatrix::single()).unwrap();
        assert!(c.counts.iter().chain(&c.compensators).all(|v| v[0] == 0.0));
    }

    #[test]
    fn absorbing_state_stays() {
        let r = RateMatrix::new(vec![vec![0.0, 0.0], vec![1.0, -1.0]]).unwrap();
        let g = TimeGrid::uniform(5.0, 10).unwrap();
        let p = simulate_chain(&r, 0, &g, 9).unwrap();
        assert!(p.jumps().is_empty());
    }

    #[test]
    fn invalid_initial_rejected() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let r = RateMatrix::two_state(1.0, 2.0).unwrap();
        assert!(simulate_chain(&r, 2, &g, 0).is_err());
    }

    #[test]
    fn path_bookkeeping_is_consistent() {
        let r = RateMatrix::new(vec![vec![-3.0, 1.0, 2.0], vec![0.5, -1.0, 0.5], vec![4.0, 1.0, -5.0]]).unwrap();
        let g = TimeGrid::uniform(2.0, 17).unwrap();
        for seed in 0..50 {
            let p = simulate_chain(&r, 1, &g, seed).unwrap();
            for k in 0..=g.steps() {
                let t = g.t(k);
                let s: f64 = p.occupation(k).iter().sum();
                assert!((s - t).abs() < 1e-12);
                assert_eq!(p.regime(k), p.regime_at(t));
                let exact = p.occupation_at(t);
                for j in 0..3 {
                    assert!((exact[j] - p.occupation(k)[j]).abs() < 1e-12);
                }
            }
            let m = martingale_part(&p, &r).unwrap();
            for v in &m {
                assert!(v.iter().sum::<f64>().abs() < 1e-12);
            }
            let c = compensated_counting(&p, &r).unwrap();
            for k in 0..=g.steps() {
                for j in 0..3 {
                    assert_eq!(c.counts[k][j], c.compensators[k][j] + c.compensated[k][j]);
                }
            }
            let counts = p.jump_counts(g.horizon());
            let total: u64 = counts.iter().flatten().sum();
            assert_eq!(total as usize, p.jumps().len());
        }
    }

    #[test]
    fn segments_cover_interval() {
        let r = RateMatrix::two_state(5.0, 5.0).unwrap();
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let p = simulate_chain(&r, 0, &g, 3).unwrap();
        for k in 0..4 {
            let segs: Vec<_> = p.segments(k).collect();
            assert_eq!(segs.first().unwrap().0, g.t(k));
            assert_eq!(segs.last().unwrap().1, g.t(k + 1));
            assert_eq!(segs.last().unwrap().2, p.regime(k + 1));
            let len: f64 = segs.iter().map(|s| s.1 - s.0).sum();
            assert!((len - g.dt(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn stationary_two_state() {
        let r = RateMatrix::two_state(1.0, 2.0).unwrap();
        let pi = r.stationary().unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn deterministic_given_seed() {
        let r = RateMatrix::two_state(1.0, 2.0).unwrap();
        let g = TimeGrid::uniform(10.0, 10).unwrap();
        let a = simulate_chain(&r, 0, &g, 42).unwrap();
        let b = simulate_chain(&r, 0, &g, 42).unwrap();
        assert_eq!(a.jumps(), b.jumps());
    }
}
