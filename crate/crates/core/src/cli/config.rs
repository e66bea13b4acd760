//! Scenario files: TOML with a `schema_version`, `[chain]`, `[levy]`,
//! `[dynamics]` and `[run]` blocks and an optional `task`.
//!
//! Regimes are 1-based in files (`initial_regime = 1`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chain::RateMatrix;
use crate::drivers::{JumpSizeDist, RegimeLevyMeasure};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::insurance::{CBounds, InsuranceMarket};
use crate::maxprinciple::toy::LqParams;
use crate::robust_entropy::{EntropyModelConfig, LinearPayoff};
use crate::sde::{AffineCoefficients, RegimeModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ChainSim,
    EntropySolve,
    InsuranceSolve,
    VerifyNash,
    BsdeConvergence,
}

impl Task {
    pub const ALL: [Task; 5] =
        [Task::ChainSim, Task::EntropySolve, Task::InsuranceSolve, Task::VerifyNash, Task::BsdeConvergence];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::ChainSim => "chain-sim",
            Task::EntropySolve => "entropy-solve",
            Task::InsuranceSolve => "insurance-solve",
            Task::VerifyNash => "verify-nash",
            Task::BsdeConvergence => "bsde-convergence",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown task '{s}'")]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    pub chain: ChainBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levy: Option<LevyBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<Dynamics>,
    #[serde(default)]
    pub run: RunBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBlock {
    /// Generator rows `λ_nj`.
    pub rates: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub initial_regime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyBlock {
    /// `λ⁰_n` per regime.
    pub intensity: Vec<f64>,
    /// Jump-size law per regime, e.g. `{ kind = "exponential", rate = 3.0 }`.
    pub laws: Vec<JumpSizeDist>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dynamics {
    Generic(GenericDynamics),
    Entropy(EntropyDynamics),
    Insurance(InsuranceDynamics),
}

impl Dynamics {
    pub fn kind(&self) -> &'static str {
        match self {
            Dynamics::Generic(_) => "generic",
            Dynamics::Entropy(_) => "entropy",
            Dynamics::Insurance(_) => "insurance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenericGame {
    /// Nonzero-sum, `dX = (u₁+u₂)dt + σdB`, player 2 with a discounted recursive value.
    LqNash,
    /// Zero-sum with cross term `ρu₁u₂`.
    LqZeroSum,
}

/// Single-regime linear-quadratic games with known equilibria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericDynamics {
    pub game: GenericGame,
    #[serde(default = "half")]
    pub sigma: f64,
    #[serde(default = "two")]
    pub c1: f64,
    #[serde(default = "one_and_half")]
    pub c2: f64,
    #[serde(default = "half")]
    pub kappa: f64,
    #[serde(default = "quarter")]
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyDynamics {
    pub kappa: Vec<f64>,
    #[serde(default = "one_f")]
    pub a0: f64,
    #[serde(default = "one_f")]
    pub a0_bar: f64,
    pub running: LinearPayoff,
    pub terminal: LinearPayoff,
    /// Factor `dX = (drift + mean_reversion·X)dt + vol dB + jump_scale ∫ζ Ñ`; zeros when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reversion: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vol: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_scale: Option<Vec<f64>>,
    #[serde(default)]
    pub x0: f64,
    #[serde(default = "three")]
    pub basis_degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsuranceDynamics {
    /// `r_n`; zeros when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interest: Option<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub premium: Vec<f64>,
    pub beta: f64,
    #[serde(default = "one_f")]
    pub x0: f64,
    /// Box `[c_lower, c_upper]` for the distorted switching rates (off-diagonal entries).
    pub c_lower: Vec<Vec<f64>>,
    pub c_upper: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub workers: usize,
    /// Deviations count as violations beyond this many standard errors.
    pub sigma_multiple: f64,
    /// Grid sizes for `bsde-convergence`; defaults to `steps/16, …, steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<usize>>,
    pub replications: usize,
    /// Allowed growth of the error between consecutive levels.
    pub convergence_slack: f64,
    /// Closed-form checks (strategy search, ODE defect).
    pub closed_form_tolerance: f64,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 50,
            paths: 10_000,
            seed: 1,
            workers: 1,
            sigma_multiple: 3.0,
            levels: None,
            replications: 4,
            convergence_slack: 0.05,
            closed_form_tolerance: 1e-6,
        }
    }
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn one_f() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn quarter() -> f64 {
    0.25
}
fn two() -> f64 {
    2.0
}
fn one_and_half() -> f64 {
    1.5
}

/// Command-line values that replace the `[run]` entries.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub workers: Option<usize>,
}

/// Read, parse and validate a scenario file. Every violation is reported, not
/// only the first.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
    match table.get("schema_version").and_then(|v| v.as_integer()) {
        Some(v) if v == SCHEMA_VERSION as i64 => {}
        Some(v) => return Err(Error::Config(vec![format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")])),
        None => return Err(Error::Config(vec!["missing integer schema_version".into()])),
    }
    let cfg: ScenarioConfig =
        toml::from_str(text).map_err(|e| Error::Config(vec![format!("schema violation: {e}")]))?;
    cfg.check(cfg.task)?;
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(p) = o.paths {
            self.run.paths = p;
        }
        if let Some(m) = o.steps {
            self.run.steps = m;
        }
        if let Some(w) = o.workers {
            self.run.workers = w;
        }
    }

    pub fn dim(&self) -> usize {
        self.chain.rates.len()
    }

    pub fn check(&self, task: Option<Task>) -> Result<()> {
        let v = self.violations(task);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// All violations of the file and of the module invariants it feeds.
    pub fn violations(&self, task: Option<Task>) -> Vec<String> {
        let mut v = Vec::new();
        let d = self.dim();
        let rates = match RateMatrix::from_rows_unchecked(self.chain.rates.clone()) {
            Ok(r) => {
                v.extend(r.violations().into_iter().map(|s| format!("chain: {s}")));
                Some(r)
            }
            Err(e) => {
                v.push(format!("chain: {e}"));
                None
            }
        };
        if self.chain.initial_regime == 0 || self.chain.initial_regime > d {
            v.push(format!("chain: initial_regime {} outside 1..={d}", self.chain.initial_regime));
        }
        if let Some(l) = &self.levy {
            if l.intensity.len() != d || l.laws.len() != d {
                v.push(format!(
                    "levy: {} intensities and {} laws for {d} regimes",
                    l.intensity.len(),
                    l.laws.len()
                ));
            }
            for (n, x) in l.intensity.iter().enumerate() {
                if !(x.is_finite() && *x >= 0.0) {
                    v.push(format!("levy: intensity of regime {} must be finite and >= 0", n + 1));
                }
            }
            for (n, law) in l.laws.iter().enumerate() {
                if let Err(e) = law.validate() {
                    v.push(format!("levy: regime {}: {e}", n + 1));
                }
            }
        }
        let r = &self.run;
        if !(r.horizon.is_finite() && r.horizon > 0.0) {
            v.push(format!("run: horizon must be positive, got {}", r.horizon));
        }
        if r.steps == 0 {
            v.push("run: steps must be at least 1".into());
        }
        if r.paths < 2 {
            v.push("run: paths must be at least 2".into());
        }
        if r.workers == 0 {
            v.push("run: workers must be at least 1".into());
        }
        if !(r.sigma_multiple.is_finite() && r.sigma_multiple > 0.0) {
            v.push("run: sigma_multiple must be positive".into());
        }
        if r.replications == 0 {
            v.push("run: replications must be at least 1".into());
        }
        if !(r.convergence_slack.is_finite() && r.convergence_slack >= 0.0) {
            v.push("run: convergence_slack must be nonnegative".into());
        }
        if !(r.closed_form_tolerance.is_finite() && r.closed_form_tolerance > 0.0) {
            v.push("run: closed_form_tolerance must be positive".into());
        }
        if let Some(levels) = &r.levels {
            if levels.len() < 2 || levels.contains(&0) {
                v.push("run: levels needs at least two positive grid sizes".into());
            }
        }

        // Module invariants, only when the blocks they depend on are sound.
        let base_ok = v.is_empty() && rates.is_some();
        match &self.dynamics {
            Some(Dynamics::Generic(g)) => {
                if d != 1 {
                    v.push(format!("dynamics: generic games need a single regime, chain has {d}"));
                }
                if self.levy.as_ref().is_some_and(|l| l.intensity.iter().any(|x| *x > 0.0)) {
                    v.push("dynamics: generic games have no jumps; drop the levy block".into());
                }
                for (name, x) in [("sigma", g.sigma), ("c1", g.c1), ("c2", g.c2)] {
                    if !(x.is_finite() && x > 0.0) {
                        v.push(format!("dynamics: {name} must be positive"));
                    }
                }
                if !(g.kappa.is_finite() && g.rho.is_finite()) {
                    v.push("dynamics: kappa and rho must be finite".into());
                }
                if g.game == GenericGame::LqZeroSum && g.c1 * g.c2 + g.rho * g.rho == 0.0 {
                    v.push("dynamics: zero-sum game is degenerate".into());
                }
            }
            Some(Dynamics::Entropy(_)) if base_ok => match (self.model(), self.entropy()) {
                (Ok(model), Ok(cfg)) => v.extend(cfg.violations(&model).into_iter().map(|s| format!("dynamics: {s}"))),
                (Err(e), _) | (_, Err(e)) => v.push(format!("dynamics: {e}")),
            },
            Some(Dynamics::Insurance(_)) if base_ok => match self.insurance() {
                Ok((m, b, _)) => {
                    v.extend(m.violations().into_iter().map(|s| format!("dynamics: {s}")));
                    v.extend(b.violations().into_iter().map(|s| format!("dynamics: {s}")));
                }
                Err(Error::Config(errs)) => v.extend(errs),
                Err(e) => v.push(format!("dynamics: {e}")),
            },
            _ => {}
        }

        if let Some(task) = task {
            v.extend(self.task_violations(task));
        }
        v
    }

    fn task_violations(&self, task: Task) -> Vec<String> {
        let kind = self.dynamics.as_ref().map(Dynamics::kind);
        let need = |ok: bool, what: &str| if ok { None } else { Some(format!("task {task} needs {what}")) };
        let v = match task {
            Task::ChainSim => None,
            Task::EntropySolve => need(kind == Some("entropy"), "a [dynamics] block with kind = \"entropy\"")
                .or_else(|| need(self.levy.is_some(), "a [levy] block")),
            Task::InsuranceSolve | Task::BsdeConvergence => {
                need(kind == Some("insurance"), "a [dynamics] block with kind = \"insurance\"")
                    .or_else(|| need(self.levy.is_some(), "a [levy] block with the claim laws"))
            }
            Task::VerifyNash => need(
                matches!(kind, Some("generic") | Some("insurance")),
                "a [dynamics] block with kind = \"generic\" or \"insurance\"",
            )
            .or_else(|| need(kind != Some("insurance") || self.levy.is_some(), "a [levy] block with the claim laws")),
        };
        v.into_iter().collect()
    }

    pub fn rate_matrix(&self) -> Result<RateMatrix> {
        RateMatrix::new(self.chain.rates.clone())
    }

    pub fn levy_measure(&self) -> Result<RegimeLevyMeasure> {
        match &self.levy {
            Some(l) => RegimeLevyMeasure::new(l.intensity.clone(), l.laws.clone()),
            None => Ok(RegimeLevyMeasure::none(self.dim())),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.run.horizon, self.run.steps)
    }

    pub fn model(&self) -> Result<RegimeModel> {
        RegimeModel::new(self.rate_matrix()?, self.levy_measure()?, self.grid()?, self.chain.initial_regime - 1)
    }

    pub fn entropy(&self) -> Result<EntropyModelConfig> {
        let Some(Dynamics::Entropy(e)) = &self.dynamics else {
            return Err(Error::Config(vec!["no entropy dynamics".into()]));
        };
        let d = self.dim();
        let or_zero = |x: &Option<Vec<f64>>| x.clone().unwrap_or_else(|| vec![0.0; d]);
        Ok(EntropyModelConfig {
            kappa: e.kappa.clone(),
            a0: e.a0,
            a0_bar: e.a0_bar,
            running: e.running.clone(),
            terminal: e.terminal.clone(),
            factor: AffineCoefficients {
                drift: or_zero(&e.drift),
                mean_reversion: or_zero(&e.mean_reversion),
                vol: or_zero(&e.vol),
                jump_scale: or_zero(&e.jump_scale),
                ..AffineCoefficients::zero(d)
            },
            x0: e.x0,
        })
    }

    /// Market, rate box and initial surplus.
    pub fn insurance(&self) -> Result<(InsuranceMarket, CBounds, f64)> {
        let Some(Dynamics::Insurance(i)) = &self.dynamics else {
            return Err(Error::Config(vec!["no insurance dynamics".into()]));
        };
        let Some(levy) = &self.levy else {
            return Err(Error::Config(vec!["insurance dynamics need a [levy] block with the claim laws".into()]));
        };
        let d = self.dim();
        let market = InsuranceMarket {
            rates: RateMatrix::from_rows_unchecked(self.chain.rates.clone())?,
            interest: i.interest.clone().unwrap_or_else(|| vec![0.0; d]),
            mu: i.mu.clone(),
            sigma: i.sigma.clone(),
            premium: i.premium.clone(),
            claim_intensity: levy.intensity.clone(),
            claims: levy.laws.clone(),
            beta: i.beta,
        };
        let bounds = CBounds { lower: i.c_lower.clone(), upper: i.c_upper.clone() };
        Ok((market, bounds, i.x0))
    }

    pub fn lq_params(&self) -> Result<(GenericGame, LqParams)> {
        let Some(Dynamics::Generic(g)) = &self.dynamics else {
            return Err(Error::Config(vec!["no generic dynamics".into()]));
        };
        let p = LqParams {
            horizon: self.run.horizon,
            steps: self.run.steps,
            sigma: g.sigma,
            c1: g.c1,
            c2: g.c2,
            kappa: g.kappa,
            rho: g.rho,
        };
        Ok((g.game, p))
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![format!("cannot serialize config: {e}")]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "schema_version = 1\n[chain]\nrates = [[0.0]]\n";

    const INSURANCE: &str = r#"
schema_version = 1
task = "insurance-solve"

[chain]
rates = [[-0.5, 0.5], [1.0, -1.0]]

[levy]
intensity = [1.0, 2.0]
laws = [{ kind = "exponential", rate = 3.0 }, { kind = "exponential", rate = 4.0 }]

[dynamics]
kind = "insurance"
mu = [0.08, 0.05]
sigma = [0.5, 0.3]
premium = [1.5, 1.0]
beta = 1.0
c_lower = [[0.0, 0.25], [0.5, 0.0]]
c_upper = [[0.0, 1.0], [2.0, 0.0]]
"#;

    #[test]
    fn minimal_single_regime_loads() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.dim(), 1);
        assert_eq!(cfg.run, RunBlock::default());
        assert!(cfg.model().is_ok());
    }

    #[test]
    fn bad_row_sum_is_one_report_naming_the_row() {
        let text = "schema_version = 1\n[chain]\nrates = [[-1.0, 1.0], [2.0, -1.5]]\n";
        match parse_config(text) {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 1, "{v:?}");
                assert!(v[0].contains("row 2"), "{v:?}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn all_violations_are_collected() {
        let text = "schema_version = 1\n[chain]\nrates = [[-1.0, 1.0], [2.0, -1.5]]\ninitial_regime = 3\n[run]\nsteps = 0\npaths = 1\n";
        let Err(Error::Config(v)) = parse_config(text) else { panic!() };
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn heavy_exponential_claims_are_rejected() {
        let text = INSURANCE.replace("rate = 3.0", "rate = 1.5");
        let Err(Error::Config(v)) = parse_config(&text) else { panic!() };
        assert!(v.iter().any(|s| s.contains("regime 1")), "{v:?}");
        assert!(parse_config(INSURANCE).is_ok());
    }

    #[test]
    fn schema_version_is_checked() {
        assert!(matches!(parse_config("schema_version = 2\n[chain]\nrates = [[0.0]]\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("[chain]\nrates = [[0.0]]\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("schema_version = 1\n[chain]\nrates = [[0.0]]\nbogus = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn task_blocks_are_required() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert!(cfg.check(Some(Task::ChainSim)).is_ok());
        assert!(cfg.check(Some(Task::InsuranceSolve)).is_err());
        assert!(cfg.check(Some(Task::EntropySolve)).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = parse_config(INSURANCE).unwrap();
        let again = parse_config(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn task_names_parse() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
    }
}
