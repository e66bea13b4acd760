//! One function per command verb. Each returns the results table and the
//! task-specific part of the summary.

use std::sync::Arc;

use serde_json::{json, Value};

use crate::bsde::PolynomialBasis;
use crate::chain::simulate_chain;
use crate::error::Result;
use crate::insurance::{
    ansatz_defect, convergence_study, objective, robust_pi_by_search, solve_equilibrium, verify_insurance_equilibrium,
    InsuranceGame, MarketStrategy, OdeOptions, THETA_EPS,
};
use crate::maxprinciple::toy::{lq_equilibrium, lq_game, lq_saddle, lq_zero_sum};
use crate::maxprinciple::{control_deviations, verify_nash, verify_saddle, DeviationSet, VerificationReport, VerifyOptions};
use crate::parallel::map_paths;
use crate::rng::path_seed;
use crate::robust_entropy::solve_robust_value;
use crate::sde::{simulate_state, Control, ControlBox, ControlPair, ScenarioProcess};
use crate::stats::Estimate;

use super::config::{Dynamics, GenericGame, ScenarioConfig};
use super::output::Table;

/// Paths per parallel batch; sums are accumulated batch by batch in path order.
const CHUNK: usize = 4096;

pub struct TaskResult {
    pub table: Table,
    pub results: Value,
    pub passed: bool,
}

fn for_each_path<T, F, G>(n: usize, workers: usize, f: F, mut fold: G) -> Result<()>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
    G: FnMut(T),
{
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        for item in map_paths(len, workers, |i| f(start + i))? {
            fold(item);
        }
        start += len;
    }
    Ok(())
}

fn estimate_json(e: &Estimate) -> Value {
    json!({ "mean": e.mean, "stderr": e.stderr, "n": e.n })
}

fn stderr_of(sum: f64, sq: f64, n: f64) -> f64 {
    if n < 2.0 {
        return 0.0;
    }
    let mean = sum / n;
    ((sq / n - mean * mean).max(0.0) * n / (n - 1.0) / n).sqrt()
}

/// Occupation fractions and regime probabilities at every grid time.
pub fn chain_sim(cfg: &ScenarioConfig) -> Result<TaskResult> {
    let rates = cfg.rate_matrix()?;
    let grid = cfg.grid()?;
    let (d, m) = (rates.dim(), grid.steps());
    let init = cfg.chain.initial_regime - 1;
    let run = &cfg.run;
    let mut sum = vec![0.0; (m + 1) * d];
    let mut sq = vec![0.0; (m + 1) * d];
    let mut hits = vec![0.0; (m + 1) * d];
    let mut jumps = 0.0;
    for_each_path(
        run.paths,
        run.workers,
        |i| simulate_chain(&rates, init, &grid, path_seed(run.seed, i as u64)),
        |p| {
            jumps += p.jumps().len() as f64;
            for k in 0..=m {
                let t = grid.t(k);
                let occ = p.occupation(k);
                for n in 0..d {
                    let f = if t > 0.0 { occ[n] / t } else if n == init { 1.0 } else { 0.0 };
                    sum[k * d + n] += f;
                    sq[k * d + n] += f * f;
                }
                hits[k * d + p.regime(k)] += 1.0;
            }
        },
    )?;
    let np = run.paths as f64;
    let mut table = Table::new(["t", "regime", "occupation_fraction", "occupation_fraction_stderr", "probability"]);
    for k in 0..=m {
        for n in 0..d {
            let i = k * d + n;
            table
                .row()
                .float(grid.t(k))
                .index(n + 1)
                .float(sum[i] / np)
                .float(stderr_of(sum[i], sq[i], np))
                .float(hits[i] / np)
                .done();
        }
    }
    let last = m * d;
    let results = json!({
        "occupation_fraction": (0..d).map(|n| sum[last + n] / np).collect::<Vec<_>>(),
        "occupation_fraction_stderr": (0..d).map(|n| stderr_of(sum[last + n], sq[last + n], np)).collect::<Vec<_>>(),
        "stationary": rates.stationary()?,
        "mean_switches": jumps / np,
    });
    Ok(TaskResult { table, results, passed: true })
}

/// Robust value by regression, the optimal scenario along the paths and the
/// mean of its density (which must be one within the noise).
pub fn entropy_solve(cfg: &ScenarioConfig) -> Result<TaskResult> {
    let model = cfg.model()?;
    let ecfg = cfg.entropy()?;
    let degree = match &cfg.dynamics {
        Some(Dynamics::Entropy(e)) => e.basis_degree,
        _ => 3,
    };
    let run = &cfg.run;
    let (d, m) = (model.dim(), model.grid.steps());
    let sol = solve_robust_value(&ecfg, &model, run.paths, run.seed, Arc::new(PolynomialBasis { degree }), run.workers)?;

    // Per (step, regime): count, x, Z, K, θ₀, θ₂, θ₁ⱼ.
    let width = 6 + d;
    let mut acc = vec![0.0; m * d * width];
    let scenario = &sol.scenario;
    for_each_path(
        run.paths,
        run.workers,
        |i| {
            let path = model.sample_path(run.seed, i as u64)?;
            let state = simulate_state(&ecfg.factor, &ControlPair::zero(), &model, &path, ecfg.x0)?;
            Ok((0..m)
                .map(|k| {
                    let n = path.chain.regime(k);
                    let x = state.x[k];
                    let (z, _, kk) = scenario.exposures(k, x, n);
                    let pt = scenario.point(k, model.grid.t(k), x, n);
                    let mut row = vec![1.0, x, z, kk, pt.theta0, pt.theta2.eval(0.0)];
                    row.extend((0..d).map(|j| if j == n { 0.0 } else { pt.theta1[j] }));
                    (n, row)
                })
                .collect::<Vec<_>>())
        },
        |steps| {
            for (k, (n, row)) in steps.into_iter().enumerate() {
                let base = (k * d + n) * width;
                for (a, v) in acc[base..base + width].iter_mut().zip(row) {
                    *a += v;
                }
            }
        },
    )?;
    let mut header: Vec<String> =
        ["t", "regime", "count", "x_mean", "z_mean", "k_mean", "theta0_mean", "theta2_mean"].map(String::from).to_vec();
    header.extend((1..=d).map(|j| format!("theta1_to_{j}_mean")));
    let mut table = Table::new(header);
    for k in 0..m {
        for n in 0..d {
            let base = (k * d + n) * width;
            let c = acc[base];
            let mean = |j: usize| if c > 0.0 { acc[base + j] / c } else { 0.0 };
            table
                .row()
                .float(model.grid.t(k))
                .index(n + 1)
                .index(c as usize)
                .floats((1..width).map(mean))
                .done();
        }
    }
    let g = &sol.density_mean;
    let density_ok = (g.mean - 1.0).abs() <= run.sigma_multiple * g.stderr + 1e-12;
    let theta_start: Vec<Value> = sol
        .theta_at_start
        .iter()
        .map(|p| json!({ "theta0": p.theta0, "theta1": p.theta1.to_vec(), "theta2": p.theta2.eval(0.0) }))
        .collect();
    let results = json!({
        "y0": estimate_json(&sol.y0),
        "theta_star_at_start": theta_start,
        "density_terminal_mean": estimate_json(g),
        "checks": { "density_mean_is_one": density_ok },
        "basis": sol.solution.basis,
        "warnings": sol.solution.warnings,
    });
    Ok(TaskResult { table, results, passed: density_ok })
}

/// Closed-form `(π*, θ*)`, the bang-bang `C*` and the `f`-curves, with a search
/// check of `π*`, the ODE defect and a Monte Carlo value.
pub fn insurance_solve(cfg: &ScenarioConfig) -> Result<TaskResult> {
    let (market, bounds, x0) = cfg.insurance()?;
    let model = cfg.model()?;
    let grid = &model.grid;
    let run = &cfg.run;
    let (d, m) = (market.dim(), grid.steps());
    let eq = solve_equilibrium(&market, &bounds, grid, &OdeOptions::default())?;

    let theta_box = ControlBox::new(-1.0 + THETA_EPS, 1.0)?;
    let searched = (0..d).map(|n| robust_pi_by_search(&market, n, &theta_box)).collect::<Result<Vec<_>>>()?;
    let search_gap = searched.iter().zip(&eq.pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let search_ok = search_gap <= run.closed_form_tolerance;

    let points: Vec<(usize, f64, usize)> = (0..=m)
        .flat_map(|k| (0..d).flat_map(move |n| [-1.0, 0.0, 1.0].map(|dx| (k, x0 + dx, n))))
        .collect();
    let defect = ansatz_defect(&market, &eq, &model, &points)?;

    let game = InsuranceGame::new(market.clone(), bounds.clone(), model.clone(), x0, run.workers)?;
    let pi = Control::PerRegime(eq.pi.clone());
    let ms = MarketStrategy { theta: Control::PerRegime(eq.theta.clone()), c: eq.c.clone() };
    let value = objective(&game, &pi, &ms, run.paths, run.seed)?;
    let init = cfg.chain.initial_regime - 1;
    let closed = eq.f1.at(0, init) * (-market.beta * x0).exp();

    let mut header: Vec<String> = ["t", "regime", "f1", "f", "pi", "theta"].map(String::from).to_vec();
    header.extend((1..=d).map(|j| format!("c_to_{j}")));
    let mut table = Table::new(header);
    for k in 0..=m {
        let c = eq.c_matrix(k.min(m - 1));
        for n in 0..d {
            table
                .row()
                .float(grid.t(k))
                .index(n + 1)
                .float(eq.f1.at(k, n))
                .float(eq.f.at(k, n))
                .float(eq.pi[n])
                .float(eq.theta[n])
                .floats(c[n].iter().copied())
                .done();
        }
    }
    let results = json!({
        "pi_star": eq.pi,
        "theta_star": eq.theta,
        "c_star_at_start": eq.c_matrix(0),
        "y0_closed_form": closed,
        "y0_monte_carlo": estimate_json(&value),
        "fixed_point_iterations": eq.iterations,
        "residuals": {
            "pi_search_gap": search_gap,
            "ode_defect_max": defect.max_abs,
            "ode_defect_mean": defect.mean_abs,
        },
        "checks": { "pi_search_matches_closed_form": search_ok },
    });
    Ok(TaskResult { table, results, passed: search_ok })
}

/// Unilateral-deviation check of the known equilibrium.
pub fn verify_nash_task(cfg: &ScenarioConfig) -> Result<TaskResult> {
    let run = &cfg.run;
    let opts = VerifyOptions { sigma_multiple: run.sigma_multiple, ..VerifyOptions::default() };
    let (report, candidate) = match &cfg.dynamics {
        Some(Dynamics::Insurance(_)) => {
            let (market, bounds, x0) = cfg.insurance()?;
            let model = cfg.model()?;
            let v = verify_insurance_equilibrium(&market, &bounds, &model, x0, run.paths, run.seed, run.workers, &opts)?;
            let cand = json!({
                "pi_star": v.equilibrium.pi,
                "theta_star": v.equilibrium.theta,
                "c_star_at_start": v.equilibrium.c_matrix(0),
            });
            (v.report, cand)
        }
        _ => {
            let (kind, p) = cfg.lq_params()?;
            let (mut game, (u1, u2)) = match kind {
                GenericGame::LqNash => (lq_game(&p)?, lq_equilibrium(&p)),
                GenericGame::LqZeroSum => (lq_zero_sum(&p)?, lq_saddle(&p)),
            };
            game.workers = run.workers;
            let (c1, c2) = (Control::Constant(u1), Control::Constant(u2));
            let bx = ControlBox::unbounded();
            let devs = DeviationSet {
                player1: control_deviations(&c1, 1.0, &bx, run.seed),
                player2: control_deviations(&c2, 1.0, &bx, run.seed.wrapping_add(1)),
            };
            let report = if game.zero_sum {
                verify_saddle(&game, &c1, &c2, &devs, run.paths, run.seed, &opts)?
            } else {
                verify_nash(&game, &c1, &c2, &devs, run.paths, run.seed, &opts)?
            };
            (report, json!({ "u1": u1, "u2": u2 }))
        }
    };
    let table = deviation_table(&report);
    let results = json!({
        "candidate": candidate,
        "candidate_value": [estimate_json(&report.candidate_value[0]), estimate_json(&report.candidate_value[1])],
        "report": serde_json::to_value(&report).map_err(std::io::Error::other)?,
    });
    Ok(TaskResult { table, results, passed: report.passed })
}

fn deviation_table(r: &VerificationReport) -> Table {
    let mut table = Table::new(["player", "deviation", "improvement", "stderr", "threshold", "status"]);
    for d in &r.deviations {
        table
            .row()
            .text(&format!("{:?}", d.player))
            .text(&d.label)
            .float(d.improvement.mean)
            .float(d.improvement.stderr)
            .float(d.threshold)
            .text(&format!("{:?}", d.status))
            .done();
    }
    table
}

/// Regression error of the value BSDE against the closed form on refined grids.
pub fn bsde_convergence(cfg: &ScenarioConfig) -> Result<TaskResult> {
    let (market, bounds, x0) = cfg.insurance()?;
    let run = &cfg.run;
    let levels = run.levels.clone().unwrap_or_else(|| {
        let mut l: Vec<usize> = [16, 8, 4, 2, 1].iter().map(|f| (run.steps / f).max(1)).collect();
        l.dedup();
        l
    });
    let report = convergence_study(&market, &bounds, run.horizon, x0, &levels, run.paths, run.replications, run.seed, run.workers)?;
    let finest = *levels.iter().max().unwrap_or(&run.steps);
    let model = market.model(crate::grid::TimeGrid::uniform(run.horizon, finest)?, cfg.chain.initial_regime - 1)?;
    let eq = solve_equilibrium(&market, &bounds, &model.grid, &OdeOptions::default())?;
    let d = market.dim();
    let points: Vec<(usize, f64, usize)> = (0..=finest)
        .step_by((finest / 16).max(1))
        .flat_map(|k| (0..d).flat_map(move |n| [-1.0, 0.0, 1.0].map(|dx| (k, x0 + dx, n))))
        .collect();
    let defect = ansatz_defect(&market, &eq, &model, &points)?;

    let mut table = Table::new(["steps", "dt", "paths", "rms_error", "y0", "y0_closed_form"]);
    for l in &report.levels {
        table
            .row()
            .index(l.steps)
            .float(run.horizon / l.steps as f64)
            .index(l.paths)
            .float(l.rms)
            .float(l.y0)
            .float(l.y0_exact)
            .done();
    }
    let monotone = report.worst_ratio <= 1.0 + run.convergence_slack;
    let order_ok = report.order >= 0.5 * (1.0 - run.convergence_slack);
    let results = json!({
        "levels": report.levels,
        "order": report.order,
        "worst_ratio": report.worst_ratio,
        "residuals": { "ode_defect_max_finest": defect.max_abs },
        "checks": { "error_decreases": monotone, "order_at_least_half": order_ok },
    });
    Ok(TaskResult { table, results, passed: monotone && order_ok })
}
