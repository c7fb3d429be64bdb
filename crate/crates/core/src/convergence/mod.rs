//! Deterministic block-gradient rotation on analytic problems, with numerical
//! checks of its descent and stationarity guarantees.
//!
//! Notation: `K` blocks, `H` inner updates per block (the engine's interval `T`),
//! `R` rotations. Only the active block moves: `theta_i <- theta_i - eta * g_i`.

mod problems;

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

pub use problems::{
    diagonal_quadratic, estimate_block_lipschitz, even_blocks, random_quadratic, synthetic_logistic,
    LipschitzEstimate, Objective, SmoothProblem,
};

use crate::accounting::csv_err;
use crate::error::{Error, Result};
use crate::optim::StepStats;

/// Gradient oracle used by the runner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Exact,
    /// Adds independent `N(0, sigma^2)` noise to every active coordinate.
    Gaussian { sigma: f64 },
    /// Averages the data term over `batch` samples drawn without replacement (sorted).
    Minibatch { batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabEntry {
    pub r: usize,
    pub i: usize,
    pub h: usize,
    /// Loss before the update.
    pub loss: f64,
    /// Squared norm of the exact active-block gradient before the update.
    pub grad_norm_sq: f64,
    /// `||g_used - g_exact||^2`; zero for exact oracles.
    #[serde(skip)]
    pub noise_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<LabEntry>,
    /// `theta` at the start of every rotation.
    pub boundary_thetas: Vec<Vec<f64>>,
    pub final_theta: Vec<f64>,
    pub final_loss: f64,
    pub eta: f64,
    pub k: usize,
    pub h: usize,
    pub r: usize,
    /// Largest norm of an applied block gradient.
    pub g_max: f64,
    pub stochastic: bool,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("trajectory", e))?;
        Ok(())
    }

    pub fn min_grad_norm_sq(&self) -> f64 {
        self.entries.iter().map(|e| e.grad_norm_sq).fold(f64::INFINITY, f64::min)
    }
}

pub fn block_gradient_chunkft(problem: &SmoothProblem, h: usize, r: usize, eta: f64) -> Result<Trajectory> {
    run(problem, h, r, eta, NoiseModel::Exact, 0)
}

pub fn block_gradient_chunkft_stochastic(
    problem: &SmoothProblem,
    h: usize,
    r: usize,
    eta: f64,
    noise: NoiseModel,
    seed: u64,
) -> Result<Trajectory> {
    run(problem, h, r, eta, noise, seed)
}

fn run(problem: &SmoothProblem, h: usize, r: usize, eta: f64, noise: NoiseModel, seed: u64) -> Result<Trajectory> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Hyper(format!("eta must be > 0, got {eta}")));
    }
    let k = problem.k();
    if k * h * r == 0 {
        return Err(Error::Hyper(format!("K*H*R must be >= 1, got K={k} H={h} R={r}")));
    }
    let n = problem.objective.samples();
    let all: Vec<usize> = (0..n.unwrap_or(0)).collect();
    match noise {
        NoiseModel::Minibatch { batch } if n.is_none() || batch == 0 || Some(batch) > n => {
            return Err(Error::config("batch", format!("minibatch size must be in 1..={}", n.unwrap_or(0))));
        }
        NoiseModel::Gaussian { sigma } if !(sigma >= 0.0) => {
            return Err(Error::config("sigma", "sigma >= 0"));
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = problem.theta0.clone();
    let mut entries = Vec::with_capacity(k * h * r);
    let mut boundary = Vec::with_capacity(r);
    let mut g_max = 0.0f64;
    for rr in 0..r {
        boundary.push(theta.clone());
        for (i, block) in problem.blocks.iter().enumerate() {
            for hh in 0..h {
                let loss = problem.objective.loss(&theta);
                if !loss.is_finite() {
                    return Err(Error::NonFinite { what: "loss", context: format!("rotation {rr}, block {i}, inner {hh}") });
                }
                let exact = problem.objective.grad(&theta);
                let used = match noise {
                    NoiseModel::Exact => exact.clone(),
                    NoiseModel::Gaussian { sigma } => exact
                        .iter()
                        .map(|g| g + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    NoiseModel::Minibatch { batch } => {
                        let mut idx = if batch == all.len() {
                            all.clone()
                        } else {
                            sample(&mut rng, all.len(), batch).into_vec()
                        };
                        idx.sort_unstable();
                        problem.objective.sample_grad(&theta, &idx)
                    }
                };
                let mut grad_norm_sq = 0.0;
                let mut noise_sq = 0.0;
                let mut used_sq = 0.0;
                for c in block.clone() {
                    grad_norm_sq += exact[c] * exact[c];
                    noise_sq += (used[c] - exact[c]).powi(2);
                    used_sq += used[c] * used[c];
                }
                g_max = g_max.max(used_sq.sqrt());
                entries.push(LabEntry { r: rr, i, h: hh, loss, grad_norm_sq, noise_sq });
                for c in block.clone() {
                    theta[c] -= eta * used[c];
                }
            }
        }
    }
    let final_loss = problem.objective.loss(&theta);
    if !final_loss.is_finite() {
        return Err(Error::NonFinite { what: "loss", context: "after the final rotation".into() });
    }
    Ok(Trajectory {
        entries,
        boundary_thetas: boundary,
        final_theta: theta,
        final_loss,
        eta,
        k,
        h,
        r,
        g_max,
        stochastic: noise != NoiseModel::Exact,
    })
}

fn step_size_ok(trajectory: &Trajectory, problem: &SmoothProblem) -> bool {
    trajectory.eta <= 1.0 / problem.l_bar()
}

/// Slack below which a bound comparison counts as violated; covers rounding only.
fn tolerance(scale: f64) -> f64 {
    1e-12 * scale.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DescentReport {
    Skipped { reason: String },
    Checked {
        /// `L(theta) - (eta/2)||g||^2 - L(theta+)` for every inner step.
        margins: Vec<f64>,
        min_margin: f64,
        /// `(r, i, h)` of every violated step.
        violations: Vec<(usize, usize, usize)>,
    },
}

impl DescentReport {
    pub fn passed(&self) -> bool {
        matches!(self, DescentReport::Checked { violations, .. } if violations.is_empty())
    }

    pub fn summary(&self) -> String {
        match self {
            DescentReport::Skipped { reason } => format!("descent = \"skipped\"\nreason = \"{reason}\"\n"),
            DescentReport::Checked { margins, min_margin, violations } => format!(
                "descent = \"{}\"\nsteps = {}\nmin_margin = {min_margin:e}\nviolations = {}\n",
                if violations.is_empty() { "pass" } else { "fail" },
                margins.len(),
                violations.len()
            ),
        }
    }
}

/// Checks `L(theta+) <= L(theta) - (eta/2)||g||^2` at every inner step.
pub fn check_descent(trajectory: &Trajectory, problem: &SmoothProblem) -> DescentReport {
    if trajectory.stochastic {
        return DescentReport::Skipped { reason: "stochastic trajectory".into() };
    }
    if !step_size_ok(trajectory, problem) {
        return DescentReport::Skipped {
            reason: format!("eta = {} exceeds 1/L_bar = {}", trajectory.eta, 1.0 / problem.l_bar()),
        };
    }
    let mut margins = Vec::with_capacity(trajectory.entries.len());
    let mut violations = Vec::new();
    for (idx, e) in trajectory.entries.iter().enumerate() {
        let next = trajectory.entries.get(idx + 1).map_or(trajectory.final_loss, |n| n.loss);
        let margin = e.loss - 0.5 * trajectory.eta * e.grad_norm_sq - next;
        if margin < -tolerance(e.loss) {
            violations.push((e.r, e.i, e.h));
        }
        margins.push(margin);
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    DescentReport::Checked { margins, min_margin, violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationarityReport {
    /// Average squared active-block gradient over all inner steps.
    pub lhs: f64,
    /// `2 (L(theta0) - L_star) / (eta * steps)`.
    pub rhs: f64,
    pub precondition_met: bool,
    pub holds: bool,
}

pub fn stationarity_bound(trajectory: &Trajectory, problem: &SmoothProblem) -> StationarityReport {
    let steps = trajectory.entries.len() as f64;
    let lhs = trajectory.entries.iter().map(|e| e.grad_norm_sq).sum::<f64>() / steps;
    let l0 = trajectory.entries[0].loss;
    let rhs = 2.0 * (l0 - problem.l_star) / (trajectory.eta * steps);
    StationarityReport { lhs, rhs, precondition_met: step_size_ok(trajectory, problem), holds: lhs <= rhs + tolerance(rhs) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RotationReport {
    /// `(1/R) sum_r ||grad L(theta at rotation start)||^2`.
    pub measured: f64,
    /// `(1/R) sum_r sum_i ||grad_i L(theta at block i's first inner step)||^2`.
    pub active_term: f64,
    /// `K^3 H^2 L_bar^2 eta^2 G^2`.
    pub drift_term: f64,
    /// Same drift term with the full-objective smoothness constant in place of `L_bar`.
    pub drift_term_full: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Compares rotation-boundary full-gradient norms with `2 * active + 2 * drift`.
pub fn rotation_stationarity(trajectory: &Trajectory, problem: &SmoothProblem) -> RotationReport {
    let r = trajectory.r as f64;
    let measured = trajectory
        .boundary_thetas
        .iter()
        .map(|t| problem.objective.grad(t).iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        / r;
    let active_term = trajectory.entries.iter().filter(|e| e.h == 0).map(|e| e.grad_norm_sq).sum::<f64>() / r;
    let movement = trajectory.k as f64 * trajectory.h as f64 * trajectory.eta * trajectory.g_max;
    let k = trajectory.k as f64;
    let drift = |l: f64| k * (l * movement).powi(2);
    let drift_term = drift(problem.l_bar());
    let drift_term_full = drift(problem.objective.full_lipschitz_bound());
    let bound = 2.0 * active_term + 2.0 * drift_term;
    RotationReport {
        measured,
        active_term,
        drift_term,
        drift_term_full,
        bound,
        slack: bound - measured,
        holds: measured <= bound + tolerance(bound),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticReport {
    pub seeds: usize,
    pub per_seed_lhs: Vec<f64>,
    pub mean_lhs: f64,
    pub rhs: f64,
    /// `L_bar * eta * (mean ||noise||^2 per step)`: the variance term of the expected bound.
    pub margin: f64,
    pub holds: bool,
}

/// Expectation-level check over seeds: mean exact-gradient lhs against the
/// deterministic rhs plus the oracle's variance term. Individual runs may exceed it.
pub fn stochastic_check(
    problem: &SmoothProblem,
    h: usize,
    r: usize,
    eta: f64,
    noise: NoiseModel,
    seeds: &[u64],
) -> Result<StochasticReport> {
    if seeds.len() < 20 {
        return Err(Error::config("seeds", "at least 20 seeds"));
    }
    let mut per_seed_lhs = Vec::with_capacity(seeds.len());
    let mut noise_total = 0.0;
    let mut rhs = 0.0;
    for &seed in seeds {
        let traj = run(problem, h, r, eta, noise, seed)?;
        let report = stationarity_bound(&traj, problem);
        rhs = report.rhs;
        per_seed_lhs.push(report.lhs);
        noise_total += traj.entries.iter().map(|e| e.noise_sq).sum::<f64>() / traj.entries.len() as f64;
    }
    let n = seeds.len() as f64;
    let mean_lhs = per_seed_lhs.iter().sum::<f64>() / n;
    let margin = problem.l_bar() * eta * noise_total / n;
    Ok(StochasticReport { seeds: seeds.len(), per_seed_lhs, mean_lhs, rhs, margin, holds: mean_lhs <= rhs + margin })
}

/// Diminishing step `c / (K^(2/3) * H * R^(1/3))`.
pub fn diminishing_eta(c: f64, k: usize, h: usize, rounds: usize) -> f64 {
    c / ((k as f64).powf(2.0 / 3.0) * h as f64 * (rounds as f64).cbrt())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Whether every recorded preconditioner value lies in `[p_min, p_max]`.
pub fn preconditioner_within(stats: &[StepStats], p_min: f64, p_max: f64) -> bool {
    stats.iter().all(|s| s.precond_min >= p_min && s.precond_max <= p_max)
}
