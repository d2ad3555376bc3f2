//! Empirical oracle-complexity exponents: calls to the first iterate with
//! `‖∇F‖ ≤ ε`, fitted against `1/ε` on a log-log scale.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::surrogate::{first_hit, ground_truth_hypergradient};
use crate::error::{invalid, Result};
use crate::linalg::Vector;
use crate::oracles::GaussianOracle;
use crate::problems::BilevelProblem;
use crate::rng;
use crate::solver::{run_until, schedule_from_theorem, ScheduleConstants, SolverConfig, Theorem, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFitConfig {
    pub theorem: Theorem,
    #[serde(default)]
    pub constants: ScheduleConstants,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sigma_f: f64,
    pub sigma_g: f64,
    pub radius: f64,
    /// Starting point; all entries equal to this value.
    pub x0: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
    /// End each run at its first hit instead of after all `K` steps.
    #[serde(default = "default_stop_at_hit")]
    pub stop_at_hit: bool,
}

fn default_stop_at_hit() -> bool {
    true
}

fn default_bootstrap() -> usize {
    1000
}

/// One `(iter, oracle_calls, ‖∇F(x^iter)‖)` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub iter: usize,
    pub oracle_calls: u64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub epsilon: f64,
    pub seed: u64,
    pub solver: SolverConfig,
    pub rows: Vec<CellRow>,
    /// Oracle calls at the first row with `‖∇F‖ ≤ ε`; `None` if never reached.
    pub hit_calls: Option<u64>,
    /// `‖∇F‖` at the last iterate.
    pub final_grad_norm: f64,
}

/// One solver run of the fit at accuracy `epsilon`.
pub fn rate_cell<P: BilevelProblem + Clone>(problem: &P, cfg: &RateFitConfig, epsilon: f64, seed: u64) -> Result<RateCell> {
    let profile = problem.profile().with_noise(cfg.sigma_f, cfg.sigma_g);
    let solver = schedule_from_theorem(cfg.theorem, epsilon, &profile, cfg.radius, &cfg.constants)?;
    let cell_seed = rng::derive_seed(cfg.seed, &[epsilon.to_bits(), seed]);
    let oracle = GaussianOracle::new(problem.clone(), cfg.sigma_f, cfg.sigma_g, cfg.radius, cell_seed)?;
    let x0 = Vector::from_element(problem.dim_x(), cfg.x0);
    let mut norms = Vec::with_capacity(solver.outer_iters + 1);
    let mut failure = None;
    let mut stop = |row: &TraceRow| match ground_truth_hypergradient(problem, &row.x, epsilon) {
        Ok(g) => {
            norms.push(g.norm());
            cfg.stop_at_hit && g.norm() <= epsilon
        }
        Err(e) => {
            failure = Some(e);
            true
        }
    };
    let out = run_until(&oracle, &solver, &profile, x0, &mut |_| {}, &mut stop)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let rows: Vec<CellRow> = out
        .trace
        .iter()
        .zip(&norms)
        .map(|(r, &n)| CellRow { iter: r.iter, oracle_calls: r.oracle_calls, grad_norm: n })
        .collect();
    Ok(RateCell {
        epsilon,
        seed,
        solver,
        hit_calls: first_hit(&out.trace, &norms, epsilon).map(|h| h.1),
        final_grad_norm: *norms.last().unwrap_or(&f64::NAN),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub epsilons: Vec<f64>,
    /// Median calls to first hit per ε; `None` when censored runs reach the
    /// median.
    pub median_calls: Vec<Option<f64>>,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Some run never reached `‖∇F‖ ≤ ε` within its budget.
    pub censored: bool,
}

fn median(xs: &mut [Option<u64>]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by_key(|v| v.unwrap_or(u64::MAX));
    let n = xs.len();
    Some((xs[(n - 1) / 2]? as f64 + xs[n / 2]? as f64) / 2.0)
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn slope_of(epsilons: &[f64], medians: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = epsilons.iter().map(|e| (1.0 / e).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|m| m.map(f64::ln)).collect::<Option<_>>()?;
    Some(ls_slope(&xs, &ys))
}

/// Fits the slope of `log median calls` against `log 1/ε`, with a 95%
/// bootstrap interval that resamples seeds within each ε. `hits[i][s]` is the
/// hit of seed `s` at `epsilons[i]`.
pub fn fit_from_hits(epsilons: &[f64], hits: &[Vec<Option<u64>>], bootstrap: usize, seed: u64) -> Result<RateFit> {
    if epsilons.len() < 2 || hits.len() != epsilons.len() || hits.iter().any(Vec::is_empty) {
        return Err(invalid("rate fit", "need at least two accuracies, each with at least one run"));
    }
    let median_calls: Vec<Option<f64>> = hits.iter().map(|h| median(&mut h.clone())).collect();
    let censored = hits.iter().flatten().any(Option::is_none);
    let slope = slope_of(epsilons, &median_calls).unwrap_or(f64::NAN);
    let mut r = rng::stream(seed, &[0xB007]);
    let mut slopes: Vec<f64> = (0..bootstrap)
        .map(|_| {
            let meds: Vec<Option<f64>> = hits
                .iter()
                .map(|h| {
                    let mut resampled: Vec<Option<u64>> = (0..h.len()).map(|_| h[r.random_range(0..h.len())]).collect();
                    median(&mut resampled)
                })
                .collect();
            slope_of(epsilons, &meds).unwrap_or(f64::NAN)
        })
        .collect();
    slopes.retain(|s| s.is_finite());
    slopes.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        if slopes.is_empty() {
            f64::NAN
        } else {
            slopes[((q * (slopes.len() - 1) as f64).round() as usize).min(slopes.len() - 1)]
        }
    };
    Ok(RateFit { epsilons: epsilons.to_vec(), median_calls, slope, ci_low: quantile(0.025), ci_high: quantile(0.975), censored })
}

/// Runs every `(ε, seed)` cell and fits the exponent.
pub fn fit_rate<P: BilevelProblem + Clone>(problem: &P, cfg: &RateFitConfig) -> Result<(RateFit, Vec<RateCell>)> {
    let pairs: Vec<(f64, u64)> = cfg.epsilons.iter().flat_map(|&e| cfg.seeds.iter().map(move |&s| (e, s))).collect();
    let cells = pairs.par_iter().map(|&(e, s)| rate_cell(problem, cfg, e, s)).collect::<Result<Vec<_>>>()?;
    let hits: Vec<Vec<Option<u64>>> = cfg
        .epsilons
        .iter()
        .map(|&e| cells.iter().filter(|c| c.epsilon == e).map(|c| c.hit_calls).collect())
        .collect();
    Ok((fit_from_hits(&cfg.epsilons, &hits, cfg.bootstrap, cfg.seed)?, cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::QuadraticInstance;

    #[test]
    fn exact_power_law_recovers_slope() {
        let eps = [0.4, 0.2, 0.1, 0.05];
        let hits: Vec<Vec<Option<u64>>> = eps.iter().map(|e: &f64| vec![Some((7.0 * e.powi(-3)).round() as u64); 5]).collect();
        let fit = fit_from_hits(&eps, &hits, 200, 1).unwrap();
        assert!((fit.slope - 3.0).abs() < 0.01, "{}", fit.slope);
        assert!((fit.ci_low - fit.slope).abs() < 0.01 && (fit.ci_high - fit.slope).abs() < 0.01);
        assert!(!fit.censored);
    }

    #[test]
    fn censoring_is_flagged() {
        let hits = vec![vec![Some(10), Some(12), None], vec![None, None, Some(100)]];
        let fit = fit_from_hits(&[0.2, 0.1], &hits, 50, 1).unwrap();
        assert!(fit.censored);
        assert_eq!(fit.median_calls[0], Some(12.0));
        assert_eq!(fit.median_calls[1], None);
        assert!(fit.slope.is_nan());
    }

    #[test]
    fn too_few_accuracies_rejected() {
        assert!(fit_from_hits(&[0.1], &[vec![Some(1)]], 10, 1).is_err());
    }

    #[test]
    fn cell_hits_and_accounts_calls() {
        let q = QuadraticInstance::random(3, 3, 1.0, 4);
        let cfg = RateFitConfig {
            theorem: Theorem::Two,
            constants: ScheduleConstants { c_k: 20.0, ..Default::default() },
            epsilons: vec![0.5],
            seeds: vec![1],
            sigma_f: 0.1,
            sigma_g: 0.1,
            radius: 1.0,
            x0: 1.0,
            bootstrap: 10,
            seed: 3,
            stop_at_hit: false,
        };
        let cell = rate_cell(&q, &cfg, 0.5, 1).unwrap();
        assert_eq!(cell.rows.len(), cell.solver.outer_iters + 1);
        let per_step = 1 + 2 * cell.solver.inner_iters as u64 + 2 * cell.solver.batch as u64;
        assert_eq!(cell.rows.last().unwrap().oracle_calls, per_step * cell.solver.outer_iters as u64);
        assert!(cell.hit_calls.is_some());
        let early = rate_cell(&q, &RateFitConfig { stop_at_hit: true, ..cfg }, 0.5, 1).unwrap();
        assert_eq!(early.hit_calls, cell.hit_calls);
        assert_eq!(early.rows.last().unwrap().oracle_calls, cell.hit_calls.unwrap());
    }
}
