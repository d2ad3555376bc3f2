//! Ground-truth stationarity measures and the penalty-surrogate gaps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Vector;
use crate::problems::{derived_constants, hypergradient_closed_form, lower_solution, penalized_solution, BilevelProblem};
use crate::solver::TraceRow;

/// Inner-solve tolerance used for every reported measurement.
pub const HIGH_ACCURACY_TOL: f64 = 1e-12;

fn check_lambda<P: BilevelProblem + ?Sized>(problem: &P, lambda: f64) -> Result<()> {
    let p = problem.profile();
    let floor = 2.0 * p.l_f1 / p.mu_g;
    if !(lambda > 0.0 && lambda >= floor) {
        return Err(invalid("lambda", format!("must be at least 2 l_f1/mu_g = {floor} for a strongly convex penalty, got {lambda}")));
    }
    Ok(())
}

/// `F(x) = f(x, y*(x))`.
pub fn hyperobjective<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, tol: f64) -> Result<f64> {
    match problem.hyperobjective(x) {
        Some(v) => Ok(v),
        None => Ok(problem.f(x, &lower_solution(problem, x, tol)?)),
    }
}

/// `L*_λ(x) = f(x, y*_λ) + λ(g(x, y*_λ) − g(x, y*))`.
pub fn surrogate_value<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, lambda: f64, tol: f64) -> Result<f64> {
    check_lambda(problem, lambda)?;
    let y = lower_solution(problem, x, tol)?;
    let yl = penalized_solution(problem, x, lambda, tol)?;
    Ok(problem.f(x, &yl) + lambda * (problem.g(x, &yl) - problem.g(x, &y)))
}

/// `∇L*_λ(x) = ∇_x f(x, y*_λ) + λ(∇_x g(x, y*_λ) − ∇_x g(x, y*))`.
pub fn surrogate_gradient<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, lambda: f64, tol: f64) -> Result<Vector> {
    check_lambda(problem, lambda)?;
    let y = lower_solution(problem, x, tol)?;
    let yl = penalized_solution(problem, x, lambda, tol)?;
    Ok(problem.grad_x_f(x, &yl) + (problem.grad_x_g(x, &yl) - problem.grad_x_g(x, &y)) * lambda)
}

/// `|L*_λ(x) − F(x)|`.
pub fn surrogate_value_gap<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, lambda: f64, tol: f64) -> Result<f64> {
    Ok((surrogate_value(problem, x, lambda, tol)? - hyperobjective(problem, x, tol)?).abs())
}

/// `‖y*_λ(x) − y*(x)‖`.
pub fn v_star_gap<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, lambda: f64, tol: f64) -> Result<f64> {
    check_lambda(problem, lambda)?;
    Ok((penalized_solution(problem, x, lambda, tol)? - lower_solution(problem, x, tol)?).norm())
}

/// `∇F(x)`: closed form where the instance has one, otherwise `∇L*_λ` at
/// `λ = 10⁴ λ₀/ε`.
pub fn ground_truth_hypergradient<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, epsilon: f64) -> Result<Vector> {
    if let Some(g) = problem.hypergradient(x) {
        return Ok(g);
    }
    if let Ok(g) = hypergradient_closed_form(problem, x) {
        return Ok(g);
    }
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    let p = problem.profile();
    let lambda = (1e4 * derived_constants(&p)?.lambda0 / epsilon).max(2.0 * p.l_f1 / p.mu_g).max(1.0);
    surrogate_gradient(problem, x, lambda, HIGH_ACCURACY_TOL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub x: Vec<f64>,
    pub grad_f_norm: f64,
    pub grad_surrogate_norm: f64,
    pub lambda: f64,
    /// `‖∇_y g(x, y*)‖`.
    pub lower_residual: f64,
    /// `‖λ⁻¹∇_y f + ∇_y g‖` at `y*_λ`.
    pub penalized_residual: f64,
}

pub fn stationarity_report<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, lambda: f64, epsilon: f64) -> Result<StationarityReport> {
    check_lambda(problem, lambda)?;
    let y = lower_solution(problem, x, HIGH_ACCURACY_TOL)?;
    let yl = penalized_solution(problem, x, lambda, HIGH_ACCURACY_TOL)?;
    let lower_residual = problem.grad_y_g(x, &y).norm();
    let penalized_residual = (problem.grad_y_f(x, &yl) / lambda + problem.grad_y_g(x, &yl)).norm();
    Ok(StationarityReport {
        x: x.iter().copied().collect(),
        grad_f_norm: ground_truth_hypergradient(problem, x, epsilon)?.norm(),
        grad_surrogate_norm: surrogate_gradient(problem, x, lambda, HIGH_ACCURACY_TOL)?.norm(),
        lambda,
        lower_residual,
        penalized_residual,
    })
}

/// `‖∇F(x^k)‖` for every trace row.
pub fn grad_norms<P: BilevelProblem + ?Sized>(problem: &P, trace: &[TraceRow], epsilon: f64) -> Result<Vec<f64>> {
    trace.iter().map(|r| Ok(ground_truth_hypergradient(problem, &r.x, epsilon)?.norm())).collect()
}

/// First row with `‖∇F‖ ≤ ε`: `(iter, oracle_calls)`.
pub fn first_hit(trace: &[TraceRow], norms: &[f64], epsilon: f64) -> Option<(usize, u64)> {
    trace.iter().zip(norms).find(|(_, &n)| n <= epsilon).map(|(r, _)| (r.iter, r.oracle_calls))
}

/// Running averages of `‖∇L*_λ(x^k)‖²` next to the running minimum of
/// `‖∇F(x^k)‖`, one entry per trace row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErgodicReport {
    pub mean_sq_surrogate: Vec<f64>,
    pub min_grad_f: Vec<f64>,
}

pub fn ergodic_report<P: BilevelProblem + ?Sized>(problem: &P, trace: &[TraceRow], lambda: f64, epsilon: f64) -> Result<ErgodicReport> {
    let mut mean_sq_surrogate = Vec::with_capacity(trace.len());
    let mut min_grad_f = Vec::with_capacity(trace.len());
    let (mut sum, mut best) = (0.0, f64::INFINITY);
    for (k, row) in trace.iter().enumerate() {
        sum += surrogate_gradient(problem, &row.x, lambda, HIGH_ACCURACY_TOL)?.norm_squared();
        best = best.min(ground_truth_hypergradient(problem, &row.x, epsilon)?.norm());
        mean_sq_surrogate.push(sum / (k + 1) as f64);
        min_grad_f.push(best);
    }
    Ok(ErgodicReport { mean_sq_surrogate, min_grad_f })
}
