//! Bias and variance of the outer gradient estimate, and the projection and
//! coupling properties of the inner loop, checked on concrete states.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Vector;
use crate::oracles::StochasticOracle;
use crate::problems::{derived_constants, lower_solution, penalized_solution, BilevelProblem, SmoothnessProfile};
use crate::rng;
use crate::solver::{self, RunOutput, SolverConfig, SolverEvent};

use super::surrogate::{surrogate_gradient, HIGH_ACCURACY_TOL};

/// Terminal inner iterates `(y^{k+1}, z^{k+1})` of outer step `k` at `x^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub x: Vector,
    pub y: Vector,
    pub z: Vector,
}

/// `G_k = ∇_x f(x, y) + λ(∇_x g(x, y) − ∇_x g(x, z))`.
pub fn exact_step_gradient<P: BilevelProblem + ?Sized>(problem: &P, step: &StepData, lambda: f64) -> Vector {
    let StepData { x, y, z } = step;
    problem.grad_x_f(x, y) + (problem.grad_x_g(x, y) - problem.grad_x_g(x, z)) * lambda
}

/// `‖∇L*_λ(x) − G_k‖` against its two upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasResidual {
    pub actual: f64,
    /// `(l_f1 + λ l_g1)(‖y − y*_λ‖ + ‖z − y*‖)`.
    pub separate_bound: f64,
    /// `l_y‖y − y*_λ‖ + λ l_g1‖v − v*‖ + l_f0 l_y/(μ_g λ)`, defined when
    /// `‖v‖` and `‖v*‖` are within `r_λ`.
    pub coupled_bound: Option<f64>,
}

impl BiasResidual {
    pub fn separate_residual(&self) -> f64 {
        self.separate_bound - self.actual
    }

    pub fn coupled_residual(&self) -> Option<f64> {
        self.coupled_bound.map(|b| b - self.actual)
    }
}

pub fn bias_check<P: BilevelProblem + ?Sized>(problem: &P, step: &StepData, lambda: f64) -> Result<BiasResidual> {
    let p = problem.profile();
    let c = derived_constants(&p)?;
    let tol = HIGH_ACCURACY_TOL;
    let y_star = lower_solution(problem, &step.x, tol)?;
    let y_lambda = penalized_solution(problem, &step.x, lambda, tol)?;
    let actual = (surrogate_gradient(problem, &step.x, lambda, tol)? - exact_step_gradient(problem, step, lambda)).norm();
    let ey = (&step.y - &y_lambda).norm();
    let ez = (&step.z - &y_star).norm();
    let separate_bound = (p.l_f1 + lambda * p.l_g1) * (ey + ez);
    let r_lambda = c.r_lambda(lambda);
    let v = &step.y - &step.z;
    let v_star = &y_lambda - &y_star;
    let slack = 1e-12 * r_lambda;
    let coupled_bound = (v.norm() <= r_lambda + slack && v_star.norm() <= r_lambda + slack)
        .then(|| c.l_y * ey + lambda * p.l_g1 * (v - v_star).norm() + p.l_f0 * c.l_y / (p.mu_g * lambda));
    Ok(BiasResidual { actual, separate_bound, coupled_bound })
}

fn gaussian(r: &mut impl Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn in_ball(r: &mut impl Rng, n: usize, radius: f64) -> Vector {
    let d = gaussian(r, n);
    let norm = d.norm().max(f64::MIN_POSITIVE);
    d * (radius * r.random::<f64>().powf(1.0 / n as f64) / norm)
}

/// Random states around `(y*_λ(x), y*(x))`: `x ~ N(0, x_scale² I)`, `y` within
/// `spread` of `y*_λ(x)` and `v = y − z` inside the `r_λ` ball.
pub fn random_coupled_states<P: BilevelProblem + ?Sized>(
    problem: &P,
    lambda: f64,
    n: usize,
    x_scale: f64,
    spread: f64,
    seed: u64,
) -> Result<Vec<StepData>> {
    let r_lambda = derived_constants(&problem.profile())?.r_lambda(lambda);
    let mut r = rng::stream(seed, &[0xB1A5]);
    (0..n)
        .map(|_| {
            let x = gaussian(&mut r, problem.dim_x()) * x_scale;
            let y = penalized_solution(problem, &x, lambda, HIGH_ACCURACY_TOL)? + in_ball(&mut r, problem.dim_y(), spread);
            let z = &y - in_ball(&mut r, problem.dim_y(), r_lambda);
            Ok(StepData { x, y, z })
        })
        .collect()
}

/// Monte Carlo estimate of `Var(Ĝ) = E‖Ĝ − G‖²` at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_samples: usize,
    pub batch: usize,
    pub smooth_path: bool,
    pub estimate: f64,
    pub std_err: f64,
    /// `(2σ_f² + 8λ²σ_g²)/M`.
    pub separate_bound: f64,
    /// `(2σ_f² + 8 l̃² l_f0²/μ_g²)/M`, defined on the coupled path with
    /// `‖y − z‖ ≤ r_λ`.
    pub coupled_bound: Option<f64>,
}

impl VarianceReport {
    /// The envelope that applies to the path, checked with a 3-sigma band.
    pub fn within_envelope(&self) -> bool {
        let bound = if self.smooth_path { self.coupled_bound.unwrap_or(self.separate_bound) } else { self.separate_bound };
        self.estimate - 3.0 * self.std_err <= bound
    }
}

/// `profile` supplies `σ_f`, `σ_g` and `l̃_g1` of the oracle.
pub fn estimator_variance<P: BilevelProblem + ?Sized, O: StochasticOracle + ?Sized>(
    problem: &P,
    oracle: &O,
    profile: &SmoothnessProfile,
    cfg: &SolverConfig,
    step: &StepData,
    n_samples: usize,
) -> Result<VarianceReport> {
    if n_samples < 2 {
        return Err(invalid("n_samples", format!("need at least 2 samples, got {n_samples}")));
    }
    let exact = exact_step_gradient(problem, step, cfg.lambda);
    let mut sq = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let g = solver::batch_gradient(oracle, cfg, i, &step.x, &step.y, &step.z)?;
        sq.push((g - &exact).norm_squared());
    }
    let n = n_samples as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m = cfg.batch as f64;
    let separate_bound = (2.0 * profile.sigma_f.powi(2) + 8.0 * cfg.lambda.powi(2) * profile.sigma_g.powi(2)) / m;
    let r_lambda = derived_constants(profile)?.r_lambda(cfg.lambda);
    let coupled_bound = (cfg.smooth_path && profile.l_g1_tilde.is_finite() && (&step.y - &step.z).norm() <= r_lambda)
        .then(|| (2.0 * profile.sigma_f.powi(2) + 8.0 * (profile.l_g1_tilde * profile.l_f0 / profile.mu_g).powi(2)) / m);
    Ok(VarianceReport {
        n_samples,
        batch: cfg.batch,
        smooth_path: cfg.smooth_path,
        estimate: mean,
        std_err: (var / n).sqrt(),
        separate_bound,
        coupled_bound,
    })
}

/// Violations of `‖t v/‖v‖ − u‖ ≤ ‖v − u‖` over random `‖u‖ ≤ t ≤ ‖v‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkReport {
    pub triples: usize,
    pub violations: usize,
    pub max_excess: f64,
}

pub fn projection_shrink_check(triples: usize, seed: u64) -> Result<ShrinkReport> {
    let mut r = rng::stream(seed, &[0x5A12]);
    let (mut violations, mut max_excess) = (0, f64::NEG_INFINITY);
    for _ in 0..triples {
        let dim = r.random_range(1..=6);
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let u = in_ball(&mut r, dim, scale);
        let t = u.norm() + scale * r.random::<f64>();
        let v = gaussian(&mut r, dim);
        let v = &v * ((t + scale * r.random::<f64>() * 3.0) / v.norm().max(f64::MIN_POSITIVE));
        let origin = Vector::zeros(dim);
        let projected = solver::project_ball(&v, &origin, t)?;
        let excess = (projected - &u).norm() - (&v - &u).norm();
        max_excess = max_excess.max(excess);
        if excess > 0.0 {
            violations += 1;
        }
    }
    Ok(ShrinkReport { triples, violations, max_excess })
}

/// Inner-loop instrumentation over one solver run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub inner_steps: usize,
    /// Steps where `‖v' − v*‖ > ‖v̄ − v*‖` (coupled path only).
    pub contraction_violations: usize,
    pub max_contraction_excess: f64,
    /// Steps that break `‖y − ŷ‖ ≤ 2r/3`, `‖z − y‖ ≤ r_λ` (coupled path) or
    /// `‖z − ŷ‖ ≤ r/2` (other path).
    pub feasibility_violations: usize,
    pub max_feasibility_excess: f64,
}

/// Relative slack granted to the comparisons above for rounding in the
/// projection arithmetic.
pub const ROUNDING_SLACK: f64 = 1e-12;

/// Runs the solver and checks every inner step against `v*(x^k)`.
pub fn coupling_check<P: BilevelProblem + ?Sized, O: StochasticOracle + ?Sized>(
    problem: &P,
    oracle: &O,
    cfg: &SolverConfig,
    profile: &SmoothnessProfile,
    x0: Vector,
) -> Result<(CouplingReport, RunOutput)> {
    let mut report = CouplingReport { max_contraction_excess: f64::NEG_INFINITY, max_feasibility_excess: f64::NEG_INFINITY, ..Default::default() };
    let mut cached: Option<(usize, Vector)> = None;
    let mut failure: Option<Error> = None;
    let r = cfg.radius;
    let mut observe = |e: &SolverEvent| {
        let SolverEvent::Inner { k, x, y_hat, y_bar, z_bar, y, z, .. } = *e else { return };
        if failure.is_some() {
            return;
        }
        report.inner_steps += 1;
        let mut feasibility = |excess: f64, scale: f64| {
            report.max_feasibility_excess = report.max_feasibility_excess.max(excess);
            if excess > ROUNDING_SLACK * scale {
                report.feasibility_violations += 1;
            }
        };
        if let (Some(c), true) = (y_hat, r.is_finite()) {
            feasibility((y - c).norm() - 2.0 * r / 3.0, r);
            if !cfg.smooth_path {
                feasibility((z - c).norm() - r / 2.0, r);
            }
        }
        if cfg.smooth_path {
            feasibility((y - z).norm() - cfg.r_lambda, cfg.r_lambda);
            if cached.as_ref().map(|(ck, _)| *ck) != Some(k) {
                let v_star = penalized_solution(problem, x, cfg.lambda, HIGH_ACCURACY_TOL)
                    .and_then(|yl| Ok(yl - lower_solution(problem, x, HIGH_ACCURACY_TOL)?));
                match v_star {
                    Ok(v) => cached = Some((k, v)),
                    Err(err) => {
                        failure = Some(err);
                        return;
                    }
                }
            }
            let v_star = &cached.as_ref().expect("cached above").1;
            let after = (y - z - v_star).norm();
            let before = (y_bar - z_bar - v_star).norm();
            let excess = after - before;
            report.max_contraction_excess = report.max_contraction_excess.max(excess);
            if excess > ROUNDING_SLACK * (before + cfg.r_lambda) {
                report.contraction_violations += 1;
            }
        }
    };
    let out = solver::run(oracle, cfg, profile, x0, &mut observe)?;
    if let Some(err) = failure {
        return Err(err);
    }
    Ok((report, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::GaussianOracle;
    use crate::problems::{CubicPerturbedInstance, QuadraticInstance};
    use crate::solver::{schedule_from_theorem, ScheduleConstants, Theorem};
    use proptest::prelude::*;

    #[test]
    fn exact_iterates_have_zero_bias() {
        let c = CubicPerturbedInstance::random(3, 3, 1.0, 0.5, 2).unwrap();
        let x = Vector::from_vec(vec![0.5, -0.2, 0.9]);
        let lambda = 50.0;
        let y = penalized_solution(&c, &x, lambda, 1e-13).unwrap();
        let z = lower_solution(&c, &x, 1e-13).unwrap();
        let b = bias_check(&c, &StepData { x, y, z }, lambda).unwrap();
        assert!(b.actual < 1e-9);
        assert!(b.separate_residual() >= 0.0);
        assert!(b.coupled_residual().unwrap() >= 0.0);
    }

    #[test]
    fn random_states_respect_both_bias_bounds() {
        let q = QuadraticInstance::random(3, 3, 1.0, 2);
        let c = CubicPerturbedInstance::random(3, 3, 1.0, 0.5, 2).unwrap();
        for lambda in [10.0, 100.0] {
            for s in random_coupled_states(&q, lambda, 50, 1.0, 0.3, 1).unwrap() {
                let b = bias_check(&q, &s, lambda).unwrap();
                assert!(b.separate_residual() >= 0.0 && b.coupled_residual().unwrap() >= 0.0, "{b:?}");
            }
            for s in random_coupled_states(&c, lambda, 50, 1.0, 0.3, 1).unwrap() {
                let b = bias_check(&c, &s, lambda).unwrap();
                assert!(b.separate_residual() >= 0.0 && b.coupled_residual().unwrap() >= 0.0, "{b:?}");
            }
        }
    }

    #[test]
    fn variance_matches_isotropic_construction() {
        let q = QuadraticInstance::random(3, 3, 1.0, 5);
        let (sf, sg) = (0.3, 0.2);
        let profile = q.profile().with_noise(sf, sg);
        let cfg = schedule_from_theorem(Theorem::Two, 0.5, &profile, f64::INFINITY, &ScheduleConstants::default()).unwrap();
        let cfg = SolverConfig { batch: 2, smooth_path: false, ..cfg };
        let o = GaussianOracle::new(q.clone(), sf, sg, f64::INFINITY, 9).unwrap();
        let step = random_coupled_states(&q, cfg.lambda, 1, 1.0, 0.1, 3).unwrap().remove(0);
        let rep = estimator_variance(&q, &o, &profile, &cfg, &step, 20_000).unwrap();
        // Independent noise: σ_f² + 2λ²σ_g² spread over d_x of the d_x + d_y components.
        let expected = (sf * sf + 2.0 * cfg.lambda.powi(2) * sg * sg) * 0.5 / 2.0;
        assert!((rep.estimate - expected).abs() <= 4.0 * rep.std_err, "{rep:?} vs {expected}");
        assert!(rep.within_envelope());
        let shared = SolverConfig { smooth_path: true, ..cfg };
        let rep = estimator_variance(&q, &o, &profile, &shared, &step, 20_000).unwrap();
        assert!((rep.estimate - sf * sf * 0.25).abs() <= 4.0 * rep.std_err, "{rep:?}");
        assert!(rep.coupled_bound.is_some() && rep.within_envelope());
    }

    #[test]
    fn shrink_property_holds() {
        let r = projection_shrink_check(2000, 4).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
    }

    #[test]
    fn instrumented_run_keeps_coupling() {
        let q = QuadraticInstance::random(3, 3, 1.0, 6);
        let profile = q.profile().with_noise(0.2, 0.2);
        let consts = ScheduleConstants { c_gamma: 4.0, c_t: 1.0, c_m: 0.2, c_k: 0.2, alpha: None };
        let cfg = schedule_from_theorem(Theorem::Two, 0.3, &profile, 1.0, &consts).unwrap();
        let o = GaussianOracle::new(q.clone(), 0.2, 0.2, 1.0, 11).unwrap();
        let (rep, _) = coupling_check(&q, &o, &cfg, &profile, Vector::from_element(3, 1.0)).unwrap();
        assert!(rep.inner_steps > 0);
        assert_eq!(rep.contraction_violations, 0, "{rep:?}");
        assert_eq!(rep.feasibility_violations, 0, "{rep:?}");
    }

    proptest! {
        #[test]
        fn separate_bound_holds_off_coupling(seed in 0u64..500, spread in 0.01..2.0f64) {
            let c = CubicPerturbedInstance::random(2, 3, 1.0, 0.4, 8).unwrap();
            let mut r = rng::stream(seed, &[]);
            let x = gaussian(&mut r, 2);
            let y = gaussian(&mut r, 3) * spread;
            let z = gaussian(&mut r, 3) * spread;
            let b = bias_check(&c, &StepData { x, y, z }, 20.0).unwrap();
            prop_assert!(b.separate_residual() >= 0.0);
        }
    }
}
