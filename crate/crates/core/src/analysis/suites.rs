//! Property suites over the reference instances. Each suite returns one
//! [`SuiteOutcome`] per property with the tightest residual it saw.

use serde::{Deserialize, Serialize};

use super::lemmas::{bias_check, coupling_check, estimator_variance, projection_shrink_check, random_coupled_states};
use super::psgd::{psgd_rate_check, PsgdConfig, QuadraticObjective, StepMode, StronglyConvexObjective};
use super::surrogate::{ground_truth_hypergradient, surrogate_gradient, surrogate_value_gap, v_star_gap, HIGH_ACCURACY_TOL};
use crate::error::Result;
use crate::linalg::Vector;
use crate::oracles::{GaussianOracle, StochasticOracle};
use crate::problems::{derived_constants, BilevelProblem, CubicPerturbedInstance, QuadraticInstance};
use crate::rng;
use crate::solver::{run_plain, schedule_from_theorem, ScheduleConstants, SolverConfig, Theorem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    /// Smallest `bound − observed` (or the analogous margin) over all checks.
    pub worst_residual: f64,
    pub detail: String,
}

/// `−x` without producing a negative zero.
fn negated(x: f64) -> f64 {
    if x == 0.0 { 0.0 } else { -x }
}

impl SuiteOutcome {
    fn margin(name: &str, worst_residual: f64, checks: usize) -> Self {
        Self { name: name.into(), passed: worst_residual >= 0.0, worst_residual, detail: format!("{checks} checks") }
    }
}

/// Sample sizes for [`verify_lemmas`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemmaSuiteConfig {
    pub surrogate_points: usize,
    pub bias_states: usize,
    pub variance_samples: usize,
    pub shrink_triples: usize,
    pub coupling_runs: usize,
    pub psgd_seeds: usize,
    pub seed: u64,
}

impl Default for LemmaSuiteConfig {
    fn default() -> Self {
        Self {
            surrogate_points: 100,
            bias_states: 1000,
            variance_samples: 100_000,
            shrink_triples: 10_000,
            coupling_runs: 10,
            psgd_seeds: 1000,
            seed: 0,
        }
    }
}

/// The quadratic and cubic-perturbed instances used by every suite.
pub fn reference_instances(seed: u64) -> Result<(QuadraticInstance, CubicPerturbedInstance)> {
    Ok((QuadraticInstance::random(5, 5, 1.0, seed), CubicPerturbedInstance::random(5, 5, 1.0, 0.5, seed)?))
}

fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vector> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut r = rng::stream(seed, &[0x5E7]);
    (0..n).map(|_| Vector::from_fn(dim, |_, _| r.sample::<f64, _>(StandardNormal))).collect()
}

fn surrogate_gaps<P: BilevelProblem>(p: &P, points: &[Vector]) -> Result<(f64, f64, usize)> {
    let c = derived_constants(&p.profile())?;
    let prof = p.profile();
    let (mut value, mut dist, mut checks) = (f64::INFINITY, f64::INFINITY, 0);
    for lambda in [10.0, 100.0, 1000.0] {
        for x in points {
            value = value.min(c.d0 / lambda - surrogate_value_gap(p, x, lambda, HIGH_ACCURACY_TOL)?);
            dist = dist.min(2.0 * prof.l_f0 / (lambda * prof.mu_g) - v_star_gap(p, x, lambda, HIGH_ACCURACY_TOL)?);
            checks += 1;
        }
    }
    Ok((value, dist, checks))
}

/// Value gap `≤ D₀/λ`, solution gap `≤ 2l_f0/(λμ_g)`, and the `1/λ` decay of
/// the gradient gap on the cubic-perturbed instance.
pub fn surrogate_suite(points: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let (q, c) = reference_instances(seed)?;
    let xs = random_points(points, 5, seed);
    let (qv, qd, n) = surrogate_gaps(&q, &xs)?;
    let (cv, cd, _) = surrogate_gaps(&c, &xs)?;
    let mut out = vec![
        SuiteOutcome::margin("surrogate value gap <= D0/lambda", qv.min(cv), 2 * n),
        SuiteOutcome::margin("solution gap <= 2 l_f0/(lambda mu_g)", qd.min(cd), 2 * n),
    ];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in &xs {
        let truth = ground_truth_hypergradient(&c, x, 1e-3)?;
        let gaps: Vec<f64> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&l| Ok((surrogate_gradient(&c, x, l, HIGH_ACCURACY_TOL)? - &truth).norm()))
            .collect::<Result<_>>()?;
        for w in gaps.windows(2) {
            let ratio = w[0] / w[1];
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    out.push(SuiteOutcome {
        name: "gradient gap ratio lambda vs 10 lambda in [5, 20]".into(),
        passed: lo >= 5.0 && hi <= 20.0,
        worst_residual: (lo - 5.0).min(20.0 - hi),
        detail: format!("ratios in [{lo:.3}, {hi:.3}] over {} points", xs.len()),
    });
    Ok(out)
}

fn variance_config(profile: &crate::problems::SmoothnessProfile, batch: usize, smooth_path: bool) -> Result<SolverConfig> {
    let cfg = schedule_from_theorem(Theorem::Two, 0.5, profile, f64::INFINITY, &ScheduleConstants::default())?;
    Ok(SolverConfig { batch, smooth_path, ..cfg })
}

/// Both bias bounds at random coupled states, and the Monte Carlo variance of
/// the batch estimator on both oracle paths.
pub fn bias_variance_suite(states: usize, samples: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let (q, c) = reference_instances(seed)?;
    let (mut sep, mut coup, mut n_sep, mut n_coup) = (f64::INFINITY, f64::INFINITY, 0, 0);
    let per = states.div_ceil(4);
    for lambda in [10.0, 100.0] {
        let mut run = |b: super::lemmas::BiasResidual| {
            sep = sep.min(b.separate_residual());
            n_sep += 1;
            if let Some(r) = b.coupled_residual() {
                coup = coup.min(r);
                n_coup += 1;
            }
        };
        for s in random_coupled_states(&q, lambda, per, 1.0, 0.3, seed)? {
            run(bias_check(&q, &s, lambda)?);
        }
        for s in random_coupled_states(&c, lambda, per, 1.0, 0.3, seed)? {
            run(bias_check(&c, &s, lambda)?);
        }
    }
    let mut out = vec![
        SuiteOutcome::margin("bias within separate-error bound", sep, n_sep),
        SuiteOutcome::margin("bias within coupled-error bound", coup, n_coup),
    ];
    let (sf, sg) = (0.3, 0.2);
    let profile = q.profile().with_noise(sf, sg).with_l_g1_tilde(q.profile().l_g1);
    let oracle = GaussianOracle::new(q.clone(), sf, sg, f64::INFINITY, rng::derive_seed(seed, &[0xA7]))?;
    for smooth in [false, true] {
        let cfg = variance_config(&profile, 4, smooth)?;
        let step = random_coupled_states(&q, cfg.lambda, 1, 1.0, 0.1, seed)?.remove(0);
        let rep = estimator_variance(&q, &oracle, &profile, &cfg, &step, samples)?;
        let bound = if smooth { rep.coupled_bound.unwrap_or(f64::NAN) } else { rep.separate_bound };
        out.push(SuiteOutcome {
            name: format!("estimator variance envelope ({} randomness)", if smooth { "shared" } else { "independent" }),
            passed: rep.within_envelope() && (!smooth || rep.coupled_bound.is_some()),
            worst_residual: bound - (rep.estimate - 3.0 * rep.std_err),
            detail: format!("estimate {:.4e} +- {:.1e} vs bound {bound:.4e}, {samples} samples", rep.estimate, rep.std_err),
        });
    }
    Ok(out)
}

/// The projection shrink property and the contraction of `v = y − z` along
/// instrumented runs, alternating the two reference instances.
pub fn projection_coupling_suite(triples: usize, runs: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let shrink = projection_shrink_check(triples, seed)?;
    let mut out = vec![SuiteOutcome {
        name: "projection shrinks distances to points inside the ball".into(),
        passed: shrink.violations == 0,
        worst_residual: -shrink.max_excess,
        detail: format!("{} violations in {triples} triples", shrink.violations),
    }];
    let (q, c) = reference_instances(seed)?;
    let consts = ScheduleConstants { c_gamma: 4.0, c_t: 1.0, c_m: 0.2, c_k: 0.2, alpha: None };
    let (mut steps, mut contraction, mut feasibility, mut worst) = (0, 0, 0, f64::NEG_INFINITY);
    for i in 0..runs {
        let s = rng::derive_seed(seed, &[0xC0, i as u64]);
        let x0 = Vector::from_element(5, 1.0);
        let (sigma, radius) = (0.2, 1.0);
        let rep = if i % 2 == 0 {
            let profile = q.profile().with_noise(sigma, sigma);
            let cfg = schedule_from_theorem(Theorem::Two, 0.3, &profile, radius, &consts)?;
            let o = GaussianOracle::new(q.clone(), sigma, sigma, radius, s)?;
            coupling_check(&q, &o, &cfg, &profile, x0)?.0
        } else {
            let profile = c.profile().with_noise(sigma, sigma);
            let cfg = schedule_from_theorem(Theorem::Two, 0.3, &profile, radius, &consts)?;
            let o = GaussianOracle::new(c.clone(), sigma, sigma, radius, s)?;
            coupling_check(&c, &o, &cfg, &profile, x0)?.0
        };
        steps += rep.inner_steps;
        contraction += rep.contraction_violations;
        feasibility += rep.feasibility_violations;
        worst = worst.max(rep.max_contraction_excess);
    }
    out.push(SuiteOutcome {
        name: "inner steps contract the coupled difference".into(),
        passed: contraction == 0 && feasibility == 0 && steps > 0,
        worst_residual: negated(worst),
        detail: format!("{steps} inner steps over {runs} runs, {contraction} contraction and {feasibility} feasibility violations"),
    });
    Ok(out)
}

/// Both step-size modes on a 10-dimensional quadratic.
pub fn psgd_suite(seeds: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let obj = QuadraticObjective::random(10, 1.0, 4.0, seed)?;
    let x0 = obj.minimizer() + Vector::from_element(10, 1.0);
    [("fixed", StepMode::default_fixed(&obj)), ("diminishing", StepMode::default_diminishing(&obj))]
        .into_iter()
        .map(|(name, mode)| {
            let cfg = PsgdConfig { mode, sigma: 0.5, checkpoints: vec![0, 1, 5, 20, 100, 400], seeds, x0: x0.clone(), ball: None, seed };
            let rep = psgd_rate_check(&obj, &cfg)?;
            let worst = rep.checkpoints.iter().map(|c| c.envelope - (c.mean_sq_err - 3.0 * c.std_err)).fold(f64::INFINITY, f64::min);
            Ok(SuiteOutcome {
                name: format!("projected SGD envelope ({name} step)"),
                passed: rep.passed(),
                worst_residual: worst,
                detail: format!("{} checkpoints, {seeds} seeds", rep.checkpoints.len()),
            })
        })
        .collect()
}

/// Every lemma suite with the sample sizes of `cfg`.
pub fn verify_lemmas(cfg: &LemmaSuiteConfig) -> Result<Vec<SuiteOutcome>> {
    let mut out = surrogate_suite(cfg.surrogate_points, cfg.seed)?;
    out.extend(bias_variance_suite(cfg.bias_states, cfg.variance_samples, cfg.seed)?);
    out.extend(projection_coupling_suite(cfg.shrink_triples, cfg.coupling_runs, cfg.seed)?);
    out.extend(psgd_suite(cfg.psgd_seeds, cfg.seed)?);
    Ok(out)
}

fn bits(trace: &[crate::solver::TraceRow]) -> Vec<(usize, u64, Vec<u64>)> {
    trace.iter().map(|r| (r.iter, r.oracle_calls, r.x.iter().map(|v| v.to_bits()).collect())).collect()
}

/// Determinism, call accounting, region discipline and batch-size invariance
/// of the noiseless trajectory.
pub fn contract_suite(seed: u64) -> Result<Vec<SuiteOutcome>> {
    let (q, c) = reference_instances(seed)?;
    let sigma = 0.1;
    let consts = ScheduleConstants { c_k: 5.0, ..Default::default() };
    let x0 = Vector::from_element(5, 1.0);
    let mut out = Vec::new();

    let profile = q.profile().with_noise(sigma, sigma);
    let cfg = schedule_from_theorem(Theorem::Two, 0.4, &profile, 1.0, &consts)?;
    let once = || -> Result<_> {
        let o = GaussianOracle::new(q.clone(), sigma, sigma, 1.0, seed)?;
        let r = run_plain(&o, &cfg, &profile, x0.clone())?;
        Ok((r, o.counters()))
    };
    let (a, ca) = once()?;
    let (b, _) = once()?;
    out.push(SuiteOutcome {
        name: "identical seeds give bit-identical traces".into(),
        passed: bits(&a.trace) == bits(&b.trace),
        worst_residual: 0.0,
        detail: format!("{} rows", a.trace.len()),
    });

    let cprof = c.profile().with_noise(sigma, sigma);
    let ccfg = schedule_from_theorem(Theorem::One, 0.4, &cprof, 1.0, &ScheduleConstants { c_t: 0.02, c_m: 0.02, c_k: 2.0, ..Default::default() })?;
    let co = GaussianOracle::new(c.clone(), sigma, sigma, 1.0, seed)?;
    let cr = run_plain(&co, &ccfg, &cprof, x0.clone())?;
    let cc = co.counters();
    let mismatch = (a.oracle_calls as i64 - ca.total() as i64).abs() + (cr.oracle_calls as i64 - cc.total() as i64).abs();
    out.push(SuiteOutcome {
        name: "reported oracle calls equal observed calls".into(),
        passed: mismatch == 0,
        worst_residual: negated(mismatch as f64),
        detail: format!("quadratic {}/{}, cubic {}/{}", a.oracle_calls, ca.total(), cr.oracle_calls, cc.total()),
    });
    let strays = ca.out_of_region + cc.out_of_region;
    out.push(SuiteOutcome {
        name: "no queries outside the reliability region".into(),
        passed: strays == 0,
        worst_residual: negated(strays as f64),
        detail: format!("{} + {} queries checked", ca.points, cc.points),
    });

    let clean = q.profile().with_noise(0.0, 0.0);
    let base = schedule_from_theorem(Theorem::Two, 0.4, &clean, 1.0, &consts)?;
    let trajectory = |m: usize| -> Result<_> {
        let o = GaussianOracle::new(q.clone(), 0.0, 0.0, 1.0, seed)?;
        let r = run_plain(&o, &SolverConfig { batch: m, ..base }, &clean, x0.clone())?;
        Ok(r.trace.iter().map(|t| t.x.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
    };
    let reference = trajectory(1)?;
    let same = [2, 8].iter().map(|&m| trajectory(m)).collect::<Result<Vec<_>>>()?.iter().all(|t| *t == reference);
    out.push(SuiteOutcome {
        name: "noiseless trajectory independent of batch size".into(),
        passed: same,
        worst_residual: 0.0,
        detail: "M in {1, 2, 8}".into(),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_pass(out: &[SuiteOutcome]) {
        for o in out {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn small_surrogate_suite() {
        all_pass(&surrogate_suite(5, 1).unwrap());
    }

    #[test]
    fn small_bias_variance_suite() {
        all_pass(&bias_variance_suite(40, 5000, 1).unwrap());
    }

    #[test]
    fn small_projection_coupling_suite() {
        all_pass(&projection_coupling_suite(500, 2, 1).unwrap());
    }

    #[test]
    fn contract_suite_passes() {
        all_pass(&contract_suite(2).unwrap());
    }
}
