//! Penalty method with coupled lower-level iterates.
//!
//! Each outer step runs `T` coupled stochastic-gradient steps on
//! `y ≈ y*_λ(x)` and `z ≈ y*(x)`, keeping both inside the oracle's reliability
//! region by projecting around `ŷ(x)`, then moves `x` along an `M`-sample
//! estimate of `∇L*_λ(x)`.
//!
//! On the smooth path (finite `l̃_g1`) the pair `(y, z)` always sees the same
//! random draw and `y − z` is kept within `r_λ`; on the other path `z` is kept
//! near `ŷ(x)` and the outer pair is drawn independently.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Vector;
use crate::oracles::{Randomness, StochasticOracle};
use crate::problems::{derived_constants, SmoothnessProfile};

/// Euclidean projection onto the closed ball `B(center, radius)`. An infinite
/// radius returns `point` unchanged.
pub fn project_ball(point: &Vector, center: &Vector, radius: f64) -> Result<Vector> {
    if !(radius > 0.0) {
        return Err(invalid("radius", format!("must be positive, got {radius}")));
    }
    Ok(project(point, center, radius))
}

fn project(point: &Vector, center: &Vector, radius: f64) -> Vector {
    if radius.is_infinite() {
        return point.clone();
    }
    let d = point - center;
    let n = d.norm();
    if n <= radius {
        point.clone()
    } else {
        center + d * (radius / n)
    }
}

/// Inner step sizes `γ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { gamma: f64 },
    /// `γ_t = beta/(1 + t)`.
    Diminishing { beta: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { gamma } => gamma,
            StepSchedule::Diminishing { beta } => beta / (1.0 + t as f64),
        }
    }

    fn scale(&self) -> f64 {
        match *self {
            StepSchedule::Constant { gamma } => gamma,
            StepSchedule::Diminishing { beta } => beta,
        }
    }
}

/// Serializes an infinite radius as `null`.
pub mod radius_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &f64, s: S) -> Result<S::Ok, S::Error> {
        if r.is_finite() { s.serialize_some(r) } else { s.serialize_none() }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: StepSchedule,
    pub inner_iters: usize,
    pub batch: usize,
    pub outer_iters: usize,
    #[serde(with = "radius_serde")]
    pub radius: f64,
    pub r_lambda: f64,
    pub smooth_path: bool,
}

impl SolverConfig {
    /// Checks every parameter constraint before any oracle call is made.
    pub fn validate(&self, profile: &SmoothnessProfile) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        profile.validate()?;
        let c = derived_constants(profile)?;
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.inner_iters == 0 || self.batch == 0 || self.outer_iters == 0 {
            return bad("inner_iters (T), batch (M) and outer_iters (K) must all be at least 1".into());
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius r must be positive or null (infinite), got {}", self.radius));
        }
        let floor = (c.lambda0 / self.epsilon).max(6.0 * profile.l_f0 / (profile.mu_g * self.radius));
        if !(self.lambda >= floor * (1.0 - 1e-12)) {
            return bad(format!(
                "lambda = {} is below the floor max(lambda0/epsilon, 6 l_f0/(mu_g r)) = {floor}",
                self.lambda
            ));
        }
        let r_lambda = c.r_lambda(self.lambda);
        if !((self.r_lambda - r_lambda).abs() <= 1e-9 * r_lambda.max(f64::MIN_POSITIVE)) {
            return bad(format!(
                "r_lambda = {} must equal l_f0/(mu_g lambda) = {r_lambda}",
                self.r_lambda
            ));
        }
        let alpha_max = 0.5 / c.surrogate_smoothness;
        if !(self.alpha > 0.0 && self.alpha < alpha_max) {
            return bad(format!(
                "alpha = {} must lie in (0, 1/(2L)) = (0, {alpha_max}) with L the surrogate smoothness",
                self.alpha
            ));
        }
        if !(self.gamma.scale() > 0.0 && self.gamma.scale().is_finite()) {
            return bad("inner step size must be positive and finite".into());
        }
        if self.smooth_path && !profile.l_g1_tilde.is_finite() {
            return bad("the coupled-randomness path needs a finite l_g1_tilde".into());
        }
        Ok(())
    }

    /// Oracle calls per outer step: one `ŷ` request (skipped after the first
    /// step when `r` is infinite), `2T` inner points and `2M` outer points.
    pub fn calls_per_step(&self, k: usize) -> u64 {
        let y_hat = u64::from(k == 0 || self.radius.is_finite());
        y_hat + 2 * self.inner_iters as u64 + 2 * self.batch as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theorem {
    /// Diminishing inner steps, `T, M ≍ ε⁻⁴`.
    One,
    /// Constant inner steps `γ ≍ ε²`, `T, M, K ≍ ε⁻²`, coupled randomness.
    Two,
}

/// Absolute constants multiplying the asymptotic orders of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConstants {
    pub c_gamma: f64,
    pub c_t: f64,
    pub c_m: f64,
    pub c_k: f64,
    /// Overrides the default `α = 0.4/L`.
    pub alpha: Option<f64>,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        Self { c_gamma: 1.0, c_t: 1.0, c_m: 1.0, c_k: 1.0, alpha: None }
    }
}

fn count(c: f64, epsilon: f64, order: i32) -> usize {
    ((c * epsilon.powi(-order) - 1e-9).ceil() as usize).max(1)
}

/// Fills a [`SolverConfig`] from the theorem's orders times `constants`.
pub fn schedule_from_theorem(
    theorem: Theorem,
    epsilon: f64,
    profile: &SmoothnessProfile,
    radius: f64,
    constants: &ScheduleConstants,
) -> Result<SolverConfig> {
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    if !(radius > 0.0) {
        return Err(invalid("radius", format!("must be positive, got {radius}")));
    }
    let c = derived_constants(profile)?;
    let lambda = (c.lambda0 / epsilon).max(6.0 * profile.l_f0 / (profile.mu_g * radius));
    let alpha = constants.alpha.unwrap_or(0.4 / c.surrogate_smoothness);
    let (gamma, inner_iters, batch, smooth_path) = match theorem {
        Theorem::One => {
            let beta = 2.0 / profile.mu_g + lambda / (profile.l_f1 + lambda * profile.l_g1);
            (StepSchedule::Diminishing { beta: constants.c_gamma * beta }, count(constants.c_t, epsilon, 4), count(constants.c_m, epsilon, 4), false)
        }
        Theorem::Two => {
            if !profile.l_g1_tilde.is_finite() {
                return Err(invalid("theorem", "the constant-step schedule needs a finite l_g1_tilde"));
            }
            (StepSchedule::Constant { gamma: constants.c_gamma * epsilon * epsilon }, count(constants.c_t, epsilon, 2), count(constants.c_m, epsilon, 2), true)
        }
    };
    Ok(SolverConfig {
        epsilon,
        lambda,
        alpha,
        gamma,
        inner_iters,
        batch,
        outer_iters: count(constants.c_k, epsilon, 2),
        radius,
        r_lambda: c.r_lambda(lambda),
        smooth_path,
    })
}

/// Iterates between outer steps: `y ≈ y*_λ(x)`, `z ≈ y*(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub k: usize,
    pub x: Vector,
    pub y: Vector,
    pub z: Vector,
}

/// Progress notifications for instrumentation.
#[derive(Debug)]
pub enum SolverEvent<'a> {
    /// One coupled inner step, before (`*_bar`) and after projection.
    Inner {
        k: usize,
        t: usize,
        x: &'a Vector,
        y_hat: Option<&'a Vector>,
        y_bar: &'a Vector,
        z_bar: &'a Vector,
        y: &'a Vector,
        z: &'a Vector,
    },
    /// One outer update with the batch estimate `g_hat` evaluated at the
    /// terminal inner iterates.
    Outer {
        k: usize,
        x: &'a Vector,
        y: &'a Vector,
        z: &'a Vector,
        g_hat: &'a Vector,
        x_next: &'a Vector,
    },
}

/// Outer iterate and cumulative oracle calls at the start of iteration `iter`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub oracle_calls: u64,
    pub x: Vector,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Rows `0..=K`; row `K` holds the final iterate.
    pub trace: Vec<TraceRow>,
    pub state: SolverState,
    /// Calls issued according to the solver's own bookkeeping.
    pub oracle_calls: u64,
}

fn key(k: usize, phase: u64, i: usize) -> [u64; 3] {
    [k as u64, phase, i as u64]
}

/// Coupled inner loop for outer step `k`; returns the terminal `(y, z)`.
pub fn inner_loop<O: StochasticOracle + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig,
    k: usize,
    x: &Vector,
    y_hat: Option<&Vector>,
    mut y: Vector,
    mut z: Vector,
    observer: &mut dyn FnMut(&SolverEvent),
) -> Result<(Vector, Vector)> {
    let r = cfg.radius;
    let centre = |p: &Vector, rad: f64| match y_hat {
        Some(c) if r.is_finite() => project(p, c, rad),
        _ => p.clone(),
    };
    for t in 0..cfg.inner_iters {
        let gamma = cfg.gamma.at(t);
        let resp = oracle.query(&[(x, &y), (x, &z)], Randomness::Shared, &key(k, 0, t))?;
        let h_y = &resp[0].grad_y_f / cfg.lambda + &resp[0].grad_y_g;
        let h_z = &resp[1].grad_y_g;
        let y_bar = &y - h_y * gamma;
        let z_bar = &z - h_z * gamma;
        let y_next = centre(&y_bar, 2.0 * r / 3.0);
        let z_next = if cfg.smooth_path {
            let shifted = &z_bar + (&y_next - &y_bar);
            project(&shifted, &y_next, cfg.r_lambda)
        } else {
            centre(&z_bar, r / 2.0)
        };
        observer(&SolverEvent::Inner { k, t, x, y_hat, y_bar: &y_bar, z_bar: &z_bar, y: &y_next, z: &z_next });
        y = y_next;
        z = z_next;
    }
    Ok((y, z))
}

/// `M`-sample estimate `Ĝ` of `∇L*_λ(x)` at the inner iterates `(y, z)`.
///
/// The mean is accumulated incrementally so that identical samples average
/// to exactly that sample.
pub fn batch_gradient<O: StochasticOracle + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig,
    k: usize,
    x: &Vector,
    y: &Vector,
    z: &Vector,
) -> Result<Vector> {
    let randomness = if cfg.smooth_path { Randomness::Shared } else { Randomness::Independent };
    let mut mean = Vector::zeros(x.len());
    for m in 0..cfg.batch {
        let resp = oracle.query(&[(x, y), (x, z)], randomness, &key(k, 1, m))?;
        let h_x = &resp[0].grad_x_f + (&resp[0].grad_x_g - &resp[1].grad_x_g) * cfg.lambda;
        mean += (h_x - &mean) / (m + 1) as f64;
    }
    Ok(mean)
}

/// One outer iteration from `state`.
pub fn outer_step<O: StochasticOracle + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig,
    state: SolverState,
    y_hat: Option<&Vector>,
    observer: &mut dyn FnMut(&SolverEvent),
) -> Result<SolverState> {
    let SolverState { k, x, y, z } = state;
    let r = cfg.radius;
    let (y0, z0) = match y_hat {
        Some(c) if r.is_finite() => {
            let y0 = project(&y, c, 2.0 * r / 3.0);
            let z0 = if cfg.smooth_path {
                project(&(&z + (&y0 - &y)), &y0, cfg.r_lambda)
            } else {
                project(&z, c, r / 2.0)
            };
            (y0, z0)
        }
        _ => {
            let z0 = if cfg.smooth_path { project(&z, &y, cfg.r_lambda) } else { z };
            (y, z0)
        }
    };
    let (y1, z1) = inner_loop(oracle, cfg, k, &x, y_hat, y0, z0, observer)?;
    let g_hat = batch_gradient(oracle, cfg, k, &x, &y1, &z1)?;
    let x_next = &x - &g_hat * cfg.alpha;
    observer(&SolverEvent::Outer { k, x: &x, y: &y1, z: &z1, g_hat: &g_hat, x_next: &x_next });
    Ok(SolverState { k: k + 1, x: x_next, y: y1, z: z1 })
}

/// Runs exactly `K` outer steps from `x⁰` with `y⁰ = z⁰ = ŷ(x⁰)`.
pub fn run<O: StochasticOracle + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig,
    profile: &SmoothnessProfile,
    x0: Vector,
    observer: &mut dyn FnMut(&SolverEvent),
) -> Result<RunOutput> {
    run_until(oracle, cfg, profile, x0, observer, &mut |_| false)
}

/// [`run`] that ends early once `stop` accepts a freshly recorded trace row.
pub fn run_until<O: StochasticOracle + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig,
    profile: &SmoothnessProfile,
    x0: Vector,
    observer: &mut dyn FnMut(&SolverEvent),
    stop: &mut dyn FnMut(&TraceRow) -> bool,
) -> Result<RunOutput> {
    cfg.validate(profile)?;
    let mut trace = Vec::with_capacity(cfg.outer_iters + 1);
    trace.push(TraceRow { iter: 0, oracle_calls: 0, x: x0.clone() });
    let mut calls = 0u64;
    let first = oracle.y_hat(&x0)?;
    let mut state = SolverState { k: 0, y: first.clone(), z: first.clone(), x: x0 };
    if stop(&trace[0]) {
        return Ok(RunOutput { trace, state, oracle_calls: 1 });
    }
    let mut y_hat = Some(first);
    for k in 0..cfg.outer_iters {
        if k > 0 {
            y_hat = if cfg.radius.is_finite() { Some(oracle.y_hat(&state.x)?) } else { None };
        }
        state = outer_step(oracle, cfg, state, y_hat.as_ref(), observer)?;
        calls += cfg.calls_per_step(k);
        trace.push(TraceRow { iter: k + 1, oracle_calls: calls, x: state.x.clone() });
        if stop(trace.last().expect("non-empty")) {
            break;
        }
    }
    Ok(RunOutput { trace, state, oracle_calls: calls })
}

/// [`run`] without instrumentation.
pub fn run_plain<O: StochasticOracle + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig,
    profile: &SmoothnessProfile,
    x0: Vector,
) -> Result<RunOutput> {
    run(oracle, cfg, profile, x0, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::GaussianOracle;
    use crate::problems::{BilevelProblem, QuadraticInstance};
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn projection_examples() {
        let p = project_ball(&v(&[3.0, 4.0]), &v(&[0.0, 0.0]), 1.0).unwrap();
        assert!((p - v(&[0.6, 0.8])).norm() < 1e-15);
        assert_eq!(project_ball(&v(&[0.1, 0.2]), &v(&[0.0, 0.0]), 1.0).unwrap(), v(&[0.1, 0.2]));
        assert!(project_ball(&v(&[0.1]), &v(&[0.0]), 0.0).is_err());
        assert_eq!(project_ball(&v(&[1e9]), &v(&[0.0]), f64::INFINITY).unwrap(), v(&[1e9]));
    }

    #[test]
    fn schedule_examples() {
        let q = QuadraticInstance::random(3, 3, 1.0, 1);
        let p = q.profile();
        let lambda0 = derived_constants(&p).unwrap().lambda0;
        let c = schedule_from_theorem(Theorem::Two, 0.1, &p, 1.0, &ScheduleConstants::default()).unwrap();
        assert_eq!((c.inner_iters, c.batch, c.outer_iters), (100, 100, 100));
        assert_eq!(c.gamma, StepSchedule::Constant { gamma: 0.1 * 0.1 });
        assert_eq!(c.lambda, (lambda0 * 10.0).max(6.0 * p.l_f0 / (p.mu_g * 1.0)));
        let inf = schedule_from_theorem(Theorem::Two, 0.1, &p, f64::INFINITY, &ScheduleConstants::default()).unwrap();
        assert_eq!(inf.lambda, lambda0 / 0.1);
        assert_eq!(inf.r_lambda, p.l_f0 / (p.mu_g * inf.lambda));
        assert!(inf.validate(&p).is_ok());
        let one = schedule_from_theorem(Theorem::One, 0.1, &p, 1.0, &ScheduleConstants::default()).unwrap();
        assert_eq!((one.inner_iters, one.batch, one.outer_iters), (10_000, 10_000, 100));
        assert!(!one.smooth_path);
        assert!(schedule_from_theorem(Theorem::Two, 0.0, &p, 1.0, &ScheduleConstants::default()).is_err());
        let rough = p.with_l_g1_tilde(f64::INFINITY);
        assert!(schedule_from_theorem(Theorem::Two, 0.1, &rough, 1.0, &ScheduleConstants::default()).is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let q = QuadraticInstance::random(3, 3, 1.0, 1);
        let p = q.profile();
        let good = schedule_from_theorem(Theorem::Two, 0.2, &p, 1.0, &ScheduleConstants::default()).unwrap();
        assert!(good.validate(&p).is_ok());
        let cases = [
            SolverConfig { lambda: good.lambda * 0.5, ..good },
            SolverConfig { r_lambda: good.r_lambda * 2.0, ..good },
            SolverConfig { alpha: 1.0, ..good },
            SolverConfig { inner_iters: 0, ..good },
            SolverConfig { radius: 0.0, ..good },
        ];
        for c in cases {
            assert!(matches!(c.validate(&p), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn zero_noise_fixed_point() {
        let q = QuadraticInstance::random(3, 3, 1.0, 2);
        let o = GaussianOracle::new(q.clone(), 0.0, 0.0, f64::INFINITY, 0).unwrap();
        let p = q.profile();
        let cfg = schedule_from_theorem(Theorem::Two, 0.2, &p, f64::INFINITY, &ScheduleConstants { c_gamma: 10.0, ..Default::default() }).unwrap();
        let x = v(&[0.2, -0.4, 1.0]);
        let y = q.y_star_lambda(&x, cfg.lambda).unwrap();
        let z = q.y_star(&x).unwrap();
        let (y1, z1) = inner_loop(&o, &cfg, 0, &x, None, y.clone(), z.clone(), &mut |_| {}).unwrap();
        assert!((y1 - y).norm() < 1e-14);
        assert!((z1 - z).norm() < 1e-14);
    }

    #[test]
    fn deterministic_run_converges_and_counts() {
        let q = QuadraticInstance::random(4, 4, 1.0, 3);
        let o = GaussianOracle::new(q.clone(), 0.0, 0.0, 1.0, 0).unwrap();
        let p = q.profile();
        let consts = ScheduleConstants { c_gamma: 20.0, c_t: 0.5, c_m: 0.01, c_k: 30.0, alpha: None };
        let cfg = schedule_from_theorem(Theorem::Two, 0.2, &p, 1.0, &consts).unwrap();
        let out = run_plain(&o, &cfg, &p, Vector::from_element(4, 2.0)).unwrap();
        let g = q.hypergradient(&out.state.x).unwrap().norm();
        assert!(g <= 1e-3, "final gradient norm {g}");
        assert_eq!(out.oracle_calls, o.counters().total());
        assert_eq!(o.counters().out_of_region, 0);
        assert_eq!(out.trace.len(), cfg.outer_iters + 1);
    }

    proptest! {
        #[test]
        fn projection_lands_in_ball_and_is_nonexpansive(
            p in prop::collection::vec(-10.0..10.0f64, 3),
            q in prop::collection::vec(-10.0..10.0f64, 3),
            c in prop::collection::vec(-1.0..1.0f64, 3),
            r in 0.01..5.0f64,
        ) {
            let (p, q, c) = (Vector::from_vec(p), Vector::from_vec(q), Vector::from_vec(c));
            let pp = project_ball(&p, &c, r).unwrap();
            let qq = project_ball(&q, &c, r).unwrap();
            prop_assert!((&pp - &c).norm() <= r * (1.0 + 1e-12));
            prop_assert!((&pp - &qq).norm() <= (&p - &q).norm() + 1e-12);
        }
    }
}
