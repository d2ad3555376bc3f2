//! Stochastic first-order oracles that also return an estimate `ŷ(x)` of the
//! lower-level solution and are only guaranteed unbiased within a reliability
//! radius `r` of `y*(x)`.
//!
//! All randomness is counter-based: a query is keyed by the caller (outer
//! iteration, phase, sample index) and the oracle's master seed, so results do
//! not depend on evaluation order or thread placement.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, prog_with_phantom, ChainConfig};
use crate::linalg::Vector;
use crate::problems::{self, clipped_mean_gradient, BilevelProblem, EmbeddedInstance};
use crate::rng;

/// Magnitude of the constant vector returned for queries outside the
/// reliability region.
pub const OUT_OF_REGION_MAGNITUDE: f64 = 1e3;

/// Whether the points of one batch see the same random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Randomness {
    Shared,
    Independent,
}

/// Stochastic gradients of `f` and `g` at one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    pub grad_x_f: Vector,
    pub grad_y_f: Vector,
    pub grad_x_g: Vector,
    pub grad_y_g: Vector,
}

#[derive(Debug, Default)]
pub struct OracleCounters {
    points: AtomicU64,
    y_hat: AtomicU64,
    shared_batches: AtomicU64,
    independent_batches: AtomicU64,
    out_of_region: AtomicU64,
}

/// Point-in-time copy of an oracle's counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    /// Gradient query points served.
    pub points: u64,
    /// `ŷ(x)` requests served.
    pub y_hat: u64,
    /// Batches of two or more points drawn with one shared draw.
    pub shared_batches: u64,
    /// Batches of two or more points drawn independently.
    pub independent_batches: u64,
    /// Points that fell outside the reliability region.
    pub out_of_region: u64,
}

impl CounterSnapshot {
    /// Oracle calls in the complexity unit used throughout: query points plus
    /// `ŷ` requests.
    pub fn total(&self) -> u64 {
        self.points + self.y_hat
    }

    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            points: self.points - earlier.points,
            y_hat: self.y_hat - earlier.y_hat,
            shared_batches: self.shared_batches - earlier.shared_batches,
            independent_batches: self.independent_batches - earlier.independent_batches,
            out_of_region: self.out_of_region - earlier.out_of_region,
        }
    }
}

impl OracleCounters {
    fn record_batch(&self, size: usize, randomness: Randomness) {
        self.points.fetch_add(size as u64, Ordering::Relaxed);
        if size >= 2 {
            let c = match randomness {
                Randomness::Shared => &self.shared_batches,
                Randomness::Independent => &self.independent_batches,
            };
            c.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            points: self.points.load(Ordering::Relaxed),
            y_hat: self.y_hat.load(Ordering::Relaxed),
            shared_batches: self.shared_batches.load(Ordering::Relaxed),
            independent_batches: self.independent_batches.load(Ordering::Relaxed),
            out_of_region: self.out_of_region.load(Ordering::Relaxed),
        }
    }
}

/// A `y*`-aware stochastic oracle.
pub trait StochasticOracle: Send + Sync {
    /// Largest batch accepted by [`StochasticOracle::query`].
    fn capacity(&self) -> usize;
    /// Reliability radius `r` (may be infinite).
    fn radius(&self) -> f64;
    /// Answers a batch of `(x, y)` points. `key` identifies the draw: equal
    /// keys give equal answers.
    fn query(&self, points: &[(&Vector, &Vector)], randomness: Randomness, key: &[u64]) -> Result<Vec<OracleResponse>>;
    /// An estimate with `‖ŷ(x) − y*(x)‖ ≤ r/2`.
    fn y_hat(&self, x: &Vector) -> Result<Vector>;
    fn counters(&self) -> CounterSnapshot;
}

fn check_batch(size: usize, capacity: usize) -> Result<()> {
    if size > capacity {
        return Err(Error::BatchTooLarge { size, capacity });
    }
    Ok(())
}

fn check_capacity(capacity: usize) -> Result<()> {
    if capacity < 2 {
        return Err(invalid("capacity", format!("oracles accept at least 2 simultaneous points, got {capacity}")));
    }
    Ok(())
}

fn draw_key(key: &[u64], randomness: Randomness, index: usize) -> Vec<u64> {
    let mut k = key.to_vec();
    match randomness {
        Randomness::Shared => k.push(0),
        Randomness::Independent => {
            k.push(1);
            k.push(index as u64);
        }
    }
    k
}

fn hash_point(seed: u64, x: &Vector) -> u64 {
    let bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
    rng::derive_seed(seed ^ 0xD1B5_4A32_D192_ED03, &bits)
}

/// Gaussian-noise oracle over any [`BilevelProblem`].
///
/// Noise is isotropic with per-component variance `σ²/(d_x + d_y)`, so the
/// total variance of each stochastic gradient is `σ²`. Shared batches reuse
/// the same noise vector at every point, which makes the stochastic gradient
/// difference between two points exactly the deterministic one.
#[derive(Debug)]
pub struct GaussianOracle<P> {
    problem: P,
    sigma_f: f64,
    sigma_g: f64,
    radius: f64,
    capacity: usize,
    seed: u64,
    solve_tol: f64,
    counters: OracleCounters,
}

impl<P: BilevelProblem> GaussianOracle<P> {
    pub fn new(problem: P, sigma_f: f64, sigma_g: f64, radius: f64, seed: u64) -> Result<Self> {
        if !(sigma_f >= 0.0 && sigma_g >= 0.0) {
            return Err(invalid("sigma", "noise levels must be non-negative"));
        }
        if !(radius > 0.0) {
            return Err(invalid("radius", format!("must be positive, got {radius}")));
        }
        Ok(Self { problem, sigma_f, sigma_g, radius, capacity: 2, seed, solve_tol: 1e-12, counters: OracleCounters::default() })
    }

    pub fn with_capacity(mut self, capacity: usize) -> Result<Self> {
        check_capacity(capacity)?;
        self.capacity = capacity;
        Ok(self)
    }

    pub fn problem(&self) -> &P {
        &self.problem
    }

    fn y_star(&self, x: &Vector) -> Result<Vector> {
        problems::lower_solution(&self.problem, x, self.solve_tol)
    }

    fn adversarial(&self) -> OracleResponse {
        let (dx, dy) = (self.problem.dim_x(), self.problem.dim_y());
        let block = |n: usize| Vector::from_element(n, OUT_OF_REGION_MAGNITUDE / (n as f64).sqrt());
        OracleResponse { grad_x_f: block(dx), grad_y_f: block(dy), grad_x_g: block(dx), grad_y_g: block(dy) }
    }
}

impl<P: BilevelProblem> StochasticOracle for GaussianOracle<P> {
    fn capacity(&self) -> usize {
        self.capacity
    }

    fn radius(&self) -> f64 {
        self.radius
    }

    fn query(&self, points: &[(&Vector, &Vector)], randomness: Randomness, key: &[u64]) -> Result<Vec<OracleResponse>> {
        check_batch(points.len(), self.capacity)?;
        self.counters.record_batch(points.len(), randomness);
        let (dx, dy) = (self.problem.dim_x(), self.problem.dim_y());
        let n = (dx + dy) as f64;
        let (sf, sg) = (self.sigma_f / n.sqrt(), self.sigma_g / n.sqrt());
        let mut out = Vec::with_capacity(points.len());
        for (i, &(x, y)) in points.iter().enumerate() {
            if self.radius.is_finite() && (y - self.y_star(x)?).norm() > self.radius {
                self.counters.out_of_region.fetch_add(1, Ordering::Relaxed);
                out.push(self.adversarial());
                continue;
            }
            let mut r = rng::stream(self.seed, &draw_key(key, randomness, i));
            let mut noise = |len: usize, s: f64| Vector::from_fn(len, |_, _| s * r.sample::<f64, _>(StandardNormal));
            let (nfx, nfy) = (noise(dx, sf), noise(dy, sf));
            let (ngx, ngy) = (noise(dx, sg), noise(dy, sg));
            out.push(OracleResponse {
                grad_x_f: self.problem.grad_x_f(x, y) + nfx,
                grad_y_f: self.problem.grad_y_f(x, y) + nfy,
                grad_x_g: self.problem.grad_x_g(x, y) + ngx,
                grad_y_g: self.problem.grad_y_g(x, y) + ngy,
            });
        }
        Ok(out)
    }

    /// `y*(x)` moved by exactly `r/4` in a direction seeded by `x`; `y*(x)`
    /// itself when `r` is infinite.
    fn y_hat(&self, x: &Vector) -> Result<Vector> {
        self.counters.y_hat.fetch_add(1, Ordering::Relaxed);
        let y = self.y_star(x)?;
        if !self.radius.is_finite() {
            return Ok(y);
        }
        let mut r = rng::stream(hash_point(self.seed, x), &[0x59_48_41_54]);
        let dir = loop {
            let v = Vector::from_fn(y.len(), |_, _| r.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        Ok(y + dir * (self.radius / 4.0))
    }

    fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }
}

/// `max(ε⁴/σ², ε²/l̃²)`, capped at 1.
pub fn default_progression_probability(epsilon: f64, sigma: f64, l_g1_tilde: f64) -> f64 {
    let a = if sigma > 0.0 { epsilon.powi(4) / (sigma * sigma) } else { f64::INFINITY };
    let b = if l_g1_tilde.is_finite() && l_g1_tilde > 0.0 { epsilon * epsilon / (l_g1_tilde * l_g1_tilde) } else { 0.0 };
    a.max(b).min(1.0)
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid("p", format!("progression probability must lie in (0, 1], got {p}")));
    }
    Ok(())
}

fn multipliers(h: &[f64], xi: bool, p: f64) -> impl Iterator<Item = f64> + '_ {
    let s = if xi { 1.0 / p - 1.0 } else { -1.0 };
    h.iter().map(move |&hi| 1.0 + hi * s)
}

/// `∇̂_{x_i} g = ∇_{x_i} g_b · (1 + h_i(x)(ξ/p − 1))`.
pub fn zero_chain_grad_x(x: &[f64], y: f64, xi: bool, p: f64, cfg: &ChainConfig) -> Result<Vec<f64>> {
    check_p(p)?;
    let gb = clipped_mean_gradient(x, y, cfg)?;
    let h = kernels::smooth_indicators(x, cfg)?;
    Ok(gb.iter().zip(multipliers(&h, xi, p)).map(|(g, m)| g * m).collect())
}

/// `∇̂_y g = 2(y − ε² Σ f_i(x)(1 + h_i(x)(ξ/p − 1)))`.
pub fn zero_chain_grad_y(x: &[f64], y: f64, xi: bool, p: f64, cfg: &ChainConfig) -> Result<f64> {
    check_p(p)?;
    let f = kernels::chain_terms(x, cfg)?;
    let h = kernels::smooth_indicators(x, cfg)?;
    let s: f64 = f.iter().zip(multipliers(&h, xi, p)).map(|(fi, m)| fi * m).sum();
    Ok(2.0 * (y - cfg.epsilon * cfg.epsilon * s))
}

/// `ŷ(x) = ε² Σ_{i ≤ prog_{ε/2}(x)} f_i(x)`.
pub fn zero_chain_y_hat(x: &[f64], cfg: &ChainConfig) -> Result<f64> {
    let f = kernels::chain_terms(x, cfg)?;
    let k = prog_with_phantom(x, cfg.epsilon / 2.0, cfg.epsilon);
    Ok(cfg.epsilon * cfg.epsilon * f[..k].iter().sum::<f64>())
}

/// Probabilistic zero-chain oracle for the hard instance, optionally composed
/// with the randomized embedding.
#[derive(Debug)]
pub struct ZeroChainOracle {
    cfg: ChainConfig,
    p: f64,
    capacity: usize,
    seed: u64,
    embedding: Option<EmbeddedInstance>,
    counters: OracleCounters,
}

impl ZeroChainOracle {
    pub fn new(cfg: ChainConfig, p: f64, seed: u64) -> Result<Self> {
        check_p(p)?;
        Ok(Self { cfg, p, capacity: 2, seed, embedding: None, counters: OracleCounters::default() })
    }

    /// Oracle for `f_U, g_U`: chain quantities are evaluated at `Uᵀρ(x)` and
    /// `x`-gradients pushed forward by `J(x)ᵀU`.
    pub fn embedded(instance: EmbeddedInstance, p: f64, seed: u64) -> Result<Self> {
        check_p(p)?;
        Ok(Self { cfg: instance.chain.cfg, p, capacity: 2, seed, embedding: Some(instance), counters: OracleCounters::default() })
    }

    pub fn with_capacity(mut self, capacity: usize) -> Result<Self> {
        check_capacity(capacity)?;
        self.capacity = capacity;
        Ok(self)
    }

    pub fn chain(&self) -> &ChainConfig {
        &self.cfg
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    fn draw(&self, key: &[u64]) -> bool {
        rng::stream(self.seed, key).random_bool(self.p)
    }

    fn respond(&self, x: &Vector, y: &Vector, xi: bool) -> Result<OracleResponse> {
        if y.len() != 1 {
            return Err(Error::DimensionMismatch { what: "lower-level variable", expected: 1, found: y.len() });
        }
        match &self.embedding {
            None => Ok(OracleResponse {
                grad_x_f: Vector::zeros(x.len()),
                grad_y_f: Vector::from_element(1, 1.0),
                grad_x_g: Vector::from_vec(zero_chain_grad_x(x.as_slice(), y[0], xi, self.p, &self.cfg)?),
                grad_y_g: Vector::from_element(1, zero_chain_grad_y(x.as_slice(), y[0], xi, self.p, &self.cfg)?),
            }),
            Some(emb) => {
                let (z, jac) = emb.pullback(x);
                let gx = Vector::from_vec(zero_chain_grad_x(z.as_slice(), y[0], xi, self.p, &self.cfg)?);
                Ok(OracleResponse {
                    grad_x_f: x / 5.0,
                    grad_y_f: Vector::from_element(1, 1.0),
                    grad_x_g: emb.pushforward(&jac, &gx),
                    grad_y_g: Vector::from_element(1, zero_chain_grad_y(z.as_slice(), y[0], xi, self.p, &self.cfg)?),
                })
            }
        }
    }
}

impl StochasticOracle for ZeroChainOracle {
    fn capacity(&self) -> usize {
        self.capacity
    }

    fn radius(&self) -> f64 {
        problems::chain_radius(&self.cfg)
    }

    fn query(&self, points: &[(&Vector, &Vector)], randomness: Randomness, key: &[u64]) -> Result<Vec<OracleResponse>> {
        check_batch(points.len(), self.capacity)?;
        self.counters.record_batch(points.len(), randomness);
        points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| self.respond(x, y, self.draw(&draw_key(key, randomness, i))))
            .collect()
    }

    fn y_hat(&self, x: &Vector) -> Result<Vector> {
        self.counters.y_hat.fetch_add(1, Ordering::Relaxed);
        let v = match &self.embedding {
            None => zero_chain_y_hat(x.as_slice(), &self.cfg)?,
            Some(emb) => zero_chain_y_hat(emb.pullback(x).0.as_slice(), &self.cfg)?,
        };
        Ok(Vector::from_element(1, v))
    }

    fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }
}

/// Which block of an [`OracleResponse`] to summarize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    GradXF,
    GradYF,
    GradXG,
    GradYG,
}

impl Component {
    pub fn pick<'a>(&self, r: &'a OracleResponse) -> &'a Vector {
        match self {
            Component::GradXF => &r.grad_x_f,
            Component::GradYF => &r.grad_y_f,
            Component::GradXG => &r.grad_x_g,
            Component::GradYG => &r.grad_y_g,
        }
    }
}

/// Sample mean and covariance trace with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: Vec<f64>,
    pub mean_std_err: Vec<f64>,
    pub trace: f64,
    pub trace_std_err: f64,
}

/// Moments of a stream of samples, accumulated in one pass (Welford).
pub fn sample_moments<I: IntoIterator<Item = Vector>>(samples: I) -> Result<Moments> {
    let samples: Vec<Vector> = samples.into_iter().collect();
    let n = samples.len();
    if n < 2 {
        return Err(invalid("n_samples", format!("need at least 2 samples, got {n}")));
    }
    let d = samples[0].len();
    let mut mean = Vector::zeros(d);
    let mut m2 = Vector::zeros(d);
    for (k, s) in samples.iter().enumerate() {
        let delta = s - &mean;
        mean += &delta / (k + 1) as f64;
        m2 += delta.component_mul(&(s - &mean));
    }
    let var = m2 / (n - 1) as f64;
    let trace = var.sum();
    // Standard error of the trace from the spread of per-sample squared deviations.
    let dev: Vec<f64> = samples.iter().map(|s| (s - &mean).norm_squared()).collect();
    let dm = dev.iter().sum::<f64>() / n as f64;
    let dv = dev.iter().map(|v| (v - dm).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(Moments {
        n,
        mean: mean.iter().copied().collect(),
        mean_std_err: var.iter().map(|v| (v / n as f64).sqrt()).collect(),
        trace,
        trace_std_err: (dv / n as f64).sqrt(),
    })
}

/// Monte Carlo moments of one response block at a fixed point, over
/// `n_samples` independent draws keyed by `(key, i)`.
pub fn estimate_moments<O: StochasticOracle + ?Sized>(
    oracle: &O,
    x: &Vector,
    y: &Vector,
    component: Component,
    n_samples: usize,
    key: u64,
) -> Result<Moments> {
    if n_samples < 2 {
        return Err(invalid("n_samples", format!("need at least 2 samples, got {n_samples}")));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let r = oracle.query(&[(x, y)], Randomness::Independent, &[key, i as u64])?;
        samples.push(component.pick(&r[0]).clone());
    }
    sample_moments(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::QuadraticInstance;

    fn quad() -> QuadraticInstance {
        QuadraticInstance::random(3, 4, 1.0, 7)
    }

    #[test]
    fn zero_noise_is_exact() {
        let q = quad();
        let o = GaussianOracle::new(q.clone(), 0.0, 0.0, f64::INFINITY, 1).unwrap();
        let x = Vector::from_vec(vec![0.1, 0.2, -0.3]);
        let y = Vector::from_vec(vec![1.0, 0.0, 2.0, -1.0]);
        let r = &o.query(&[(&x, &y)], Randomness::Independent, &[0]).unwrap()[0];
        assert_eq!(r.grad_x_g, q.grad_x_g(&x, &y));
        assert_eq!(r.grad_y_g, q.grad_y_g(&x, &y));
        let m = estimate_moments(&o, &x, &y, Component::GradYG, 10, 0).unwrap();
        assert_eq!(m.trace, 0.0);
    }

    #[test]
    fn batch_capacity_and_counting() {
        let o = GaussianOracle::new(quad(), 0.1, 0.1, f64::INFINITY, 1).unwrap();
        let x = Vector::zeros(3);
        let y = Vector::zeros(4);
        assert!(matches!(o.query(&[(&x, &y); 3], Randomness::Shared, &[0]), Err(Error::BatchTooLarge { .. })));
        o.query(&[(&x, &y); 2], Randomness::Shared, &[0]).unwrap();
        o.query(&[(&x, &y); 2], Randomness::Independent, &[1]).unwrap();
        o.query(&[(&x, &y)], Randomness::Independent, &[2]).unwrap();
        o.y_hat(&x).unwrap();
        let c = o.counters();
        assert_eq!((c.points, c.y_hat, c.shared_batches, c.independent_batches), (5, 1, 1, 1));
        assert_eq!(c.total(), 6);
        assert!(GaussianOracle::new(quad(), 0.1, 0.1, 1.0, 1).unwrap().with_capacity(1).is_err());
    }

    #[test]
    fn shared_draws_cancel_and_keys_reproduce() {
        let q = quad();
        let o = GaussianOracle::new(q.clone(), 0.5, 0.5, f64::INFINITY, 3).unwrap();
        let x = Vector::from_vec(vec![0.5, 0.0, 1.0]);
        let y1 = Vector::from_vec(vec![1.0, 2.0, 0.0, 0.0]);
        let y2 = Vector::from_vec(vec![0.0, 1.0, 0.5, 0.0]);
        let r = o.query(&[(&x, &y1), (&x, &y2)], Randomness::Shared, &[4, 2]).unwrap();
        let diff = &r[0].grad_y_g - &r[1].grad_y_g;
        let exact = q.grad_y_g(&x, &y1) - q.grad_y_g(&x, &y2);
        assert!((diff - exact).norm() < 1e-12);
        let again = o.query(&[(&x, &y1), (&x, &y2)], Randomness::Shared, &[4, 2]).unwrap();
        assert_eq!(r, again);
        let ind = o.query(&[(&x, &y1), (&x, &y2)], Randomness::Independent, &[4, 2]).unwrap();
        assert_ne!(&ind[0].grad_y_g - &ind[1].grad_y_g, q.grad_y_g(&x, &y1) - q.grad_y_g(&x, &y2));
    }

    #[test]
    fn y_hat_sits_at_quarter_radius() {
        let q = quad();
        let o = GaussianOracle::new(q.clone(), 0.0, 0.0, 0.8, 5).unwrap();
        let x = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        let d = (o.y_hat(&x).unwrap() - q.y_star(&x).unwrap()).norm();
        assert!((d - 0.2).abs() < 1e-12);
        let inf = GaussianOracle::new(q.clone(), 0.0, 0.0, f64::INFINITY, 5).unwrap();
        assert_eq!(inf.y_hat(&x).unwrap(), q.y_star(&x).unwrap());
    }

    #[test]
    fn out_of_region_queries_are_loud() {
        let q = quad();
        let o = GaussianOracle::new(q.clone(), 0.0, 0.0, 0.5, 5).unwrap();
        let x = Vector::zeros(3);
        let far = Vector::from_element(4, 1.0);
        let r = &o.query(&[(&x, &far)], Randomness::Shared, &[0]).unwrap()[0];
        assert!((r.grad_y_g.norm() - OUT_OF_REGION_MAGNITUDE).abs() < 1e-9);
        assert_eq!(o.counters().out_of_region, 1);
    }

    #[test]
    fn gaussian_total_variance_is_sigma_squared() {
        let o = GaussianOracle::new(quad(), 0.0, 0.5, f64::INFINITY, 9).unwrap();
        let x = Vector::from_vec(vec![0.1, 0.2, 0.3]);
        let y = Vector::zeros(4);
        let mx = estimate_moments(&o, &x, &y, Component::GradXG, 20_000, 1).unwrap();
        let my = estimate_moments(&o, &x, &y, Component::GradYG, 20_000, 2).unwrap();
        // d_x = 3 and d_y = 4 share the variance 0.25 in proportion 3:4.
        assert!((mx.trace - 0.25 * 3.0 / 7.0).abs() <= 5.0 * mx.trace_std_err);
        assert!((my.trace - 0.25 * 4.0 / 7.0).abs() <= 5.0 * my.trace_std_err);
        assert!(estimate_moments(&o, &x, &y, Component::GradYG, 1, 2).is_err());
    }

    #[test]
    fn zero_chain_examples() {
        let cfg = ChainConfig::new(0.1, 6).unwrap();
        let x = vec![0.0; 6];
        assert_eq!(zero_chain_y_hat(&x, &cfg).unwrap(), 0.0);
        let y = kernels::chain_f(&x, &cfg).unwrap() - 2.0;
        let gb = clipped_mean_gradient(&x, y, &cfg).unwrap();
        let success = zero_chain_grad_x(&x, y, true, 0.25, &cfg).unwrap();
        let failure = zero_chain_grad_x(&x, y, false, 0.25, &cfg).unwrap();
        assert!((success[0] - 4.0 * gb[0]).abs() <= 1e-15 * gb[0].abs());
        assert_eq!(failure[0], 0.0);
        assert!(gb[0] != 0.0);
        assert!(zero_chain_grad_x(&x, y, true, 0.0, &cfg).is_err());
        assert!(zero_chain_grad_x(&x, y, true, 1.5, &cfg).is_err());

        // All h_i vanish once the last coordinate is active; then ∇̂_y g is exact.
        let mut active = vec![0.0; 6];
        active[5] = 0.08;
        let f = kernels::chain_f(&active, &cfg).unwrap();
        assert_eq!(zero_chain_grad_y(&active, f, true, 0.3, &cfg).unwrap(), 0.0);
        assert_eq!(zero_chain_grad_y(&active, f, false, 0.3, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn default_probability() {
        assert!((default_progression_probability(0.1, 0.01, 1.0) - 1.0).abs() < 1e-15);
        assert!((default_progression_probability(0.1, 1.0, 10.0) - 1e-4).abs() < 1e-18);
        assert!((default_progression_probability(0.1, 1.0, f64::INFINITY) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn embedded_oracle_pushes_forward() {
        use crate::problems::{embedded_instance, EmbeddedInstanceConfig};
        let chain = ChainConfig::new(0.2, 5).unwrap();
        let inst = embedded_instance(&EmbeddedInstanceConfig { ambient_dim: 9, chain, seed: 1 }).unwrap();
        let o = ZeroChainOracle::embedded(inst.clone(), 1.0, 2).unwrap();
        let x = Vector::from_fn(9, |i, _| 0.4 * ((i as f64) + 0.5).sin());
        let y = Vector::from_element(1, 0.3);
        let r = &o.query(&[(&x, &y)], Randomness::Shared, &[0]).unwrap()[0];
        // p = 1 makes every multiplier 1, so the estimate equals the clipped mean.
        let (z, jac) = inst.pullback(&x);
        let gb = Vector::from_vec(clipped_mean_gradient(z.as_slice(), 0.3, &chain).unwrap());
        assert!((&r.grad_x_g - inst.pushforward(&jac, &gb)).norm() < 1e-14);
        assert_eq!(r.grad_x_f, &x / 5.0);
    }
}
