//! Certification of the scalar kernels and the zero-chain oracle, and the
//! stall experiment that exhibits the slowed chain progress.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{
    self, bump, bump_prime, clip_smooth_deriv, gamma_step, gamma_step_prime, phi_gauss_deriv, prog, psi_deriv, ChainConfig,
};
use crate::linalg::{norm_inf, Vector};
use crate::oracles::{Randomness, StochasticOracle, ZeroChainOracle};
use crate::problems::{chain_radius, clipped_mean_gradient, BilevelProblem, CubicPerturbedInstance, QuadraticInstance};
use crate::rng;

/// One scalar bound over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub observed_min: f64,
    pub observed_max: f64,
    pub lower: f64,
    pub upper: f64,
    pub strict_upper: bool,
    pub violations: usize,
}

/// Largest disagreement between an analytic derivative and a central
/// difference, as `|a − fd| / max(|a|, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub grid_points: usize,
    pub bounds: Vec<BoundCheck>,
    pub derivatives: Vec<DerivativeCheck>,
}

impl KernelReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.bounds.iter().all(|b| b.violations == 0) && self.derivatives.iter().all(|d| d.max_rel_err <= rel_tol)
    }
}

fn bound(name: &str, grid: &[f64], f: impl Fn(f64) -> f64, lower: f64, upper: f64, strict_upper: bool) -> BoundCheck {
    let (mut lo, mut hi, mut violations) = (f64::INFINITY, f64::NEG_INFINITY, 0);
    for &t in grid {
        let v = f(t);
        lo = lo.min(v);
        hi = hi.max(v);
        let over = if strict_upper { v >= upper } else { v > upper };
        if v < lower || over || !v.is_finite() {
            violations += 1;
        }
    }
    BoundCheck { name: name.into(), observed_min: lo, observed_max: hi, lower, upper, strict_upper, violations }
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(1.0)
}

fn scalar_fd(name: &str, grid: &[f64], f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> DerivativeCheck {
    let h = 1e-5;
    let max_rel_err = grid.iter().map(|&t| rel_err(df(t), (f(t + h) - f(t - h)) / (2.0 * h))).fold(0.0, f64::max);
    DerivativeCheck { name: name.into(), points: grid.len(), max_rel_err }
}

fn vector_fd(name: &str, points: &[Vec<f64>], h: f64, f: impl Fn(&[f64]) -> f64, grad: impl Fn(&[f64]) -> Vec<f64>) -> DerivativeCheck {
    let mut worst = 0.0f64;
    for x in points {
        let g = grad(x);
        let mut xp = x.clone();
        for j in 0..x.len() {
            xp[j] = x[j] + h;
            let up = f(&xp);
            xp[j] = x[j] - h;
            let down = f(&xp);
            xp[j] = x[j];
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * h)));
        }
    }
    DerivativeCheck { name: name.into(), points: points.len(), max_rel_err: worst }
}

/// Bounds of `Ψ, Φ, φ, Γ` and their derivatives on an evenly spaced grid of
/// `[lo, hi]`, then finite-difference checks of every analytic derivative,
/// including the chain, indicator, clipped-mean and instance gradients at
/// `points` random states.
pub fn kernel_certification(grid_points: usize, lo: f64, hi: f64, points: usize, seed: u64) -> Result<KernelReport> {
    if grid_points < 2 || !(hi > lo) {
        return Err(invalid("grid", "need at least 2 points on a non-empty interval"));
    }
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + step * i as f64).collect();
    let e = std::f64::consts::E;
    let two_pi_e = 2.0 * std::f64::consts::PI * e;
    let bounds = vec![
        bound("psi in [0, e]", &grid, |t| psi_deriv(t, 0), 0.0, e, false),
        bound("psi' in [0, sqrt(54/e)]", &grid, |t| psi_deriv(t, 1), 0.0, (54.0 / e).sqrt(), false),
        bound("|psi''| <= 32.5", &grid, |t| psi_deriv(t, 2).abs(), 0.0, 32.5, false),
        bound("phi_gauss in [0, sqrt(2 pi e)]", &grid, |t| phi_gauss_deriv(t, 0), 0.0, two_pi_e.sqrt(), false),
        bound("phi_gauss' in [0, sqrt(e)]", &grid, |t| phi_gauss_deriv(t, 1), 0.0, e.sqrt(), false),
        bound("|phi_gauss''| <= 1", &grid, |t| phi_gauss_deriv(t, 2).abs(), 0.0, 1.0, false),
        bound("|clip| < 2", &grid, |t| clip_smooth_deriv(t, 0).abs(), 0.0, 2.0, true),
        bound("clip' in [0, 1]", &grid, |t| clip_smooth_deriv(t, 1), 0.0, 1.0, false),
        bound("|clip''| <= sqrt(54/e^3)", &grid, |t| clip_smooth_deriv(t, 2).abs(), 0.0, (54.0 / e.powi(3)).sqrt(), false),
        bound("|clip'''| <= 32.5/e", &grid, |t| clip_smooth_deriv(t, 3).abs(), 0.0, 32.5 / e, false),
        bound("gamma in [0, 1]", &grid, gamma_step, 0.0, 1.0, false),
        bound("gamma' >= 0", &grid, gamma_step_prime, 0.0, f64::INFINITY, false),
    ];
    let mut derivatives = Vec::new();
    for k in 0..3 {
        derivatives.push(scalar_fd(&format!("psi^({})", k + 1), &grid, |t| psi_deriv(t, k), |t| psi_deriv(t, k + 1)));
        derivatives.push(scalar_fd(&format!("phi_gauss^({})", k + 1), &grid, |t| phi_gauss_deriv(t, k), |t| phi_gauss_deriv(t, k + 1)));
        derivatives.push(scalar_fd(&format!("clip^({})", k + 1), &grid, |t| clip_smooth_deriv(t, k), |t| clip_smooth_deriv(t, k + 1)));
    }
    derivatives.push(scalar_fd("gamma'", &grid, gamma_step, gamma_step_prime));
    derivatives.push(scalar_fd("bump'", &grid, bump, bump_prime));

    let cfg = ChainConfig::new(0.2, 10)?;
    let eps = cfg.epsilon;
    let mut r = rng::stream(seed, &[0xCE47]);
    let states: Vec<Vec<f64>> = (0..points).map(|_| (0..cfg.d_x).map(|_| eps * r.random_range(-1.5..1.5)).collect()).collect();
    let h = 1e-6;
    derivatives.push(vector_fd("chain F", &states, h, |x| kernels::chain_f(x, &cfg).unwrap(), |x| kernels::chain_grad(x, &cfg).unwrap()));
    for i in [1, cfg.d_x / 2, cfg.d_x] {
        derivatives.push(vector_fd(
            &format!("indicator h_{i}"),
            &states,
            h,
            |x| kernels::smooth_indicator_h(i, x, &cfg).unwrap(),
            |x| kernels::smooth_indicator_grad(i, x, &cfg).unwrap(),
        ));
    }
    let rad = chain_radius(&cfg);
    let ys: Vec<f64> = states.iter().map(|x| kernels::chain_f(x, &cfg).unwrap() + rad * r.random_range(-2.0..2.0)).collect();
    let mut worst = 0.0f64;
    for (x, &y) in states.iter().zip(&ys) {
        let gb = |x: &[f64]| {
            let u = (y - kernels::chain_f(x, &cfg).unwrap()) / rad;
            rad * rad * kernels::clip_smooth(u).powi(2)
        };
        worst = worst.max(vector_fd("", std::slice::from_ref(x), h, gb, |x| clipped_mean_gradient(x, y, &cfg).unwrap()).max_rel_err);
    }
    derivatives.push(DerivativeCheck { name: "clipped mean gradient".into(), points, max_rel_err: worst });

    let q = QuadraticInstance::random(4, 3, 1.0, seed);
    let c = CubicPerturbedInstance::random(4, 3, 1.0, 0.5, seed)?;
    derivatives.push(instance_fd("quadratic", &q, points, seed)?);
    derivatives.push(instance_fd("cubic", &c, points, seed)?);
    Ok(KernelReport { grid_points, bounds, derivatives })
}

fn instance_fd<P: BilevelProblem>(name: &str, p: &P, points: usize, seed: u64) -> Result<DerivativeCheck> {
    let mut r = rng::stream(seed, &[0x1D5]);
    let (dx, dy) = (p.dim_x(), p.dim_y());
    let states: Vec<Vec<f64>> = (0..points).map(|_| (0..dx + dy).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let split = |s: &[f64]| (Vector::from_column_slice(&s[..dx]), Vector::from_column_slice(&s[dx..]));
    let join = |a: Vector, b: Vector| a.iter().chain(b.iter()).copied().collect::<Vec<f64>>();
    let h = 1e-6;
    let f = vector_fd("", &states, h, |s| { let (x, y) = split(s); p.f(&x, &y) }, |s| { let (x, y) = split(s); join(p.grad_x_f(&x, &y), p.grad_y_f(&x, &y)) });
    let g = vector_fd("", &states, h, |s| { let (x, y) = split(s); p.g(&x, &y) }, |s| { let (x, y) = split(s); join(p.grad_x_g(&x, &y), p.grad_y_g(&x, &y)) });
    Ok(DerivativeCheck { name: format!("{name} instance gradients"), points, max_rel_err: f.max_rel_err.max(g.max_rel_err) })
}

/// Sample sizes for [`zero_chain_certification`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroChainCertConfig {
    pub epsilon: f64,
    pub d_x: usize,
    pub p: f64,
    /// States for the progress properties, each with `draws` oracle draws.
    pub states: usize,
    pub draws: usize,
    /// Random points for the gradient-magnitude bounds.
    pub points: usize,
    /// States in `[−ε, ε]^d` for the `∇̂_y g` variance, each with
    /// `variance_draws` draws.
    pub variance_states: usize,
    pub variance_draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroChainReport {
    /// Draws with `prog₀(∇̂_x g) > prog_{ε/4}(x) + 1`.
    pub progress_violations: usize,
    pub progress_checks: usize,
    /// Largest per-state frequency of `prog₀(∇̂_x g) = prog_{ε/4}(x) + 1`.
    pub max_reveal_frequency: f64,
    /// `p + 3√(p/n)`.
    pub reveal_limit: f64,
    pub max_grad_f_inf: f64,
    /// `23ε`.
    pub grad_f_limit: f64,
    pub max_grad_gb_inf: f64,
    /// `92 r_ε ε`.
    pub grad_gb_limit: f64,
    pub max_y_hat_error: f64,
    /// `r_ε/2`.
    pub y_hat_limit: f64,
    pub max_y_variance: f64,
    /// `64ε⁴/p`.
    pub y_variance_limit: f64,
    /// Largest `|mean − ∇_y g|` over the variance states, in standard errors.
    pub max_y_mean_z: f64,
}

impl ZeroChainReport {
    pub fn passed(&self) -> bool {
        self.progress_violations == 0
            && self.max_reveal_frequency <= self.reveal_limit
            && self.max_grad_f_inf <= self.grad_f_limit
            && self.max_grad_gb_inf <= self.grad_gb_limit
            && self.max_y_hat_error <= self.y_hat_limit
            && self.max_y_variance <= self.y_variance_limit
    }
}

/// State with a random active prefix, a partially active boundary coordinate
/// and a quiet tail.
fn chain_state(r: &mut impl Rng, cfg: &ChainConfig) -> Vec<f64> {
    let eps = cfg.epsilon;
    let k = r.random_range(0..=cfg.d_x);
    (0..cfg.d_x)
        .map(|j| {
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            let mag = if j < k {
                r.random_range(0.3..2.0)
            } else if j == k {
                r.random_range(0.0..0.6)
            } else {
                r.random_range(0.0..0.3)
            };
            sign * mag * eps
        })
        .collect()
}

pub fn zero_chain_certification(c: &ZeroChainCertConfig) -> Result<ZeroChainReport> {
    let cfg = ChainConfig::new(c.epsilon, c.d_x)?;
    let eps = cfg.epsilon;
    let rad = chain_radius(&cfg);
    let oracle = ZeroChainOracle::new(cfg, c.p, c.seed)?;
    let mut r = rng::stream(c.seed, &[0x2C]);

    let states: Vec<(Vec<f64>, f64)> = (0..c.states)
        .map(|_| {
            let x = chain_state(&mut r, &cfg);
            let y = kernels::chain_f(&x, &cfg).unwrap_or(0.0) + rad * r.random_range(-0.5..0.5);
            (x, y)
        })
        .collect();
    let per_state: Vec<(usize, usize)> = states
        .par_iter()
        .enumerate()
        .map(|(s, (x, y))| {
            let xv = Vector::from_column_slice(x);
            let yv = Vector::from_element(1, *y);
            let base = prog(x, eps / 4.0);
            let (mut bad, mut reveal) = (0, 0);
            for d in 0..c.draws {
                let resp = oracle.query(&[(&xv, &yv)], Randomness::Independent, &[0x1, s as u64, d as u64])?;
                let reached = prog(resp[0].grad_x_g.as_slice(), 0.0);
                if reached > base + 1 {
                    bad += 1;
                }
                if reached == base + 1 {
                    reveal += 1;
                }
            }
            Ok((bad, reveal))
        })
        .collect::<Result<_>>()?;
    let progress_violations = per_state.iter().map(|s| s.0).sum();
    let max_reveal_frequency = per_state.iter().map(|s| s.1 as f64 / c.draws as f64).fold(0.0, f64::max);

    let (mut max_grad_f_inf, mut max_grad_gb_inf, mut max_y_hat_error) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..c.points {
        let scale = if r.random_bool(0.5) { 1.0 } else { 4.0 };
        let x: Vec<f64> = (0..cfg.d_x).map(|_| scale * eps * r.random_range(-1.0..1.0)).collect();
        let f = kernels::chain_f(&x, &cfg)?;
        let y = f + rad * r.random_range(-3.0..3.0);
        max_grad_f_inf = max_grad_f_inf.max(norm_inf(&kernels::chain_grad(&x, &cfg)?));
        max_grad_gb_inf = max_grad_gb_inf.max(norm_inf(&clipped_mean_gradient(&x, y, &cfg)?));
        max_y_hat_error = max_y_hat_error.max((crate::oracles::zero_chain_y_hat(&x, &cfg)? - f).abs());
    }

    let var_states: Vec<(Vec<f64>, f64)> = (0..c.variance_states)
        .map(|_| {
            let x: Vec<f64> = (0..cfg.d_x).map(|_| eps * r.random_range(-1.0..1.0)).collect();
            let y = kernels::chain_f(&x, &cfg).unwrap_or(0.0) + rad * r.random_range(-0.5..0.5);
            (x, y)
        })
        .collect();
    let moments: Vec<(f64, f64)> = var_states
        .par_iter()
        .enumerate()
        .map(|(s, (x, y))| {
            let xv = Vector::from_column_slice(x);
            let yv = Vector::from_element(1, *y);
            let mut samples = Vec::with_capacity(c.variance_draws);
            for d in 0..c.variance_draws {
                let resp = oracle.query(&[(&xv, &yv)], Randomness::Independent, &[0x2, s as u64, d as u64])?;
                samples.push(resp[0].grad_y_g.clone());
            }
            let m = crate::oracles::sample_moments(samples)?;
            let exact = 2.0 * (y - kernels::chain_f(x, &cfg)?);
            let z = if m.mean_std_err[0] > 0.0 { (m.mean[0] - exact).abs() / m.mean_std_err[0] } else if m.mean[0] == exact { 0.0 } else { f64::INFINITY };
            Ok((m.trace, z))
        })
        .collect::<Result<_>>()?;

    let n = c.draws as f64;
    Ok(ZeroChainReport {
        progress_violations,
        progress_checks: c.states * c.draws,
        max_reveal_frequency,
        reveal_limit: c.p + 3.0 * (c.p / n).sqrt(),
        max_grad_f_inf,
        grad_f_limit: 23.0 * eps,
        max_grad_gb_inf,
        grad_gb_limit: 92.0 * rad * eps,
        max_y_hat_error,
        y_hat_limit: rad / 2.0,
        max_y_variance: moments.iter().map(|m| m.0).fold(0.0, f64::max),
        y_variance_limit: 64.0 * eps.powi(4) / c.p,
        max_y_mean_z: moments.iter().map(|m| m.1).fold(0.0, f64::max),
    })
}

/// An algorithm that touches the chain instance only through the oracle.
pub trait ChainAlgorithm {
    fn step(&mut self, oracle: &dyn StochasticOracle, t: usize) -> Result<()>;
    fn x(&self) -> &Vector;
    /// Oracle calls the algorithm believes it has made.
    fn reported_queries(&self) -> u64;
}

/// Queries `(x, ŷ(x) − r_ε/2)` once per step and moves every untouched
/// coordinate with a nonzero stochastic gradient to `−ε·sign(g_j)`.
#[derive(Debug, Clone)]
pub struct GreedyProbe {
    x: Vector,
    epsilon: f64,
    radius: f64,
    queries: u64,
}

impl GreedyProbe {
    pub fn new(cfg: &ChainConfig) -> Self {
        Self { x: Vector::zeros(cfg.d_x), epsilon: cfg.epsilon, radius: chain_radius(cfg), queries: 0 }
    }
}

impl ChainAlgorithm for GreedyProbe {
    fn step(&mut self, oracle: &dyn StochasticOracle, t: usize) -> Result<()> {
        let y = oracle.y_hat(&self.x)?.add_scalar(-self.radius / 2.0);
        let resp = oracle.query(&[(&self.x, &y)], Randomness::Independent, &[t as u64])?;
        self.queries += 2;
        for (xj, &gj) in self.x.iter_mut().zip(resp[0].grad_x_g.iter()) {
            if *xj == 0.0 && gj != 0.0 {
                *xj = -self.epsilon * gj.signum();
            }
        }
        Ok(())
    }

    fn x(&self) -> &Vector {
        &self.x
    }

    fn reported_queries(&self) -> u64 {
        self.queries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StallRun {
    pub seed: u64,
    /// `prog_{ε/4}(x^t)` for `t = 0, 1, …` up to full activation or the budget.
    pub progress: Vec<usize>,
    /// `‖∇F(x^t)‖` alongside `progress`.
    pub grad_norms: Vec<f64>,
    pub full_activation: Option<usize>,
}

impl StallRun {
    pub fn prog_at(&self, t: usize) -> usize {
        self.progress[t.min(self.progress.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StallReport {
    pub d_x: usize,
    pub p: f64,
    pub budget: usize,
    pub runs: Vec<StallRun>,
    /// Median full-activation iteration; `None` when censored runs reach the
    /// median.
    pub median_full_activation: Option<f64>,
    pub censored: usize,
}

impl StallReport {
    /// Seeds with `prog_{ε/4}(x^t) < d_x`.
    pub fn stalled_at(&self, t: usize) -> usize {
        self.runs.iter().filter(|r| r.prog_at(t) < self.d_x).count()
    }
}

fn median_with_censoring(mut times: Vec<Option<usize>>) -> Option<f64> {
    if times.is_empty() {
        return None;
    }
    times.sort_by_key(|t| t.unwrap_or(usize::MAX));
    let n = times.len();
    let (a, b) = (times[(n - 1) / 2]?, times[n / 2]?);
    Some((a + b) as f64 / 2.0)
}

/// Runs `make(seed)` against a fresh zero-chain oracle per seed for up to
/// `budget` iterations and records `prog_{ε/4}` after every step.
pub fn stall_experiment<A, F>(cfg: &ChainConfig, p: f64, budget: usize, seeds: &[u64], make: F) -> Result<StallReport>
where
    A: ChainAlgorithm,
    F: Fn(u64) -> A + Sync,
{
    let alpha = cfg.epsilon / 4.0;
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let oracle = ZeroChainOracle::new(*cfg, p, seed)?;
            let mut alg = make(seed);
            let grad_norm = |x: &Vector| -> Result<f64> { Ok(kernels::chain_grad(x.as_slice(), cfg)?.iter().map(|v| v * v).sum::<f64>().sqrt()) };
            let mut progress = vec![prog(alg.x().as_slice(), alpha)];
            let mut grad_norms = vec![grad_norm(alg.x())?];
            let mut full = (progress[0] == cfg.d_x).then_some(0);
            let mut t = 0;
            while full.is_none() && t < budget {
                alg.step(&oracle, t)?;
                t += 1;
                let k = prog(alg.x().as_slice(), alpha);
                progress.push(k);
                grad_norms.push(grad_norm(alg.x())?);
                if k == cfg.d_x {
                    full = Some(t);
                }
            }
            let observed = oracle.counters().total();
            if alg.reported_queries() != observed {
                return Err(Error::OracleBypass { reported: alg.reported_queries(), observed });
            }
            Ok(StallRun { seed, progress, grad_norms, full_activation: full })
        })
        .collect::<Result<Vec<_>>>()?;
    let censored = runs.iter().filter(|r| r.full_activation.is_none()).count();
    Ok(StallReport {
        d_x: cfg.d_x,
        p,
        budget,
        median_full_activation: median_with_censoring(runs.iter().map(|r| r.full_activation).collect()),
        runs,
        censored,
    })
}
