//! Projected SGD on a strongly convex objective against its expected-error
//! envelopes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::problems::random_orthonormal;
use crate::rng;
use crate::solver::project_ball;

/// `μ`-strongly convex, `L`-smooth objective with a known minimizer.
pub trait StronglyConvexObjective: Sync {
    fn dim(&self) -> usize;
    fn mu(&self) -> f64;
    fn smoothness(&self) -> f64;
    fn minimizer(&self) -> Vector;
    fn gradient(&self, x: &Vector) -> Vector;
}

/// `½ (x − x*)ᵀ Q diag(λ) Qᵀ (x − x*)`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub hessian: Matrix,
    pub minimizer: Vector,
    mu: f64,
    l: f64,
}

impl QuadraticObjective {
    /// Eigenvalues spread evenly over `[mu, l]` in a seeded basis.
    pub fn random(dim: usize, mu: f64, l: f64, seed: u64) -> Result<Self> {
        if !(mu > 0.0 && l >= mu) {
            return Err(invalid("mu", format!("need 0 < mu <= L, got mu = {mu}, L = {l}")));
        }
        let q = random_orthonormal(dim, dim, seed);
        let eig = Vector::from_fn(dim, |i, _| if dim == 1 { mu } else { mu + (l - mu) * i as f64 / (dim - 1) as f64 });
        let hessian = &q * Matrix::from_diagonal(&eig) * q.transpose();
        let mut r = rng::stream(seed, &[0x0B7]);
        let minimizer = Vector::from_fn(dim, |_, _| r.sample::<f64, _>(StandardNormal));
        Ok(Self { hessian, minimizer, mu, l })
    }

    /// Any symmetric Hessian; `mu` and `l` are taken from its spectrum.
    pub fn from_hessian(hessian: Matrix, minimizer: Vector) -> Self {
        let eig = hessian.clone().symmetric_eigenvalues();
        let mu = eig.min();
        let l = eig.max();
        Self { hessian, minimizer, mu, l }
    }
}

impl StronglyConvexObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.minimizer.len()
    }
    fn mu(&self) -> f64 {
        self.mu
    }
    fn smoothness(&self) -> f64 {
        self.l
    }
    fn minimizer(&self) -> Vector {
        self.minimizer.clone()
    }
    fn gradient(&self, x: &Vector) -> Vector {
        &self.hessian * (x - &self.minimizer)
    }
}

/// Rejects objectives whose gradient fails `⟨∇f(a) − ∇f(b), a − b⟩ ≥ μ‖a − b‖²`
/// on random secants.
pub fn secant_check<O: StronglyConvexObjective + ?Sized>(obj: &O, pairs: usize, seed: u64) -> Result<()> {
    let mut r = rng::stream(seed, &[0x5EC]);
    let d = obj.dim();
    for _ in 0..pairs {
        let a = Vector::from_fn(d, |_, _| 10.0 * r.sample::<f64, _>(StandardNormal));
        let b = Vector::from_fn(d, |_, _| 10.0 * r.sample::<f64, _>(StandardNormal));
        let lhs = (obj.gradient(&a) - obj.gradient(&b)).dot(&(&a - &b));
        let rhs = obj.mu() * (&a - &b).norm_squared();
        if lhs < rhs * (1.0 - 1e-10) {
            return Err(Error::NotConvex);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepMode {
    Fixed { alpha: f64 },
    /// `α_t = beta/(gamma + t)`.
    Diminishing { beta: f64, gamma: f64 },
}

impl StepMode {
    /// `α = 1/L`.
    pub fn default_fixed<O: StronglyConvexObjective + ?Sized>(obj: &O) -> Self {
        StepMode::Fixed { alpha: 1.0 / obj.smoothness() }
    }

    /// `β = (μ + L)/(μL)` with the smallest `γ` keeping `α_0 ≤ 2/(μ + L)`.
    pub fn default_diminishing<O: StronglyConvexObjective + ?Sized>(obj: &O) -> Self {
        let (mu, l) = (obj.mu(), obj.smoothness());
        StepMode::Diminishing { beta: (mu + l) / (mu * l), gamma: (mu + l).powi(2) / (2.0 * mu * l) }
    }

    fn at(&self, t: usize) -> f64 {
        match *self {
            StepMode::Fixed { alpha } => alpha,
            StepMode::Diminishing { beta, gamma } => beta / (gamma + t as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsgdConfig {
    pub mode: StepMode,
    /// Total noise standard deviation: `E‖G − ∇f‖² = σ²`.
    pub sigma: f64,
    pub checkpoints: Vec<usize>,
    pub seeds: usize,
    pub x0: Vector,
    /// Optional feasible ball `(center, radius)`; must contain the minimizer.
    pub ball: Option<(Vector, f64)>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsgdCheckpoint {
    pub t: usize,
    pub mean_sq_err: f64,
    pub std_err: f64,
    pub envelope: f64,
}

impl PsgdCheckpoint {
    pub fn within(&self) -> bool {
        self.mean_sq_err - 3.0 * self.std_err <= self.envelope
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsgdReport {
    pub checkpoints: Vec<PsgdCheckpoint>,
}

impl PsgdReport {
    pub fn passed(&self) -> bool {
        self.checkpoints.iter().all(PsgdCheckpoint::within)
    }
}

/// Envelope on `E‖x_t − x*‖²`: `(1 − μα)^t e₀ + ασ²/μ` for a fixed step,
/// `ν/(γ + t)` with `ν = max(β²σ²L/(2(βρ − 1)), γ e₀)` and `ρ = 2μL/(μ + L)`
/// for diminishing steps.
pub fn psgd_envelope(mode: StepMode, mu: f64, l: f64, sigma: f64, e0: f64, t: usize) -> f64 {
    match mode {
        StepMode::Fixed { alpha } => (1.0 - mu * alpha).powi(t as i32) * e0 + alpha * sigma * sigma / mu,
        StepMode::Diminishing { beta, gamma } => {
            let rho = 2.0 * mu * l / (mu + l);
            let nu = (beta * beta * sigma * sigma * l / (2.0 * (beta * rho - 1.0))).max(gamma * e0);
            nu / (gamma + t as f64)
        }
    }
}

fn check_mode(mode: StepMode, mu: f64, l: f64) -> Result<()> {
    let cap = 2.0 / (mu + l);
    match mode {
        StepMode::Fixed { alpha } if !(alpha > 0.0 && alpha <= cap) => {
            Err(invalid("alpha", format!("fixed step must lie in (0, 2/(mu + L)] = (0, {cap}], got {alpha}")))
        }
        StepMode::Diminishing { beta, gamma } => {
            let rho = 2.0 * mu * l / (mu + l);
            if !(gamma > 0.0 && beta * rho > 1.0) {
                return Err(invalid("beta", format!("need beta > 1/rho = {} and gamma > 0", 1.0 / rho)));
            }
            if beta / gamma > cap * (1.0 + 1e-12) {
                return Err(invalid("gamma", format!("first step beta/gamma must not exceed 2/(mu + L) = {cap}")));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

pub fn psgd_rate_check<O: StronglyConvexObjective + ?Sized>(obj: &O, cfg: &PsgdConfig) -> Result<PsgdReport> {
    secant_check(obj, 64, cfg.seed)?;
    let (mu, l) = (obj.mu(), obj.smoothness());
    check_mode(cfg.mode, mu, l)?;
    if cfg.seeds < 2 {
        return Err(invalid("seeds", "need at least 2 seeds for a standard error"));
    }
    let x_star = obj.minimizer();
    if let Some((c, rad)) = &cfg.ball {
        if (&x_star - c).norm() > *rad {
            return Err(invalid("ball", "the feasible ball must contain the minimizer"));
        }
    }
    let horizon = cfg.checkpoints.iter().copied().max().unwrap_or(0);
    let d = obj.dim();
    let per = cfg.sigma / (d as f64).sqrt();
    let mut sums = vec![(0.0f64, 0.0f64); cfg.checkpoints.len()];
    for s in 0..cfg.seeds {
        let mut r = rng::stream(cfg.seed, &[s as u64]);
        let mut x = cfg.x0.clone();
        for t in 0..=horizon {
            for (i, &c) in cfg.checkpoints.iter().enumerate() {
                if c == t {
                    let e = (&x - &x_star).norm_squared();
                    sums[i].0 += e;
                    sums[i].1 += e * e;
                }
            }
            if t == horizon {
                break;
            }
            let noise = Vector::from_fn(d, |_, _| per * r.sample::<f64, _>(StandardNormal));
            let step = &x - (obj.gradient(&x) + noise) * cfg.mode.at(t);
            x = match &cfg.ball {
                Some((c, rad)) => project_ball(&step, c, *rad)?,
                None => step,
            };
        }
    }
    let n = cfg.seeds as f64;
    let e0 = (&cfg.x0 - &x_star).norm_squared();
    let checkpoints = cfg
        .checkpoints
        .iter()
        .zip(sums)
        .map(|(&t, (s1, s2))| {
            let mean = s1 / n;
            let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
            PsgdCheckpoint { t, mean_sq_err: mean, std_err: (var / n).sqrt(), envelope: psgd_envelope(cfg.mode, mu, l, cfg.sigma, e0, t) }
        })
        .collect();
    Ok(PsgdReport { checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Concave;

    impl StronglyConvexObjective for Concave {
        fn dim(&self) -> usize {
            2
        }
        fn mu(&self) -> f64 {
            1.0
        }
        fn smoothness(&self) -> f64 {
            1.0
        }
        fn minimizer(&self) -> Vector {
            Vector::zeros(2)
        }
        fn gradient(&self, x: &Vector) -> Vector {
            -x
        }
    }

    fn config(mode: StepMode, sigma: f64, seeds: usize, x0: Vector) -> PsgdConfig {
        PsgdConfig { mode, sigma, checkpoints: vec![0, 1, 5, 20, 100, 400], seeds, x0, ball: None, seed: 3 }
    }

    #[test]
    fn noiseless_fixed_step_decays_geometrically() {
        let h = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 1.0]));
        let obj = QuadraticObjective::from_hessian(h, Vector::zeros(2));
        let rep = psgd_rate_check(&obj, &config(StepMode::Fixed { alpha: 0.25 }, 0.0, 2, Vector::from_vec(vec![1.0, 0.0]))).unwrap();
        for c in &rep.checkpoints {
            // ‖x_t‖² = (1 − α)^{2t}, which sits under (1 − α)^t.
            assert!((c.mean_sq_err - 0.75f64.powi(2 * c.t as i32)).abs() < 1e-12);
            assert!(c.within());
        }
    }

    #[test]
    fn diminishing_steps_on_one_dimension() {
        let obj = QuadraticObjective::random(1, 1.0, 1.0, 5).unwrap();
        let x0 = obj.minimizer() + Vector::from_element(1, 3.0);
        let rep = psgd_rate_check(&obj, &config(StepMode::default_diminishing(&obj), 1.0, 1000, x0)).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn both_modes_pass_on_ten_dimensions() {
        let obj = QuadraticObjective::random(10, 1.0, 4.0, 1).unwrap();
        let x0 = obj.minimizer() + Vector::from_element(10, 1.0);
        for mode in [StepMode::default_fixed(&obj), StepMode::default_diminishing(&obj)] {
            let rep = psgd_rate_check(&obj, &config(mode, 0.5, 200, x0.clone())).unwrap();
            assert!(rep.passed(), "{mode:?}: {rep:?}");
        }
    }

    #[test]
    fn projection_toward_feasible_minimizer_never_hurts() {
        let obj = QuadraticObjective::random(3, 1.0, 2.0, 2).unwrap();
        let x_star = obj.minimizer();
        let center = &x_star + Vector::from_element(3, 0.2);
        let mut r = rng::stream(8, &[]);
        for _ in 0..1000 {
            let x = Vector::from_fn(3, |_, _| 3.0 * r.sample::<f64, _>(StandardNormal));
            let p = project_ball(&x, &center, 0.5).unwrap();
            assert!((p - &x_star).norm() <= (&x - &x_star).norm());
        }
        let mut cfg = config(StepMode::default_fixed(&obj), 0.3, 200, x_star.clone() + Vector::from_element(3, 2.0));
        cfg.ball = Some((center, 0.5));
        assert!(psgd_rate_check(&obj, &cfg).unwrap().passed());
    }

    #[test]
    fn rejects_bad_inputs() {
        let obj = QuadraticObjective::random(2, 1.0, 4.0, 1).unwrap();
        assert_eq!(psgd_rate_check(&Concave, &config(StepMode::Fixed { alpha: 0.1 }, 0.0, 2, Vector::zeros(2))), Err(Error::NotConvex));
        assert!(psgd_rate_check(&obj, &config(StepMode::Fixed { alpha: 1.0 }, 0.0, 2, Vector::zeros(2))).is_err());
        assert!(psgd_rate_check(&obj, &config(StepMode::Diminishing { beta: 0.1, gamma: 10.0 }, 0.0, 2, Vector::zeros(2))).is_err());
    }
}
