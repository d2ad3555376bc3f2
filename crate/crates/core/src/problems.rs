//! Bilevel problem instances and the constants that drive the solver schedules.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, clip_smooth, clip_smooth_prime, ChainConfig};
use crate::linalg::{orthonormality_defect, Matrix, Vector};
use crate::rng;

/// Regularity constants of a problem/oracle pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    pub l_f0: f64,
    pub l_f1: f64,
    pub l_g1: f64,
    pub l_g2: f64,
    pub mu_g: f64,
    /// Mean-squared Lipschitz constant of the stochastic lower-level gradient;
    /// `f64::INFINITY` when the oracle offers no such guarantee.
    pub l_g1_tilde: f64,
    pub sigma_f: f64,
    pub sigma_g: f64,
}

impl SmoothnessProfile {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [
            ("l_f0", self.l_f0),
            ("l_f1", self.l_f1),
            ("l_g1", self.l_g1),
            ("l_g2", self.l_g2),
            ("sigma_f", self.sigma_f),
            ("sigma_g", self.sigma_g),
        ];
        for (name, v) in finite_nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.mu_g > 0.0 && self.mu_g.is_finite()) {
            return Err(invalid("mu_g", format!("must be positive, got {}", self.mu_g)));
        }
        if self.l_g1 < self.mu_g {
            return Err(invalid("l_g1", format!("must be at least mu_g = {}, got {}", self.mu_g, self.l_g1)));
        }
        if !(self.l_g1_tilde >= self.l_g1) {
            return Err(invalid("l_g1_tilde", format!("must be at least l_g1 = {}, got {}", self.l_g1, self.l_g1_tilde)));
        }
        Ok(())
    }

    pub fn with_noise(mut self, sigma_f: f64, sigma_g: f64) -> Self {
        self.sigma_f = sigma_f;
        self.sigma_g = sigma_g;
        self
    }

    pub fn with_l_g1_tilde(mut self, l: f64) -> Self {
        self.l_g1_tilde = l;
        self
    }
}

/// Constants derived from a [`SmoothnessProfile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Penalty floor coefficient: `λ ≥ λ₀/ε`.
    pub lambda0: f64,
    /// Smoothness of the penalty surrogate `L*_λ`.
    pub surrogate_smoothness: f64,
    /// Coefficient of the `1/λ` value gap between `L*_λ` and `F`.
    pub d0: f64,
    pub l_y: f64,
    pub l_v: f64,
    l_f0: f64,
    mu_g: f64,
}

impl DerivedConstants {
    /// Trust-region radius `l_f0/(μ_g λ)` for `y − z`.
    pub fn r_lambda(&self, lambda: f64) -> f64 {
        self.l_f0 / (self.mu_g * lambda)
    }
}

pub fn derived_constants(p: &SmoothnessProfile) -> Result<DerivedConstants> {
    if !(p.mu_g > 0.0) {
        return Err(invalid("mu_g", format!("must be positive, got {}", p.mu_g)));
    }
    let mu = p.mu_g;
    let lambda0 = 4.0 * p.l_f0 * p.l_g1 / (mu * mu) * (p.l_f1 + 2.0 * p.l_f0 * p.l_g2 / mu);
    let surrogate_smoothness =
        6.0 * p.l_g1 / mu * (p.l_f1 + p.l_g1 * p.l_g1 / mu + p.l_f0 * p.l_g1 * p.l_g2 / (mu * mu));
    let d0 = (p.l_f1 + p.l_f1 * p.l_f1 / mu) * p.l_f1 / mu;
    Ok(DerivedConstants {
        lambda0,
        surrogate_smoothness,
        d0,
        l_y: p.l_f1 + p.l_g2 * p.l_f0 / mu,
        l_v: p.l_g1 + p.l_f0 * p.l_g2 / mu,
        l_f0: p.l_f0,
        mu_g: mu,
    })
}

/// Deterministic evaluation interface of `min_x f(x, y*(x))` with
/// `y*(x) = argmin_y g(x, y)`.
///
/// `∇²_xy g` is returned as a `d_x × d_y` matrix.
pub trait BilevelProblem: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn profile(&self) -> SmoothnessProfile;

    fn f(&self, x: &Vector, y: &Vector) -> f64;
    fn grad_x_f(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_y_f(&self, x: &Vector, y: &Vector) -> Vector;
    fn g(&self, x: &Vector, y: &Vector) -> f64;
    fn grad_x_g(&self, x: &Vector, y: &Vector) -> Vector;
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector;

    fn hess_xy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        None
    }
    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        None
    }
    fn y_star(&self, _x: &Vector) -> Option<Vector> {
        None
    }
    fn y_star_lambda(&self, _x: &Vector, _lambda: f64) -> Option<Vector> {
        None
    }
    fn hyperobjective(&self, _x: &Vector) -> Option<f64> {
        None
    }
    fn hypergradient(&self, _x: &Vector) -> Option<Vector> {
        None
    }
}

const SOLVE_CAP: usize = 200_000;

fn gradient_descent<G: Fn(&Vector) -> Vector>(grad: G, start: Vector, step: f64, tol: f64) -> Result<Vector> {
    let mut y = start;
    let mut residual = f64::INFINITY;
    for _ in 0..SOLVE_CAP {
        let gr = grad(&y);
        residual = gr.norm();
        if residual <= tol {
            return Ok(y);
        }
        y -= step * gr;
    }
    Err(Error::InnerSolveFailed { residual, iterations: SOLVE_CAP })
}

/// `y*(x)`: closed form when the instance has one, otherwise gradient descent
/// on `g(x, ·)` to `‖∇_y g‖ ≤ tol`.
pub fn lower_solution<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, tol: f64) -> Result<Vector> {
    if let Some(y) = problem.y_star(x) {
        return Ok(y);
    }
    let p = problem.profile();
    gradient_descent(|y| problem.grad_y_g(x, y), Vector::zeros(problem.dim_y()), 1.0 / p.l_g1, tol)
}

/// `y*_λ(x) = argmin_y λ⁻¹ f(x, y) + g(x, y)`, closed form when available,
/// otherwise gradient descent warm-started at `y*(x)`.
pub fn penalized_solution<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector, lambda: f64, tol: f64) -> Result<Vector> {
    if let Some(y) = problem.y_star_lambda(x, lambda) {
        return Ok(y);
    }
    let p = problem.profile();
    let start = lower_solution(problem, x, tol)?;
    let step = 1.0 / (p.l_g1 + p.l_f1 / lambda);
    gradient_descent(
        |y| problem.grad_y_f(x, y) / lambda + problem.grad_y_g(x, y),
        start,
        step,
        tol,
    )
}

/// `∇F(x) = ∇_x f − ∇²_xy g [∇²_yy g]⁻¹ ∇_y f`, all evaluated at `(x, y*(x))`.
///
/// Falls back to the instance's direct hypergradient when second derivatives
/// are not available.
pub fn hypergradient_closed_form<P: BilevelProblem + ?Sized>(problem: &P, x: &Vector) -> Result<Vector> {
    let y = match problem.y_star(x) {
        Some(y) => y,
        None => return problem.hypergradient(x).ok_or(Error::MissingEvaluator("y*(x) or a direct hypergradient")),
    };
    let (hxy, hyy) = match (problem.hess_xy_g(x, &y), problem.hess_yy_g(x, &y)) {
        (Some(a), Some(b)) => (a, b),
        _ => return problem.hypergradient(x).ok_or(Error::MissingEvaluator("second derivatives of g")),
    };
    let chol = hyy.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let w = chol.solve(&problem.grad_y_f(x, &y));
    Ok(problem.grad_x_f(x, &y) - hxy * w)
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64, tag: u64) -> Matrix {
    let mut r = rng::stream(seed, &[tag, rows as u64, cols as u64]);
    Matrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

/// `n × k` matrix with orthonormal columns, `k ≤ n`, from a seeded Gaussian.
pub fn random_orthonormal(n: usize, k: usize, seed: u64) -> Matrix {
    let q = gaussian_matrix(n, k, seed, 0x0A7B).qr().q();
    q.columns(0, k).into_owned()
}

fn random_direction(d: usize, seed: u64, tag: u64) -> Vector {
    let mut r = rng::stream(seed, &[tag, d as u64]);
    loop {
        let v = Vector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Seeded `d_y × d_x` matrix with singular values spread log-uniformly over
/// `[0.1, 1]`.
pub fn well_conditioned_matrix(d_y: usize, d_x: usize, seed: u64) -> Matrix {
    let k = d_x.min(d_y);
    let u = random_orthonormal(d_y, k, rng::derive_seed(seed, &[1]));
    let v = random_orthonormal(d_x, k, rng::derive_seed(seed, &[2]));
    let s = Vector::from_fn(k, |i, _| {
        if k == 1 {
            1.0
        } else {
            10f64.powf(-1.0 + i as f64 / (k - 1) as f64)
        }
    });
    u * Matrix::from_diagonal(&s) * v.transpose()
}

/// `f = ½‖x‖² + b·y`, `g = ½‖y − Ax‖²`.
#[derive(Debug, Clone)]
pub struct QuadraticInstance {
    pub a: Matrix,
    pub b: Vector,
}

impl QuadraticInstance {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch { what: "b", expected: a.nrows(), found: b.len() });
        }
        if crate::linalg::operator_norm(&a) > 1.0 + 1e-12 {
            return Err(invalid("a", "operator norm must not exceed 1"));
        }
        Ok(Self { a, b })
    }

    /// Seeded instance with `‖A‖ ≤ 1`, condition number ≤ 10 and `‖b‖ = b_norm`.
    pub fn random(d_x: usize, d_y: usize, b_norm: f64, seed: u64) -> Self {
        let a = well_conditioned_matrix(d_y, d_x, seed);
        let b = random_direction(d_y, seed, 3) * b_norm;
        Self { a, b }
    }
}

impl BilevelProblem for QuadraticInstance {
    fn dim_x(&self) -> usize {
        self.a.ncols()
    }
    fn dim_y(&self) -> usize {
        self.a.nrows()
    }
    fn profile(&self) -> SmoothnessProfile {
        SmoothnessProfile {
            l_f0: self.b.norm(),
            l_f1: 1.0,
            l_g1: 1.0,
            l_g2: 0.0,
            mu_g: 1.0,
            l_g1_tilde: 1.0,
            sigma_f: 0.0,
            sigma_g: 0.0,
        }
    }
    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * x.norm_squared() + self.b.dot(y)
    }
    fn grad_x_f(&self, x: &Vector, _y: &Vector) -> Vector {
        x.clone()
    }
    fn grad_y_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        self.b.clone()
    }
    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * (y - &self.a * x).norm_squared()
    }
    fn grad_x_g(&self, x: &Vector, y: &Vector) -> Vector {
        -(self.a.transpose() * (y - &self.a * x))
    }
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        y - &self.a * x
    }
    fn hess_xy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(-self.a.transpose())
    }
    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(Matrix::identity(self.dim_y(), self.dim_y()))
    }
    fn y_star(&self, x: &Vector) -> Option<Vector> {
        Some(&self.a * x)
    }
    fn y_star_lambda(&self, x: &Vector, lambda: f64) -> Option<Vector> {
        Some(&self.a * x - &self.b / lambda)
    }
    fn hyperobjective(&self, x: &Vector) -> Option<f64> {
        Some(0.5 * x.norm_squared() + self.b.dot(&(&self.a * x)))
    }
    fn hypergradient(&self, x: &Vector) -> Option<Vector> {
        Some(x + self.a.transpose() * &self.b)
    }
}

/// Quadratic instance with a bounded-third-derivative lower-level term:
/// `g = ½‖y − Ax‖² + κ Σ ln cosh(y_j)`, so `∇²_yy g = I + κ diag(sech² y)`.
///
/// `y*_λ` has no closed form and is always computed by the generic solver.
#[derive(Debug, Clone)]
pub struct CubicPerturbedInstance {
    pub a: Matrix,
    pub b: Vector,
    pub kappa: f64,
}

/// `max |d³/dt³ ln cosh t| = 4/(3√3)`.
const LNCOSH_THIRD_MAX: f64 = 0.769_800_358_919_501_1;

fn ln_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sech2(t: f64) -> f64 {
    let c = t.cosh();
    if c.is_finite() { 1.0 / (c * c) } else { 0.0 }
}

impl CubicPerturbedInstance {
    /// `kappa ≤ 1/2` keeps the perturbation Hessian below `μ_g/2`.
    pub fn new(a: Matrix, b: Vector, kappa: f64) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch { what: "b", expected: a.nrows(), found: b.len() });
        }
        if !(0.0..=0.5).contains(&kappa) {
            return Err(invalid("kappa", format!("must lie in [0, 0.5], got {kappa}")));
        }
        if crate::linalg::operator_norm(&a) > 1.0 + 1e-12 {
            return Err(invalid("a", "operator norm must not exceed 1"));
        }
        Ok(Self { a, b, kappa })
    }

    pub fn random(d_x: usize, d_y: usize, b_norm: f64, kappa: f64, seed: u64) -> Result<Self> {
        let q = QuadraticInstance::random(d_x, d_y, b_norm, seed);
        Self::new(q.a, q.b, kappa)
    }

    fn solve_coordinate(&self, target: f64) -> f64 {
        // y + κ tanh y is increasing with slope in [1, 1+κ].
        let mut y = target / (1.0 + 0.5 * self.kappa);
        for _ in 0..100 {
            let r = y + self.kappa * y.tanh() - target;
            let step = r / (1.0 + self.kappa * sech2(y));
            y -= step;
            if step.abs() <= 1e-16 * y.abs().max(1.0) {
                break;
            }
        }
        y
    }
}

impl BilevelProblem for CubicPerturbedInstance {
    fn dim_x(&self) -> usize {
        self.a.ncols()
    }
    fn dim_y(&self) -> usize {
        self.a.nrows()
    }
    fn profile(&self) -> SmoothnessProfile {
        SmoothnessProfile {
            l_f0: self.b.norm(),
            l_f1: 1.0,
            l_g1: 1.0 + self.kappa,
            l_g2: self.kappa * LNCOSH_THIRD_MAX,
            mu_g: 1.0,
            l_g1_tilde: 1.0 + self.kappa,
            sigma_f: 0.0,
            sigma_g: 0.0,
        }
    }
    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * x.norm_squared() + self.b.dot(y)
    }
    fn grad_x_f(&self, x: &Vector, _y: &Vector) -> Vector {
        x.clone()
    }
    fn grad_y_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        self.b.clone()
    }
    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        0.5 * (y - &self.a * x).norm_squared() + self.kappa * y.iter().map(|&t| ln_cosh(t)).sum::<f64>()
    }
    fn grad_x_g(&self, x: &Vector, y: &Vector) -> Vector {
        -(self.a.transpose() * (y - &self.a * x))
    }
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        y - &self.a * x + y.map(|t| self.kappa * t.tanh())
    }
    fn hess_xy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(-self.a.transpose())
    }
    fn hess_yy_g(&self, _x: &Vector, y: &Vector) -> Option<Matrix> {
        Some(Matrix::from_diagonal(&y.map(|t| 1.0 + self.kappa * sech2(t))))
    }
    fn y_star(&self, x: &Vector) -> Option<Vector> {
        Some((&self.a * x).map(|t| self.solve_coordinate(t)))
    }
    fn hyperobjective(&self, x: &Vector) -> Option<f64> {
        Some(0.5 * x.norm_squared() + self.b.dot(&self.y_star(x)?))
    }
    fn hypergradient(&self, x: &Vector) -> Option<Vector> {
        let y = self.y_star(x)?;
        let w = Vector::from_fn(self.dim_y(), |j, _| self.b[j] / (1.0 + self.kappa * sech2(y[j])));
        Some(x + self.a.transpose() * w)
    }
}

/// Reliability radius `r_ε = 100ε` of the chain instance's oracle.
pub fn chain_radius(cfg: &ChainConfig) -> f64 {
    100.0 * cfg.epsilon
}

/// `∇_x` of `r_ε² φ((y − F(x))/r_ε)²`: equal to `−2 r_ε φ(u) φ'(u) ∇F(x)`
/// with `u = (y − F(x))/r_ε`, and to the exact `∇_x g` whenever
/// `|y − F(x)| ≤ r_ε/2`.
pub fn clipped_mean_gradient(x: &[f64], y: f64, cfg: &ChainConfig) -> Result<Vec<f64>> {
    let r = chain_radius(cfg);
    let u = (y - kernels::chain_f(x, cfg)?) / r;
    let scale = -2.0 * r * clip_smooth(u) * clip_smooth_prime(u);
    Ok(kernels::chain_grad(x, cfg)?.into_iter().map(|v| scale * v).collect())
}

/// Hard instance `f(x, y) = y`, `g(x, y) = (y − F(x))²` over the chain `F`.
#[derive(Debug, Clone, Copy)]
pub struct ChainInstance {
    pub cfg: ChainConfig,
}

pub fn hard_instance(cfg: ChainConfig) -> ChainInstance {
    ChainInstance { cfg }
}

impl ChainInstance {
    fn big_f(&self, x: &Vector) -> f64 {
        kernels::chain_f(x.as_slice(), &self.cfg).expect("dimension checked by caller")
    }
    fn grad_big_f(&self, x: &Vector) -> Vector {
        Vector::from_vec(kernels::chain_grad(x.as_slice(), &self.cfg).expect("dimension checked by caller"))
    }
}

impl BilevelProblem for ChainInstance {
    fn dim_x(&self) -> usize {
        self.cfg.d_x
    }
    fn dim_y(&self) -> usize {
        1
    }
    /// Nominal constants: `f` is linear in `y`, `g` is exactly quadratic in `y`.
    fn profile(&self) -> SmoothnessProfile {
        SmoothnessProfile {
            l_f0: 1.0,
            l_f1: 0.0,
            l_g1: 2.0,
            l_g2: 0.0,
            mu_g: 2.0,
            l_g1_tilde: f64::INFINITY,
            sigma_f: 0.0,
            sigma_g: 0.0,
        }
    }
    fn f(&self, _x: &Vector, y: &Vector) -> f64 {
        y[0]
    }
    fn grad_x_f(&self, x: &Vector, _y: &Vector) -> Vector {
        Vector::zeros(x.len())
    }
    fn grad_y_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::from_element(1, 1.0)
    }
    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        (y[0] - self.big_f(x)).powi(2)
    }
    fn grad_x_g(&self, x: &Vector, y: &Vector) -> Vector {
        -2.0 * (y[0] - self.big_f(x)) * self.grad_big_f(x)
    }
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        Vector::from_element(1, 2.0 * (y[0] - self.big_f(x)))
    }
    fn hess_xy_g(&self, x: &Vector, _y: &Vector) -> Option<Matrix> {
        let g = self.grad_big_f(x);
        Some(Matrix::from_column_slice(g.len(), 1, (-2.0 * g).as_slice()))
    }
    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, 2.0))
    }
    fn y_star(&self, x: &Vector) -> Option<Vector> {
        Some(Vector::from_element(1, self.big_f(x)))
    }
    fn y_star_lambda(&self, x: &Vector, lambda: f64) -> Option<Vector> {
        Some(Vector::from_element(1, self.big_f(x) - 0.5 / lambda))
    }
    fn hyperobjective(&self, x: &Vector) -> Option<f64> {
        Some(self.big_f(x))
    }
    fn hypergradient(&self, x: &Vector) -> Option<Vector> {
        Some(self.grad_big_f(x))
    }
}

/// `ρ(x) = x/√(1 + ‖x‖²/R²)` and its Jacobian `I/s − x xᵀ/(R² s³)`.
pub fn embed_rho(x: &Vector, radius: f64) -> Result<(Vector, Matrix)> {
    if !(radius > 0.0) {
        return Err(invalid("radius", format!("must be positive, got {radius}")));
    }
    let s = (1.0 + x.norm_squared() / (radius * radius)).sqrt();
    let rho = x / s;
    let n = x.len();
    let jac = Matrix::identity(n, n) / s - (x * x.transpose()) / (radius * radius * s * s * s);
    Ok((rho, jac))
}

/// Configuration of the randomized embedding of the chain instance.
#[derive(Debug, Clone)]
pub struct EmbeddedInstanceConfig {
    pub ambient_dim: usize,
    pub chain: ChainConfig,
    pub seed: u64,
}

/// `f_U(x, y) = y + ‖x‖²/10`, `g_U(x, y) = (y − F(Uᵀρ(x)))²`.
#[derive(Debug, Clone)]
pub struct EmbeddedInstance {
    pub chain: ChainInstance,
    /// `d × d_x`, orthonormal columns.
    pub u: Matrix,
    pub radius: f64,
}

pub fn embedded_instance(cfg: &EmbeddedInstanceConfig) -> Result<EmbeddedInstance> {
    if cfg.ambient_dim < cfg.chain.d_x {
        return Err(invalid("ambient_dim", format!("must be at least d_x = {}", cfg.chain.d_x)));
    }
    EmbeddedInstance::from_basis(cfg.chain, random_orthonormal(cfg.ambient_dim, cfg.chain.d_x, cfg.seed))
}

impl EmbeddedInstance {
    pub fn from_basis(chain: ChainConfig, u: Matrix) -> Result<Self> {
        if u.ncols() != chain.d_x {
            return Err(Error::DimensionMismatch { what: "embedding basis columns", expected: chain.d_x, found: u.ncols() });
        }
        let defect = orthonormality_defect(&u);
        if defect > 1e-10 {
            return Err(Error::NonOrthonormal(defect));
        }
        Ok(Self {
            chain: hard_instance(chain),
            u,
            radius: 250.0 * chain.epsilon * (chain.d_x as f64).sqrt(),
        })
    }

    /// `(Uᵀρ(x), J(x))`.
    pub fn pullback(&self, x: &Vector) -> (Vector, Matrix) {
        let (rho, jac) = embed_rho(x, self.radius).expect("radius is positive");
        (self.u.transpose() * rho, jac)
    }

    /// Maps a chain-space gradient `w` at `Uᵀρ(x)` to `J(x)ᵀ U w`.
    pub fn pushforward(&self, jac: &Matrix, w: &Vector) -> Vector {
        jac.transpose() * (&self.u * w)
    }
}

impl BilevelProblem for EmbeddedInstance {
    fn dim_x(&self) -> usize {
        self.u.nrows()
    }
    fn dim_y(&self) -> usize {
        1
    }
    fn profile(&self) -> SmoothnessProfile {
        SmoothnessProfile { l_f1: 0.2, ..self.chain.profile() }
    }
    fn f(&self, x: &Vector, y: &Vector) -> f64 {
        y[0] + 0.1 * x.norm_squared()
    }
    fn grad_x_f(&self, x: &Vector, _y: &Vector) -> Vector {
        x / 5.0
    }
    fn grad_y_f(&self, _x: &Vector, _y: &Vector) -> Vector {
        Vector::from_element(1, 1.0)
    }
    fn g(&self, x: &Vector, y: &Vector) -> f64 {
        let (z, _) = self.pullback(x);
        self.chain.g(&z, y)
    }
    fn grad_x_g(&self, x: &Vector, y: &Vector) -> Vector {
        let (z, jac) = self.pullback(x);
        self.pushforward(&jac, &self.chain.grad_x_g(&z, y))
    }
    fn grad_y_g(&self, x: &Vector, y: &Vector) -> Vector {
        let (z, _) = self.pullback(x);
        self.chain.grad_y_g(&z, y)
    }
    fn hess_xy_g(&self, x: &Vector, _y: &Vector) -> Option<Matrix> {
        let (z, jac) = self.pullback(x);
        let g = self.pushforward(&jac, &self.chain.grad_big_f(&z));
        Some(Matrix::from_column_slice(g.len(), 1, (-2.0 * g).as_slice()))
    }
    fn hess_yy_g(&self, _x: &Vector, _y: &Vector) -> Option<Matrix> {
        Some(Matrix::from_element(1, 1, 2.0))
    }
    fn y_star(&self, x: &Vector) -> Option<Vector> {
        let (z, _) = self.pullback(x);
        self.chain.y_star(&z)
    }
    fn y_star_lambda(&self, x: &Vector, lambda: f64) -> Option<Vector> {
        let (z, _) = self.pullback(x);
        self.chain.y_star_lambda(&z, lambda)
    }
    fn hyperobjective(&self, x: &Vector) -> Option<f64> {
        let (z, _) = self.pullback(x);
        Some(0.1 * x.norm_squared() + self.chain.big_f(&z))
    }
    fn hypergradient(&self, x: &Vector) -> Option<Vector> {
        let (z, jac) = self.pullback(x);
        Some(x / 5.0 + self.pushforward(&jac, &self.chain.grad_big_f(&z)))
    }
}
