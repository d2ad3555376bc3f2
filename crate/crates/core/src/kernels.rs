//! Scalar building blocks of the chain hard instance.
//!
//! `Ψ` gates each link of the chain, `Φ` is a scaled Gaussian CDF, `φ` is a
//! smooth clipping map, and `Γ` is a smooth step built from the bump `Λ`.
//! Derivatives are analytic; finite differences and quadrature are only used
//! by the tests.

use std::f64::consts::{E, PI, SQRT_2};
use std::sync::OnceLock;

use libm::erfc;

use crate::error::{Error, Result};
use crate::quadrature::{gk15, integrate};

const SQRT_E: f64 = 1.648_721_270_700_128_2;

/// Accuracy target and chain length of the hard instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    pub epsilon: f64,
    pub d_x: usize,
}

impl ChainConfig {
    pub fn new(epsilon: f64, d_x: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(crate::error::invalid("epsilon", format!("must be positive, got {epsilon}")));
        }
        if d_x == 0 {
            return Err(crate::error::invalid("d_x", "chain length must be at least 1"));
        }
        Ok(Self { epsilon, d_x })
    }

    /// Chain of length `⌊ε⁻²⌋`.
    pub fn with_default_dim(epsilon: f64) -> Result<Self> {
        let d = if epsilon > 0.0 { (1.0 / (epsilon * epsilon) + 1e-9).floor() as usize } else { 0 };
        Self::new(epsilon, d.max(1))
    }
}

/// `Ψ^(k)(t)` for `k ≤ 3`. Exactly zero for `t ≤ 1/2`.
pub fn psi_deriv(t: f64, k: usize) -> f64 {
    if t <= 0.5 {
        return 0.0;
    }
    let s = 2.0 * t - 1.0;
    let inv = 1.0 / s;
    let base = (1.0 - inv * inv).exp();
    if base == 0.0 {
        return 0.0;
    }
    let i2 = inv * inv;
    match k {
        0 => base,
        1 => 4.0 * i2 * inv * base,
        2 => (-24.0 * i2 * i2 + 16.0 * i2 * i2 * i2) * base,
        3 => {
            let i5 = i2 * i2 * inv;
            (192.0 * i5 - 288.0 * i5 * i2 + 64.0 * i5 * i2 * i2) * base
        }
        _ => panic!("psi derivatives are provided up to order 3"),
    }
}

pub fn psi(t: f64) -> f64 {
    psi_deriv(t, 0)
}

pub fn psi_prime(t: f64) -> f64 {
    psi_deriv(t, 1)
}

pub fn psi_second(t: f64) -> f64 {
    psi_deriv(t, 2)
}

/// `Φ^(k)(t)` for `k ≤ 3`, where `Φ(t) = √e ∫_{-∞}^t e^{-τ²/2} dτ`.
pub fn phi_gauss_deriv(t: f64, k: usize) -> f64 {
    match k {
        0 => SQRT_E * (PI / 2.0).sqrt() * erfc(-t / SQRT_2),
        1 => SQRT_E * (-0.5 * t * t).exp(),
        2 => -t * phi_gauss_deriv(t, 1),
        3 => (t * t - 1.0) * phi_gauss_deriv(t, 1),
        _ => panic!("phi derivatives are provided up to order 3"),
    }
}

pub fn phi_gauss(t: f64) -> f64 {
    phi_gauss_deriv(t, 0)
}

pub fn phi_gauss_prime(t: f64) -> f64 {
    phi_gauss_deriv(t, 1)
}

/// Smooth clipping map `φ^(k)(t)` for `k ≤ 3`: the identity on `[-1/2, 1/2]`,
/// odd, and saturating at `1/2 + √π/2`.
pub fn clip_smooth_deriv(t: f64, k: usize) -> f64 {
    if t < -0.5 {
        let v = clip_smooth_deriv(-t, k);
        return if k % 2 == 0 { -v } else { v };
    }
    if t <= 0.5 {
        return match k {
            0 => t,
            1 => 1.0,
            _ => 0.0,
        };
    }
    match k {
        0 => {
            if t.is_infinite() {
                return 0.5 + 0.5 * PI.sqrt();
            }
            // t - (1/e)∫_{1/2}^t Ψ in closed form, with a = 1/(2t-1).
            let a = 1.0 / (2.0 * t - 1.0);
            0.5 + 0.5 * (PI.sqrt() * erfc(a) + (-(-a * a).exp_m1()) / a)
        }
        1 => 1.0 - psi(t) / E,
        2 => -psi_deriv(t, 1) / E,
        3 => -psi_deriv(t, 2) / E,
        _ => panic!("clipping derivatives are provided up to order 3"),
    }
}

pub fn clip_smooth(t: f64) -> f64 {
    clip_smooth_deriv(t, 0)
}

pub fn clip_smooth_prime(t: f64) -> f64 {
    clip_smooth_deriv(t, 1)
}

/// Bump `Λ(t) = exp(-1/(100 (t-1/4)(1/2-t)))` supported on `(1/4, 1/2)`.
pub fn bump(t: f64) -> f64 {
    if t <= 0.25 || t >= 0.5 {
        return 0.0;
    }
    let q = (t - 0.25) * (0.5 - t);
    (-1.0 / (100.0 * q)).exp()
}

/// `Λ'(t)`.
pub fn bump_prime(t: f64) -> f64 {
    if t <= 0.25 || t >= 0.5 {
        return 0.0;
    }
    let q = (t - 0.25) * (0.5 - t);
    let dq = 0.75 - 2.0 * t;
    let l = (-1.0 / (100.0 * q)).exp();
    if l == 0.0 {
        return 0.0;
    }
    l * dq / (100.0 * q * q)
}

const TABLE_CELLS: usize = 4096;
const LO: f64 = 0.25;
const HI: f64 = 0.5;

/// Cumulative antiderivative of `Λ` on a 4096-cell grid over `[1/4, 1/2]`,
/// normalized to end at 1.
#[derive(Debug, Clone)]
pub struct QuadratureTable {
    normalizer: f64,
    nodes: Vec<f64>,
    cumulative: Vec<f64>,
}

impl QuadratureTable {
    pub fn build() -> Self {
        let h = (HI - LO) / TABLE_CELLS as f64;
        let nodes: Vec<f64> = (0..=TABLE_CELLS).map(|k| LO + h * k as f64).collect();
        let mut raw = Vec::with_capacity(TABLE_CELLS + 1);
        raw.push(0.0);
        let mut acc = 0.0;
        for w in nodes.windows(2) {
            acc += gk15(&bump, w[0], w[1]).0;
            raw.push(acc);
        }
        let normalizer = acc;
        let cumulative = raw.into_iter().map(|v| v / normalizer).collect();
        Self { normalizer, nodes, cumulative }
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// `Γ(t)`: the tabulated integral up to the cell start plus one
    /// Kronrod panel over the remainder of the cell.
    pub fn gamma(&self, t: f64) -> f64 {
        if t <= LO {
            return 0.0;
        }
        if t >= HI {
            return 1.0;
        }
        let h = (HI - LO) / TABLE_CELLS as f64;
        let k = (((t - LO) / h) as usize).min(TABLE_CELLS - 1);
        let t0 = self.nodes[k];
        let partial = if t > t0 { gk15(&bump, t0, t).0 } else { 0.0 };
        (self.cumulative[k] + partial / self.normalizer).clamp(0.0, 1.0)
    }
}

/// Table shared by all `Γ` evaluations, built on first use.
pub fn quadrature_table() -> &'static QuadratureTable {
    static TABLE: OnceLock<QuadratureTable> = OnceLock::new();
    TABLE.get_or_init(QuadratureTable::build)
}

/// Smooth step `Γ`: 0 below 1/4, 1 from 1/2 on.
pub fn gamma_step(t: f64) -> f64 {
    quadrature_table().gamma(t)
}

pub fn gamma_step_prime(t: f64) -> f64 {
    bump(t) / quadrature_table().normalizer()
}

/// `Γ(t)` by direct adaptive quadrature; slow, for cross-checking the table.
pub fn gamma_step_direct(t: f64) -> f64 {
    if t <= LO {
        return 0.0;
    }
    if t >= HI {
        return 1.0;
    }
    let norm = integrate(bump, LO, HI, 1e-15);
    integrate(bump, LO, t, 1e-15 * norm) / norm
}

/// Largest `i ≥ 0` with `|x_i| > alpha`, where index 0 is a phantom coordinate
/// holding `phantom` and `x_1..x_d` are the entries of `x`.
pub fn prog_with_phantom(x: &[f64], alpha: f64, phantom: f64) -> usize {
    match x.iter().rposition(|v| v.abs() > alpha) {
        Some(i) => i + 1,
        // The phantom is the only candidate left; index 0 is also the value
        // reported when even the phantom sits below the threshold.
        None => {
            let _ = phantom;
            0
        }
    }
}

/// `prog_α(x)` with the phantom coordinate `x_0 ≡ 1`.
pub fn prog(x: &[f64], alpha: f64) -> usize {
    prog_with_phantom(x, alpha, 1.0)
}

fn check_index(i: usize, cfg: &ChainConfig) -> Result<()> {
    if i == 0 || i > cfg.d_x {
        return Err(Error::IndexOutOfRange { index: i, len: cfg.d_x });
    }
    Ok(())
}

fn check_dim(x: &[f64], cfg: &ChainConfig) -> Result<()> {
    if x.len() != cfg.d_x {
        return Err(Error::DimensionMismatch { what: "chain state", expected: cfg.d_x, found: x.len() });
    }
    Ok(())
}

/// `x_{i-1}` with the phantom `x_0 ≡ ε`.
fn prev(i: usize, x: &[f64], eps: f64) -> f64 {
    if i == 1 { eps } else { x[i - 2] }
}

/// Mixed partial `∂^a_{x_{i-1}} ∂^b_{x_i} f_i(x)` for `a, b ≤ 3`.
///
/// For `i = 1` the first argument is the constant phantom, so any `a > 0`
/// gives zero.
pub fn chain_term_partial(i: usize, x: &[f64], cfg: &ChainConfig, a: usize, b: usize) -> Result<f64> {
    check_index(i, cfg)?;
    check_dim(x, cfg)?;
    if i == 1 && a > 0 {
        return Ok(0.0);
    }
    let eps = cfg.epsilon;
    let u = prev(i, x, eps) / eps;
    let v = x[i - 1] / eps;
    let sign = if (a + b) % 2 == 0 { 1.0 } else { -1.0 };
    let plus = psi_deriv(u, a);
    let minus = psi_deriv(-u, a);
    let mut val = 0.0;
    if plus != 0.0 {
        val += plus * phi_gauss_deriv(v, b);
    }
    if minus != 0.0 {
        val -= sign * minus * phi_gauss_deriv(-v, b);
    }
    Ok(val * eps.powi(-((a + b) as i32)))
}

/// `f_i(x) = Ψ_ε(x_{i-1})Φ_ε(x_i) − Ψ_ε(−x_{i-1})Φ_ε(−x_i)`.
pub fn chain_term_f(i: usize, x: &[f64], cfg: &ChainConfig) -> Result<f64> {
    chain_term_partial(i, x, cfg, 0, 0)
}

/// Full gradient of `f_i`; only coordinates `i-1` and `i` are nonzero.
pub fn chain_term_grad(i: usize, x: &[f64], cfg: &ChainConfig) -> Result<Vec<f64>> {
    check_index(i, cfg)?;
    let mut g = vec![0.0; cfg.d_x];
    g[i - 1] = chain_term_partial(i, x, cfg, 0, 1)?;
    if i > 1 {
        g[i - 2] = chain_term_partial(i, x, cfg, 1, 0)?;
    }
    Ok(g)
}

/// All `f_i(x)`, `i = 1..=d_x`.
pub fn chain_terms(x: &[f64], cfg: &ChainConfig) -> Result<Vec<f64>> {
    check_dim(x, cfg)?;
    (1..=cfg.d_x).map(|i| chain_term_f(i, x, cfg)).collect()
}

/// `F(x) = ε² Σ f_i(x)`.
pub fn chain_f(x: &[f64], cfg: &ChainConfig) -> Result<f64> {
    Ok(cfg.epsilon * cfg.epsilon * chain_terms(x, cfg)?.iter().sum::<f64>())
}

/// `∇F(x)`.
pub fn chain_grad(x: &[f64], cfg: &ChainConfig) -> Result<Vec<f64>> {
    check_dim(x, cfg)?;
    let e2 = cfg.epsilon * cfg.epsilon;
    let d = cfg.d_x;
    let mut g = vec![0.0; d];
    for i in 1..=d {
        g[i - 1] += e2 * chain_term_partial(i, x, cfg, 0, 1)?;
        if i > 1 {
            g[i - 2] += e2 * chain_term_partial(i, x, cfg, 1, 0)?;
        }
    }
    Ok(g)
}

/// Suffix sums `S_i = Σ_{j ≥ i} Γ²(|x_j|/ε)`, indexed from 0 for `i = 1`.
fn suffix_sums(x: &[f64], eps: f64) -> Vec<f64> {
    let mut s = vec![0.0; x.len() + 1];
    for j in (0..x.len()).rev() {
        let g = gamma_step(x[j].abs() / eps);
        s[j] = s[j + 1] + g * g;
    }
    s
}

/// All smooth indicators `h_1..h_d`.
pub fn smooth_indicators(x: &[f64], cfg: &ChainConfig) -> Result<Vec<f64>> {
    check_dim(x, cfg)?;
    let s = suffix_sums(x, cfg.epsilon);
    Ok(s[..cfg.d_x].iter().map(|&si| gamma_step(1.0 - si.sqrt())).collect())
}

/// `h_i(x) = Γ(1 − (Σ_{j≥i} Γ²(|x_j|/ε))^{1/2})`.
pub fn smooth_indicator_h(i: usize, x: &[f64], cfg: &ChainConfig) -> Result<f64> {
    check_index(i, cfg)?;
    Ok(smooth_indicators(x, cfg)?[i - 1])
}

/// `∇h_i(x)`; supported on coordinates `j ≥ i`.
pub fn smooth_indicator_grad(i: usize, x: &[f64], cfg: &ChainConfig) -> Result<Vec<f64>> {
    check_index(i, cfg)?;
    check_dim(x, cfg)?;
    let eps = cfg.epsilon;
    let s = suffix_sums(x, eps)[i - 1];
    let mut g = vec![0.0; cfg.d_x];
    if s <= 0.0 {
        return Ok(g);
    }
    let root = s.sqrt();
    let outer = gamma_step_prime(1.0 - root);
    if outer == 0.0 {
        return Ok(g);
    }
    for j in (i - 1)..cfg.d_x {
        let u = x[j].abs() / eps;
        let inner = 2.0 * gamma_step(u) * gamma_step_prime(u) * x[j].signum() / eps;
        g[j] = -outer * inner / (2.0 * root);
    }
    Ok(g)
}
