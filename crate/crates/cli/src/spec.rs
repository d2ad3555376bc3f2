//! Run specifications: a JSON document describing one experiment.

use std::path::{Path, PathBuf};

use bilevel_core::analysis::LemmaSuiteConfig;
use bilevel_core::kernels::ChainConfig;
use bilevel_core::oracles::Component;
use bilevel_core::problems::{BilevelProblem, CubicPerturbedInstance, QuadraticInstance, SmoothnessProfile};
use bilevel_core::solver::{schedule_from_theorem, ScheduleConstants, SolverConfig, Theorem};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Solve,
    VerifyLemmas,
    RateFit,
    Stall,
    OracleMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSpec {
    Quadratic { d_x: usize, d_y: usize, b_norm: f64, seed: u64 },
    Cubic { d_x: usize, d_y: usize, b_norm: f64, kappa: f64, seed: u64 },
    Chain { epsilon: f64, d_x: usize },
}

#[derive(Debug, Clone)]
pub enum Instance {
    Quadratic(QuadraticInstance),
    Cubic(CubicPerturbedInstance),
    Chain(ChainConfig),
}

impl InstanceSpec {
    pub fn build(&self) -> bilevel_core::Result<Instance> {
        Ok(match *self {
            InstanceSpec::Quadratic { d_x, d_y, b_norm, seed } => Instance::Quadratic(QuadraticInstance::random(d_x, d_y, b_norm, seed)),
            InstanceSpec::Cubic { d_x, d_y, b_norm, kappa, seed } => Instance::Cubic(CubicPerturbedInstance::random(d_x, d_y, b_norm, kappa, seed)?),
            InstanceSpec::Chain { epsilon, d_x } => Instance::Chain(ChainConfig::new(epsilon, d_x)?),
        })
    }
}

impl Instance {
    pub fn profile(&self) -> SmoothnessProfile {
        match self {
            Instance::Quadratic(q) => q.profile(),
            Instance::Cubic(c) => c.profile(),
            Instance::Chain(cfg) => bilevel_core::problems::hard_instance(*cfg).profile(),
        }
    }
}

fn unbounded() -> f64 {
    f64::INFINITY
}

fn default_capacity() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Gaussian {
        sigma_f: f64,
        sigma_g: f64,
        /// Reliability radius; `null` for unbounded.
        #[serde(default = "unbounded", with = "radius")]
        radius: f64,
        #[serde(default = "default_capacity")]
        capacity: usize,
    },
    ZeroChain {
        /// Progression probability; defaults to `ε⁴/σ²` when only `sigma` is
        /// given.
        #[serde(default)]
        p: Option<f64>,
        #[serde(default)]
        sigma: Option<f64>,
        #[serde(default = "default_capacity")]
        capacity: usize,
    },
}

mod radius {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &f64, s: S) -> Result<S::Ok, S::Error> {
        if r.is_finite() { s.serialize_some(r) } else { s.serialize_none() }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl OracleSpec {
    pub fn capacity(&self) -> usize {
        match *self {
            OracleSpec::Gaussian { capacity, .. } | OracleSpec::ZeroChain { capacity, .. } => capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverSpec {
    /// Parameters from a theorem's orders; `radius` defaults to the oracle's.
    Theorem {
        theorem: Theorem,
        #[serde(default)]
        constants: ScheduleConstants,
    },
    Explicit(SolverConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StallSpec {
    pub budget: usize,
    /// Iteration at which stalled seeds are counted.
    pub checkpoint: usize,
    /// Also run with `p/2` and report the ratio of median activation times.
    #[serde(default)]
    pub halve_p: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsSpec {
    pub component: Component,
    pub samples: usize,
    /// Every entry of the query `x`.
    pub x: f64,
    /// Offset of the query `y` from the lower-level solution.
    #[serde(default)]
    pub y_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub kind: Kind,
    #[serde(default)]
    pub instance: Option<InstanceSpec>,
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
    #[serde(default)]
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Master seed; cell seeds are derived from it.
    #[serde(default)]
    pub seed: u64,
    /// Every entry of the starting point.
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default)]
    pub lemmas: Option<LemmaSuiteConfig>,
    #[serde(default)]
    pub stall: Option<StallSpec>,
    #[serde(default)]
    pub moments: Option<MomentsSpec>,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_x0() -> f64 {
    1.0
}

fn default_bootstrap() -> usize {
    1000
}

/// 1-based line of the first `"key"` in `text`, if any.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn at(text: &str, key: &str, msg: impl std::fmt::Display) -> CliError {
    match line_of(text, key) {
        Some(line) => CliError::Config(format!("line {line} (`{key}`): {msg}")),
        None => CliError::Config(format!("`{key}`: {msg}")),
    }
}

impl RunSpec {
    /// Solver configuration for accuracy `epsilon`.
    pub fn solver_config(&self, epsilon: f64) -> bilevel_core::Result<SolverConfig> {
        let instance = self.instance.as_ref().expect("validated").build()?;
        let profile = self.profile(&instance);
        match self.solver.as_ref().expect("validated") {
            SolverSpec::Explicit(cfg) => Ok(*cfg),
            SolverSpec::Theorem { theorem, constants } => schedule_from_theorem(*theorem, epsilon, &profile, self.radius(), constants),
        }
    }

    /// Profile of the instance with the oracle's noise levels.
    pub fn profile(&self, instance: &Instance) -> SmoothnessProfile {
        let base = instance.profile();
        match self.oracle {
            Some(OracleSpec::Gaussian { sigma_f, sigma_g, .. }) => base.with_noise(sigma_f, sigma_g).with_l_g1_tilde(base.l_g1),
            Some(OracleSpec::ZeroChain { sigma, .. }) => {
                let s = sigma.unwrap_or(0.0);
                base.with_noise(s, s)
            }
            None => base,
        }
    }

    pub fn radius(&self) -> f64 {
        match (&self.oracle, &self.instance) {
            (Some(OracleSpec::Gaussian { radius, .. }), _) => *radius,
            (_, Some(InstanceSpec::Chain { epsilon, .. })) => 100.0 * epsilon,
            _ => f64::INFINITY,
        }
    }

    /// Accuracy grid; an explicit solver config contributes its own `ε`.
    pub fn grid(&self) -> Vec<f64> {
        match &self.solver {
            Some(SolverSpec::Explicit(cfg)) if self.epsilons.is_empty() => vec![cfg.epsilon],
            _ => self.epsilons.clone(),
        }
    }

    /// Progression probability of a zero-chain oracle block.
    pub fn progression_probability(&self) -> Option<f64> {
        let (Some(OracleSpec::ZeroChain { p, sigma, .. }), Some(InstanceSpec::Chain { epsilon, .. })) = (&self.oracle, &self.instance) else {
            return None;
        };
        p.or_else(|| sigma.map(|s| bilevel_core::oracles::default_progression_probability(*epsilon, s, f64::INFINITY)))
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        let value = serde_json::to_value(&copy).expect("specs always serialize");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    fn validate(&self, text: &str) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(at(text, "seeds", "the seed list must not be empty"));
        }
        let need = |key: &str, present: bool| if present { Ok(()) } else { Err(at(text, "kind", format!("this experiment kind needs a `{key}` block"))) };
        let instance = match &self.instance {
            Some(i) => Some(i.build().map_err(|e| at(text, "instance", e))?),
            None => None,
        };
        if let Some(o) = &self.oracle {
            if o.capacity() < 2 {
                return Err(at(text, "capacity", format!("oracles take N >= 2 simultaneous query points, got {}", o.capacity())));
            }
            match (o, &instance) {
                (OracleSpec::Gaussian { sigma_f, sigma_g, radius, .. }, Some(Instance::Quadratic(_) | Instance::Cubic(_))) => {
                    if !(*sigma_f >= 0.0 && *sigma_g >= 0.0) {
                        return Err(at(text, "oracle", "noise levels must be non-negative"));
                    }
                    if !(*radius > 0.0) {
                        return Err(at(text, "radius", "radius must be positive or null"));
                    }
                }
                (OracleSpec::ZeroChain { .. }, Some(Instance::Chain(_))) => {
                    let Some(p) = self.progression_probability() else {
                        return Err(at(text, "oracle", "a zero_chain oracle needs `p` or `sigma`"));
                    };
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(at(text, "p", format!("progression probability must lie in (0, 1], got {p}")));
                    }
                }
                (_, None) => {}
                _ => return Err(at(text, "oracle", "gaussian oracles pair with quadratic/cubic instances, zero_chain with chain")),
            }
        }
        match self.kind {
            Kind::Solve | Kind::RateFit => {
                need("instance", self.instance.is_some())?;
                need("oracle", self.oracle.is_some())?;
                need("solver", self.solver.is_some())?;
                if self.grid().is_empty() {
                    return Err(at(text, "epsilons", "the accuracy grid must not be empty"));
                }
                if let Some(e) = self.grid().iter().find(|e| !(**e > 0.0)) {
                    return Err(at(text, "epsilons", format!("accuracies must be positive, got {e}")));
                }
                if self.kind == Kind::RateFit {
                    if self.grid().len() < 2 {
                        return Err(at(text, "epsilons", "a rate fit needs at least two accuracies"));
                    }
                    if !matches!(instance, Some(Instance::Quadratic(_) | Instance::Cubic(_))) {
                        return Err(at(text, "instance", "rate fits run on quadratic or cubic instances"));
                    }
                    if !matches!(self.solver, Some(SolverSpec::Theorem { .. })) {
                        return Err(at(text, "solver", "rate fits need a theorem schedule"));
                    }
                }
                let inst = instance.as_ref().expect("checked above");
                let profile = self.profile(inst);
                for eps in self.grid() {
                    let cfg = self.solver_config(eps).map_err(|e| at(text, "solver", e))?;
                    cfg.validate(&profile).map_err(|e| at(text, "solver", e))?;
                }
            }
            Kind::Stall => {
                need("stall", self.stall.is_some())?;
                need("oracle", matches!(self.oracle, Some(OracleSpec::ZeroChain { .. })))?;
                need("instance", matches!(instance, Some(Instance::Chain(_))))?;
                let s = self.stall.as_ref().expect("checked above");
                if s.budget == 0 {
                    return Err(at(text, "budget", "the iteration budget must be positive"));
                }
            }
            Kind::OracleMoments => {
                need("moments", self.moments.is_some())?;
                need("instance", self.instance.is_some())?;
                need("oracle", self.oracle.is_some())?;
                if self.moments.as_ref().expect("checked above").samples < 2 {
                    return Err(at(text, "samples", "need at least 2 samples"));
                }
            }
            Kind::VerifyLemmas => {}
        }
        Ok(())
    }
}

/// Parses and validates `text`; every error carries a line reference.
pub fn parse_spec_str(text: &str) -> Result<RunSpec, CliError> {
    let spec: RunSpec = serde_json::from_str(text).map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    spec.validate(text)?;
    Ok(spec)
}

pub fn parse_spec(path: &Path) -> Result<RunSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_spec_str(&text)
}
