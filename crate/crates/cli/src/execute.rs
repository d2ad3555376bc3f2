//! Runs a validated [`RunSpec`] and persists its results.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use bilevel_core::analysis::chain::{stall_experiment, GreedyProbe, StallReport};
use bilevel_core::analysis::rate::{fit_from_hits, rate_cell, RateFitConfig};
use bilevel_core::analysis::surrogate::grad_norms;
use bilevel_core::analysis::{contract_suite, verify_lemmas};
use bilevel_core::kernels::{chain_f, prog};
use bilevel_core::oracles::{estimate_moments, GaussianOracle, Moments, StochasticOracle, ZeroChainOracle};
use bilevel_core::problems::{hard_instance, lower_solution, BilevelProblem, SmoothnessProfile};
use bilevel_core::rng::derive_seed;
use bilevel_core::solver::{run_plain, SolverConfig};
use bilevel_core::Vector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::spec::{Instance, Kind, OracleSpec, RunSpec, SolverSpec};
use crate::CliError;

/// Column order of every per-cell trace file.
pub const TRACE_HEADER: [&str; 4] = ["iter", "oracle_calls", "grad_F_norm", "prog"];

/// Schema version of `summary.json` and the trace files.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub error: Option<String>,
    pub oracle_calls: Option<u64>,
    /// Oracle calls at the first iterate with `‖∇F‖ ≤ ε`.
    pub hit_calls: Option<u64>,
    pub final_grad_norm: Option<f64>,
    pub trace_file: Option<String>,
}

impl CellRecord {
    fn new(id: String, seed: u64, epsilon: Option<f64>) -> Self {
        Self { id, seed, epsilon, error: None, oracle_calls: None, hit_calls: None, final_grad_norm: None, trace_file: None }
    }

    fn failed(mut self, e: impl std::fmt::Display) -> Self {
        self.error = Some(e.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub library_version: String,
    pub spec_hash: String,
    pub kind: Kind,
    /// False when a verification failed or a cell errored.
    pub passed: bool,
    pub cells: Vec<CellRecord>,
    pub summary: Value,
}

/// One trace row: `(iter, oracle_calls, ‖∇F‖, prog)`.
type Row = (usize, u64, f64, Option<usize>);

fn write_trace(dir: &Path, id: &str, rows: &[Row]) -> anyhow::Result<String> {
    let rel = format!("cells/{id}.csv");
    let mut w = csv::Writer::from_path(dir.join(&rel)).with_context(|| format!("cannot create {rel}"))?;
    w.write_record(TRACE_HEADER)?;
    for (iter, calls, norm, p) in rows {
        w.write_record([iter.to_string(), calls.to_string(), norm.to_string(), p.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(rel)
}

fn cell_seed(spec: &RunSpec, epsilon: f64, seed: u64) -> u64 {
    derive_seed(spec.seed, &[epsilon.to_bits(), seed])
}

fn run_solver<P: BilevelProblem, O: StochasticOracle>(
    problem: &P,
    oracle: &O,
    cfg: &SolverConfig,
    profile: &SmoothnessProfile,
    x0: Vector,
    chain_alpha: Option<f64>,
) -> anyhow::Result<(Vec<Row>, u64)> {
    let out = run_plain(oracle, cfg, profile, x0)?;
    let observed = oracle.counters().total();
    anyhow::ensure!(out.oracle_calls == observed, "solver reported {} oracle calls, oracle observed {observed}", out.oracle_calls);
    let norms = grad_norms(problem, &out.trace, cfg.epsilon)?;
    let rows = out
        .trace
        .iter()
        .zip(&norms)
        .map(|(r, &n)| (r.iter, r.oracle_calls, n, chain_alpha.map(|a| prog(r.x.as_slice(), a))))
        .collect();
    Ok((rows, out.oracle_calls))
}

fn solve_cell(spec: &RunSpec, instance: &Instance, dir: &Path, epsilon: f64, seed: u64) -> CellRecord {
    let id = format!("eps{epsilon}_seed{seed}");
    let rec = CellRecord::new(id.clone(), seed, Some(epsilon));
    let result = (|| -> anyhow::Result<(Vec<Row>, u64)> {
        let cfg = spec.solver_config(epsilon)?;
        let profile = spec.profile(instance);
        let s = cell_seed(spec, epsilon, seed);
        let cap = spec.oracle.as_ref().map_or(2, OracleSpec::capacity);
        match (instance, spec.oracle.as_ref()) {
            (Instance::Quadratic(q), Some(OracleSpec::Gaussian { sigma_f, sigma_g, radius, .. })) => {
                let o = GaussianOracle::new(q.clone(), *sigma_f, *sigma_g, *radius, s)?.with_capacity(cap)?;
                run_solver(q, &o, &cfg, &profile, Vector::from_element(q.dim_x(), spec.x0), None)
            }
            (Instance::Cubic(c), Some(OracleSpec::Gaussian { sigma_f, sigma_g, radius, .. })) => {
                let o = GaussianOracle::new(c.clone(), *sigma_f, *sigma_g, *radius, s)?.with_capacity(cap)?;
                run_solver(c, &o, &cfg, &profile, Vector::from_element(c.dim_x(), spec.x0), None)
            }
            (Instance::Chain(chain), Some(OracleSpec::ZeroChain { .. })) => {
                let p = spec.progression_probability().context("missing progression probability")?;
                let o = ZeroChainOracle::new(*chain, p, s)?.with_capacity(cap)?;
                let problem = hard_instance(*chain);
                run_solver(&problem, &o, &cfg, &profile, Vector::from_element(chain.d_x, spec.x0), Some(chain.epsilon / 4.0))
            }
            _ => anyhow::bail!("instance and oracle blocks do not match"),
        }
    })();
    match result {
        Ok((rows, calls)) => match write_trace(dir, &id, &rows) {
            Ok(file) => CellRecord {
                oracle_calls: Some(calls),
                hit_calls: rows.iter().find(|r| r.2 <= epsilon).map(|r| r.1),
                final_grad_norm: rows.last().map(|r| r.2),
                trace_file: Some(file),
                ..rec
            },
            Err(e) => rec.failed(e),
        },
        Err(e) => rec.failed(e),
    }
}

fn rate_config(spec: &RunSpec) -> anyhow::Result<RateFitConfig> {
    let (Some(SolverSpec::Theorem { theorem, constants }), Some(OracleSpec::Gaussian { sigma_f, sigma_g, radius, .. })) = (&spec.solver, &spec.oracle) else {
        anyhow::bail!("rate fits need a theorem schedule and a gaussian oracle");
    };
    Ok(RateFitConfig {
        theorem: *theorem,
        constants: *constants,
        epsilons: spec.epsilons.clone(),
        seeds: spec.seeds.clone(),
        sigma_f: *sigma_f,
        sigma_g: *sigma_g,
        radius: *radius,
        x0: spec.x0,
        bootstrap: spec.bootstrap,
        seed: spec.seed,
        stop_at_hit: true,
    })
}

fn rate_fit_cell(cfg: &RateFitConfig, instance: &Instance, dir: &Path, epsilon: f64, seed: u64) -> CellRecord {
    let id = format!("eps{epsilon}_seed{seed}");
    let rec = CellRecord::new(id.clone(), seed, Some(epsilon));
    let cell = match instance {
        Instance::Quadratic(q) => rate_cell(q, cfg, epsilon, seed),
        Instance::Cubic(c) => rate_cell(c, cfg, epsilon, seed),
        Instance::Chain(_) => return rec.failed("rate fits run on quadratic or cubic instances"),
    };
    match cell {
        Ok(c) => {
            let rows: Vec<Row> = c.rows.iter().map(|r| (r.iter, r.oracle_calls, r.grad_norm, None)).collect();
            match write_trace(dir, &id, &rows) {
                Ok(file) => CellRecord {
                    oracle_calls: rows.last().map(|r| r.1),
                    hit_calls: c.hit_calls,
                    final_grad_norm: Some(c.final_grad_norm),
                    trace_file: Some(file),
                    ..rec
                },
                Err(e) => rec.failed(e),
            }
        }
        Err(e) => rec.failed(e),
    }
}

fn stall_summary(report: &StallReport, checkpoint: usize) -> Value {
    json!({
        "p": report.p,
        "budget": report.budget,
        "checkpoint": checkpoint,
        "stalled_at_checkpoint": report.stalled_at(checkpoint),
        "median_full_activation": report.median_full_activation,
        "censored": report.censored,
    })
}

fn stall_cells(report: &StallReport, dir: &Path) -> Vec<CellRecord> {
    report
        .runs
        .iter()
        .map(|run| {
            let id = format!("p{}_seed{}", report.p, run.seed);
            let rows: Vec<Row> =
                run.progress.iter().zip(&run.grad_norms).enumerate().map(|(t, (&k, &n))| (t, 2 * t as u64, n, Some(k))).collect();
            let rec = CellRecord::new(id.clone(), run.seed, None);
            match write_trace(dir, &id, &rows) {
                Ok(file) => CellRecord {
                    oracle_calls: rows.last().map(|r| r.1),
                    final_grad_norm: rows.last().map(|r| r.2),
                    trace_file: Some(file),
                    ..rec
                },
                Err(e) => rec.failed(e),
            }
        })
        .collect()
}

fn moments_json(m: &Moments) -> Value {
    json!({ "n": m.n, "mean": m.mean, "mean_std_err": m.mean_std_err, "trace": m.trace, "trace_std_err": m.trace_std_err })
}

fn moments_cell(spec: &RunSpec, instance: &Instance, seed: u64) -> (CellRecord, Value) {
    let rec = CellRecord::new(format!("seed{seed}"), seed, None);
    let m = spec.moments.as_ref().expect("validated");
    let s = derive_seed(spec.seed, &[seed]);
    let result = (|| -> anyhow::Result<(Moments, u64)> {
        match (instance, spec.oracle.as_ref()) {
            (Instance::Quadratic(_) | Instance::Cubic(_), Some(OracleSpec::Gaussian { sigma_f, sigma_g, radius, .. })) => {
                let gaussian = |p: &dyn Fn(&Vector) -> anyhow::Result<Vector>, dim: usize| -> anyhow::Result<(Vector, Vector)> {
                    let x = Vector::from_element(dim, m.x);
                    let y = p(&x)?.add_scalar(m.y_offset);
                    Ok((x, y))
                };
                match instance {
                    Instance::Quadratic(q) => {
                        let o = GaussianOracle::new(q.clone(), *sigma_f, *sigma_g, *radius, s)?;
                        let (x, y) = gaussian(&|x| Ok(lower_solution(q, x, 1e-12)?), q.dim_x())?;
                        Ok((estimate_moments(&o, &x, &y, m.component, m.samples, 0)?, o.counters().total()))
                    }
                    Instance::Cubic(c) => {
                        let o = GaussianOracle::new(c.clone(), *sigma_f, *sigma_g, *radius, s)?;
                        let (x, y) = gaussian(&|x| Ok(lower_solution(c, x, 1e-12)?), c.dim_x())?;
                        Ok((estimate_moments(&o, &x, &y, m.component, m.samples, 0)?, o.counters().total()))
                    }
                    Instance::Chain(_) => unreachable!(),
                }
            }
            (Instance::Chain(chain), Some(OracleSpec::ZeroChain { .. })) => {
                let p = spec.progression_probability().context("missing progression probability")?;
                let o = ZeroChainOracle::new(*chain, p, s)?;
                let x = Vector::from_element(chain.d_x, m.x);
                let y = Vector::from_element(1, chain_f(x.as_slice(), chain)? + m.y_offset);
                Ok((estimate_moments(&o, &x, &y, m.component, m.samples, 0)?, o.counters().total()))
            }
            _ => anyhow::bail!("instance and oracle blocks do not match"),
        }
    })();
    match result {
        Ok((mom, calls)) => (CellRecord { oracle_calls: Some(calls), ..rec }, moments_json(&mom)),
        Err(e) => (rec.failed(e), Value::Null),
    }
}

fn run_kind(spec: &RunSpec, dir: &Path) -> Result<(bool, Vec<CellRecord>, Value), CliError> {
    let instance = spec.instance.as_ref().map(|i| i.build()).transpose().map_err(|e| CliError::Config(e.to_string()))?;
    let grid_cells = || -> Vec<(f64, u64)> { spec.grid().iter().flat_map(|&e| spec.seeds.iter().map(move |&s| (e, s))).collect() };
    Ok(match spec.kind {
        Kind::Solve => {
            let inst = instance.as_ref().expect("validated");
            let cells: Vec<CellRecord> = grid_cells().par_iter().map(|&(e, s)| solve_cell(spec, inst, dir, e, s)).collect();
            let ok = cells.iter().all(|c| c.error.is_none());
            (ok, cells, Value::Null)
        }
        Kind::RateFit => {
            let inst = instance.as_ref().expect("validated");
            let cfg = rate_config(spec)?;
            let cells: Vec<CellRecord> = grid_cells().par_iter().map(|&(e, s)| rate_fit_cell(&cfg, inst, dir, e, s)).collect();
            let hits: Vec<Vec<Option<u64>>> =
                spec.epsilons.iter().map(|&e| cells.iter().filter(|c| c.epsilon == Some(e)).map(|c| c.hit_calls).collect()).collect();
            let fit = fit_from_hits(&spec.epsilons, &hits, spec.bootstrap, spec.seed).map_err(anyhow::Error::from)?;
            let ok = cells.iter().all(|c| c.error.is_none()) && !fit.censored;
            (ok, cells, serde_json::to_value(&fit).map_err(anyhow::Error::from)?)
        }
        Kind::Stall => {
            let Some(Instance::Chain(chain)) = instance else { unreachable!("validated") };
            let st = spec.stall.as_ref().expect("validated");
            let p = spec.progression_probability().expect("validated");
            let run = |p: f64| stall_experiment(&chain, p, st.budget, &spec.seeds, |_| GreedyProbe::new(&chain));
            let base = run(p).map_err(anyhow::Error::from)?;
            let mut cells = stall_cells(&base, dir);
            let mut summary = json!({ "runs": [stall_summary(&base, st.checkpoint)] });
            if st.halve_p {
                let half = run(p / 2.0).map_err(anyhow::Error::from)?;
                cells.extend(stall_cells(&half, dir));
                let ratio = match (base.median_full_activation, half.median_full_activation) {
                    (Some(a), Some(b)) => Some(b / a),
                    _ => None,
                };
                summary["runs"].as_array_mut().expect("array").push(stall_summary(&half, st.checkpoint));
                summary["halving_ratio"] = json!(ratio);
            }
            let ok = cells.iter().all(|c| c.error.is_none());
            (ok, cells, summary)
        }
        Kind::OracleMoments => {
            let inst = instance.as_ref().expect("validated");
            let (cells, moments): (Vec<CellRecord>, Vec<Value>) = spec.seeds.par_iter().map(|&s| moments_cell(spec, inst, s)).unzip();
            let ok = cells.iter().all(|c| c.error.is_none());
            (ok, cells, json!({ "component": spec.moments.as_ref().map(|m| m.component), "moments": moments }))
        }
        Kind::VerifyLemmas => {
            let mut cfg = spec.lemmas.unwrap_or_default();
            cfg.seed = derive_seed(spec.seed, &[cfg.seed]);
            let mut outcomes = verify_lemmas(&cfg).map_err(anyhow::Error::from)?;
            outcomes.extend(contract_suite(cfg.seed).map_err(anyhow::Error::from)?);
            let ok = outcomes.iter().all(|o| o.passed);
            (ok, Vec::new(), json!({ "suites": outcomes }))
        }
    })
}

/// Runs every cell on a pool of `workers` threads and writes
/// `summary.json`, `cells/<id>.csv` and `timing.json` under `dir`.
pub fn execute(spec: &RunSpec, dir: &Path, workers: usize) -> Result<ExperimentRecord, CliError> {
    fs::create_dir_all(dir.join("cells")).map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(anyhow::Error::from)?;
    let start = Instant::now();
    let (passed, cells, summary) = pool.install(|| run_kind(spec, dir))?;
    let record = ExperimentRecord {
        schema_version: SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").into(),
        spec_hash: spec.hash(),
        kind: spec.kind,
        passed,
        cells,
        summary,
    };
    let text = serde_json::to_string_pretty(&record).map_err(anyhow::Error::from)?;
    fs::write(dir.join("summary.json"), text + "\n").context("cannot write summary.json")?;
    let timing = json!({ "wall_clock_secs": start.elapsed().as_secs_f64(), "workers": workers.max(1) });
    fs::write(dir.join("timing.json"), timing.to_string() + "\n").context("cannot write timing.json")?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::parse_spec_str;

    #[test]
    fn cell_seeds_are_stable_and_distinct() {
        let text = r#"{"kind": "verify-lemmas", "seeds": [1, 2], "seed": 9}"#;
        let spec = parse_spec_str(text).unwrap();
        assert_eq!(cell_seed(&spec, 0.1, 1), cell_seed(&spec, 0.1, 1));
        assert_ne!(cell_seed(&spec, 0.1, 1), cell_seed(&spec, 0.1, 2));
        assert_ne!(cell_seed(&spec, 0.1, 1), cell_seed(&spec, 0.2, 1));
    }

    #[test]
    fn trace_file_has_documented_header() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cells")).unwrap();
        write_trace(dir.path(), "x", &[(0, 0, 1.5, None), (1, 7, 0.25, Some(3))]).unwrap();
        let text = fs::read_to_string(dir.path().join("cells/x.csv")).unwrap();
        assert_eq!(text, "iter,oracle_calls,grad_F_norm,prog\n0,0,1.5,\n1,7,0.25,3\n");
    }
}
