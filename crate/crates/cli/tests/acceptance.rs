//! Acceptance suite: one line per criterion, `[PASS]` or `[FAIL]`, with the
//! observed margins and the wall-clock time against its budget. Exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bilevel_core::analysis::chain::{kernel_certification, stall_experiment, zero_chain_certification, GreedyProbe, ZeroChainCertConfig};
use bilevel_core::analysis::rate::{fit_rate, RateFit, RateFitConfig};
use bilevel_core::analysis::suites::{bias_variance_suite, contract_suite, projection_coupling_suite, psgd_suite, surrogate_suite};
use bilevel_core::analysis::SuiteOutcome;
use bilevel_core::kernels::ChainConfig;
use bilevel_core::problems::QuadraticInstance;
use bilevel_core::solver::{ScheduleConstants, Theorem};

type Verdict = Result<(bool, String), String>;

fn suites(outcomes: bilevel_core::Result<Vec<SuiteOutcome>>) -> Verdict {
    let outcomes = outcomes.map_err(|e| e.to_string())?;
    let passed = outcomes.iter().all(|o| o.passed);
    let detail = outcomes
        .iter()
        .map(|o| format!("{}{}: worst margin {:.3e} ({})", if o.passed { "" } else { "FAILED " }, o.name, o.worst_residual, o.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((passed, detail))
}

fn kernels() -> Verdict {
    let rep = kernel_certification(100_000, -10.0, 10.0, 200, 1).map_err(|e| e.to_string())?;
    let violations: usize = rep.bounds.iter().map(|b| b.violations).sum();
    let worst = rep.derivatives.iter().map(|d| d.max_rel_err).fold(0.0, f64::max);
    Ok((
        rep.passed(1e-5),
        format!("{} bounds, {violations} violations; {} derivative checks, worst rel. err {worst:.2e} (limit 1e-5)", rep.bounds.len(), rep.derivatives.len()),
    ))
}

fn surrogate() -> Verdict {
    suites(surrogate_suite(100, 1))
}

fn bias_variance() -> Verdict {
    suites(bias_variance_suite(1000, 100_000, 1))
}

fn projection_coupling() -> Verdict {
    suites(projection_coupling_suite(10_000, 10, 1))
}

fn psgd() -> Verdict {
    suites(psgd_suite(1000, 1))
}

fn zero_chain() -> Verdict {
    let c = ZeroChainCertConfig {
        epsilon: 0.2,
        d_x: 25,
        p: 0.05,
        states: 20,
        draws: 100_000,
        points: 10_000,
        variance_states: 10,
        variance_draws: 100_000,
        seed: 1,
    };
    let r = zero_chain_certification(&c).map_err(|e| e.to_string())?;
    Ok((
        r.passed(),
        format!(
            "progress violations {}/{}; reveal frequency {:.5} <= {:.5}; |grad F|_inf {:.3} <= {:.3}; |grad g_b|_inf {:.3} <= {:.3}; y_hat error {:.3} <= {:.3}; Var {:.3e} <= {:.3e}",
            r.progress_violations,
            r.progress_checks,
            r.max_reveal_frequency,
            r.reveal_limit,
            r.max_grad_f_inf,
            r.grad_f_limit,
            r.max_grad_gb_inf,
            r.grad_gb_limit,
            r.max_y_hat_error,
            r.y_hat_limit,
            r.max_y_variance,
            r.y_variance_limit
        ),
    ))
}

fn stall() -> Verdict {
    let cfg = ChainConfig::new(0.2, 25).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (1..=20).collect();
    let budget = 40_000;
    let run = |p: f64| stall_experiment(&cfg, p, budget, &seeds, |_| GreedyProbe::new(&cfg)).map_err(|e| e.to_string());
    let base = run(0.01)?;
    let half = run(0.005)?;
    let stalled = base.stalled_at(625);
    let ratio = match (base.median_full_activation, half.median_full_activation) {
        (Some(a), Some(b)) => b / a,
        _ => f64::NAN,
    };
    Ok((
        stalled >= 18 && (1.5..=3.0).contains(&ratio),
        format!(
            "{stalled}/20 seeds below full activation at t = 625 (need >= 18); median activation {:?} -> {:?} when p halves, ratio {ratio:.3} (need [1.5, 3])",
            base.median_full_activation, half.median_full_activation
        ),
    ))
}

fn rate_fits() -> Verdict {
    let q = QuadraticInstance::random(5, 5, 1.0, 1);
    let base = RateFitConfig {
        theorem: Theorem::Two,
        constants: ScheduleConstants::default(),
        epsilons: vec![0.4, 0.2, 0.1, 0.05],
        seeds: (0..10).collect(),
        sigma_f: 0.1,
        sigma_g: 0.1,
        radius: 1.0,
        x0: 1.0,
        bootstrap: 1000,
        seed: 7,
        stop_at_hit: true,
    };
    let baseline = RateFitConfig {
        sigma_f: 0.0,
        sigma_g: 0.0,
        constants: ScheduleConstants { c_gamma: 4.0, c_t: 0.0, c_m: 0.0, c_k: 20.0, alpha: None },
        ..base.clone()
    };
    let two = RateFitConfig { constants: ScheduleConstants { c_gamma: 4.0, c_t: 1.0, c_m: 1.0, c_k: 20.0, alpha: None }, ..base.clone() };
    let one = RateFitConfig {
        theorem: Theorem::One,
        constants: ScheduleConstants { c_gamma: 1.0, c_t: 0.05, c_m: 0.05, c_k: 20.0, alpha: None },
        ..base
    };
    let fit = |cfg: &RateFitConfig| fit_rate(&q, cfg).map(|f| f.0).map_err(|e| e.to_string());
    let describe = |name: &str, f: &RateFit, limit: f64| {
        format!("{name} slope {:.3} [{:.3}, {:.3}] (limit {limit}){}", f.slope, f.ci_low, f.ci_high, if f.censored { ", CENSORED" } else { "" })
    };
    let ok = |f: &RateFit, limit: f64| !f.censored && f.slope.is_finite() && f.slope <= limit;
    let (b, t2, t1) = (fit(&baseline)?, fit(&two)?, fit(&one)?);
    Ok((
        ok(&b, 2.5) && ok(&t2, 4.5) && ok(&t1, 6.5),
        [describe("zero-noise baseline", &b, 2.5), describe("constant-step schedule", &t2, 4.5), describe("diminishing-step schedule", &t1, 6.5)].join("; "),
    ))
}

const SOLVE_SPEC: &str = r#"{
  "kind": "solve",
  "instance": {"type": "cubic", "d_x": 4, "d_y": 4, "b_norm": 1.0, "kappa": 0.5, "seed": 3},
  "oracle": {"type": "gaussian", "sigma_f": 0.1, "sigma_g": 0.1, "radius": 1.0},
  "solver": {"theorem": {"theorem": "Two", "constants": {"c_gamma": 4.0, "c_k": 2.0}}},
  "epsilons": [0.4, 0.3],
  "seeds": [1, 2],
  "seed": 11
}"#;

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("summary.json".to_string(), std::fs::read(dir.join("summary.json")).unwrap_or_default())];
    let mut cells: Vec<_> = std::fs::read_dir(dir.join("cells")).map(|d| d.flatten().map(|e| e.path()).collect()).unwrap_or_else(|_| Vec::new());
    cells.sort();
    for c in cells {
        files.push((c.file_name().unwrap_or_default().to_string_lossy().into_owned(), std::fs::read(&c).unwrap_or_default()));
    }
    files
}

fn contract() -> Verdict {
    let (core_ok, core_detail) = suites(contract_suite(1))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, SOLVE_SPEC).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for (i, workers) in [1, 2].into_iter().enumerate() {
        let out = tmp.path().join(format!("out{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_bilevel"))
            .args(["run", spec.to_str().unwrap_or_default(), "--workers", &workers.to_string(), "--out", out.to_str().unwrap_or_default()])
            .env_remove("BILEVEL_OUT_DIR")
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Ok((false, format!("cli run exited with {status}")));
        }
        trees.push(read_tree(&out));
    }
    let identical = trees[0] == trees[1] && trees[0].len() == 5;
    Ok((core_ok && identical, format!("{core_detail}; cli reruns byte-identical over {} files: {identical}", trees[0].len())))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict, u64); 9] = [
        ("kernel certification", kernels, 10),
        ("surrogate lemmas", surrogate, 60),
        ("bias and variance lemmas", bias_variance, 120),
        ("projection and coupling", projection_coupling, 60),
        ("projected SGD lemma", psgd, 120),
        ("zero-chain certification", zero_chain, 180),
        ("stall experiment", stall, 300),
        ("rate fits", rate_fits, 1800),
        ("contract suite", contract, 120),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let (ok, detail) = match verdict {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "[{}] criterion {n}: {name} ({:.1}s of {budget}s{}) {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", OVER BUDGET" }
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
