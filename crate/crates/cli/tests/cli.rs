use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bilevel(spec: &Path, extra: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bilevel"));
    cmd.arg("run").arg(spec).args(extra).env_remove("BILEVEL_OUT_DIR");
    if let Some(dir) = env_out {
        cmd.env("BILEVEL_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

const SOLVE: &str = r#"{
  "kind": "solve",
  "instance": {"type": "quadratic", "d_x": 3, "d_y": 3, "b_norm": 1.0, "seed": 2},
  "oracle": {"type": "gaussian", "sigma_f": 0.1, "sigma_g": 0.1, "radius": 1.0},
  "solver": {"theorem": {"theorem": "Two", "constants": {"c_gamma": 4.0, "c_k": 2.0}}},
  "epsilons": [0.4],
  "seeds": [1, 2, 3],
  "seed": 5
}"#;

#[test]
fn bad_spec_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), &SOLVE.replace("\"seed\": 5", "\"seed\": 5,\n  \"momentum\": 0.9"));
    let out = bilevel(&spec, &["--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("momentum") && err.contains("line 9"), "{err}");
    assert!(!tmp.path().join("o").join("summary.json").exists());
}

#[test]
fn missing_spec_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bilevel(&tmp.path().join("absent.json"), &[], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_writes_summary_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SOLVE);
    let dir = tmp.path().join("out");
    let out = bilevel(&spec, &["--out", dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&dir);
    assert_eq!(s["kind"], "solve");
    assert_eq!(s["passed"], true);
    let cells = s["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    for c in cells {
        let trace = std::fs::read_to_string(dir.join(c["trace_file"].as_str().unwrap())).unwrap();
        assert!(trace.starts_with("iter,oracle_calls,grad_F_norm,prog\n"));
    }
    assert!(dir.join("timing.json").exists());
}

#[test]
fn environment_selects_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SOLVE);
    let dir = tmp.path().join("from_env");
    let out = bilevel(&spec, &[], Some(&dir));
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.join("summary.json").exists());
}

#[test]
fn reruns_are_byte_identical_and_seed_flag_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), SOLVE);
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = vec!["--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(bilevel(&spec, &args, None).status.code(), Some(0));
        std::fs::read(dir.join("summary.json")).unwrap()
    };
    let a = run("a", &[]);
    assert_eq!(a, run("b", &["--workers", "3"]));
    assert_ne!(a, run("c", &["--seed", "6"]));
}

#[test]
fn rate_fit_reports_slope_and_interval() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        r#"{
  "kind": "rate-fit",
  "instance": {"type": "quadratic", "d_x": 5, "d_y": 5, "b_norm": 1.0, "seed": 1},
  "oracle": {"type": "gaussian", "sigma_f": 0.1, "sigma_g": 0.1, "radius": 1.0},
  "solver": {"theorem": {"theorem": "Two", "constants": {"c_gamma": 4.0, "c_t": 1.0, "c_m": 1.0, "c_k": 20.0}}},
  "epsilons": [0.4, 0.2, 0.1],
  "seeds": [0, 1, 2, 3, 4],
  "bootstrap": 200
}"#,
    );
    let dir = tmp.path().join("out");
    let out = bilevel(&spec, &["--out", dir.to_str().unwrap(), "--workers", "2"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&dir);
    let fit = &s["summary"];
    let (slope, lo, hi) = (fit["slope"].as_f64().unwrap(), fit["ci_low"].as_f64().unwrap(), fit["ci_high"].as_f64().unwrap());
    assert!(lo <= slope && slope <= hi, "{fit}");
    assert_eq!(fit["censored"], false);
    assert_eq!(s["cells"].as_array().unwrap().len(), 15);
}

#[test]
fn verify_lemmas_with_small_sizes_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        r#"{
  "kind": "verify-lemmas",
  "lemmas": {"surrogate_points": 10, "bias_states": 20, "variance_samples": 2000, "shrink_triples": 200, "coupling_runs": 2, "psgd_seeds": 50},
  "seeds": [1]
}"#,
    );
    let dir = tmp.path().join("out");
    let out = bilevel(&spec, &["--out", dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let suites = summary(&dir)["summary"]["suites"].as_array().unwrap().clone();
    assert!(!suites.is_empty());
    assert!(suites.iter().all(|s| s["passed"] == true));
}

#[test]
fn stall_reports_both_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        r#"{
  "kind": "stall",
  "instance": {"type": "chain", "epsilon": 0.2, "d_x": 10},
  "oracle": {"type": "zero_chain", "p": 0.05},
  "stall": {"budget": 5000, "checkpoint": 50, "halve_p": true},
  "seeds": [1, 2, 3, 4, 5]
}"#,
    );
    let dir = tmp.path().join("out");
    let out = bilevel(&spec, &["--out", dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&dir);
    assert_eq!(s["summary"]["runs"].as_array().unwrap().len(), 2);
    assert!(s["summary"]["halving_ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(s["cells"].as_array().unwrap().len(), 10);
}

#[test]
fn oracle_moments_match_the_noise_level() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(
        tmp.path(),
        r#"{
  "kind": "oracle-moments",
  "instance": {"type": "quadratic", "d_x": 3, "d_y": 3, "b_norm": 1.0, "seed": 1},
  "oracle": {"type": "gaussian", "sigma_f": 0.5, "sigma_g": 0.5},
  "moments": {"component": "grad_y_g", "samples": 20000, "x": 0.5},
  "seeds": [1]
}"#,
    );
    let dir = tmp.path().join("out");
    let out = bilevel(&spec, &["--out", dir.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = &summary(&dir)["summary"]["moments"][0];
    // grad_y g vanishes at y*, and half of the total variance 0.25 falls on the y block.
    let trace = m["trace"].as_f64().unwrap();
    assert!((trace - 0.125).abs() <= 5.0 * m["trace_std_err"].as_f64().unwrap(), "{m}");
}
