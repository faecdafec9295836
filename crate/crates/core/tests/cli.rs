use std::fs;
use std::path::Path;

use ignorability::cli::{self, RECORDS_COLUMNS, SCHEMA_VERSION, SUMMARY_COLUMNS};

fn run(args: &[&str]) -> i32 {
    let mut v = vec!["ignorability"];
    v.extend_from_slice(args);
    cli::run(v)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn rows(dir: &Path, name: &str) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join(name)).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn col(dir: &Path, name: &str, column: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(dir.join(name)).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records().map(|x| x.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn golden_headers() {
    assert_eq!(SCHEMA_VERSION, 1);
    assert_eq!(
        RECORDS_COLUMNS.join(","),
        "study,setting,method,rep,seed,estimate,post_sd,ci_lo,ci_hi,truth,elapsed_s,status"
    );
    assert_eq!(
        SUMMARY_COLUMNS.join(","),
        "study,setting,method,n_reps,coverage,coverage_mcse,mean_width,mean_post_sd,rmse,rmse_mcse,bias,bias_mcse"
    );
}

#[test]
fn simulate_writes_records_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = run(&["simulate", "--study", "ridge", "--setting", "naive", "--reps", "10", "--seed", "7", "--out", out]);
    assert_eq!(code, 0);
    let recs = read(dir.path(), "records.csv");
    assert_eq!(recs.lines().next().unwrap(), RECORDS_COLUMNS.join(","));
    assert_eq!(rows(dir.path(), "records.csv").len(), 30);
    let summary = read(dir.path(), "summary.csv");
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_COLUMNS.join(","));
    assert_eq!(rows(dir.path(), "summary.csv").len(), 3);
    // 17 significant digits, elapsed_s blank without --timing
    let first = &rows(dir.path(), "records.csv")[0];
    assert_eq!(&first[10], "");
    let mantissa = first[5].split('e').next().unwrap().trim_start_matches('-');
    assert_eq!(mantissa.replace('.', "").len(), 17);
    let m: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["base_seed"], 7);
    assert_eq!(m["command"], "simulate");
    assert_eq!(m["config"]["study"], "ridge");
    assert!(m["timestamp_unix"].as_u64().unwrap() > 0);
    assert!(m["artifact_version"].is_string());

    let dir2 = tempfile::tempdir().unwrap();
    let out2 = dir2.path().to_str().unwrap();
    let code = run(&["simulate", "--study", "ridge", "--setting", "naive", "--reps", "10", "--seed", "7", "--out", out2, "--workers", "3"]);
    assert_eq!(code, 0);
    assert_eq!(fs::read(dir.path().join("records.csv")).unwrap(), fs::read(dir2.path().join("records.csv")).unwrap());
    assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), fs::read(dir2.path().join("summary.csv")).unwrap());
}

#[test]
fn timing_flag_fills_elapsed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = run(&["simulate", "--study", "ridge", "--setting", "fixed", "--reps", "2", "--n", "20", "--p", "30", "--timing", "--out", out]);
    assert_eq!(code, 0);
    assert!(rows(dir.path(), "records.csv").iter().all(|r| r[10].parse::<f64>().unwrap() >= 0.0));
}

fn assert_replay_identical(dir: &Path, files: &[&str]) {
    let again = tempfile::tempdir().unwrap();
    let manifest = dir.join("manifest.json");
    let code = run(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", again.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    for f in files {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f} differs");
    }
    let a: serde_json::Value = serde_json::from_str(&read(dir, "manifest.json")).unwrap();
    let b: serde_json::Value = serde_json::from_str(&read(again.path(), "manifest.json")).unwrap();
    assert_eq!(a["config"], b["config"]);
}

#[test]
fn replay_reproduces_every_command() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["simulate", "--study", "factor", "--sigma-x", "0.1,1", "--n", "40", "--p", "30", "--reps", "3", "--seed", "2", "--out", o]), 0);
    assert_eq!(rows(d.path(), "summary.csv").len(), 4);
    assert_replay_identical(d.path(), &["records.csv", "summary.csv"]);

    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["bias-curve", "--n", "40", "--with-mc", "--mc-reps", "20", "--seed", "3", "--out", o]), 0);
    assert_replay_identical(d.path(), &["bias_curve.csv"]);

    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["concentration", "--draws", "200", "--seed", "4", "--out", o]), 0);
    assert_replay_identical(d.path(), &["concentration_draws.csv", "concentration_summary.csv"]);

    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["spectra", "--n", "100", "--seed", "5", "--out", o]), 0);
    assert_replay_identical(d.path(), &["spectra_histogram.csv", "stieltjes.csv"]);
}

#[test]
fn config_file_with_flag_override() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, "study = \"ridge\"\nsettings = [\"debiased\"]\nreps = 4\nn = 20\np = 30\nmethods = [\"naive\"]\n").unwrap();
    let out = d.path().join("out");
    let code = run(&["simulate", "--config", cfg.to_str().unwrap(), "--reps", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let recs = rows(&out, "records.csv");
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| &r[1] == "debiased" && &r[2] == "naive"));
}

#[test]
fn configuration_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "study = \"ridge\"\nbogus_key = 1\n").unwrap();
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", o]), 2);
    assert_eq!(run(&["simulate", "--study", "nope", "--out", o]), 2);
    assert_eq!(run(&["simulate", "--out", o]), 2);
    assert_eq!(run(&["simulate", "--study", "ridge", "--methods", "ipw", "--out", o]), 2);
    assert_eq!(run(&["simulate", "--study", "ridge", "--setting", "sideways", "--out", o]), 2);
    assert_eq!(run(&["simulate", "--study", "ridge", "--bogus-flag", "--out", o]), 2);
    assert_eq!(run(&["bias-curve", "--estimator", "zprior", "--r", "0.5", "--out", o]), 2);
    assert_eq!(run(&["bias-curve", "--lambdas", "1,-2", "--out", o]), 2);
    assert_eq!(run(&["concentration", "--prior", "bart", "--out", o]), 2);
    assert_eq!(run(&["spectra", "--cov", "toeplitz", "--out", o]), 2);
    let missing = d.path().join("missing.json");
    assert_eq!(run(&["replay", "--manifest", missing.to_str().unwrap(), "--out", o]), 2);
}

#[test]
fn failing_study_exits_three() {
    // the GP fits need N >= 10, so every replication fails
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    let code = run(&["simulate", "--study", "gp", "--setting", "linear_homo", "--n", "8", "--p", "5", "--reps", "2", "--methods", "naive", "--out", o]);
    assert_eq!(code, 3);
    assert!(d.path().join("records.csv").exists());
    assert!(!d.path().join("summary.csv").exists());
}

#[test]
fn bias_curve_zero_shift_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["bias-curve", "--omega0", "0", "--n", "50", "--out", o]), 0);
    assert!(col(d.path(), "bias_curve.csv", "formula_bias").iter().all(|b| *b == 0.0));
    assert!(rows(d.path(), "bias_curve.csv").iter().all(|r| &r[2] == "" && &r[3] == ""));
}

#[test]
fn bias_curve_formula_matches_monte_carlo() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    let code = run(&[
        "bias-curve", "--r", "2", "--eta", "1", "--n", "100", "--lambdas", "0.5,1,2", "--with-mc", "--mc-reps", "400",
        "--seed", "11", "--out", o,
    ]);
    assert_eq!(code, 0);
    let f = col(d.path(), "bias_curve.csv", "formula_bias");
    let m = col(d.path(), "bias_curve.csv", "mc_bias");
    let se = col(d.path(), "bias_curve.csv", "mc_se");
    for k in 0..f.len() {
        assert!((f[k] - m[k]).abs() <= 3.0 * se[k], "lambda #{k}: formula {} mc {} se {}", f[k], m[k], se[k]);
    }
}

#[test]
fn bias_curve_large_penalty_limit() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["bias-curve", "--eta", "1", "--n", "100", "--lambdas", "1,10,100,10000", "--out", o]), 0);
    let f = col(d.path(), "bias_curve.csv", "formula_bias");
    // mean eigenvalue of XXᵀ/N is P/N = r
    let limit = 2.0 / (2.0 + 1.0);
    assert!((f[3] - limit).abs() <= 0.05 * limit, "{} vs {limit}", f[3]);
}

#[test]
fn concentration_sd_shrinks_and_matches_clt() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["concentration", "--p-list", "1,10,50,400", "--draws", "2000", "--seed", "9", "--out", o]), 0);
    let sd = col(d.path(), "concentration_summary.csv", "sd");
    for w in sd.windows(2) {
        assert!(w[1] < w[0], "{sd:?}");
    }
    let ratio = col(d.path(), "concentration_summary.csv", "ratio");
    assert!((0.9..=1.1).contains(&ratio[3]), "ratio {}", ratio[3]);
    assert_eq!(rows(d.path(), "concentration_draws.csv").len(), 4 * 2000);
}

#[test]
fn concentration_other_priors_run() {
    for prior in ["spike_slab", "gp"] {
        let d = tempfile::tempdir().unwrap();
        let o = d.path().to_str().unwrap();
        assert_eq!(run(&["concentration", "--prior", prior, "--p-list", "2,20", "--draws", "100", "--out", o]), 0);
        assert!(rows(d.path(), "concentration_summary.csv").iter().all(|r| &r[3] == ""));
    }
}

#[test]
fn spectra_histogram_tracks_marchenko_pastur() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(run(&["spectra", "--r", "2", "--n", "1000", "--seed", "1", "--out", o]), 0);
    let e = col(d.path(), "spectra_histogram.csv", "empirical_mass");
    let m = col(d.path(), "spectra_histogram.csv", "mp_mass");
    assert_eq!(e.len(), 50);
    let l1: f64 = e.iter().zip(&m).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 <= 0.05, "L1 {l1}");
}

#[test]
fn spectra_latent_factor_approaches_inverse_penalty() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    let code = run(&["spectra", "--cov", "factor", "--sigma-x", "0.001", "--n", "200", "--lambdas", "0.001", "--out", o]);
    assert_eq!(code, 0);
    let v = col(d.path(), "stieltjes.csv", "v");
    assert!(v[0] * 1e-3 >= 0.9, "ratio {}", v[0] * 1e-3);
}
