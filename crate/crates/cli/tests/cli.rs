use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfran_evt::evt::gpd_quantile;
use rand::{Rng, SeedableRng};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cfran-evt"));
    cmd.env_remove("CFRAN_EVT_OUT");
    cmd
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn short_run(dir: &Path, slots: usize, extra: &[&str]) -> Output {
    let config = default_config();
    let t = format!("sim.T={slots}");
    let mut args = vec![
        "--jobs",
        "1",
        "run",
        config.to_str().unwrap(),
        "--override",
        &t,
        "--override",
        "sim.warmup=0",
    ];
    args.extend_from_slice(extra);
    let out = bin().args(&args).env("CFRAN_EVT_OUT", dir).output().expect("binary runs");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out
}

#[test]
fn run_writes_csv_and_json_with_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    short_run(dir.path(), 10, &[]);
    for policy in ["evt_aware", "queue_aware_baseline"] {
        let csv = dir.path().join(format!("default-{policy}-seed1.csv"));
        let text = fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,k,Q,Z,rate,sinr,S_k,p_tot,ee,sca_iters,obj");
        assert_eq!(lines.count(), 10 * 8);

        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(csv.with_extension("json")).unwrap()).unwrap();
        assert!(json["version"].as_str().unwrap().starts_with("cfran-evt"));
        assert_eq!(json["config"]["sim"]["T"], 10);
        assert_eq!(json["config"]["solver"]["V"], 5.0);
        assert_eq!(json["config"]["network"]["aps"], 20);
    }
}

#[test]
fn out_flag_takes_precedence_over_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let config = default_config();
    let out = bin()
        .args(["run", config.to_str().unwrap(), "--override", "sim.T=5", "--override", "sim.warmup=0"])
        .args(["--override", "sim.policies=[\"static_nearest\"]"])
        .arg("--out")
        .arg(out_dir.path())
        .env("CFRAN_EVT_OUT", env_dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.path().join("default-static_nearest-seed1.csv").exists());
    assert_eq!(fs::read_dir(env_dir.path()).unwrap().count(), 0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = ["--override", "evt.refit_every=50", "--override", "evt.n_min=10"];
    short_run(a.path(), 150, &extra);
    short_run(b.path(), 150, &extra);
    for policy in ["evt_aware", "queue_aware_baseline"] {
        let name = format!("default-{policy}-seed1.csv");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
}

#[test]
fn missing_config_is_a_config_error() {
    let out = run(&["run", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[sim]\nT = 10\nwarmup = = 0\n").unwrap();
    let out = run(&["run", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(&path, "[solver]\nbogus = 1\n").unwrap();
    let out = run(&["run", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn unknown_override_key_is_a_config_error() {
    let config = default_config();
    let out = run(&["run", config.to_str().unwrap(), "--override", "sim.nope=1"]);
    assert_eq!(code(&out), 2);
}

fn sweep(dir: &Path, axis: &str, values: &str) -> Output {
    let config = default_config();
    bin()
        .args(["sweep", config.to_str().unwrap(), "--axis", axis, "--values", values])
        .args(["--override", "sim.T=120", "--override", "sim.warmup=20"])
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

fn sweep_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn sweep_over_v_gives_one_paired_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), "solver.V", "1,5,25");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = sweep_rows(&dir.path().join("default-sweep-solver_V.csv"));
    let values: Vec<&str> = rows.iter().map(|r| &r[1]).collect();
    assert_eq!(values, ["1", "5", "25"]);
    assert!(dir.path().join("default-sweep-solver_V.json").exists());
}

#[test]
fn sweep_exceedance_is_nonincreasing_in_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), "tail.Q0", "1.0,1.5,2.0");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = sweep_rows(&dir.path().join("default-sweep-tail_Q0.csv"));
    for column in [3, 4] {
        let freq: Vec<f64> = rows.iter().map(|r| r[column].parse().unwrap()).collect();
        assert!(freq.windows(2).all(|w| w[1] <= w[0]), "column {column}: {freq:?}");
    }
}

#[test]
fn sweep_rejects_empty_values_and_unknown_axis() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sweep(dir.path(), "solver.V", "")), 2);
    assert_eq!(code(&sweep(dir.path(), "solver.W", "1,2")), 2);
}

#[test]
fn fit_gpd_on_a_simulated_trace() {
    let dir = tempfile::tempdir().unwrap();
    short_run(dir.path(), 400, &["--override", "sim.policies=[\"queue_aware_baseline\"]"]);
    let csv = dir.path().join("default-queue_aware_baseline-seed1.csv");
    let out = run(&["fit-gpd", csv.to_str().unwrap(), "--q0", "1.5", "--ue", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["n_total"], 400);
    assert!(json["n_exceed"].as_u64().unwrap() >= 50);
    assert!(json["comparison"]["fit"]["sigma"].as_f64().unwrap() > 0.0);
    assert!(json["descriptor"]["m1"].as_f64().unwrap() > 0.0);

    let out = run(&["fit-gpd", csv.to_str().unwrap(), "--q0", "1e6"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("0 found"), "{}", stderr(&out));
}

#[test]
fn fit_gpd_recovers_synthetic_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.csv");
    let (xi, sigma) = (0.2, 0.8);
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let mut text = String::from("Q\n");
    for _ in 0..5000 {
        text.push_str(&format!("{}\n", 1.5 + gpd_quantile(r.random::<f64>(), xi, sigma)));
    }
    fs::write(&path, text).unwrap();
    let out = run(&["fit-gpd", path.to_str().unwrap(), "--q0", "1.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fit = &json["comparison"]["fit"];
    assert!((fit["xi"].as_f64().unwrap() - xi).abs() <= 0.05, "{fit}");
    assert!((fit["sigma"].as_f64().unwrap() - sigma).abs() <= 0.05 * sigma, "{fit}");
}

#[test]
fn validate_sinr_passes_at_full_sample_size() {
    let config = default_config();
    let out = run(&["validate-sinr", config.to_str().unwrap(), "--n-real", "10000"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn validate_sinr_reports_without_asserting_at_low_sample_size() {
    let config = default_config();
    let out = run(&["validate-sinr", config.to_str().unwrap(), "--n-real", "10"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn validate_sinr_with_zero_downlink_power() {
    let config = default_config();
    let out = run(&[
        "validate-sinr",
        config.to_str().unwrap(),
        "--n-real",
        "10000",
        "--instances",
        "3",
        "--override",
        "network.rho_d=0",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error 0.000%"), "{stdout}");
}
