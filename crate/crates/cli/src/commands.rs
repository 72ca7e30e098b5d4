use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cfran_evt::channel::{estimation_quality, mc_uatf_sinr, OracleSetup};
use cfran_evt::config::{ExperimentConfig, PolicyKind};
use cfran_evt::evt::{extract_pot, gaussian_tail_comparison, tail_descriptor, TailComparison, TailDescriptor};
use cfran_evt::phy::{equal_power_coeffs, fzf_sinr, ClusterMatrix, LinkBudget};
use cfran_evt::sim::{run_many, sweep as sweep_axis, ExperimentResult, SweepRow};
use cfran_evt::topology::generate_topology;
use cfran_evt::{rng, VERSION};
use rand::Rng;
use serde::Serialize;

use crate::error::CliError;

/// Below this many realizations the oracle is too noisy to judge.
const ASSERT_MIN_REALIZATIONS: usize = 10_000;
const SINR_TOLERANCE: f64 = 0.05;

fn output_dir(config: &Path, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = out.unwrap_or_else(|| match config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    });
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn stem(config: &Path) -> String {
    config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn run(config: &Path, overrides: &[String], out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let dir = output_dir(config, out)?;
    let stem = stem(config);
    let jobs: Vec<(u64, PolicyKind)> = cfg
        .sim
        .seeds
        .iter()
        .flat_map(|&s| cfg.sim.policies.iter().map(move |&p| (s, p)))
        .collect();
    eprintln!(
        "running {} experiment(s) of {} slots on {} thread(s)",
        jobs.len(),
        cfg.sim.slots,
        rayon::current_num_threads()
    );
    // Workers only compute; this thread is the single writer.
    for (result, trace) in run_many(&cfg, &jobs, true)? {
        let base = format!("{stem}-{}-seed{}", result.policy.kind.name(), result.seed);
        let csv_path = dir.join(format!("{base}.csv"));
        let trace = trace.expect("traces requested");
        let mut w = BufWriter::new(File::create(&csv_path)?);
        trace.write_csv(&mut w)?;
        w.flush()?;
        write_json(&dir.join(format!("{base}.json")), &result)?;
        println!("{}", run_line(&result, &csv_path));
    }
    Ok(())
}

fn run_line(r: &ExperimentResult, csv: &Path) -> String {
    let s = &r.summary;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    format!(
        "{} seed {}: exceedance {:.4}, median EE {}, mean cluster {}, -> {}",
        r.policy.kind.name(),
        r.seed,
        s.mean_exceedance_freq,
        fmt(s.ee_median),
        fmt(s.mean_cluster_size),
        csv.display()
    )
}

#[derive(Serialize)]
struct SweepReport<'a> {
    version: &'a str,
    config: serde_json::Value,
    axis: &'a str,
    values: &'a [String],
    rows: &'a [SweepRow],
}

pub fn sweep(
    config: &Path,
    axis: &str,
    values: &[String],
    overrides: &[String],
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let values: Vec<String> = values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Config(format!("sweep over `{axis}` needs at least one value")));
    }
    let cfg = ExperimentConfig::load(config, overrides)?;
    // Reject an unknown axis before any run starts.
    cfg.with_overrides(&[format!("{axis}={}", values[0])])?;
    let dir = output_dir(config, out)?;
    let rows = sweep_axis(&cfg, axis, &values)?;

    let base = format!("{}-sweep-{}", stem(config), axis.replace('.', "_"));
    let csv_path = dir.join(format!("{base}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    write_json(
        &dir.join(format!("{base}.json")),
        &SweepReport {
            version: VERSION,
            config: cfg.to_json(),
            axis,
            values: &values,
            rows: &rows,
        },
    )?;
    for r in &rows {
        println!(
            "{axis}={} seed {}: exceedance evt {:.4} vs baseline {:.4}",
            r.value, r.seed, r.exceedance_evt, r.exceedance_baseline
        );
    }
    println!("-> {}", csv_path.display());
    Ok(())
}

/// Values of `column`, optionally restricted to rows whose `k` equals `ue`.
fn read_column(path: &Path, column: &str, ue: Option<usize>) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let col = find(column).ok_or_else(|| CliError::Data(format!("no column `{column}` in {}", path.display())))?;
    let k_col = match ue {
        Some(_) => Some(find("k").ok_or_else(|| CliError::Data("--ue needs a `k` column".into()))?),
        None => None,
    };
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |i: usize| -> Result<f64, CliError> {
            let field = record.get(i).unwrap_or("").trim();
            field
                .parse()
                .map_err(|_| CliError::Data(format!("row {}: `{field}` is not a number", line + 2)))
        };
        if let (Some(want), Some(kc)) = (ue, k_col) {
            if parse(kc)? as usize != want {
                continue;
            }
        }
        values.push(parse(col)?);
    }
    Ok(values)
}

#[derive(Serialize)]
struct FitReport {
    version: &'static str,
    source: String,
    column: String,
    ue: Option<usize>,
    q0: f64,
    n_total: usize,
    n_exceed: usize,
    p_exc: f64,
    comparison: TailComparison,
    descriptor: TailDescriptor,
}

pub fn fit_gpd(path: &Path, column: &str, ue: Option<usize>, q0: f64, n_min: usize) -> Result<(), CliError> {
    let trace = read_column(path, column, ue)?;
    let pot = extract_pot(&trace, q0)?;
    let found = pot.exceedances.len();
    if found < n_min.max(2) {
        return Err(CliError::Data(format!(
            "insufficient exceedances over Q0 = {q0}: {found} found, {n_min} required"
        )));
    }
    let mut comparison = gaussian_tail_comparison(&pot.exceedances, n_min)?;
    comparison.fit.threshold = q0;
    comparison.fit.n_total = pot.n_total;
    let descriptor = tail_descriptor(pot.p_exc, &comparison.fit)?;
    let report = FitReport {
        version: VERSION,
        source: path.display().to_string(),
        column: column.to_string(),
        ue,
        q0,
        n_total: pot.n_total,
        n_exceed: found,
        p_exc: pot.p_exc,
        comparison,
        descriptor,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn relative_error(closed: f64, mc: f64) -> f64 {
    let scale = closed.abs().max(mc.abs());
    if scale == 0.0 {
        0.0
    } else {
        (closed - mc).abs() / mc.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn validate_sinr(config: &Path, overrides: &[String], n_real: usize, instances: u64) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let base = &cfg.network;
    println!("{:>4} {:>3} {:>4} {:>3} {:>14} {:>14} {:>9}", "inst", "K", "L", "k", "closed_form", "monte_carlo", "rel_err");
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng::indexed(base.seed, rng::INSTANCES, i);
        let ues = r.random_range(1..=3usize);
        let aps = r.random_range(1..=4usize);
        let mut net = base.clone();
        net.ues = ues;
        net.aps = aps;
        net.edus = 1;
        net.tau_p = base.tau_p.min(ues);
        net.seed = base.seed.wrapping_add(i);
        let (topo, lsf) = generate_topology(&net)?;
        let est = estimation_quality(&lsf, &topo.pilot_sharing, net.tau_p, net.rho_p);
        let mut cluster = ClusterMatrix::empty(ues, aps);
        for k in 0..ues {
            cluster.set(k, r.random_range(0..aps), true);
            for l in 0..aps {
                if r.random::<f64>() < 0.4 {
                    cluster.set(k, l, true);
                }
            }
        }
        let eta = equal_power_coeffs(&cluster);
        let link = LinkBudget::new(&lsf, &est, &topo, net.rho_d, net.antennas, net.tau_p, cfg.fbl.contamination_gain);
        let closed = fzf_sinr(&link, &eta, &cluster);
        let setup = OracleSetup {
            lsf: &lsf,
            est: &est,
            topo: &topo,
            antennas: net.antennas,
            tau_p: net.tau_p,
            rho_d: net.rho_d,
        };
        let mc = mc_uatf_sinr(&setup, &cluster, &eta, n_real, net.seed)?;
        for (k, (c, m)) in closed.iter().zip(&mc.sinr).enumerate() {
            let err = relative_error(*c, *m);
            worst = worst.max(err);
            println!("{i:>4} {ues:>3} {aps:>4} {k:>3} {c:>14.6e} {m:>14.6e} {:>8.3}%", 100.0 * err);
        }
    }
    println!("max relative error {:.3}% ({n_real} realizations)", 100.0 * worst);
    if n_real >= ASSERT_MIN_REALIZATIONS && worst > SINR_TOLERANCE {
        return Err(CliError::Validation(format!(
            "max relative error {:.3}% exceeds {:.0}%",
            100.0 * worst,
            100.0 * SINR_TOLERANCE
        )));
    }
    Ok(())
}
