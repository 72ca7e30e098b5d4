//! Slot loop, policies, per-slot traces, summaries and paired comparisons.
//!
//! Each slot follows the same order: weights from the current backlog,
//! association, transmission, virtual-queue update with the current
//! backlog, then the physical queue advances with the slot's arrivals.
//! All randomness comes from per-seed substreams, so two policies run with
//! the same seed see the same network and the same arrivals.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::channel::estimation_quality;
use crate::config::{ExperimentConfig, PolicyKind};
use crate::error::{Error, Result};
use crate::evt::{extract_pot, fit_gpd_mle_with, tail_descriptor, GpdFit};
use crate::par::*;
use crate::phy::{evaluate_slot, ClusterMatrix, LinkBudget};
use crate::queueing::{advance_queue, draw_arrivals, exceedance, theta_weights, update_virtual_queues, QueueState};
use crate::rng;
use crate::solver::{nearest_ap_start, p2_objective, project_binary, solve_slot, SlotInputs};
use crate::topology::generate_topology;

/// Objective regressions above this abort a strict run.
pub const STRICT_REGRESSION_TOL: f64 = 1e-6;
/// Cap on adapted tail weights, as a multiple of their base value.
pub const ALPHA_CAP: f64 = 8.0;
/// Per-refit relaxation of adapted weights toward their base value.
pub const ALPHA_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Adapt the tail weights from GPD refits.
    pub evt_feedback: bool,
}

impl Policy {
    pub fn new(kind: PolicyKind, cfg: &ExperimentConfig) -> Self {
        Self {
            kind,
            evt_feedback: kind == PolicyKind::EvtAware && cfg.evt.evt_feedback,
        }
    }

    fn base_alphas(self, cfg: &ExperimentConfig) -> [f64; 3] {
        match self.kind {
            PolicyKind::EvtAware => cfg.tail_params().weights(),
            PolicyKind::QueueAwareBaseline | PolicyKind::StaticNearest => [0.0; 3],
        }
    }
}

/// One CSV row: UE `k` in slot `t`. Network-wide fields repeat across the
/// rows of a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub t: usize,
    pub k: usize,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "Z")]
    pub z: f64,
    pub rate: f64,
    pub sinr: f64,
    #[serde(rename = "S_k")]
    pub cluster_size: usize,
    pub p_tot: f64,
    pub ee: f64,
    pub sca_iters: usize,
    pub obj: f64,
}

pub const CSV_HEADER: [&str; 11] = ["t", "k", "Q", "Z", "rate", "sinr", "S_k", "p_tot", "ee", "sca_iters", "obj"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub ues: usize,
    pub rows: Vec<SlotRow>,
}

impl Trace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER)?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().ne(CSV_HEADER) {
            return Err(Error::Config(format!("unexpected CSV header: {headers:?}")));
        }
        let rows: Vec<SlotRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let ues = rows.iter().map(|r| r.k + 1).max().unwrap_or(0);
        Ok(Self { ues, rows })
    }

    /// The queue trace of UE `k`, in slot order.
    pub fn queue_of(&self, k: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.k == k).map(|r| r.q).collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl ClusterStats {
    /// None for an empty sample.
    pub fn from_sizes(sizes: &mut [f64]) -> Option<Self> {
        if sizes.is_empty() {
            return None;
        }
        sizes.sort_by(f64::total_cmp);
        Some(Self {
            count: sizes.len(),
            mean: sizes.iter().sum::<f64>() / sizes.len() as f64,
            q1: quantile(sizes, 0.25),
            median: quantile(sizes, 0.5),
            q3: quantile(sizes, 0.75),
        })
    }
}

/// Everything derivable from a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub slots_recorded: usize,
    /// EE quantiles at 0, 0.01, …, 1; empty without slots.
    pub ee_cdf: Vec<f64>,
    pub ee_median: Option<f64>,
    pub ee_mean: Option<f64>,
    /// Σ delivered bits / Σ energy over the recorded slots.
    pub ee_long_run: Option<f64>,
    /// Fraction of slots with Q ≥ Q₀, per UE.
    pub exceedance_freq: Vec<f64>,
    pub mean_exceedance_freq: f64,
    /// Per-UE GPD fit of the excesses; None below the sample floor.
    pub gpd: Vec<Option<GpdFit>>,
    pub mean_cluster_size: Option<f64>,
    /// Cluster sizes of (slot, UE) pairs with Q ≥ Q₀.
    pub tail_cluster: Option<ClusterStats>,
    pub non_tail_cluster: Option<ClusterStats>,
}

pub fn summarize(trace: &Trace, q0: f64, n_min: usize) -> Summary {
    let ues = trace.ues;
    let mut ee = Vec::new();
    let mut energy = 0.0;
    let mut bits = 0.0;
    for r in trace.rows.iter().filter(|r| r.k == 0) {
        ee.push(r.ee);
        energy += r.p_tot;
        bits += r.ee * r.p_tot;
    }
    let slots = ee.len();
    ee.sort_by(f64::total_cmp);
    let ee_cdf = if slots == 0 {
        Vec::new()
    } else {
        (0..=100).map(|i| quantile(&ee, i as f64 / 100.0)).collect()
    };

    let mut hits = vec![0usize; ues];
    let mut tail = Vec::new();
    let mut non_tail = Vec::new();
    for r in &trace.rows {
        let size = r.cluster_size as f64;
        if r.q >= q0 {
            hits[r.k] += 1;
            tail.push(size);
        } else {
            non_tail.push(size);
        }
    }
    let exceedance_freq: Vec<f64> = hits
        .iter()
        .map(|&h| if slots == 0 { 0.0 } else { h as f64 / slots as f64 })
        .collect();
    let gpd = (0..ues)
        .map(|k| {
            let q = trace.queue_of(k);
            let pot = extract_pot(&q, q0).ok()?;
            fit_gpd_mle_with(&pot.exceedances, n_min, q0, pot.n_total).ok()
        })
        .collect();
    let all = trace.rows.len();
    Summary {
        slots_recorded: slots,
        ee_median: (slots > 0).then(|| quantile(&ee, 0.5)),
        ee_mean: (slots > 0).then(|| ee.iter().sum::<f64>() / slots as f64),
        ee_long_run: (energy > 0.0).then(|| bits / energy),
        ee_cdf,
        mean_exceedance_freq: if ues == 0 {
            0.0
        } else {
            exceedance_freq.iter().sum::<f64>() / ues as f64
        },
        exceedance_freq,
        gpd,
        mean_cluster_size: (all > 0)
            .then(|| trace.rows.iter().map(|r| r.cluster_size as f64).sum::<f64>() / all as f64),
        tail_cluster: ClusterStats::from_sizes(&mut tail),
        non_tail_cluster: ClusterStats::from_sizes(&mut non_tail),
    }
}

/// U[T]/T, Y[T]/T, W[T]/T per UE, with the budgets they are judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualQueueRatios {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub eps_q: f64,
    pub zeta1: f64,
    pub zeta2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: String,
    pub config: serde_json::Value,
    pub policy: Policy,
    pub seed: u64,
    pub slots: usize,
    pub warmup: usize,
    /// FNV-1a over the bit patterns of every arrival, in draw order.
    pub arrivals_checksum: u64,
    pub summary: Summary,
    pub virtual_queues: VirtualQueueRatios,
    /// Tail weights per UE at the end of the run.
    pub final_alphas: Vec<[f64; 3]>,
    pub refits: usize,
    pub mean_sca_iterations: f64,
    pub max_sca_regression: f64,
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn add(&mut self, x: f64) {
        for b in x.to_bits().to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Per-UE sliding windows and the weight adaptation driven by them.
struct TailMonitor {
    windows: Vec<VecDeque<f64>>,
    fits: Vec<GpdFit>,
    base: [f64; 3],
    refits: usize,
}

impl TailMonitor {
    fn new(ues: usize, base: [f64; 3], cfg: &ExperimentConfig) -> Self {
        let prior = GpdFit::from_params(cfg.tail.xi_prior, cfg.tail.sigma_prior);
        Self {
            windows: vec![VecDeque::with_capacity(cfg.evt.window); ues],
            fits: vec![prior; ues],
            base,
            refits: 0,
        }
    }

    fn push(&mut self, q: &[f64], cap: usize) {
        for (w, &v) in self.windows.iter_mut().zip(q) {
            if w.len() == cap {
                w.pop_front();
            }
            w.push_back(v);
        }
    }

    /// Refits every UE with enough excesses (others keep their last fit)
    /// and, with feedback on, rescales the moment weights.
    fn refit(&mut self, alphas: &mut [[f64; 3]], cfg: &ExperimentConfig, feedback: bool) {
        let tail = cfg.tail_params();
        self.refits += 1;
        for (k, window) in self.windows.iter().enumerate() {
            let trace: Vec<f64> = window.iter().copied().collect();
            let Ok(pot) = extract_pot(&trace, tail.q0) else { continue };
            if let Ok(fit) = fit_gpd_mle_with(&pot.exceedances, cfg.evt.n_min, tail.q0, pot.n_total) {
                self.fits[k] = fit;
            }
            if !feedback {
                continue;
            }
            let Ok(desc) = tail_descriptor(pot.p_exc, &self.fits[k]) else { continue };
            for (slot, predicted, budget) in [(1, desc.m1, tail.zeta1), (2, desc.m2, tail.zeta2)] {
                let base = self.base[slot];
                let a = &mut alphas[k][slot];
                if budget > 0.0 && predicted > budget {
                    *a = (*a * (1.0 + 0.5 * (predicted / budget - 1.0))).min(ALPHA_CAP * base);
                } else {
                    *a = base + (1.0 - ALPHA_DECAY) * (*a - base);
                }
            }
        }
    }
}

/// Runs one policy for `cfg.sim.slots` slots and records the slots from
/// `cfg.sim.warmup` on.
pub fn run_experiment(cfg: &ExperimentConfig, policy: Policy, seed: u64) -> Result<(ExperimentResult, Trace)> {
    cfg.validate()?;
    let mut net = cfg.network.clone();
    net.seed = seed;
    let (topo, lsf) = generate_topology(&net)?;
    let est = estimation_quality(&lsf, &topo.pilot_sharing, net.tau_p, net.rho_p);
    let link = LinkBudget::new(&lsf, &est, &topo, net.rho_d, net.antennas, net.tau_p, cfg.fbl.contamination_gain);
    let inputs = SlotInputs::new(
        link,
        cfg.fbl_params(),
        cfg.power_params(),
        topo.edu_of_ap.clone(),
        cfg.bandwidth_units(),
    );
    let tail = cfg.tail_params();
    let ues = topo.num_ues();
    let v = cfg.solver.v;

    let mut arrivals_rng = rng::substream(seed, rng::ARRIVALS);
    let mut checksum = Fnv::new();
    let mut state = QueueState::new(ues);
    let base = policy.base_alphas(cfg);
    let mut alphas = vec![base; ues];
    let mut monitor = TailMonitor::new(ues, base, cfg);
    let mut warm = nearest_ap_start(&inputs.link.gamma);
    let static_cluster = project_binary(&warm, &inputs.link.gamma);

    let mut trace = Trace {
        ues,
        rows: Vec::with_capacity((cfg.sim.slots - cfg.sim.warmup) * ues),
    };
    let mut iterations_total = 0usize;
    let mut max_regression: f64 = 0.0;

    for t in 0..cfg.sim.slots {
        let theta = theta_weights(&state, &alphas);
        let (cluster, iters, obj): (ClusterMatrix, usize, f64) = match policy.kind {
            PolicyKind::StaticNearest => {
                let obj = p2_objective(&inputs, &static_cluster, &theta, v);
                (static_cluster.clone(), 0, obj)
            }
            PolicyKind::EvtAware | PolicyKind::QueueAwareBaseline => {
                let (c, out, diag) = solve_slot(&inputs, &theta, &cfg.solver, &warm);
                if cfg.sim.strict && diag.max_regression > STRICT_REGRESSION_TOL {
                    return Err(Error::ObjectiveRegression {
                        slot: t,
                        drop: diag.max_regression,
                    });
                }
                max_regression = max_regression.max(diag.max_regression);
                warm = out.x;
                (c, diag.iterations, diag.p2_objective)
            }
        };
        iterations_total += iters;
        let phy = evaluate_slot(
            &inputs.link,
            &cluster,
            &inputs.power,
            &inputs.edu_of_ap,
            &inputs.fbl,
            inputs.bandwidth,
        )?;

        if t >= cfg.sim.warmup {
            for k in 0..ues {
                trace.rows.push(SlotRow {
                    t,
                    k,
                    q: state.q[k],
                    z: exceedance(state.q[k], tail.q0),
                    rate: phy.rate[k],
                    sinr: phy.sinr[k],
                    cluster_size: cluster.cluster_size(k),
                    p_tot: phy.p_tot,
                    ee: phy.ee_inst,
                    sca_iters: iters,
                    obj,
                });
            }
        }

        let current_q = state.q.clone();
        state = update_virtual_queues(&state, &tail);
        let arrivals = draw_arrivals(&mut arrivals_rng, ues, tail.a_max, tail.arrivals);
        for k in 0..ues {
            checksum.add(arrivals[k]);
            state.q[k] = advance_queue(current_q[k], phy.rate[k], arrivals[k]);
        }

        if policy.kind == PolicyKind::EvtAware {
            monitor.push(&current_q, cfg.evt.window);
            if (t + 1) % cfg.evt.refit_every == 0 {
                monitor.refit(&mut alphas, cfg, policy.evt_feedback);
            }
        }
    }

    let horizon = cfg.sim.slots.max(1) as f64;
    let result = ExperimentResult {
        version: crate::VERSION.to_string(),
        config: cfg.to_json(),
        policy,
        seed,
        slots: cfg.sim.slots,
        warmup: cfg.sim.warmup,
        arrivals_checksum: checksum.0,
        summary: summarize(&trace, tail.q0, cfg.evt.n_min),
        virtual_queues: VirtualQueueRatios {
            u: state.u.iter().map(|x| x / horizon).collect(),
            y: state.y.iter().map(|x| x / horizon).collect(),
            w: state.w.iter().map(|x| x / horizon).collect(),
            eps_q: tail.eps_q,
            zeta1: tail.zeta1,
            zeta2: tail.zeta2,
        },
        final_alphas: alphas,
        refits: monitor.refits,
        mean_sca_iterations: iterations_total as f64 / horizon,
        max_sca_regression: max_regression,
    };
    Ok((result, trace))
}

/// Runs every (seed, policy) pair; results come back in input order.
pub fn run_many(
    cfg: &ExperimentConfig,
    jobs: &[(u64, PolicyKind)],
    keep_traces: bool,
) -> Result<Vec<(ExperimentResult, Option<Trace>)>> {
    jobs.to_vec()
        .into_par_iter()
        .map(|(seed, kind)| {
            let (res, trace) = run_experiment(cfg, Policy::new(kind, cfg), seed)?;
            Ok((res, keep_traces.then_some(trace)))
        })
        .collect()
}

/// Paired outcome of the tail-aware policy and the baseline on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub exceedance_evt: f64,
    pub exceedance_baseline: f64,
    pub median_ee_evt: Option<f64>,
    pub median_ee_baseline: Option<f64>,
    pub tail_cluster_evt: Option<f64>,
    pub non_tail_cluster_evt: Option<f64>,
    pub tail_cluster_baseline: Option<f64>,
    pub non_tail_cluster_baseline: Option<f64>,
    /// Both policies exceed ε_Q on some UE: the load is beyond what either
    /// can certify, so no ordering should be read from this row.
    pub both_violate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub version: String,
    pub config: serde_json::Value,
    pub rows: Vec<PairedRow>,
    pub evt_not_worse_exceedance: usize,
    /// Fewer than 2 seeds, or fewer than 100 recorded slots per run.
    pub wide_uncertainty: bool,
    pub infeasible_load: bool,
    pub results: Vec<ExperimentResult>,
}

pub fn compare_policies(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::Config("compare_policies needs at least one seed".into()));
    }
    let jobs: Vec<(u64, PolicyKind)> = seeds
        .iter()
        .flat_map(|&s| [(s, PolicyKind::EvtAware), (s, PolicyKind::QueueAwareBaseline)])
        .collect();
    let results: Vec<ExperimentResult> = run_many(cfg, &jobs, false)?.into_iter().map(|(r, _)| r).collect();
    let eps = cfg.tail.eps_q;
    let mut rows = Vec::with_capacity(seeds.len());
    for pair in results.chunks(2) {
        let (e, b) = (&pair[0], &pair[1]);
        assert_eq!(
            e.arrivals_checksum, b.arrivals_checksum,
            "paired runs must see identical arrivals"
        );
        let violates = |r: &ExperimentResult| r.summary.exceedance_freq.iter().any(|&p| p > eps);
        rows.push(PairedRow {
            seed: e.seed,
            exceedance_evt: e.summary.mean_exceedance_freq,
            exceedance_baseline: b.summary.mean_exceedance_freq,
            median_ee_evt: e.summary.ee_median,
            median_ee_baseline: b.summary.ee_median,
            tail_cluster_evt: e.summary.tail_cluster.as_ref().map(|c| c.mean),
            non_tail_cluster_evt: e.summary.non_tail_cluster.as_ref().map(|c| c.mean),
            tail_cluster_baseline: b.summary.tail_cluster.as_ref().map(|c| c.mean),
            non_tail_cluster_baseline: b.summary.non_tail_cluster.as_ref().map(|c| c.mean),
            both_violate: violates(e) && violates(b),
        });
    }
    let recorded = cfg.sim.slots - cfg.sim.warmup;
    Ok(Comparison {
        version: crate::VERSION.to_string(),
        config: cfg.to_json(),
        evt_not_worse_exceedance: rows
            .iter()
            .filter(|r| r.exceedance_evt <= r.exceedance_baseline)
            .count(),
        wide_uncertainty: seeds.len() < 2 || recorded < 100,
        infeasible_load: rows.iter().all(|r| r.both_violate),
        rows,
        results,
    })
}

/// One summary line of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub exceedance_evt: f64,
    pub exceedance_baseline: f64,
    pub median_ee_evt: Option<f64>,
    pub median_ee_baseline: Option<f64>,
    pub tail_cluster_evt: Option<f64>,
    pub non_tail_cluster_evt: Option<f64>,
    pub both_violate: bool,
}

/// Paired comparisons with `axis` set to each of `values` in turn.
pub fn sweep(cfg: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep over `{axis}` has no values")));
    }
    let mut out = Vec::new();
    for value in values {
        let point = cfg.with_overrides(&[format!("{axis}={value}")])?;
        let cmp = compare_policies(&point, &point.sim.seeds)?;
        out.extend(cmp.rows.into_iter().map(|r| SweepRow {
            axis: axis.to_string(),
            value: value.clone(),
            seed: r.seed,
            exceedance_evt: r.exceedance_evt,
            exceedance_baseline: r.exceedance_baseline,
            median_ee_evt: r.median_ee_evt,
            median_ee_baseline: r.median_ee_baseline,
            tail_cluster_evt: r.tail_cluster_evt,
            non_tail_cluster_evt: r.non_tail_cluster_evt,
            both_violate: r.both_violate,
        }));
    }
    Ok(out)
}
