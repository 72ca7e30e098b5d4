#![allow(dead_code)]

use cfran_evt::channel::{estimation_quality, EstimationQuality};
use cfran_evt::phy::{evaluate_slot, ClusterMatrix, ContaminationGain, FblParams, LinkBudget, PowerParams};
use cfran_evt::solver::SlotInputs;
use cfran_evt::topology::{generate_topology, LargeScaleState, NetworkConfig, Topology};
use rand::Rng;

pub struct Instance {
    pub cfg: NetworkConfig,
    pub topo: Topology,
    pub lsf: LargeScaleState,
    pub est: EstimationQuality,
}

impl Instance {
    pub fn new(ues: usize, aps: usize, tau_p: usize, seed: u64) -> Self {
        let cfg = NetworkConfig {
            edus: 1,
            aps,
            ues,
            tau_p,
            seed,
            ..NetworkConfig::default()
        };
        let (topo, lsf) = generate_topology(&cfg).expect("valid test network");
        let est = estimation_quality(&lsf, &topo.pilot_sharing, cfg.tau_p, cfg.rho_p);
        Self { cfg, topo, lsf, est }
    }

    pub fn link(&self, gain: ContaminationGain) -> LinkBudget {
        LinkBudget::new(&self.lsf, &self.est, &self.topo, self.cfg.rho_d, self.cfg.antennas, self.cfg.tau_p, gain)
    }

    pub fn slot_inputs(&self) -> SlotInputs {
        let fbl = FblParams {
            tau_c: self.cfg.tau_c as f64,
            eta_p: self.cfg.pilot_fraction(),
            ..FblParams::default()
        };
        let power = PowerParams {
            rho_d: self.cfg.rho_d,
            ..PowerParams::default()
        };
        SlotInputs::new(
            self.link(ContaminationGain::Estimate),
            fbl,
            power,
            self.topo.edu_of_ap.clone(),
            self.cfg.bandwidth_hz / 1e6,
        )
    }
}

/// Every UE gets one random AP plus each other AP with probability 0.4.
pub fn random_cluster(rng: &mut impl Rng, ues: usize, aps: usize) -> ClusterMatrix {
    let mut c = ClusterMatrix::empty(ues, aps);
    for k in 0..ues {
        c.set(k, rng.random_range(0..aps), true);
        for l in 0..aps {
            if rng.random::<f64>() < 0.4 {
                c.set(k, l, true);
            }
        }
    }
    c
}

/// Brute-force P2 optimum over all associations that leave no UE unserved.
pub fn exhaustive_p2(inputs: &SlotInputs, theta: &[f64], v: f64) -> (ClusterMatrix, f64) {
    let (ues, aps) = (inputs.num_ues(), inputs.num_aps());
    let n = ues * aps;
    assert!(n <= 16);
    let mut best: Option<(ClusterMatrix, f64)> = None;
    for mask in 0u32..(1 << n) {
        let mut c = ClusterMatrix::empty(ues, aps);
        for bit in 0..n {
            if mask >> bit & 1 == 1 {
                c.set(bit / aps, bit % aps, true);
            }
        }
        if !c.is_feasible() {
            continue;
        }
        let phy = evaluate_slot(&inputs.link, &c, &inputs.power, &inputs.edu_of_ap, &inputs.fbl, inputs.bandwidth)
            .expect("positive power");
        let obj = v * inputs.bandwidth * phy.sum_rate() / phy.p_tot
            + phy.rate.iter().zip(theta).map(|(r, t)| r * t).sum::<f64>();
        if best.as_ref().is_none_or(|(_, b)| obj > *b) {
            best = Some((c, obj));
        }
    }
    best.expect("at least one feasible association")
}
