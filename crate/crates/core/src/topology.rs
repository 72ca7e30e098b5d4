//! Network geometry, large-scale fading and pilot assignment.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;

pub type Point = [f64; 2];

/// Breakpoints of the three-slope path-loss model, meters.
pub const NEAR_BREAKPOINT_M: f64 = 10.0;
pub const FAR_BREAKPOINT_M: f64 = 50.0;

const FAR_INTERCEPT_DB: f64 = -140.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Side of the square wrap-around area, meters.
    pub area_side: f64,
    pub edus: usize,
    pub aps: usize,
    /// Antennas per AP.
    pub antennas: usize,
    pub ues: usize,
    /// Symbols per coherence block.
    pub tau_c: usize,
    /// Pilot symbols (number of orthogonal pilots).
    pub tau_p: usize,
    pub bandwidth_hz: f64,
    /// Pilot power per symbol, watts.
    pub rho_p: f64,
    /// Downlink power, watts.
    pub rho_d: f64,
    pub noise_figure_db: f64,
    pub shadow_sigma_db: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            area_side: 500.0,
            edus: 2,
            aps: 20,
            antennas: 6,
            ues: 8,
            tau_c: 200,
            tau_p: 2,
            bandwidth_hz: 20e6,
            rho_p: 0.2,
            rho_d: 1.0,
            noise_figure_db: 9.0,
            shadow_sigma_db: 8.0,
            seed: 1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.edus == 0 || self.aps == 0 || self.antennas == 0 || self.ues == 0 {
            return fail("network counts (edus, aps, antennas, ues) must be >= 1".into());
        }
        if self.tau_p == 0 || self.tau_c == 0 {
            return fail("tau_p and tau_c must be >= 1".into());
        }
        if !(self.area_side > 0.0) {
            return fail(format!("area_side must be positive, got {}", self.area_side));
        }
        if self.antennas <= self.tau_p {
            return fail(format!(
                "full-pilot zero-forcing needs antennas > tau_p ({} <= {})",
                self.antennas, self.tau_p
            ));
        }
        if self.tau_p >= self.tau_c {
            return fail(format!("tau_p ({}) must be < tau_c ({})", self.tau_p, self.tau_c));
        }
        if !self.aps.is_multiple_of(self.edus) {
            return fail(format!(
                "aps ({}) must be divisible by edus ({})",
                self.aps, self.edus
            ));
        }
        if !(self.bandwidth_hz > 0.0) || self.rho_p < 0.0 || self.rho_d < 0.0 {
            return fail("bandwidth must be positive and powers nonnegative".into());
        }
        Ok(())
    }

    /// Thermal noise power over the band, watts.
    pub fn noise_power_w(&self) -> f64 {
        noise_power_w(self.bandwidth_hz, self.noise_figure_db)
    }

    /// Pilot fraction τ_p / τ_c.
    pub fn pilot_fraction(&self) -> f64 {
        self.tau_p as f64 / self.tau_c as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub side: f64,
    pub ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub edu_of_ap: Vec<usize>,
    pub pilot_of_ue: Vec<usize>,
    /// UEs sharing each UE's pilot, including the UE itself, ascending.
    pub pilot_sharing: Vec<Vec<usize>>,
}

impl Topology {
    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    /// Pilot-sharing set of `k` without `k` itself.
    pub fn co_pilot(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.pilot_sharing[k].iter().copied().filter(move |&i| i != k)
    }
}

/// β, K×L, noise-normalized linear gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeScaleState {
    pub beta: Grid,
}

pub fn noise_power_w(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    let dbm = -174.0 + 10.0 * bandwidth_hz.log10() + noise_figure_db;
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Shortest distance between two points on the torus of the given side.
pub fn wrap_distance(p: Point, q: Point, side: f64) -> f64 {
    let mut best = f64::INFINITY;
    for sx in [-1.0, 0.0, 1.0] {
        for sy in [-1.0, 0.0, 1.0] {
            let dx = p[0] - (q[0] + sx * side);
            let dy = p[1] - (q[1] + sy * side);
            best = best.min(dx.hypot(dy));
        }
    }
    best
}

/// Three-slope path loss in dB (negative), distance in meters.
pub fn path_loss_db(d: f64) -> f64 {
    let d_km = d.max(NEAR_BREAKPOINT_M) / 1000.0;
    let far_km = FAR_BREAKPOINT_M / 1000.0;
    if d > FAR_BREAKPOINT_M {
        FAR_INTERCEPT_DB - 35.0 * d_km.log10()
    } else {
        // Intercept chosen so the middle slope meets the far slope at 50 m.
        FAR_INTERCEPT_DB - 15.0 * far_km.log10() - 20.0 * d_km.log10()
    }
}

/// Linear gain for distance `d` and shadowing `shadow_db`, divided by
/// `noise_w`. Pass `noise_w = 1.0` for the unnormalized gain.
pub fn large_scale_gain(d: f64, shadow_db: f64, noise_w: f64) -> f64 {
    10f64.powf((path_loss_db(d) + shadow_db) / 10.0) / noise_w
}

pub fn generate_topology(cfg: &NetworkConfig) -> Result<(Topology, LargeScaleState)> {
    cfg.validate()?;
    let side = cfg.area_side;
    let mut pos_rng = rng::substream(cfg.seed, rng::TOPOLOGY);
    let mut draw = |n: usize| -> Vec<Point> {
        (0..n)
            .map(|_| [pos_rng.random::<f64>() * side, pos_rng.random::<f64>() * side])
            .collect()
    };
    let ap_positions = draw(cfg.aps);
    let ue_positions = draw(cfg.ues);

    let per_edu = cfg.aps / cfg.edus;
    let edu_of_ap = (0..cfg.aps).map(|l| l / per_edu).collect();

    let pilot_of_ue: Vec<usize> = (0..cfg.ues).map(|k| k % cfg.tau_p).collect();
    let pilot_sharing = (0..cfg.ues)
        .map(|k| {
            (0..cfg.ues)
                .filter(|&i| pilot_of_ue[i] == pilot_of_ue[k])
                .collect()
        })
        .collect();

    let noise = cfg.noise_power_w();
    let shadow = Normal::new(0.0, cfg.shadow_sigma_db.max(0.0))
        .map_err(|e| Error::Config(format!("shadowing: {e}")))?;
    let mut shadow_rng = rng::substream(cfg.seed, rng::SHADOWING);
    let beta = Grid::from_fn(cfg.ues, cfg.aps, |k, l| {
        // Always draw so the stream layout does not depend on geometry.
        let s = shadow.sample(&mut shadow_rng);
        let d = wrap_distance(ue_positions[k], ap_positions[l], side);
        let s = if d > FAR_BREAKPOINT_M { s } else { 0.0 };
        large_scale_gain(d, s, noise)
    });

    Ok((
        Topology {
            side,
            ap_positions,
            ue_positions,
            edu_of_ap,
            pilot_of_ue,
            pilot_sharing,
        },
        LargeScaleState { beta },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_distance_examples() {
        assert_eq!(wrap_distance([0.0, 0.0], [0.0, 0.0], 500.0), 0.0);
        assert!((wrap_distance([0.0, 0.0], [499.0, 0.0], 500.0) - 1.0).abs() < 1e-12);
        // Every image of (250, 250) sits at the same distance from the origin.
        let d = wrap_distance([0.0, 0.0], [250.0, 250.0], 500.0);
        assert!((d - 250.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn path_loss_matches_hand_evaluation() {
        assert!((path_loss_db(100.0) - (-105.7)).abs() < 1e-12);
        let g = large_scale_gain(100.0, 0.0, 1.0);
        assert!((g - 10f64.powf(-10.57)).abs() / g < 1e-12);
        assert!((g - 2.69e-11).abs() < 0.01e-11);
    }

    #[test]
    fn path_loss_is_continuous_at_breakpoints() {
        let eps = 1e-9;
        assert!((path_loss_db(FAR_BREAKPOINT_M) - path_loss_db(FAR_BREAKPOINT_M + eps)).abs() < 1e-6);
        assert!((path_loss_db(NEAR_BREAKPOINT_M) - path_loss_db(NEAR_BREAKPOINT_M + eps)).abs() < 1e-6);
        assert_eq!(path_loss_db(1.0), path_loss_db(NEAR_BREAKPOINT_M));
    }

    #[test]
    fn shadowing_is_a_db_offset() {
        let ratio = large_scale_gain(200.0, 8.0, 1.0) / large_scale_gain(200.0, 0.0, 1.0);
        assert!((ratio - 10f64.powf(0.8)).abs() < 1e-9);
    }

    #[test]
    fn noise_floor_at_20_mhz() {
        let dbm = 10.0 * (noise_power_w(20e6, 9.0) * 1e3).log10();
        assert!((dbm - (-91.99)).abs() < 0.01);
    }

    #[test]
    fn round_robin_pilots_and_block_edus() {
        let cfg = NetworkConfig {
            ues: 8,
            tau_p: 2,
            ..NetworkConfig::default()
        };
        let (topo, lsf) = generate_topology(&cfg).unwrap();
        assert_eq!(topo.pilot_sharing[0], vec![0, 2, 4, 6]);
        assert_eq!(topo.pilot_sharing[3], vec![1, 3, 5, 7]);
        let mut expected = vec![0; 10];
        expected.extend(vec![1; 10]);
        assert_eq!(topo.edu_of_ap, expected);
        assert!(lsf.beta.iter().all(|&b| b > 0.0));
        for k in 0..8 {
            for &i in &topo.pilot_sharing[k] {
                assert_eq!(topo.pilot_of_ue[i], topo.pilot_of_ue[k]);
            }
            assert!(topo.pilot_sharing[k].contains(&k));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = NetworkConfig::default();
        let a = generate_topology(&cfg).unwrap();
        let b = generate_topology(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_topology(&NetworkConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = NetworkConfig::default();
        assert!(generate_topology(&NetworkConfig { aps: 21, ..base.clone() }).is_err());
        assert!(generate_topology(&NetworkConfig { antennas: 2, ..base.clone() }).is_err());
        assert!(generate_topology(&NetworkConfig { ues: 0, ..base.clone() }).is_err());
        assert!(generate_topology(&NetworkConfig { area_side: 0.0, ..base }).is_err());
    }

    proptest! {
        #[test]
        fn wrap_distance_is_a_torus_metric(
            p in prop::array::uniform2(0.0..500.0f64),
            q in prop::array::uniform2(0.0..500.0f64),
            r in prop::array::uniform2(0.0..500.0f64),
        ) {
            let side = 500.0;
            let pq = wrap_distance(p, q, side);
            prop_assert!((pq - wrap_distance(q, p, side)).abs() < 1e-9);
            prop_assert!(pq <= side * 2f64.sqrt() / 2.0 + 1e-9);
            prop_assert!(pq <= wrap_distance(p, r, side) + wrap_distance(r, q, side) + 1e-9);
        }

        #[test]
        fn gain_decreases_with_distance(d in 50.0..700.0f64, extra in 0.1..100.0f64) {
            prop_assert!(large_scale_gain(d + extra, 3.0, 1.0) < large_scale_gain(d, 3.0, 1.0));
        }
    }
}
