//! Closed-form per-slot physical layer: FZF SINR under use-and-then-forget
//! bounding, the finite-blocklength normal approximation, and the AP/network
//! power model.

#![allow(clippy::excessive_precision)]

use serde::{Deserialize, Serialize};

use crate::channel::EstimationQuality;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::topology::{LargeScaleState, Topology};

// ---------------------------------------------------------------------------
// Inverse normal CDF (Wichura, AS241 / PPND16).

const A: [f64; 8] = [
    3.387_132_872_796_366_608_0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083_0e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061_0e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561_0e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_90,
    5.769_497_221_460_691_405_50,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_70e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_40e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_40,
    6.897_673_349_851_000_045_50e-1,
    1.481_039_764_274_800_745_90e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946_00e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103_777_20,
    5.463_784_911_164_114_369_90,
    1.784_826_539_917_291_335_80,
    2.965_605_718_285_048_912_30e-1,
    2.653_218_952_657_612_309_30e-2,
    1.242_660_947_388_078_438_60e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_90e-1,
    1.369_298_809_227_358_053_10e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591_00e-4,
    1.846_318_317_510_054_681_80e-5,
    1.421_511_758_316_445_888_70e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn poly(c: &[f64; 8], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

/// Standard normal quantile Φ⁻¹(p) for p in (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let z = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -z
    } else {
        z
    }
}

/// Inverse Gaussian Q-function, Q⁻¹(ε) = −Φ⁻¹(ε).
pub fn q_inv(eps: f64) -> f64 {
    -normal_quantile(eps)
}

// ---------------------------------------------------------------------------
// Association and parameters.

/// Binary AP-UE association, K×L.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMatrix {
    a: Grid<bool>,
}

impl ClusterMatrix {
    pub fn empty(ues: usize, aps: usize) -> Self {
        Self {
            a: Grid::filled(ues, aps, false),
        }
    }

    pub fn from_grid(a: Grid<bool>) -> Self {
        Self { a }
    }

    /// Rows of 0/1 entries; anything nonzero counts as served.
    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        Self {
            a: Grid::from_rows(rows.iter().map(|r| r.iter().map(|&v| v != 0).collect()).collect()),
        }
    }

    pub fn num_ues(&self) -> usize {
        self.a.rows()
    }

    pub fn num_aps(&self) -> usize {
        self.a.cols()
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> bool {
        self.a[(k, l)]
    }

    pub fn set(&mut self, k: usize, l: usize, on: bool) {
        self.a[(k, l)] = on;
    }

    /// |𝓜_k|: number of APs serving UE k.
    pub fn cluster_size(&self, k: usize) -> usize {
        self.a.row(k).iter().filter(|&&x| x).count()
    }

    /// |𝓚_l|: number of UEs served by AP l.
    pub fn load(&self, l: usize) -> usize {
        (0..self.num_ues()).filter(|&k| self.a[(k, l)]).count()
    }

    /// Every UE has at least one serving AP.
    pub fn is_feasible(&self) -> bool {
        (0..self.num_ues()).all(|k| self.cluster_size(k) > 0)
    }

    pub fn to_f64(&self) -> Grid {
        self.a.map(|&x| if x { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerParams {
    /// Amplifier efficiency per EDU; a single value applies to all EDUs.
    pub alpha: Vec<f64>,
    /// Circuit power per AP, watts.
    pub p_cir: f64,
    /// Load-dependent power per association, watts.
    pub p_link: f64,
    /// Fixed EDU-side power, watts.
    pub p_edu: f64,
    /// Downlink transmit power, watts.
    pub rho_d: f64,
}

impl Default for PowerParams {
    fn default() -> Self {
        Self {
            alpha: vec![0.4],
            p_cir: 0.2,
            p_link: 0.01,
            p_edu: 5.0,
            rho_d: 1.0,
        }
    }
}

impl PowerParams {
    pub fn validate(&self, edus: usize) -> Result<()> {
        if self.alpha.is_empty() || (self.alpha.len() != 1 && self.alpha.len() != edus) {
            return Err(Error::Config(format!(
                "power.alpha needs 1 or {edus} entries, got {}",
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("power.alpha entries must lie in (0, 1]".into()));
        }
        if self.p_cir < 0.0 || self.p_link < 0.0 || self.p_edu < 0.0 || self.rho_d < 0.0 {
            return Err(Error::Config("powers must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn alpha_for_edu(&self, m: usize) -> f64 {
        if self.alpha.len() == 1 {
            self.alpha[0]
        } else {
            self.alpha[m]
        }
    }

    /// Transmit-power-to-consumption factor ρ_d/α_m for every AP.
    pub fn tx_factor_per_ap(&self, edu_of_ap: &[usize]) -> Vec<f64> {
        edu_of_ap
            .iter()
            .map(|&m| self.rho_d / self.alpha_for_edu(m))
            .collect()
    }
}

/// Which form of the finite-blocklength bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FblForm {
    /// ln(1+γ̂) minus the dispersion penalty; monotone in SINR.
    #[default]
    Standard,
    /// ln(1+x) evaluated at x = 1/γ̂; decreasing in SINR.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FblParams {
    /// Target decoding error probability ε.
    pub eps_decode: f64,
    /// Coherence block length, symbols.
    pub tau_c: f64,
    /// Pilot fraction τ_p/τ_c.
    pub eta_p: f64,
    pub form: FblForm,
}

impl Default for FblParams {
    fn default() -> Self {
        Self {
            eps_decode: 1e-5,
            tau_c: 200.0,
            eta_p: 0.01,
            form: FblForm::Standard,
        }
    }
}

impl FblParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_decode > 0.0 && self.eps_decode < 0.5) {
            return Err(Error::Config(format!(
                "eps_decode must lie in (0, 0.5), got {}",
                self.eps_decode
            )));
        }
        if !(self.eta_p > 0.0 && self.eta_p < 1.0) || !(self.tau_c > 0.0) {
            return Err(Error::Config("eta_p must lie in (0, 1) and tau_c be positive".into()));
        }
        Ok(())
    }

    fn prefactor(&self) -> f64 {
        (1.0 - self.eta_p) / std::f64::consts::LN_2
    }

    /// Q⁻¹(ε)/√(τ_c(1−η_p)).
    fn dispersion_weight(&self) -> f64 {
        q_inv(self.eps_decode) / (self.tau_c * (1.0 - self.eta_p)).sqrt()
    }
}

/// Channel dispersion V(γ̂) = 1 − 1/(1+γ̂)².
pub fn dispersion(sinr: f64) -> f64 {
    1.0 - 1.0 / ((1.0 + sinr) * (1.0 + sinr))
}

fn fbl_bracket(sinr: f64, fbl: &FblParams) -> f64 {
    let penalty = fbl.dispersion_weight() * dispersion(sinr).sqrt();
    match fbl.form {
        FblForm::Standard => sinr.ln_1p() - penalty,
        FblForm::Literal => (1.0 / sinr).ln_1p() - penalty,
    }
}

/// Finite-blocklength spectral efficiency lower bound, bits/s/Hz, clamped
/// at zero.
pub fn fbl_rate(sinr: f64, fbl: &FblParams) -> f64 {
    if !(sinr > 0.0) {
        return 0.0;
    }
    (fbl.prefactor() * fbl_bracket(sinr, fbl)).max(0.0)
}

/// d fbl_rate / d sinr; zero wherever the rate is clamped.
pub fn fbl_rate_slope(sinr: f64, fbl: &FblParams) -> f64 {
    if !(sinr > 0.0) || fbl_bracket(sinr, fbl) <= 0.0 {
        return 0.0;
    }
    let one_plus = 1.0 + sinr;
    // d√V/dγ̂ = V'/(2√V) with V' = 2/(1+γ̂)³.
    let d_sqrt_v = 1.0 / (one_plus * one_plus * one_plus * dispersion(sinr).sqrt());
    let d_log = match fbl.form {
        FblForm::Standard => 1.0 / one_plus,
        FblForm::Literal => -1.0 / (sinr * one_plus),
    };
    fbl.prefactor() * (d_log - fbl.dispersion_weight() * d_sqrt_v)
}

// ---------------------------------------------------------------------------
// SINR.

/// Gain used for the coherent pilot-contamination term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationGain {
    /// γ_{k,l}: what the UatF bound evaluates to for MMSE estimates.
    #[default]
    Estimate,
    /// β_{k,l}: the large-scale gain.
    LargeScale,
}

/// Everything the closed-form SINR needs besides the association.
#[derive(Debug, Clone)]
pub struct LinkBudget {
    pub beta: Grid,
    pub gamma: Grid,
    pub sqrt_gamma: Grid,
    /// Square root of the contamination gain selected by [`ContaminationGain`].
    pub sqrt_contamination: Grid,
    /// β − γ, the estimation-error power.
    pub leakage: Grid,
    /// Co-pilot UEs of each UE, excluding itself.
    pub co_pilot: Vec<Vec<usize>>,
    /// Downlink power, watts (β is noise-normalized).
    pub rho_d: f64,
    /// N − τ_p.
    pub array_gain: f64,
}

impl LinkBudget {
    pub fn new(
        lsf: &LargeScaleState,
        est: &EstimationQuality,
        topo: &Topology,
        rho_d: f64,
        antennas: usize,
        tau_p: usize,
        contamination: ContaminationGain,
    ) -> Self {
        let co_pilot = (0..topo.num_ues()).map(|k| topo.co_pilot(k).collect()).collect();
        Self::from_parts(
            lsf.beta.clone(),
            est.gamma.clone(),
            co_pilot,
            rho_d,
            antennas,
            tau_p,
            contamination,
        )
    }

    pub fn from_parts(
        beta: Grid,
        gamma: Grid,
        co_pilot: Vec<Vec<usize>>,
        rho_d: f64,
        antennas: usize,
        tau_p: usize,
        contamination: ContaminationGain,
    ) -> Self {
        let sqrt_gamma = gamma.map(|g| g.sqrt());
        let sqrt_contamination = match contamination {
            ContaminationGain::Estimate => sqrt_gamma.clone(),
            ContaminationGain::LargeScale => beta.map(|b| b.sqrt()),
        };
        let leakage = Grid::from_fn(beta.rows(), beta.cols(), |k, l| {
            (beta[(k, l)] - gamma[(k, l)]).max(0.0)
        });
        Self {
            co_pilot,
            beta,
            gamma,
            sqrt_gamma,
            sqrt_contamination,
            leakage,
            rho_d,
            array_gain: (antennas - tau_p) as f64,
        }
    }

    pub fn num_ues(&self) -> usize {
        self.beta.rows()
    }

    pub fn num_aps(&self) -> usize {
        self.beta.cols()
    }

    /// SINR of every UE given per-link amplitudes `amp[i][l] = √η̄_{i,l}`
    /// (zero where AP l does not serve UE i).
    pub fn sinr_from_amplitudes(&self, amp: &Grid) -> Vec<f64> {
        let (ues, aps) = (self.num_ues(), self.num_aps());
        let tx_share: Vec<f64> = (0..aps)
            .map(|l| (0..ues).map(|i| amp[(i, l)] * amp[(i, l)]).sum())
            .collect();
        (0..ues)
            .map(|k| {
                let mut desired = 0.0;
                let mut leak = 0.0;
                for l in 0..aps {
                    desired += amp[(k, l)] * self.sqrt_gamma[(k, l)];
                    leak += self.leakage[(k, l)] * tx_share[l];
                }
                let coherent: f64 = self.co_pilot[k]
                    .iter()
                    .map(|&i| {
                        let c: f64 = (0..aps)
                            .map(|l| amp[(i, l)] * self.sqrt_contamination[(k, l)])
                            .sum();
                        c * c
                    })
                    .sum();
                let num = self.rho_d * self.array_gain * desired * desired;
                let den = self.rho_d * leak + self.rho_d * self.array_gain * coherent + 1.0;
                num / den
            })
            .collect()
    }
}

/// Equal power sharing: η̄[k][l] = 1/|𝓚_l| for served pairs, else 0.
pub fn equal_power_coeffs(cluster: &ClusterMatrix) -> Grid {
    let loads: Vec<usize> = (0..cluster.num_aps()).map(|l| cluster.load(l)).collect();
    Grid::from_fn(cluster.num_ues(), cluster.num_aps(), |k, l| {
        if cluster.get(k, l) {
            1.0 / loads[l] as f64
        } else {
            0.0
        }
    })
}

/// Closed-form FZF effective SINR for every UE. Entries of `eta_bar`
/// outside the association are ignored.
pub fn fzf_sinr(link: &LinkBudget, eta_bar: &Grid, cluster: &ClusterMatrix) -> Vec<f64> {
    let amp = Grid::from_fn(link.num_ues(), link.num_aps(), |k, l| {
        if cluster.get(k, l) {
            eta_bar[(k, l)].max(0.0).sqrt()
        } else {
            0.0
        }
    });
    link.sinr_from_amplitudes(&amp)
}

// ---------------------------------------------------------------------------
// Power and energy efficiency.

/// Per-AP power consumption, watts.
pub fn ap_power(
    cluster: &ClusterMatrix,
    eta: &Grid,
    params: &PowerParams,
    edu_of_ap: &[usize],
) -> Vec<f64> {
    (0..cluster.num_aps())
        .map(|l| {
            let mut tx = 0.0;
            let mut links = 0.0;
            for k in 0..cluster.num_ues() {
                if cluster.get(k, l) {
                    tx += eta[(k, l)];
                    links += 1.0;
                }
            }
            params.rho_d / params.alpha_for_edu(edu_of_ap[l]) * tx
                + params.p_link * links
                + params.p_cir
        })
        .collect()
}

pub fn total_power(p_ap: &[f64], params: &PowerParams) -> f64 {
    p_ap.iter().sum::<f64>() + params.p_edu
}

/// Instantaneous energy efficiency `bandwidth · Σ rate / p_tot`.
pub fn instantaneous_ee(rates: &[f64], p_tot: f64, bandwidth: f64) -> Result<f64> {
    if !(p_tot > 0.0) {
        return Err(Error::NonPositivePower(p_tot));
    }
    Ok(bandwidth * rates.iter().sum::<f64>() / p_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPhyResult {
    pub sinr: Vec<f64>,
    pub rate: Vec<f64>,
    pub p_ap: Vec<f64>,
    pub p_tot: f64,
    pub ee_inst: f64,
}

impl SlotPhyResult {
    pub fn sum_rate(&self) -> f64 {
        self.rate.iter().sum()
    }
}

/// Full hard-decision evaluation of one slot under equal power sharing.
pub fn evaluate_slot(
    link: &LinkBudget,
    cluster: &ClusterMatrix,
    power: &PowerParams,
    edu_of_ap: &[usize],
    fbl: &FblParams,
    bandwidth: f64,
) -> Result<SlotPhyResult> {
    let eta = equal_power_coeffs(cluster);
    let sinr = fzf_sinr(link, &eta, cluster);
    let rate: Vec<f64> = sinr.iter().map(|&s| fbl_rate(s, fbl)).collect();
    let p_ap = ap_power(cluster, &eta, power, edu_of_ap);
    let p_tot = total_power(&p_ap, power);
    let ee_inst = instantaneous_ee(&rate, p_tot, bandwidth)?;
    Ok(SlotPhyResult {
        sinr,
        rate,
        p_ap,
        p_tot,
        ee_inst,
    })
}
