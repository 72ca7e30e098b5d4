//! MMSE channel-estimation quality and a Monte Carlo use-and-then-forget
//! SINR oracle that builds the local full-pilot zero-forcing precoders
//! explicitly from sampled channel estimates.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::par::*;
use crate::phy::ClusterMatrix;
use crate::rng;
use crate::topology::{LargeScaleState, Topology};

/// γ, K×L, noise-normalized estimate powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationQuality {
    pub gamma: Grid,
}

/// γ[k][l] = τ_p ρ_p β[k][l]² / (τ_p ρ_p Σ_{i∈𝒫_k} β[i][l] + 1).
pub fn estimation_quality(
    lsf: &LargeScaleState,
    pilot_sharing: &[Vec<usize>],
    tau_p: usize,
    rho_p: f64,
) -> EstimationQuality {
    let beta = &lsf.beta;
    let snr = tau_p as f64 * rho_p;
    let gamma = Grid::from_fn(beta.rows(), beta.cols(), |k, l| {
        let b = beta[(k, l)];
        let contaminated: f64 = pilot_sharing[k].iter().map(|&i| beta[(i, l)]).sum();
        let g = snr * b * b / (snr * contaminated + 1.0);
        debug_assert!(g <= b * (1.0 + 1e-12), "gamma exceeds beta at ({k}, {l})");
        g
    });
    EstimationQuality { gamma }
}

/// Realizations per work item; partial sums are merged in chunk order so the
/// result does not depend on the thread count.
const CHUNK: usize = 256;
/// Minimum pre-pass size for the precoder normalization.
pub const MIN_NORMALIZATION_REALIZATIONS: usize = 500;

/// Inputs of the Monte Carlo oracle beyond the association itself.
#[derive(Debug, Clone, Copy)]
pub struct OracleSetup<'a> {
    pub lsf: &'a LargeScaleState,
    pub est: &'a EstimationQuality,
    pub topo: &'a Topology,
    pub antennas: usize,
    pub tau_p: usize,
    /// Downlink power, watts.
    pub rho_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McOutcome {
    pub sinr: Vec<f64>,
    pub used: usize,
    pub skipped: usize,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Pilot-observation directions at one AP: N×τ_p with i.i.d. CN(0, 1)
/// entries. Each column is the pilot correlation output up to a positive
/// scale, which the zero-forcing precoder ignores.
fn pilot_subspace<R: Rng + ?Sized>(rng: &mut R, antennas: usize, tau_p: usize) -> DMatrix<Complex64> {
    DMatrix::from_fn(antennas, tau_p, |_, _| complex_normal(rng, 1.0))
}

/// Unnormalized FZF directions Ĝ(ĜᴴĜ)⁻¹ and the diagonal of (ĜᴴĜ)⁻¹,
/// or `None` when the Gram matrix is numerically singular.
fn zero_forcing(g: &DMatrix<Complex64>) -> Option<(DMatrix<Complex64>, Vec<f64>)> {
    let gram = g.adjoint() * g;
    let inv = gram.cholesky()?.inverse();
    let diag = (0..inv.nrows()).map(|p| inv[(p, p)].re).collect();
    Some((g * inv, diag))
}

/// E‖Ĝ(ĜᴴĜ)⁻¹e_p‖² per (AP, pilot), estimated by sampling.
fn precoder_normalization(setup: &OracleSetup<'_>, n: usize, seed: u64) -> Result<Grid> {
    let aps = setup.topo.num_aps();
    let mut sums = Grid::zeros(aps, setup.tau_p);
    let mut used = 0usize;
    for r in 0..n {
        let mut stream = rng::indexed(seed, rng::MC_NORMALIZATION, r as u64);
        let mut diags = Vec::with_capacity(aps);
        for _ in 0..aps {
            let g = pilot_subspace(&mut stream, setup.antennas, setup.tau_p);
            match zero_forcing(&g) {
                Some((_, d)) => diags.push(d),
                None => break,
            }
        }
        if diags.len() < aps {
            continue;
        }
        used += 1;
        for (l, d) in diags.iter().enumerate() {
            for (p, v) in d.iter().enumerate() {
                sums[(l, p)] += v;
            }
        }
    }
    if used == 0 || (n - used) * 100 > n {
        return Err(Error::TooManySingular {
            skipped: n - used,
            total: n,
        });
    }
    Ok(sums.map(|s| s / used as f64))
}

struct Partial {
    desired: Vec<Complex64>,
    power: Vec<f64>,
    used: usize,
}

/// Empirical UatF SINR of every UE under association `cluster` and power
/// coefficients `eta_bar`, from `n_real` channel realizations.
///
/// The error part g̃ᴴw is zero-mean and independent of the estimate part ĝᴴw,
/// so the desired-signal mean uses ĝᴴw only and every E|b|² is accumulated as
/// E|ĝᴴw|² + E|g̃ᴴw|² without the zero-mean cross term.
pub fn mc_uatf_sinr(
    setup: &OracleSetup<'_>,
    cluster: &ClusterMatrix,
    eta_bar: &Grid,
    n_real: usize,
    seed: u64,
) -> Result<McOutcome> {
    let topo = setup.topo;
    let (ues, aps) = (topo.num_ues(), topo.num_aps());
    let n_real = n_real.max(1);
    let norm = precoder_normalization(
        setup,
        n_real.max(MIN_NORMALIZATION_REALIZATIONS),
        seed,
    )?;
    let beta = &setup.lsf.beta;
    let gamma = &setup.est.gamma;
    let amp = Grid::from_fn(ues, aps, |k, l| {
        if cluster.get(k, l) {
            (setup.rho_d * eta_bar[(k, l)].max(0.0)).sqrt()
        } else {
            0.0
        }
    });
    let n_ant = setup.antennas;

    let run_chunk = |chunk: usize| -> Partial {
        let mut part = Partial {
            desired: vec![Complex64::new(0.0, 0.0); ues],
            power: vec![0.0; ues],
            used: 0,
        };
        let start = chunk * CHUNK;
        let end = (start + CHUNK).min(n_real);
        let mut b_hat = vec![Complex64::new(0.0, 0.0); ues];
        let mut b_err = vec![Complex64::new(0.0, 0.0); ues];
        'realization: for r in start..end {
            let mut stream = rng::indexed(seed, rng::MONTE_CARLO, r as u64);
            let mut subspaces = Vec::with_capacity(aps);
            let mut precoders = Vec::with_capacity(aps);
            for l in 0..aps {
                let g = pilot_subspace(&mut stream, n_ant, setup.tau_p);
                let Some((mut v, _)) = zero_forcing(&g) else {
                    continue 'realization;
                };
                for p in 0..setup.tau_p {
                    let s = norm[(l, p)].sqrt();
                    v.column_mut(p).unscale_mut(s);
                }
                subspaces.push(g);
                precoders.push(v);
            }
            part.used += 1;
            for k in 0..ues {
                let pk = topo.pilot_of_ue[k];
                b_hat.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0));
                b_err.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0));
                for l in 0..aps {
                    let sg = gamma[(k, l)].sqrt();
                    let err_var = (beta[(k, l)] - gamma[(k, l)]).max(0.0);
                    let est: Vec<Complex64> =
                        subspaces[l].column(pk).iter().map(|z| z * sg).collect();
                    let err: Vec<Complex64> =
                        (0..n_ant).map(|_| complex_normal(&mut stream, err_var)).collect();
                    for i in 0..ues {
                        let a = amp[(i, l)];
                        if a == 0.0 {
                            continue;
                        }
                        let w = precoders[l].column(topo.pilot_of_ue[i]);
                        let mut hat = Complex64::new(0.0, 0.0);
                        let mut tilde = Complex64::new(0.0, 0.0);
                        for n in 0..n_ant {
                            hat += est[n].conj() * w[n];
                            tilde += err[n].conj() * w[n];
                        }
                        b_hat[i] += a * hat;
                        b_err[i] += a * tilde;
                    }
                }
                part.desired[k] += b_hat[k];
                part.power[k] += b_hat
                    .iter()
                    .zip(&b_err)
                    .map(|(h, e)| h.norm_sqr() + e.norm_sqr())
                    .sum::<f64>();
            }
        }
        part
    };

    let n_chunks = n_real.div_ceil(CHUNK);
    let parts: Vec<Partial> = (0..n_chunks).into_par_iter().map(run_chunk).collect();

    let mut desired = vec![Complex64::new(0.0, 0.0); ues];
    let mut power = vec![0.0; ues];
    let mut used = 0;
    for p in &parts {
        used += p.used;
        for k in 0..ues {
            desired[k] += p.desired[k];
            power[k] += p.power[k];
        }
    }
    let skipped = n_real - used;
    if used == 0 || skipped * 100 > n_real {
        return Err(Error::TooManySingular {
            skipped,
            total: n_real,
        });
    }
    let n = used as f64;
    let sinr = (0..ues)
        .map(|k| {
            let mean_sq = (desired[k] / n).norm_sqr();
            let total = power[k] / n;
            mean_sq / ((total - mean_sq).max(0.0) + 1.0)
        })
        .collect();
    Ok(McOutcome {
        sinr,
        used,
        skipped,
    })
}
