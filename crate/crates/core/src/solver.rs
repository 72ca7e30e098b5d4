//! Per-slot clustering problem: maximize `V·EE + Σ θ_k R̂_k` over binary
//! associations.
//!
//! The association is relaxed to the box [0,1]^{K×L} and a concave penalty
//! `ρ Σ (a − a²)` pushes the relaxed solution back towards binary values.
//! The energy-efficiency ratio is handled with the quadratic transform, and
//! each SCA iteration maximizes a minorizer built from a proximal
//! linearization of every rate and a linearization of `a²`; a doubling
//! proximal weight restores the ascent property whenever the minorizer is
//! violated. The final relaxed point is thresholded at 1/2, compared with the
//! thresholded warm start, and refined by single-entry flips on the exact
//! binary objective.
//!
//! Relaxed power sharing uses amplitudes `u_{k,l} = a_{k,l}/√(1 + Σ_{i≠k} a_{i,l}²)`,
//! i.e. `η̄ = u²`. At binary points this is exactly `1/|𝓚_l|` on served links and
//! zero elsewhere, and unlike `a/(Σa + δ)` it is smooth on the whole box,
//! including the `√η̄` in the coherent gain.

use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::phy::{
    evaluate_slot, fbl_rate, fbl_rate_slope, ClusterMatrix, FblParams, LinkBudget, PowerParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    /// Drift-plus-penalty weight on energy efficiency.
    #[serde(rename = "V", alias = "v")]
    pub v: f64,
    /// Binary-penalty weight ρ.
    pub rho_pen: f64,
    pub j_max: usize,
    pub eps_sca: f64,
    /// Initial proximal weight μ.
    pub mu0: f64,
    pub inner_iters: usize,
    pub inner_tol: f64,
    /// Cap on greedy single-flip rounds after projection; 0 disables.
    pub polish_rounds: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            v: 5.0,
            rho_pen: 1.0,
            j_max: 20,
            eps_sca: 1e-3,
            mu0: 1.0,
            inner_iters: 200,
            inner_tol: 1e-4,
            polish_rounds: 50,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.v > 0.0)
            || self.rho_pen < 0.0
            || self.j_max == 0
            || !(self.eps_sca > 0.0)
            || !(self.mu0 > 0.0)
            || !(self.inner_tol > 0.0)
        {
            return Err(crate::Error::Config(format!("invalid solver parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Everything about one slot that does not depend on the association.
#[derive(Debug, Clone)]
pub struct SlotInputs {
    pub link: LinkBudget,
    pub fbl: FblParams,
    pub power: PowerParams,
    pub edu_of_ap: Vec<usize>,
    /// ρ_d/α per AP.
    pub tx_factor: Vec<f64>,
    /// Bandwidth in the units energy efficiency is expressed in.
    pub bandwidth: f64,
}

impl SlotInputs {
    pub fn new(link: LinkBudget, fbl: FblParams, power: PowerParams, edu_of_ap: Vec<usize>, bandwidth: f64) -> Self {
        let tx_factor = power.tx_factor_per_ap(&edu_of_ap);
        Self {
            link,
            fbl,
            power,
            edu_of_ap,
            tx_factor,
            bandwidth,
        }
    }

    pub fn num_ues(&self) -> usize {
        self.link.num_ues()
    }

    pub fn num_aps(&self) -> usize {
        self.link.num_aps()
    }
}

/// Relaxed power coefficients η̄ = u².
pub fn relaxed_eta(x: &Grid) -> Grid {
    relaxed_amplitudes(x).map(|u| u * u)
}

fn relaxed_amplitudes(x: &Grid) -> Grid {
    let (ues, aps) = (x.rows(), x.cols());
    let col_sq: Vec<f64> = (0..aps)
        .map(|l| (0..ues).map(|i| x[(i, l)] * x[(i, l)]).sum())
        .collect();
    Grid::from_fn(ues, aps, |k, l| {
        let a = x[(k, l)];
        a / (1.0 + col_sq[l] - a * a).sqrt()
    })
}

/// Rates, power and their ingredients at a relaxed point.
#[derive(Debug, Clone)]
pub struct RelaxedEval {
    pub sinr: Vec<f64>,
    pub rate: Vec<f64>,
    pub sum_rate: f64,
    pub p_tot: f64,
}

pub fn evaluate_relaxed(inputs: &SlotInputs, x: &Grid) -> RelaxedEval {
    let amp = relaxed_amplitudes(x);
    let sinr = inputs.link.sinr_from_amplitudes(&amp);
    let rate: Vec<f64> = sinr.iter().map(|&s| fbl_rate(s, &inputs.fbl)).collect();
    RelaxedEval {
        sum_rate: rate.iter().sum(),
        p_tot: relaxed_power(inputs, x, &amp),
        sinr,
        rate,
    }
}

fn relaxed_power(inputs: &SlotInputs, x: &Grid, amp: &Grid) -> f64 {
    let p = &inputs.power;
    let mut total = p.p_edu;
    for l in 0..x.cols() {
        let mut share = 0.0;
        let mut links = 0.0;
        for k in 0..x.rows() {
            share += amp[(k, l)] * amp[(k, l)];
            links += x[(k, l)];
        }
        total += inputs.tx_factor[l] * share + p.p_link * links + p.p_cir;
    }
    total
}

/// Total power and its gradient.
fn power_and_grad(inputs: &SlotInputs, x: &Grid) -> (f64, Grid) {
    let amp = relaxed_amplitudes(x);
    let p_tot = relaxed_power(inputs, x, &amp);
    let (ues, aps) = (x.rows(), x.cols());
    let mut grad = Grid::zeros(ues, aps);
    for l in 0..aps {
        let col_sq: f64 = (0..ues).map(|i| x[(i, l)] * x[(i, l)]).sum();
        // ∂(Σ_i u_i²)/∂a_j = 2u_j/√d_j − 2a_j Σ_{i≠j} u_i a_i/d_i^{3/2}.
        let mut cross = 0.0;
        let mut own = vec![0.0; ues];
        for (i, o) in own.iter_mut().enumerate() {
            let ai = x[(i, l)];
            let d = 1.0 + col_sq - ai * ai;
            *o = amp[(i, l)] * ai / (d * d.sqrt());
            cross += *o;
        }
        for j in 0..ues {
            let aj = x[(j, l)];
            let dj = 1.0 + col_sq - aj * aj;
            let d_share = 2.0 * amp[(j, l)] / dj.sqrt() - 2.0 * aj * (cross - own[j]);
            grad[(j, l)] = inputs.tx_factor[l] * d_share + inputs.power.p_link;
        }
    }
    (p_tot, grad)
}

/// ∂u_{i,l}/∂a_{j,l} for all i, written into `out`.
fn amplitude_partials(x: &Grid, l: usize, j: usize, col_sq: f64, out: &mut [f64]) {
    let aj = x[(j, l)];
    for (i, o) in out.iter_mut().enumerate() {
        let ai = x[(i, l)];
        let d = 1.0 + col_sq - ai * ai;
        *o = if i == j {
            1.0 / d.sqrt()
        } else {
            -ai * aj / (d * d.sqrt())
        };
    }
}

/// Rates and the gradient of every UE's rate with respect to the whole
/// relaxed association.
pub fn rate_gradients(inputs: &SlotInputs, x: &Grid) -> (RelaxedEval, Vec<Grid>) {
    let link = &inputs.link;
    let (ues, aps) = (x.rows(), x.cols());
    let amp = relaxed_amplitudes(x);
    let gain = link.rho_d * link.array_gain;

    let tx_share: Vec<f64> = (0..aps)
        .map(|l| (0..ues).map(|i| amp[(i, l)] * amp[(i, l)]).sum())
        .collect();
    let mut desired = vec![0.0; ues];
    let mut num = vec![0.0; ues];
    let mut den = vec![0.0; ues];
    // Coherent amplitude sums C_{k,i}, aligned with link.co_pilot[k].
    let mut coherent: Vec<Vec<f64>> = Vec::with_capacity(ues);
    for k in 0..ues {
        let mut a_k = 0.0;
        let mut leak = 0.0;
        for l in 0..aps {
            a_k += amp[(k, l)] * link.sqrt_gamma[(k, l)];
            leak += link.leakage[(k, l)] * tx_share[l];
        }
        let c: Vec<f64> = link.co_pilot[k]
            .iter()
            .map(|&i| (0..aps).map(|l| amp[(i, l)] * link.sqrt_contamination[(k, l)]).sum())
            .collect();
        desired[k] = a_k;
        num[k] = gain * a_k * a_k;
        den[k] = link.rho_d * leak + gain * c.iter().map(|v| v * v).sum::<f64>() + 1.0;
        coherent.push(c);
    }
    let sinr: Vec<f64> = (0..ues).map(|k| num[k] / den[k]).collect();
    let rate: Vec<f64> = sinr.iter().map(|&s| fbl_rate(s, &inputs.fbl)).collect();
    let slope: Vec<f64> = sinr.iter().map(|&s| fbl_rate_slope(s, &inputs.fbl)).collect();

    let mut grads = vec![Grid::zeros(ues, aps); ues];
    let mut w = vec![0.0; ues];
    for l in 0..aps {
        let col_sq: f64 = (0..ues).map(|i| x[(i, l)] * x[(i, l)]).sum();
        for j in 0..ues {
            amplitude_partials(x, l, j, col_sq, &mut w);
            let d_share: f64 = (0..ues).map(|i| 2.0 * amp[(i, l)] * w[i]).sum();
            for k in 0..ues {
                if slope[k] == 0.0 {
                    continue;
                }
                let d_num = gain * 2.0 * desired[k] * link.sqrt_gamma[(k, l)] * w[k];
                let d_coh: f64 = link.co_pilot[k]
                    .iter()
                    .zip(&coherent[k])
                    .map(|(&i, &c)| 2.0 * c * link.sqrt_contamination[(k, l)] * w[i])
                    .sum();
                let d_den = link.rho_d * link.leakage[(k, l)] * d_share + gain * d_coh;
                let d_sinr = (d_num * den[k] - num[k] * d_den) / (den[k] * den[k]);
                grads[k][(j, l)] = slope[k] * d_sinr;
            }
        }
    }
    let eval = RelaxedEval {
        sum_rate: rate.iter().sum(),
        p_tot: relaxed_power(inputs, x, &amp),
        sinr,
        rate,
    };
    (eval, grads)
}

/// ρ Σ (a − a²).
pub fn binary_penalty(x: &Grid, rho_pen: f64) -> f64 {
    rho_pen * x.iter().map(|&a| a - a * a).sum::<f64>()
}

/// Quadratic-transform objective at fixed auxiliary `y`:
/// `2y√(V·B·R_sum) − y²·P_tot + Σ θ_k R̂_k − ρ Σ (a − a²)`.
pub fn relaxed_objective(inputs: &SlotInputs, x: &Grid, y: f64, theta: &[f64], params: &SolverParams) -> f64 {
    let e = evaluate_relaxed(inputs, x);
    transform_value(&e, y, params.v * inputs.bandwidth) + weighted_rate(&e.rate, theta)
        - y * y * e.p_tot
        - binary_penalty(x, params.rho_pen)
}

/// [`relaxed_objective`] and its gradient.
pub fn relaxed_objective_grad(
    inputs: &SlotInputs,
    x: &Grid,
    y: f64,
    theta: &[f64],
    params: &SolverParams,
) -> (f64, Grid) {
    let (e, grads) = rate_gradients(inputs, x);
    let (p_tot, p_grad) = power_and_grad(inputs, x);
    let vb = params.v * inputs.bandwidth;
    let value = transform_value(&e, y, vb) - y * y * p_tot + weighted_rate(&e.rate, theta)
        - binary_penalty(x, params.rho_pen);
    let mut g = Grid::zeros(x.rows(), x.cols());
    let sqrt_coeff = if e.sum_rate > 0.0 {
        y * vb.sqrt() / e.sum_rate.sqrt()
    } else {
        0.0
    };
    for (k, gk) in grads.iter().enumerate() {
        g.axpy(sqrt_coeff + theta[k], gk);
    }
    g.axpy(-y * y, &p_grad);
    for (gi, &a) in g.as_mut_slice().iter_mut().zip(x.iter()) {
        *gi -= params.rho_pen * (1.0 - 2.0 * a);
    }
    (value, g)
}

fn transform_value(e: &RelaxedEval, y: f64, vb: f64) -> f64 {
    2.0 * y * (vb * e.sum_rate.max(0.0)).sqrt()
}

fn weighted_rate(rate: &[f64], theta: &[f64]) -> f64 {
    rate.iter().zip(theta).map(|(r, t)| r * t).sum()
}

/// y* = √(V·B·R_sum)/P_tot.
pub fn optimal_y(sum_rate: f64, p_tot: f64, v: f64, bandwidth: f64) -> f64 {
    (v * bandwidth * sum_rate.max(0.0)).sqrt() / p_tot
}

/// Relaxed objective with y at its optimum:
/// `V·B·R_sum/P_tot + Σ θ_k R̂_k − ρ Σ (a − a²)`.
pub fn relaxed_value(inputs: &SlotInputs, x: &Grid, theta: &[f64], params: &SolverParams) -> f64 {
    let e = evaluate_relaxed(inputs, x);
    params.v * inputs.bandwidth * e.sum_rate / e.p_tot + weighted_rate(&e.rate, theta)
        - binary_penalty(x, params.rho_pen)
}

/// SCA minorizer of the quadratic-transform objective around `x_ref`.
pub struct Surrogate<'a> {
    inputs: &'a SlotInputs,
    x_ref: Grid,
    sum_rate_ref: f64,
    weighted_ref: f64,
    grad_sum: Grid,
    grad_weighted: Grid,
    theta_total: f64,
    ues: f64,
    mu: f64,
    y: f64,
    vb: f64,
    rho_pen: f64,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        inputs: &'a SlotInputs,
        x_ref: &Grid,
        y: f64,
        mu: f64,
        theta: &[f64],
        params: &SolverParams,
    ) -> Self {
        let (eval, grads) = rate_gradients(inputs, x_ref);
        Self::from_parts(inputs, x_ref, &eval, &grads, y, mu, theta, params)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        inputs: &'a SlotInputs,
        x_ref: &Grid,
        eval: &RelaxedEval,
        grads: &[Grid],
        y: f64,
        mu: f64,
        theta: &[f64],
        params: &SolverParams,
    ) -> Self {
        let (ues, aps) = (x_ref.rows(), x_ref.cols());
        let mut grad_sum = Grid::zeros(ues, aps);
        let mut grad_weighted = Grid::zeros(ues, aps);
        for (k, g) in grads.iter().enumerate() {
            grad_sum.axpy(1.0, g);
            grad_weighted.axpy(theta[k], g);
        }
        Self {
            inputs,
            x_ref: x_ref.clone(),
            sum_rate_ref: eval.sum_rate,
            weighted_ref: weighted_rate(&eval.rate, theta),
            grad_sum,
            grad_weighted,
            theta_total: theta.iter().sum(),
            ues: ues as f64,
            mu,
            y,
            vb: params.v * inputs.bandwidth,
            rho_pen: params.rho_pen,
        }
    }

    /// Surrogate sum rate Σ_k R̃_k at `x`.
    pub fn sum_rate(&self, x: &Grid) -> f64 {
        let (lin, sq) = self.displacement(x);
        self.sum_rate_ref + self.grad_sum.dot(&lin) - 0.5 * self.mu * self.ues * sq
    }

    fn displacement(&self, x: &Grid) -> (Grid, f64) {
        let mut dx = x.clone();
        dx.axpy(-1.0, &self.x_ref);
        let sq = dx.dot(&dx);
        (dx, sq)
    }

    pub fn value_grad(&self, x: &Grid) -> (f64, Grid) {
        let (dx, sq) = self.displacement(x);
        let half_mu = 0.5 * self.mu;
        let sum_rate = self.sum_rate_ref + self.grad_sum.dot(&dx) - half_mu * self.ues * sq;
        let weighted = self.weighted_ref + self.grad_weighted.dot(&dx) - half_mu * self.theta_total * sq;
        let (p_tot, p_grad) = power_and_grad(self.inputs, x);

        let mut value = weighted - self.y * self.y * p_tot;
        let mut grad = self.grad_weighted.clone();
        grad.axpy(-self.mu * self.theta_total, &dx);
        grad.axpy(-self.y * self.y, &p_grad);

        // √ of a concave nonnegative function; flat where it would go negative.
        if sum_rate > 0.0 && self.y > 0.0 {
            value += 2.0 * self.y * (self.vb * sum_rate).sqrt();
            let c = self.y * self.vb.sqrt() / sum_rate.sqrt();
            grad.axpy(c, &self.grad_sum);
            grad.axpy(-c * self.mu * self.ues, &dx);
        }

        // a² linearized at the reference: the penalty becomes affine.
        for ((g, &a), &a_ref) in grad.as_mut_slice().iter_mut().zip(x.iter()).zip(self.x_ref.iter()) {
            let lin_sq = a_ref * a_ref + 2.0 * a_ref * (a - a_ref);
            value -= self.rho_pen * (a - lin_sq);
            *g -= self.rho_pen * (1.0 - 2.0 * a_ref);
        }
        (value, grad)
    }
}

/// Feasible region of the relaxed association.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelaxedSet {
    /// [0,1]^{K×L}.
    Box,
    /// The box intersected with `Σ_l a_{k,l} ≥ 1` for every row: the convex
    /// hull of associations that leave no UE unserved.
    ServedBox,
}

impl RelaxedSet {
    /// Euclidean projection, row by row.
    pub fn project(self, x: &mut Grid) {
        for a in x.as_mut_slice() {
            *a = a.clamp(0.0, 1.0);
        }
        if self == RelaxedSet::Box {
            return;
        }
        for k in 0..x.rows() {
            let row = x.row_mut(k);
            if row.iter().sum::<f64>() >= 1.0 {
                continue;
            }
            // Shift the row up by λ until the clamped sum reaches 1.
            let shifted = |row: &[f64], lam: f64| row.iter().map(|a| (a + lam).clamp(0.0, 1.0)).sum::<f64>();
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if shifted(row, mid) < 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            for a in row.iter_mut() {
                *a = (*a + hi).clamp(0.0, 1.0);
            }
        }
    }
}

/// Projected gradient ascent over `set` with Armijo backtracking.
/// Stops when the projected-gradient step `‖P(x + ∇f) − x‖` falls to `tol`
/// or an accepted step gains less than `tol · max(1, |f|)`.
/// The returned value is never below `f(P(x_init))`.
pub fn inner_maximize(
    f: impl Fn(&Grid) -> (f64, Grid),
    x_init: &Grid,
    set: RelaxedSet,
    max_iters: usize,
    tol: f64,
) -> Grid {
    const ARMIJO: f64 = 1e-4;
    let mut x = x_init.clone();
    set.project(&mut x);
    let (mut fx, mut g) = f(&x);
    let mut step = 1.0;
    for _ in 0..max_iters {
        let mut probe = x.clone();
        probe.axpy(1.0, &g);
        set.project(&mut probe);
        if probe.dist_sq(&x).sqrt() <= tol {
            break;
        }
        let mut accepted = None;
        while step > 1e-14 {
            let mut cand = x.clone();
            cand.axpy(step, &g);
            set.project(&mut cand);
            let mut dx = cand.clone();
            dx.axpy(-1.0, &x);
            let (fc, gc) = f(&cand);
            if fc >= fx + ARMIJO * g.dot(&dx) && fc >= fx {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else {
            break;
        };
        let stalled = fc - fx <= tol * fx.abs().max(1.0);
        step *= 2.0;
        x = cand;
        fx = fc;
        g = gc;
        if stalled {
            break;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaOutcome {
    pub x: Grid,
    /// Relaxed objective (optimal y) after each accepted iterate, starting
    /// with the warm start.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub mu_escalations: usize,
}

const MAX_ESCALATIONS: usize = 40;

/// Two-block SCA: closed-form y, then one surrogate maximization per
/// iteration, until the relative surrogate gain drops below `eps_sca` or
/// `j_max` iterations have run.
pub fn sca_solve(inputs: &SlotInputs, theta: &[f64], params: &SolverParams, warm: &Grid) -> ScaOutcome {
    let mut x = warm.clone();
    RelaxedSet::ServedBox.project(&mut x);
    let mut mu = params.mu0;
    let mut trace = vec![relaxed_value(inputs, &x, theta, params)];
    let mut iterations = 0;
    let mut escalations = 0;

    for _ in 0..params.j_max {
        let step = sca_step(inputs, &x, mu, theta, params);
        escalations += step.escalations;
        iterations += 1;
        let Some(cand) = step.next else {
            break;
        };
        x = cand;
        trace.push(relaxed_value(inputs, &x, theta, params));
        if step.gain / step.current.abs().max(1e-12) < params.eps_sca {
            break;
        }
        mu = if step.escalations == 0 {
            (step.mu * 0.5).max(params.mu0)
        } else {
            step.mu
        };
    }
    ScaOutcome {
        x,
        trace,
        iterations,
        mu_escalations: escalations,
    }
}

/// One outer iteration: closed-form y, then surrogate maximizations with
/// doubling μ until the step is an MM ascent step.
#[derive(Debug, Clone)]
pub struct ScaStep {
    /// None if no μ up to the escalation cap produced an ascent step.
    pub next: Option<Grid>,
    /// Accepted (or last tried) proximal weight.
    pub mu: f64,
    pub escalations: usize,
    /// Relaxed objective at the reference with the step's y.
    pub current: f64,
    /// Surrogate gain of the accepted point over `current`.
    pub gain: f64,
}

pub fn sca_step(inputs: &SlotInputs, x: &Grid, mu0: f64, theta: &[f64], params: &SolverParams) -> ScaStep {
    let (eval, grads) = rate_gradients(inputs, x);
    let y = optimal_y(eval.sum_rate, eval.p_tot, params.v, inputs.bandwidth);
    let current = relaxed_objective(inputs, x, y, theta, params);
    let mut mu = mu0;
    for escalations in 0..=MAX_ESCALATIONS {
        let sur = Surrogate::from_parts(inputs, x, &eval, &grads, y, mu, theta, params);
        let cand = inner_maximize(
            |z| sur.value_grad(z),
            x,
            RelaxedSet::ServedBox,
            params.inner_iters,
            params.inner_tol,
        );
        if relaxed_objective(inputs, &cand, y, theta, params) >= current
            && minorizes(inputs, x, &cand, &eval, &grads, mu)
        {
            return ScaStep {
                gain: sur.value_grad(&cand).0 - current,
                next: Some(cand),
                mu,
                escalations,
                current,
            };
        }
        mu *= 2.0;
    }
    ScaStep {
        next: None,
        mu,
        escalations: MAX_ESCALATIONS + 1,
        current,
        gain: 0.0,
    }
}

/// Points checked on the segment from the reference to a candidate.
const SEGMENT_CHECKS: usize = 5;

/// Whether every proximal rate bound stays below the exact rate at the
/// candidate and at evenly spaced interior points of the segment.
fn minorizes(inputs: &SlotInputs, x_ref: &Grid, cand: &Grid, eval: &RelaxedEval, grads: &[Grid], mu: f64) -> bool {
    (1..=SEGMENT_CHECKS + 1).all(|s| {
        let t = s as f64 / (SEGMENT_CHECKS + 1) as f64;
        let mut dz = cand.clone();
        dz.axpy(-1.0, x_ref);
        let scale = t;
        let mut z = x_ref.clone();
        z.axpy(scale, &dz);
        let sq = scale * scale * dz.dot(&dz);
        let exact = evaluate_relaxed(inputs, &z);
        (0..eval.rate.len()).all(|k| {
            let bound = eval.rate[k] + scale * grads[k].dot(&dz) - 0.5 * mu * sq;
            bound <= exact.rate[k] + 1e-12 * exact.rate[k].abs().max(1.0)
        })
    })
}

/// Threshold at 1/2 (ties go to 1); any UE left without an AP gets the AP
/// with the best estimate quality.
pub fn project_binary(x: &Grid, gamma: &Grid) -> ClusterMatrix {
    let mut c = ClusterMatrix::from_grid(x.map(|&a| a >= 0.5));
    for k in 0..x.rows() {
        if c.cluster_size(k) == 0 {
            let best = (0..x.cols())
                .fold(0, |b, l| if gamma[(k, l)] > gamma[(k, b)] { l } else { b });
            c.set(k, best, true);
        }
    }
    c
}

/// One-hot association with each UE's best-γ AP.
pub fn nearest_ap_start(gamma: &Grid) -> Grid {
    let mut x = Grid::zeros(gamma.rows(), gamma.cols());
    for k in 0..gamma.rows() {
        let best = (0..gamma.cols()).fold(0, |b, l| if gamma[(k, l)] > gamma[(k, b)] { l } else { b });
        x[(k, best)] = 1.0;
    }
    x
}

/// P2 objective of a binary association: `V·EE + Σ θ_k R̂_k`.
pub fn p2_objective(inputs: &SlotInputs, cluster: &ClusterMatrix, theta: &[f64], v: f64) -> f64 {
    let phy = evaluate_slot(
        &inputs.link,
        cluster,
        &inputs.power,
        &inputs.edu_of_ap,
        &inputs.fbl,
        inputs.bandwidth,
    )
    .expect("total power includes the positive circuit terms");
    v * phy.ee_inst + weighted_rate(&phy.rate, theta)
}

/// Per-UE signal aggregates of a binary association, so that the P2 value
/// after a single flip costs O(K · co-pilots) instead of a full evaluation.
struct FlipEvaluator<'a> {
    inputs: &'a SlotInputs,
    theta: &'a [f64],
    v: f64,
    loads: Vec<usize>,
    desired: Vec<f64>,
    leak: Vec<f64>,
    /// Coherent sums, aligned with `link.co_pilot[k]`.
    coherent: Vec<Vec<f64>>,
    p_tot: f64,
}

impl<'a> FlipEvaluator<'a> {
    fn new(inputs: &'a SlotInputs, cluster: &ClusterMatrix, theta: &'a [f64], v: f64) -> Self {
        let link = &inputs.link;
        let (ues, aps) = (cluster.num_ues(), cluster.num_aps());
        let loads: Vec<usize> = (0..aps).map(|l| cluster.load(l)).collect();
        let amp = |i: usize, l: usize| if cluster.get(i, l) { 1.0 / (loads[l] as f64).sqrt() } else { 0.0 };
        let mut desired = vec![0.0; ues];
        let mut leak = vec![0.0; ues];
        let mut coherent = Vec::with_capacity(ues);
        for k in 0..ues {
            for (l, &load) in loads.iter().enumerate() {
                desired[k] += amp(k, l) * link.sqrt_gamma[(k, l)];
                if load > 0 {
                    leak[k] += link.leakage[(k, l)];
                }
            }
            coherent.push(
                link.co_pilot[k]
                    .iter()
                    .map(|&i| (0..aps).map(|l| amp(i, l) * link.sqrt_contamination[(k, l)]).sum())
                    .collect(),
            );
        }
        let p = &inputs.power;
        let p_tot = p.p_edu
            + (0..aps)
                .map(|l| {
                    let active = if loads[l] > 0 { inputs.tx_factor[l] } else { 0.0 };
                    active + p.p_link * loads[l] as f64 + p.p_cir
                })
                .sum::<f64>();
        Self { inputs, theta, v, loads, desired, leak, coherent, p_tot }
    }

    /// P2 objective after toggling `(k, l)` of `cluster`, which must be the
    /// association this evaluator was built from.
    fn flipped_value(&self, cluster: &ClusterMatrix, k: usize, l: usize, du: &mut [f64]) -> f64 {
        let link = &self.inputs.link;
        let on = cluster.get(k, l);
        let (n, n_new) = (self.loads[l], if on { self.loads[l] - 1 } else { self.loads[l] + 1 });
        let share = |m: usize| if m > 0 { 1.0 } else { 0.0 };
        let amp = |m: usize| if m > 0 { 1.0 / (m as f64).sqrt() } else { 0.0 };
        for (i, d) in du.iter_mut().enumerate() {
            let before = cluster.get(i, l);
            let after = if i == k { !on } else { before };
            *d = if after { amp(n_new) } else { 0.0 } - if before { amp(n) } else { 0.0 };
        }
        let d_share = share(n_new) - share(n);
        let p = &self.inputs.power;
        let p_tot = self.p_tot + self.inputs.tx_factor[l] * d_share + p.p_link * (n_new as f64 - n as f64);

        let gain = link.rho_d * link.array_gain;
        let mut sum_rate = 0.0;
        let mut weighted = 0.0;
        for i in 0..du.len() {
            let desired = self.desired[i] + du[i] * link.sqrt_gamma[(i, l)];
            let leak = self.leak[i] + link.leakage[(i, l)] * d_share;
            let coherent: f64 = link.co_pilot[i]
                .iter()
                .zip(&self.coherent[i])
                .map(|(&j, &c)| {
                    let c = c + du[j] * link.sqrt_contamination[(i, l)];
                    c * c
                })
                .sum();
            let sinr = gain * desired * desired / (link.rho_d * leak + gain * coherent + 1.0);
            let rate = fbl_rate(sinr, &self.inputs.fbl);
            sum_rate += rate;
            weighted += self.theta[i] * rate;
        }
        self.v * self.inputs.bandwidth * sum_rate / p_tot + weighted
    }
}

/// Best-improvement single-entry flips on the exact P2 objective, keeping
/// every UE served, until no flip helps or `max_rounds` is reached.
/// Returns the number of flips applied.
pub fn polish_binary(
    inputs: &SlotInputs,
    cluster: &mut ClusterMatrix,
    theta: &[f64],
    v: f64,
    max_rounds: usize,
) -> usize {
    let mut current = p2_objective(inputs, cluster, theta, v);
    let mut flips = 0;
    let mut du = vec![0.0; cluster.num_ues()];
    for _ in 0..max_rounds {
        let eval = FlipEvaluator::new(inputs, cluster, theta, v);
        let mut best: Option<(usize, usize, f64)> = None;
        for k in 0..cluster.num_ues() {
            for l in 0..cluster.num_aps() {
                if cluster.get(k, l) && cluster.cluster_size(k) == 1 {
                    continue;
                }
                let value = eval.flipped_value(cluster, k, l, &mut du);
                if value > best.map_or(current, |b| b.2) {
                    best = Some((k, l, value));
                }
            }
        }
        let Some((k, l, _)) = best else { break };
        let on = cluster.get(k, l);
        cluster.set(k, l, !on);
        let value = p2_objective(inputs, cluster, theta, v);
        if value <= current {
            // Rounding disagreement on a near-tie: undo and stop.
            cluster.set(k, l, on);
            break;
        }
        current = value;
        flips += 1;
    }
    flips
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub mu_escalations: usize,
    pub relaxed_objective: f64,
    /// P2 objective of the thresholded relaxed solution, before comparison
    /// with the projected warm start and polishing.
    pub projected_objective: f64,
    pub polish_flips: usize,
    /// P2 objective of the returned association.
    pub p2_objective: f64,
    /// Largest drop between consecutive relaxed objectives (0 when the trace
    /// is nondecreasing).
    pub max_regression: f64,
}

pub fn solve_slot(
    inputs: &SlotInputs,
    theta: &[f64],
    params: &SolverParams,
    warm: &Grid,
) -> (ClusterMatrix, ScaOutcome, SolveDiagnostics) {
    let out = sca_solve(inputs, theta, params, warm);
    let mut cluster = project_binary(&out.x, &inputs.link.gamma);
    let projected_objective = p2_objective(inputs, &cluster, theta, params.v);
    // The projected warm start is the incumbent; SCA must beat it to replace it.
    let incumbent = project_binary(warm, &inputs.link.gamma);
    if p2_objective(inputs, &incumbent, theta, params.v) > projected_objective {
        cluster = incumbent;
    }
    let polish_flips = polish_binary(inputs, &mut cluster, theta, params.v, params.polish_rounds);
    let max_regression = out
        .trace
        .windows(2)
        .map(|w| (w[0] - w[1]).max(0.0))
        .fold(0.0, f64::max);
    debug_assert!(
        max_regression <= 1e-9 * out.trace[0].abs().max(1.0),
        "SCA objective regressed by {max_regression}"
    );
    let diag = SolveDiagnostics {
        iterations: out.iterations,
        mu_escalations: out.mu_escalations,
        relaxed_objective: *out.trace.last().expect("trace starts with the warm start"),
        projected_objective,
        polish_flips,
        p2_objective: p2_objective(inputs, &cluster, theta, params.v),
        max_regression,
    };
    (cluster, out, diag)
}
