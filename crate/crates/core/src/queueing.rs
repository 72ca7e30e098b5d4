//! Physical and virtual queues, exceedances, Lyapunov weights and arrivals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exogenous arrival law; every law is bounded by `a_max`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalLaw {
    /// i.i.d. uniform on [0, a_max].
    #[default]
    Uniform,
    /// a_max every slot.
    Constant,
    /// a_max with probability `p_on`, else 0.
    OnOff { p_on: f64 },
}

/// Thresholds, budgets and weights of the tail constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    /// Exceedance threshold Q₀.
    pub q0: f64,
    /// Target exceedance probability.
    pub eps_q: f64,
    /// First-moment budget of the excess.
    pub zeta1: f64,
    /// Second-moment budget of the excess.
    pub zeta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub a_max: f64,
    pub arrivals: ArrivalLaw,
}

impl TailParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.q0 > 0.0
            && self.eps_q > 0.0
            && self.eps_q < 1.0
            && self.zeta1 >= 0.0
            && self.zeta2 >= 0.0
            && self.alpha1 >= 0.0
            && self.alpha2 >= 0.0
            && self.alpha3 >= 0.0
            && self.a_max >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid tail parameters: {self:?}")));
        }
        if let ArrivalLaw::OnOff { p_on } = self.arrivals {
            if !(0.0..=1.0).contains(&p_on) {
                return Err(Error::Config(format!("p_on must lie in [0, 1], got {p_on}")));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.alpha1, self.alpha2, self.alpha3]
    }
}

/// Excess-moment budgets implied by a prior GPD at the target exceedance
/// frequency: (ε·σ/(1−ξ), ε·2σ²/(1−3ξ+2ξ²)).
pub fn default_budgets(eps_q: f64, xi_prior: f64, sigma_prior: f64) -> (f64, f64) {
    (
        eps_q * sigma_prior / (1.0 - xi_prior),
        eps_q * 2.0 * sigma_prior * sigma_prior / (1.0 - 3.0 * xi_prior + 2.0 * xi_prior * xi_prior),
    )
}

/// Per-UE queue state. Z is derived from Q on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

impl QueueState {
    pub fn new(ues: usize) -> Self {
        Self {
            q: vec![0.0; ues],
            u: vec![0.0; ues],
            y: vec![0.0; ues],
            w: vec![0.0; ues],
        }
    }

    pub fn num_ues(&self) -> usize {
        self.q.len()
    }

    pub fn excess(&self, q0: f64) -> Vec<f64> {
        self.q.iter().map(|&q| exceedance(q, q0)).collect()
    }
}

pub fn draw_arrivals<R: Rng + ?Sized>(rng: &mut R, ues: usize, a_max: f64, law: ArrivalLaw) -> Vec<f64> {
    (0..ues)
        .map(|_| match law {
            ArrivalLaw::Uniform => a_max * rng.random::<f64>(),
            ArrivalLaw::Constant => a_max,
            ArrivalLaw::OnOff { p_on } => {
                if rng.random::<f64>() < p_on {
                    a_max
                } else {
                    0.0
                }
            }
        })
        .collect()
}

/// Q' = [Q − R̂]⁺ + A.
#[inline]
pub fn advance_queue(q: f64, served: f64, arrived: f64) -> f64 {
    (q - served).max(0.0) + arrived
}

/// Z = [Q − Q₀]⁺.
#[inline]
pub fn exceedance(q: f64, q0: f64) -> f64 {
    (q - q0).max(0.0)
}

/// One step of the U, Y, W recursions driven by the current backlog Q.
pub fn update_virtual_queues(state: &QueueState, params: &TailParams) -> QueueState {
    let mut next = state.clone();
    for k in 0..state.num_ues() {
        let q = state.q[k];
        let z = exceedance(q, params.q0);
        let hit = if q >= params.q0 { 1.0 } else { 0.0 };
        next.u[k] = (state.u[k] + hit - params.eps_q).max(0.0);
        next.y[k] = (state.y[k] + z - params.zeta1).max(0.0);
        next.w[k] = (state.w[k] + z * z - params.zeta2).max(0.0);
    }
    next
}

/// θ_k = Q_k + α₁U_k + α₂Y_k + α₃W_k, with per-UE weights.
pub fn theta_weights(state: &QueueState, alphas: &[[f64; 3]]) -> Vec<f64> {
    (0..state.num_ues())
        .map(|k| {
            let [a1, a2, a3] = alphas[k];
            state.q[k] + a1 * state.u[k] + a2 * state.y[k] + a3 * state.w[k]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn params() -> TailParams {
        TailParams {
            q0: 1.5,
            eps_q: 0.01,
            zeta1: 0.1,
            zeta2: 0.2,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            a_max: 2.0,
            arrivals: ArrivalLaw::Uniform,
        }
    }

    #[test]
    fn queue_examples() {
        assert_eq!(advance_queue(3.0, 1.0, 0.5), 2.5);
        assert_eq!(advance_queue(0.5, 1.0, 0.0), 0.0);
        assert_eq!(advance_queue(0.0, 0.0, 2.0), 2.0);
        assert_eq!(exceedance(1.0, 1.5), 0.0);
        assert_eq!(exceedance(2.0, 1.5), 0.5);
        assert_eq!(exceedance(1.5, 1.5), 0.0);
    }

    #[test]
    fn virtual_queue_examples() {
        let mut s = QueueState::new(1);
        s.q[0] = 2.0;
        s.u[0] = 0.5;
        s.w[0] = 1.0;
        let p = TailParams { zeta1: 0.1, zeta2: 0.2, ..params() };
        let n = update_virtual_queues(&s, &p);
        assert_eq!(n.u[0], 0.5 + 1.0 - 0.01);
        assert!((n.w[0] - 1.05).abs() < 1e-15);

        let mut s = QueueState::new(1);
        s.q[0] = 1.0;
        assert_eq!(update_virtual_queues(&s, &p).y[0], 0.0);
    }

    #[test]
    fn theta_examples() {
        let s = QueueState {
            q: vec![2.0],
            u: vec![1.0],
            y: vec![0.5],
            w: vec![0.25],
        };
        assert_eq!(theta_weights(&s, &[[1.0; 3]]), vec![3.75]);
        assert_eq!(theta_weights(&s, &[[0.0; 3]]), vec![2.0]);
        assert_eq!(theta_weights(&QueueState::new(1), &[[1.0; 3]]), vec![0.0]);
    }

    #[test]
    fn budgets_from_prior() {
        let (z1, z2) = default_budgets(0.01, 0.1, 0.5);
        assert!((z1 - 0.01 * 0.5 / 0.9).abs() < 1e-15);
        assert!((z2 - 0.01 * 0.5 / 0.72).abs() < 1e-15);
    }

    #[test]
    fn uniform_arrivals_mean_and_support() {
        let mut r = rng::substream(11, rng::ARRIVALS);
        assert!(draw_arrivals(&mut r, 4, 0.0, ArrivalLaw::Uniform).iter().all(|&a| a == 0.0));
        let draws = draw_arrivals(&mut r, 100_000, 2.0, ArrivalLaw::Uniform);
        assert!(draws.iter().all(|&a| (0.0..=2.0).contains(&a)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn other_laws_respect_the_bound() {
        let mut r = rng::substream(5, rng::ARRIVALS);
        assert_eq!(draw_arrivals(&mut r, 3, 1.2, ArrivalLaw::Constant), vec![1.2; 3]);
        let on_off = draw_arrivals(&mut r, 10_000, 1.2, ArrivalLaw::OnOff { p_on: 0.3 });
        assert!(on_off.iter().all(|&a| a == 0.0 || a == 1.2));
        let frac = on_off.iter().filter(|&&a| a > 0.0).count() as f64 / 1e4;
        assert!((frac - 0.3).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn updates_preserve_nonnegativity(
            q in 0.0..10.0f64, u in 0.0..5.0f64, y in 0.0..5.0f64, w in 0.0..5.0f64,
            served in 0.0..10.0f64, arrived in 0.0..2.0f64,
        ) {
            let s = QueueState { q: vec![q], u: vec![u], y: vec![y], w: vec![w] };
            let n = update_virtual_queues(&s, &params());
            prop_assert!(n.u[0] >= 0.0 && n.y[0] >= 0.0 && n.w[0] >= 0.0);
            prop_assert!(advance_queue(q, served, arrived) >= 0.0);
        }

        #[test]
        fn more_virtual_backlog_means_more_pressure(
            q in 0.0..5.0f64, u in 0.0..5.0f64, bump in 0.01..3.0f64, which in 0usize..3,
        ) {
            let s = QueueState { q: vec![q], u: vec![u], y: vec![u], w: vec![u] };
            let mut t = s.clone();
            match which {
                0 => t.u[0] += bump,
                1 => t.y[0] += bump,
                _ => t.w[0] += bump,
            }
            let a = [[0.7, 1.3, 2.0]];
            prop_assert!(theta_weights(&t, &a)[0] > theta_weights(&s, &a)[0]);
        }

        #[test]
        fn time_averaged_u_bounds_excess_frequency(seed in 0u64..50) {
            // U[T]/T ≥ (1/T)Σ(1{Q ≥ Q₀} − ε) by telescoping the [·]⁺ recursion.
            let p = params();
            let mut r = rng::substream(seed, rng::ARRIVALS);
            let mut s = QueueState::new(1);
            let mut acc = 0.0;
            let steps = 500;
            for _ in 0..steps {
                s.q[0] = 3.0 * r.random::<f64>();
                acc += if s.q[0] >= p.q0 { 1.0 } else { 0.0 } - p.eps_q;
                s = update_virtual_queues(&s, &p);
            }
            prop_assert!(s.u[0] / steps as f64 >= acc / steps as f64 - 1e-12);
        }
    }
}
