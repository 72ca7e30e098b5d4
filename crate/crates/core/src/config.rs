//! TOML experiment configuration.
//!
//! Every section has defaults and rejects unknown keys. Overrides are
//! dotted `section.key=value` pairs whose value is parsed as a TOML value,
//! falling back to a bare string.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::{ContaminationGain, FblForm, FblParams, PowerParams};
use crate::queueing::{default_budgets, ArrivalLaw, TailParams};
use crate::solver::SolverParams;
use crate::topology::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSection {
    /// Amplifier efficiency, one entry or one per EDU.
    pub alpha: Vec<f64>,
    pub p_cir: f64,
    pub p_link: f64,
    pub p_edu: f64,
}

impl Default for PowerSection {
    fn default() -> Self {
        let p = PowerParams::default();
        Self {
            alpha: p.alpha,
            p_cir: p.p_cir,
            p_link: p.p_link,
            p_edu: p.p_edu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FblSection {
    pub eps_decode: f64,
    pub form: FblForm,
    pub contamination_gain: ContaminationGain,
}

impl Default for FblSection {
    fn default() -> Self {
        Self {
            eps_decode: FblParams::default().eps_decode,
            form: FblForm::Standard,
            contamination_gain: ContaminationGain::Estimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailSection {
    #[serde(rename = "Q0", alias = "q0")]
    pub q0: f64,
    pub eps_q: f64,
    /// Explicit budgets; absent means derived from the prior GPD.
    pub zeta1: Option<f64>,
    pub zeta2: Option<f64>,
    pub xi_prior: f64,
    pub sigma_prior: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    #[serde(rename = "A_max", alias = "a_max")]
    pub a_max: f64,
    pub arrivals: ArrivalLaw,
}

impl Default for TailSection {
    fn default() -> Self {
        Self {
            q0: 1.5,
            eps_q: 0.01,
            zeta1: None,
            zeta2: None,
            xi_prior: 0.1,
            sigma_prior: 0.5,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            a_max: 2.0,
            arrivals: ArrivalLaw::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    EvtAware,
    QueueAwareBaseline,
    StaticNearest,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::EvtAware => "evt_aware",
            PolicyKind::QueueAwareBaseline => "queue_aware_baseline",
            PolicyKind::StaticNearest => "static_nearest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Slots per run, warmup included.
    #[serde(rename = "T", alias = "t")]
    pub slots: usize,
    pub warmup: usize,
    pub seeds: Vec<u64>,
    pub policies: Vec<PolicyKind>,
    /// Abort on any SCA objective regression above 1e-6.
    pub strict: bool,
    /// Bandwidth unit of energy efficiency and of the EE term in the
    /// per-slot objective, Hz (1e6: Mbit/J).
    pub ee_unit_hz: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            slots: 5000,
            warmup: 1000,
            seeds: vec![1],
            policies: vec![PolicyKind::EvtAware, PolicyKind::QueueAwareBaseline],
            strict: false,
            ee_unit_hz: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvtSection {
    /// Sliding window of queue samples per UE, slots.
    pub window: usize,
    pub refit_every: usize,
    pub n_min: usize,
    pub evt_feedback: bool,
}

impl Default for EvtSection {
    fn default() -> Self {
        Self {
            window: 2000,
            refit_every: 500,
            n_min: crate::evt::DEFAULT_N_MIN,
            evt_feedback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub power: PowerSection,
    pub fbl: FblSection,
    pub tail: TailSection,
    pub solver: SolverParams,
    pub sim: SimSection,
    pub evt: EvtSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `overrides` in order and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Parse the file alone first so errors point at its lines.
        let base: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            self.validate()?;
            return Ok(self.clone());
        }
        let mut value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.power_params().validate(self.network.edus)?;
        self.fbl_params().validate()?;
        self.tail_params().validate()?;
        self.solver.validate()?;
        let s = &self.sim;
        if s.warmup > s.slots {
            return Err(Error::Config(format!(
                "sim.warmup ({}) exceeds sim.T ({})",
                s.warmup, s.slots
            )));
        }
        if !(s.ee_unit_hz > 0.0) {
            return Err(Error::Config("sim.ee_unit_hz must be positive".into()));
        }
        let e = &self.evt;
        if e.window == 0 || e.refit_every == 0 || e.n_min == 0 {
            return Err(Error::Config("evt.window, evt.refit_every and evt.n_min must be positive".into()));
        }
        if !(self.tail.xi_prior < 0.5) || !(self.tail.sigma_prior > 0.0) {
            return Err(Error::Config("tail prior needs xi_prior < 0.5 and sigma_prior > 0".into()));
        }
        Ok(())
    }

    pub fn power_params(&self) -> PowerParams {
        PowerParams {
            alpha: self.power.alpha.clone(),
            p_cir: self.power.p_cir,
            p_link: self.power.p_link,
            p_edu: self.power.p_edu,
            rho_d: self.network.rho_d,
        }
    }

    pub fn fbl_params(&self) -> FblParams {
        FblParams {
            eps_decode: self.fbl.eps_decode,
            tau_c: self.network.tau_c as f64,
            eta_p: self.network.pilot_fraction(),
            form: self.fbl.form,
        }
    }

    pub fn tail_params(&self) -> TailParams {
        let t = &self.tail;
        let (z1, z2) = default_budgets(t.eps_q, t.xi_prior, t.sigma_prior);
        TailParams {
            q0: t.q0,
            eps_q: t.eps_q,
            zeta1: t.zeta1.unwrap_or(z1),
            zeta2: t.zeta2.unwrap_or(z2),
            alpha1: t.alpha1,
            alpha2: t.alpha2,
            alpha3: t.alpha3,
            a_max: t.a_max,
            arrivals: t.arrivals,
        }
    }

    /// Bandwidth expressed in `sim.ee_unit_hz`.
    pub fn bandwidth_units(&self) -> f64 {
        self.network.bandwidth_hz / self.sim.ee_unit_hz
    }

    /// The effective configuration with every default filled in.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration is plain data")
    }
}

fn apply_override(root: &mut toml::Value, pair: &str) -> Result<()> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = root;
    for key in parents {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*key))
            .ok_or_else(|| Error::Config(format!("unknown override section `{path}`")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{path}` does not name a key")))?;
    let slot = table
        .get_mut(*last)
        .ok_or_else(|| Error::Config(format!("unknown override key `{path}`")))?;
    *slot = coerce(parsed, slot);
    Ok(())
}

/// Integers given where the default is a float become floats.
fn coerce(value: toml::Value, like: &toml::Value) -> toml::Value {
    match (value, like) {
        (toml::Value::Integer(i), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (v, _) => v,
    }
}
