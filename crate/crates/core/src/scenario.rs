//! Scenario files: TOML with defaults for every field and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{load_feeder, parse_feeder, FeederData, IEEE33_FEEDER};
use crate::mpc_controller::SoftPenalty;

/// Feeder reference that resolves to the bundled IEEE 33-bus data.
pub const BUILTIN_IEEE33: &str = "builtin:ieee33";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub t_sp: f64,
    pub t_sa: f64,
    pub horizon: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { t_sp: 1.0, t_sa: 10.0, horizon: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// PCC voltage magnitude of the initial operating point.
    pub pcc_voltage: f64,
    pub thevenin_r: f64,
    pub thevenin_x: f64,
    /// Base power of the Thévenin impedance (MVA).
    pub thevenin_base_mva: f64,
    /// Branch current limit as a multiple of the larger initial current.
    pub current_margin: f64,
    pub powerflow_tol: f64,
    pub powerflow_max_iter: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            pcc_voltage: 1.0,
            thevenin_r: 0.02,
            thevenin_x: 0.1,
            thevenin_base_mva: 10.0,
            current_margin: 1.2,
            powerflow_tol: 1e-10,
            powerflow_max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyCoupling {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyConfig {
    pub inertia: f64,
    pub damping: f64,
    pub droop_aggregate: f64,
    pub turbine_fraction: f64,
    pub time_constant: f64,
    pub coupling: FrequencyCoupling,
    /// Estimate the imbalance from the RoCoF jump instead of using the scenario value.
    pub rocof_estimate: bool,
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        Self {
            inertia: 10.0,
            damping: 1.0,
            droop_aggregate: 15.0,
            turbine_fraction: 0.8,
            time_constant: 8.0,
            coupling: FrequencyCoupling::Open,
            rocof_estimate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServicesConfig {
    pub pfc_reserve: f64,
    /// Frequency deviation (Hz) at which the PFC reserve is fully deployed.
    pub pfc_full_activation: f64,
    pub vc_reserve: f64,
    /// Voltage deviation (pu) at which the VC reserve is fully deployed.
    pub vc_full_activation: f64,
    pub sfc_reserve: f64,
    /// VC reference; zero selects the initial PCC voltage.
    pub voltage_setpoint: f64,
    pub agc_kp: f64,
    pub agc_ki: f64,
    pub agc_bias: f64,
    /// Share of the AGC signal dispatched to this network.
    pub sfc_participation: f64,
}

impl Default for ServicesConfig {
    fn default() -> Self {
        Self {
            pfc_reserve: 1.0,
            pfc_full_activation: 0.2,
            vc_reserve: 0.5,
            vc_full_activation: 0.05,
            sfc_reserve: 1.0,
            voltage_setpoint: 0.0,
            agc_kp: 0.0,
            agc_ki: 0.05,
            agc_bias: 16.0,
            sfc_participation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub cost_q: f64,
    pub cost_p: f64,
    pub cost_a: f64,
    pub soft_penalty: SoftPenalty,
    pub penalty_factor: f64,
    pub loss_weight: f64,
    pub loss_on_total_current: bool,
    pub v_min: f64,
    pub v_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub prune: bool,
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            cost_q: 1.0,
            cost_p: 2.0,
            cost_a: 4.0,
            soft_penalty: SoftPenalty::L1,
            penalty_factor: 1e3,
            loss_weight: 1.0,
            loss_on_total_current: false,
            v_min: 0.9,
            v_max: 1.1,
            soc_min: 0.1,
            soc_max: 0.9,
            prune: true,
            kkt_tol: 1e-6,
            max_iter: 40_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub sigma_v: f64,
    pub sigma_p: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { sigma_v: 0.001, sigma_p: 0.01 }
    }
}

/// Plant parameter scale factors relative to the controller's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchConfig {
    pub dg_governor: f64,
    pub dg_exciter: f64,
    pub vshp_time_constant: f64,
    pub bess_energy: f64,
}

impl Default for MismatchConfig {
    fn default() -> Self {
        Self { dg_governor: 1.0, dg_exciter: 1.0, vshp_time_constant: 1.0, bess_energy: 1.0 }
    }
}

/// One DER declaration. Kind-specific fields are ignored by other kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitSpec {
    pub name: String,
    pub kind: String,
    /// Feeder node label.
    pub node: u32,
    pub rating: f64,
    pub p_set: f64,
    pub q_set: f64,
    /// DG governor or heat-pump time constant (s).
    pub time_constant: f64,
    pub exciter_time_constant: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// PV available power.
    pub available: f64,
    /// Minimum PV power factor, or the heat-pump power factor.
    pub power_factor: f64,
    /// BESS energy (pu·s).
    pub energy: f64,
    pub soc: f64,
}

impl Default for UnitSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            kind: String::new(),
            node: 0,
            rating: 0.0,
            p_set: 0.0,
            q_set: 0.0,
            time_constant: 0.0,
            exciter_time_constant: 0.0,
            p_min: 0.0,
            p_max: 0.0,
            available: 0.0,
            power_factor: 1.0,
            energy: 0.0,
            soc: 0.5,
        }
    }
}

/// Reference fleet on the IEEE 33-bus feeder.
pub fn reference_fleet() -> Vec<UnitSpec> {
    let base = UnitSpec::default();
    vec![
        UnitSpec {
            name: "dg25".into(),
            kind: "dg".into(),
            node: 25,
            rating: 0.67,
            p_set: 0.1,
            time_constant: 10.0,
            exciter_time_constant: 1.0,
            p_min: 0.1,
            ..base.clone()
        },
        UnitSpec {
            name: "pv3".into(),
            kind: "pv".into(),
            node: 3,
            rating: 0.15,
            p_set: 0.135,
            available: 0.135,
            power_factor: 0.9,
            ..base.clone()
        },
        UnitSpec {
            name: "pv18".into(),
            kind: "pv".into(),
            node: 18,
            rating: 0.3,
            p_set: 0.27,
            available: 0.27,
            power_factor: 0.9,
            ..base.clone()
        },
        UnitSpec { name: "bess8".into(), kind: "bess".into(), node: 8, rating: 0.5, energy: 576.0, ..base.clone() },
        UnitSpec { name: "bess30".into(), kind: "bess".into(), node: 30, rating: 0.5, energy: 576.0, ..base.clone() },
        UnitSpec {
            name: "vshp22".into(),
            kind: "vshp".into(),
            node: 22,
            rating: 0.2,
            p_set: 0.2,
            time_constant: 5.0,
            p_min: 0.02,
            p_max: 0.2,
            ..base
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Sustained loss of generation (pu imbalance).
    GenerationLoss,
    /// Step of the Thévenin resistance (pu on the Thévenin base).
    LineTrip,
    /// Step of the scheduled feeder export (pu).
    SetpointChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Path to a feeder file (relative to the scenario file) or `builtin:ieee33`.
    pub feeder: String,
    pub duration: f64,
    pub seed: u64,
    pub timing: TimingConfig,
    pub grid: GridConfig,
    pub frequency: FrequencyConfig,
    pub services: ServicesConfig,
    pub controller: ControllerConfig,
    pub estimation: EstimationConfig,
    pub mismatch: MismatchConfig,
    pub fleet: Vec<UnitSpec>,
    pub events: Vec<Event>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            feeder: BUILTIN_IEEE33.into(),
            duration: 120.0,
            seed: 1,
            timing: TimingConfig::default(),
            grid: GridConfig::default(),
            frequency: FrequencyConfig::default(),
            services: ServicesConfig::default(),
            controller: ControllerConfig::default(),
            estimation: EstimationConfig::default(),
            mismatch: MismatchConfig::default(),
            fleet: reference_fleet(),
            events: Vec::new(),
            base_dir: None,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
    Error::Parse { line, msg: e.message().to_string() }
}

/// Parses a scalar override value as TOML, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `path` (dotted, array elements by index) inside `root`; the key must already exist.
pub fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let next = match cur {
            toml::Value::Table(t) => t.get_mut(*part),
            toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|idx| a.get_mut(idx)),
            _ => None,
        };
        cur = next.ok_or_else(|| {
            Error::Config(format!("override key '{path}' does not exist (at '{}')", parts[..=i].join(".")))
        })?;
    }
    let mut value = parse_override_value(raw);
    if let (toml::Value::Float(_), toml::Value::Integer(n)) = (&*cur, &value) {
        value = toml::Value::Float(*n as f64);
    }
    if std::mem::discriminant(cur) != std::mem::discriminant(&value) {
        return Err(Error::Config(format!("override '{path}' expects a {} value, got '{raw}'", cur.type_str())));
    }
    *cur = value;
    Ok(())
}

impl Scenario {
    /// Parses scenario text and applies `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let parsed: Scenario = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        if overrides.is_empty() {
            return Ok(parsed);
        }
        let mut value = toml::Value::try_from(&parsed).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut s = Self::from_toml_str(&text, overrides)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load_feeder(&self) -> Result<FeederData> {
        if self.feeder == BUILTIN_IEEE33 {
            return parse_feeder(IEEE33_FEEDER);
        }
        let path = match &self.base_dir {
            Some(dir) => dir.join(&self.feeder),
            None => PathBuf::from(&self.feeder),
        };
        if !path.is_file() {
            return Err(Error::Config(format!("feeder file {} not found", path.display())));
        }
        load_feeder(&path)
    }

    /// Structural checks that do not need the feeder.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("timing.t_sp", self.timing.t_sp),
            ("timing.t_sa", self.timing.t_sa),
            ("grid.pcc_voltage", self.grid.pcc_voltage),
            ("grid.thevenin_base_mva", self.grid.thevenin_base_mva),
            ("grid.current_margin", self.grid.current_margin),
            ("services.pfc_full_activation", self.services.pfc_full_activation),
            ("services.vc_full_activation", self.services.vc_full_activation),
            ("controller.penalty_factor", self.controller.penalty_factor),
            ("controller.kkt_tol", self.controller.kkt_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.timing.horizon == 0 {
            return Err(Error::Config("timing.horizon must be at least 1".into()));
        }
        if self.fleet.is_empty() {
            return Err(Error::Config("fleet is empty".into()));
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !e.magnitude.is_finite() || !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::Config(format!("event {e:?} has a non-finite magnitude or invalid time")));
            }
            if e.time < last {
                return Err(Error::Config("events must be ordered by time".into()));
            }
            last = e.time;
        }
        if last > self.duration {
            return Err(Error::Config(format!("duration {} ends before the last event at {last}", self.duration)));
        }
        if !(self.controller.v_min < self.controller.v_max && self.controller.soc_min < self.controller.soc_max) {
            return Err(Error::Config("controller limits must satisfy min < max".into()));
        }
        for (name, f) in [
            ("mismatch.dg_governor", self.mismatch.dg_governor),
            ("mismatch.dg_exciter", self.mismatch.dg_exciter),
            ("mismatch.vshp_time_constant", self.mismatch.vshp_time_constant),
            ("mismatch.bess_energy", self.mismatch.bess_energy),
        ] {
            if !(0.5..=2.0).contains(&f) {
                return Err(Error::Config(format!("{name} = {f} outside [0.5, 2]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let s = Scenario::default();
        let text = s.to_toml_string().unwrap();
        let back = Scenario::from_toml_str(&text, &[]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn overrides_must_exist() {
        let ok = Scenario::from_toml_str("", &[("timing.horizon".into(), "12".into())]).unwrap();
        assert_eq!(ok.timing.horizon, 12);
        let fleet = Scenario::from_toml_str("", &[("fleet.0.rating".into(), "1".into())]).unwrap();
        assert_eq!(fleet.fleet[0].rating, 1.0);
        assert!(Scenario::from_toml_str("", &[("timing.horizn".into(), "12".into())]).is_err());
        assert!(Scenario::from_toml_str("", &[("timing.horizon".into(), "\"x\"".into())]).is_err());
    }

    #[test]
    fn parse_errors_carry_lines() {
        let err = Scenario::from_toml_str("name = \"a\"\n\nduration = \"long\"\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
