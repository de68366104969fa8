//! Ancillary-service rules and the center-of-inertia frequency model.
//!
//! Feeder quantities are export-positive: a positive service request asks the
//! distribution network to deliver more active (or reactive) power upstream.

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Saturated linear droop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopRule {
    pub gain: f64,
    pub cap_up: f64,
    pub cap_down: f64,
}

impl DroopRule {
    pub fn new(gain: f64, cap_up: f64, cap_down: f64) -> Result<Self> {
        if !(gain >= 0.0 && cap_down <= 0.0 && cap_up >= 0.0) {
            return Err(Error::Config(format!("invalid droop rule: gain {gain}, caps [{cap_down}, {cap_up}]")));
        }
        Ok(Self { gain, cap_up, cap_down })
    }

    /// Symmetric rule that reaches `reserve` at deviation `full_activation`.
    pub fn symmetric(reserve: f64, full_activation: f64) -> Result<Self> {
        if !(full_activation > 0.0) {
            return Err(Error::Config("full-activation deviation must be positive".into()));
        }
        Self::new(reserve / full_activation, reserve, -reserve)
    }
}

pub fn droop_response(rule: &DroopRule, deviation: f64) -> f64 {
    let p = rule.gain * deviation;
    if deviation >= 0.0 {
        p.min(rule.cap_up)
    } else {
        p.max(rule.cap_down)
    }
}

/// Parameters of the second-order aggregate frequency response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyModelParams {
    pub inertia: f64,
    pub damping: f64,
    pub droop_aggregate: f64,
    pub turbine_fraction: f64,
    pub time_constant: f64,
}

impl Default for FrequencyModelParams {
    fn default() -> Self {
        Self { inertia: 10.0, damping: 1.0, droop_aggregate: 15.0, turbine_fraction: 0.8, time_constant: 8.0 }
    }
}

impl FrequencyModelParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.inertia, self.damping, self.droop_aggregate, self.turbine_fraction, self.time_constant];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("frequency-model parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn natural_frequency(&self) -> f64 {
        ((self.damping + self.droop_aggregate) / (self.inertia * self.time_constant)).sqrt()
    }

    pub fn damping_ratio(&self) -> f64 {
        let (m, t) = (self.inertia, self.time_constant);
        (m + t * (self.damping + self.turbine_fraction))
            / (2.0 * (m * t * (self.damping + self.droop_aggregate)).sqrt())
    }

    /// Steady-state deviation for a sustained imbalance.
    pub fn steady_state(&self, imbalance: f64) -> f64 {
        -imbalance / (self.damping + self.droop_aggregate)
    }

    /// Continuous state matrix and input vector for the state `[ω, ω̇]`.
    ///
    /// The input is the imbalance ΔP held constant; the zero of the
    /// transfer function appears as a jump of `-δ/M` in ω̇ whenever the
    /// imbalance changes by δ (see [`FrequencyState::apply_imbalance_change`]).
    pub fn continuous(&self) -> (Matrix2<f64>, Vector2<f64>) {
        let wn = self.natural_frequency();
        let z = self.damping_ratio();
        let a = Matrix2::new(0.0, 1.0, -wn * wn, -2.0 * z * wn);
        let b = Vector2::new(0.0, -1.0 / (self.inertia * self.time_constant));
        (a, b)
    }
}

/// Frequency deviation (Hz) and its derivative (Hz/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrequencyState {
    pub omega: f64,
    pub omega_dot: f64,
}

impl FrequencyState {
    fn vec(&self) -> Vector2<f64> {
        Vector2::new(self.omega, self.omega_dot)
    }

    /// Instantaneous RoCoF jump caused by an imbalance step of `delta`.
    pub fn apply_imbalance_change(&mut self, delta: f64, params: &FrequencyModelParams) {
        self.omega_dot -= delta / params.inertia;
    }
}

/// Imbalance estimate from the RoCoF right after a disturbance.
pub fn rocof_imbalance_estimate(omega_dot: f64, params: &FrequencyModelParams) -> f64 {
    -params.inertia * omega_dot
}

/// Zero-order-hold discretization of the frequency model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteFrequencyModel {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub step: f64,
    pub params: FrequencyModelParams,
}

impl DiscreteFrequencyModel {
    pub fn advance(&self, state: FrequencyState, imbalance: f64) -> FrequencyState {
        let x = self.a * state.vec() + self.b * imbalance;
        FrequencyState { omega: x[0], omega_dot: x[1] }
    }
}

pub fn discretize_frequency_model(params: &FrequencyModelParams, step: f64) -> Result<DiscreteFrequencyModel> {
    params.validate()?;
    if !(step > 0.0) {
        return Err(Error::Config(format!("discretization step must be positive, got {step}")));
    }
    let (a, b) = params.continuous();
    let mut aug = Matrix3::zeros();
    aug.fixed_view_mut::<2, 2>(0, 0).copy_from(&(a * step));
    aug.fixed_view_mut::<2, 1>(0, 2).copy_from(&(b * step));
    let e = aug.exp();
    Ok(DiscreteFrequencyModel {
        a: e.fixed_view::<2, 2>(0, 0).into_owned(),
        b: e.fixed_view::<2, 1>(0, 2).into_owned(),
        step,
        params: *params,
    })
}

/// Frequency deviations ω at steps 1..=H under a constant imbalance.
pub fn predict_frequency(
    model: &DiscreteFrequencyModel,
    initial: FrequencyState,
    imbalance: f64,
    horizon: usize,
) -> Vec<f64> {
    let mut x = initial;
    (0..horizon)
        .map(|_| {
            x = model.advance(x, imbalance);
            x.omega
        })
        .collect()
}

/// PI emulation of the area controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgcEmulator {
    pub kp: f64,
    pub ki: f64,
    pub bias: f64,
    pub integral: f64,
    pub prev_error: Option<f64>,
}

impl AgcEmulator {
    pub fn new(kp: f64, ki: f64, bias: f64) -> Result<Self> {
        if !(kp >= 0.0 && ki >= 0.0) {
            return Err(Error::Config(format!("AGC gains must be nonnegative: kp {kp}, ki {ki}")));
        }
        Ok(Self { kp, ki, bias, integral: 0.0, prev_error: None })
    }

    /// Advances the controller by `step` seconds and returns its output.
    ///
    /// `tieline_deviation` is export-positive. The integrator uses the
    /// trapezoidal rule; the first call treats the error as constant over
    /// the preceding step.
    pub fn step(&mut self, delta_f: f64, tieline_deviation: f64, step: f64) -> f64 {
        let e = tieline_deviation + self.bias * delta_f;
        let prev = self.prev_error.unwrap_or(e);
        self.integral += 0.5 * step * (e + prev);
        self.prev_error = Some(e);
        self.kp * e + self.ki * self.integral
    }
}

pub fn agc_step(emulator: &mut AgcEmulator, delta_f: f64, tieline_deviation: f64, step: f64) -> f64 {
    emulator.step(delta_f, tieline_deviation, step)
}

/// Contracted services and their droop rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceRules {
    pub pfc: DroopRule,
    pub vc: DroopRule,
    pub voltage_setpoint: f64,
}

/// Quantities measured at the feeder head in the current control step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PccMeasurement {
    pub step: u64,
    /// Deviation of the exported active power that the controller does not command.
    pub p_uncontrolled: f64,
    pub q_uncontrolled: f64,
    pub voltage: f64,
}

/// Per-step delivery targets over the horizon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReserveTargets {
    pub pfc: Vec<f64>,
    pub vc: Vec<f64>,
}

/// Converts predicted frequency and PCC voltage changes into delivery targets.
pub fn reserve_requirements(
    predicted_omega: &[f64],
    predicted_dv_pcc: &[f64],
    rules: &ServiceRules,
    pcc: &PccMeasurement,
    current_step: u64,
) -> Result<ReserveTargets> {
    if pcc.step != current_step {
        return Err(Error::StaleMeasurement { measured: pcc.step, current: current_step });
    }
    if predicted_dv_pcc.len() != predicted_omega.len() {
        return Err(Error::Assembly("frequency and voltage predictions differ in length".into()));
    }
    let pfc = predicted_omega.iter().map(|w| droop_response(&rules.pfc, -w) - pcc.p_uncontrolled).collect();
    let vc = predicted_dv_pcc
        .iter()
        .map(|dv| droop_response(&rules.vc, rules.voltage_setpoint - (pcc.voltage + dv)) - pcc.q_uncontrolled)
        .collect();
    Ok(ReserveTargets { pfc, vc })
}
