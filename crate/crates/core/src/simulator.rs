//! Closed-loop discrete-time plant: DER dynamics, exact power flow behind a
//! Thévenin source, the aggregate frequency response with AGC, sensing with
//! WLS estimation, and the MPC at its two rates.
//!
//! Row `k` of the trace holds the plant at `t_k = k·T_sp`, the references in
//! force at that instant and the commands issued at that instant.

use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::der_fleet::{
    assemble_prediction_model, step_der, BessParams, DerFleet, DerUnit, DgParams, KindParams, PvParams,
    VshpCoefficients, VshpParams,
};
use crate::error::{Error, Result};
use crate::estimation::{build_measurement_set, sense, wls_estimate, InjectionModel, SensorSuite};
use crate::frequency_services::{
    discretize_frequency_model, droop_response, predict_frequency, reserve_requirements, AgcEmulator,
    DiscreteFrequencyModel, DroopRule, FrequencyModelParams, FrequencyState, PccMeasurement, ServiceRules,
};
use crate::grid_model::{build_bfs_matrices, reduce_for_nodes, BfsMatrices, FeederData};
use crate::mpc_controller::{
    assemble_qp, build_schedule, network_sensitivity, ControllerModel, CostProfile, MpcConfig, MpcController,
    MpcProblem, MultirateInput, NetworkSnapshot, StepDiagnostics, StepInputs,
};
use crate::powerflow::{
    continuation_error_surface, grid_points, solve_bfs, ErrorPoint, InjectionVector, NetworkState, SlackSource,
};
use crate::scenario::{Event, EventKind, FrequencyCoupling, MismatchConfig, Scenario, UnitSpec};

/// Plant-side parameter overrides derived from the mismatch knob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantOverrides {
    pub dg_governor: f64,
    pub dg_exciter: f64,
    pub vshp_time_constant: f64,
    pub bess_energy: f64,
}

pub fn plant_model_mismatch(knob: &MismatchConfig) -> Result<PlantOverrides> {
    let factors = [knob.dg_governor, knob.dg_exciter, knob.vshp_time_constant, knob.bess_energy];
    if factors.iter().any(|f| !(0.5..=2.0).contains(f)) {
        return Err(Error::Config(format!("mismatch factors must lie in [0.5, 2]: {knob:?}")));
    }
    Ok(PlantOverrides {
        dg_governor: knob.dg_governor,
        dg_exciter: knob.dg_exciter,
        vshp_time_constant: knob.vshp_time_constant,
        bess_energy: knob.bess_energy,
    })
}

impl PlantOverrides {
    pub fn identity() -> Self {
        Self { dg_governor: 1.0, dg_exciter: 1.0, vshp_time_constant: 1.0, bess_energy: 1.0 }
    }
}

fn build_unit(
    spec: &UnitSpec,
    feeder: &FeederData,
    soc_bounds: (f64, f64),
    ts: f64,
    o: &PlantOverrides,
) -> Result<DerUnit> {
    let node =
        feeder.topology.node_of_label(spec.node).filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("unit '{}' sits at unknown or slack node {}", spec.name, spec.node))
        })?;
    let params = match spec.kind.as_str() {
        "dg" => KindParams::Dg(DgParams {
            governor_time_constant: spec.time_constant * o.dg_governor,
            exciter_time_constant: spec.exciter_time_constant * o.dg_exciter,
            p_min: spec.p_min,
        }),
        "pv" => KindParams::Pv(PvParams { available: spec.available, pf_min: spec.power_factor }),
        "bess" => KindParams::Bess(BessParams {
            energy: spec.energy * o.bess_energy,
            soc: spec.soc,
            soc_min: soc_bounds.0,
            soc_max: soc_bounds.1,
        }),
        "vshp" => {
            let tau = spec.time_constant * o.vshp_time_constant;
            KindParams::Vshp(VshpParams {
                time_constant: tau,
                power_factor: spec.power_factor,
                p_min: spec.p_min,
                p_max: spec.p_max,
                coefficients: VshpCoefficients::critically_damped(tau, ts)?,
                nu: [0.0; 3],
            })
        }
        other => return Err(Error::Config(format!("unit '{}': unknown kind '{other}'", spec.name))),
    };
    let positive = match params {
        KindParams::Dg(d) => d.governor_time_constant > 0.0 && d.exciter_time_constant > 0.0,
        KindParams::Bess(b) => b.energy > 0.0,
        _ => true,
    };
    if !(positive && spec.rating > 0.0) {
        return Err(Error::Config(format!("unit '{}' needs a positive rating and time constants", spec.name)));
    }
    let mut q_set = spec.q_set;
    if let KindParams::Vshp(v) = params {
        q_set = spec.p_set * v.reactive_ratio();
    }
    Ok(DerUnit {
        name: if spec.name.is_empty() { format!("{}{}", spec.kind, spec.node) } else { spec.name.clone() },
        node,
        rating: spec.rating,
        params,
        p_set: spec.p_set,
        q_set,
        p: spec.p_set,
        q: q_set,
    })
}

/// Builds a fleet from its declaration.
pub fn build_fleet(
    specs: &[UnitSpec],
    feeder: &FeederData,
    soc_bounds: (f64, f64),
    ts: f64,
    overrides: &PlantOverrides,
) -> Result<DerFleet> {
    let units = specs.iter().map(|s| build_unit(s, feeder, soc_bounds, ts, overrides)).collect::<Result<Vec<_>>>()?;
    Ok(DerFleet { units })
}

/// Transmission-side state driven by events.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub generation_loss: f64,
    pub thevenin_z: Complex64,
    pub schedule_shift: f64,
}

pub fn apply_event(state: &PlantState, event: &Event) -> PlantState {
    let mut next = state.clone();
    match event.kind {
        EventKind::GenerationLoss => next.generation_loss += event.magnitude,
        EventKind::LineTrip => next.thevenin_z.re += event.magnitude,
        EventKind::SetpointChange => next.schedule_shift += event.magnitude,
    }
    next
}

/// One row of the closed-loop trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub time: f64,
    pub freq_dev: f64,
    pub rocof: f64,
    /// Export-positive feeder deviations from the schedule.
    pub p0_dev: f64,
    pub q0_dev: f64,
    /// Imported feeder power `V_s · conj(I_0)`.
    pub p0_import: f64,
    pub q0_import: f64,
    pub v_pcc: f64,
    pub i0_re: f64,
    pub i0_im: f64,
    pub ref_pfc: f64,
    pub ref_sfc: f64,
    pub ref_vc: f64,
    pub der_p: Vec<f64>,
    pub der_q: Vec<f64>,
    pub soc: Vec<f64>,
    pub v_mag: Vec<f64>,
    pub i_ratio: Vec<f64>,
    pub cmd_dp_fast: Vec<f64>,
    pub cmd_dq_fast: Vec<f64>,
    pub cmd_dp_slow: Vec<f64>,
    pub solver_ok: bool,
    pub diagnostics: Option<StepDiagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub step: u64,
    pub kind: EventKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioTrace {
    pub name: String,
    pub seed: u64,
    pub t_sp: f64,
    pub q: u64,
    pub der_names: Vec<String>,
    pub bess_names: Vec<String>,
    /// Plant BESS energies (pu·s) in trace order.
    pub bess_energy: Vec<f64>,
    pub initial_soc: Vec<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub pfc_rule: DroopRule,
    pub vc_rule: DroopRule,
    pub voltage_setpoint: f64,
    pub events: Vec<EventRecord>,
    pub rows: Vec<TraceRow>,
    /// Set when the run stopped early (power-flow divergence).
    pub abort: Option<String>,
}

fn clip(x: f64, limit: f64) -> f64 {
    x.clamp(-limit.abs(), limit.abs())
}

fn plant_injections(feeder: &FeederData, fleet: &DerFleet) -> InjectionVector {
    let mut inj = InjectionVector::from_demand(&feeder.loads);
    for u in &fleet.units {
        let (p, q) = u.injection();
        inj.add_at(u.node, p, q);
    }
    inj
}

fn per_node_injections(inj: &InjectionVector) -> Vec<Complex64> {
    (0..inj.len()).map(|i| Complex64::new(inj.p[i], inj.q[i])).collect()
}

fn exports(state: &NetworkState) -> (f64, f64) {
    (-state.feeder_power.re, -state.feeder_power.im)
}

struct Setup {
    feeder: FeederData,
    matrices: BfsMatrices,
    plant: DerFleet,
    controller: MpcController,
    freq_model: DiscreteFrequencyModel,
    rules: ServiceRules,
    agc: AgcEmulator,
    suite: SensorSuite,
    injection_model: InjectionModel,
    e_mag: f64,
    z_th: Complex64,
    z_scale: f64,
    i_max: DVector<f64>,
    initial: NetworkState,
}

fn setup(scenario: &Scenario) -> Result<Setup> {
    scenario.validate()?;
    let feeder = scenario.load_feeder()?;
    let ts = scenario.timing.t_sp;
    let schedule = build_schedule(ts, scenario.timing.t_sa)?;
    let c = &scenario.controller;
    let soc_bounds = (c.soc_min, c.soc_max);
    let plant = build_fleet(&scenario.fleet, &feeder, soc_bounds, ts, &plant_model_mismatch(&scenario.mismatch)?)?;
    let nominal = build_fleet(&scenario.fleet, &feeder, soc_bounds, ts, &PlantOverrides::identity())?;
    let matrices = build_bfs_matrices(&feeder.topology, 1.0);
    let g = &scenario.grid;
    let v0 = g.pcc_voltage;
    let load_only = solve_bfs(
        &matrices,
        &InjectionVector::from_demand(&feeder.loads),
        SlackSource::Fixed(v0),
        None,
        g.powerflow_tol,
        g.powerflow_max_iter,
    )?
    .state;
    let initial = solve_bfs(
        &matrices,
        &plant_injections(&feeder, &plant),
        SlackSource::Fixed(v0),
        None,
        g.powerflow_tol,
        g.powerflow_max_iter,
    )?
    .state;
    let i_max = DVector::from_fn(matrices.n(), |b, _| {
        g.current_margin * initial.branch_currents[b].norm().max(load_only.branch_currents[b].norm())
    });
    let z_scale = feeder.topology.base_mva / g.thevenin_base_mva;
    let z_th = Complex64::new(g.thevenin_r, g.thevenin_x);
    let e_mag = (Complex64::new(v0, 0.0) + z_th * z_scale * initial.feeder_current()).norm();

    let model = assemble_prediction_model(&nominal, ts)?;
    let branch_r = DVector::from_iterator(matrices.n(), feeder.topology.branches().iter().map(|b| b.impedance.re));
    let costs = CostProfile::for_fleet(&nominal, (c.cost_q, c.cost_p, c.cost_a), branch_r);
    let ctrl_model = ControllerModel::new(&nominal, model, costs)?;
    let config = MpcConfig {
        horizon: scenario.timing.horizon,
        soft_penalty: c.soft_penalty,
        penalty_factor: c.penalty_factor,
        loss_weight: c.loss_weight,
        loss_on_total_current: c.loss_on_total_current,
        v_min: c.v_min,
        v_max: c.v_max,
        soc_min: c.soc_min,
        soc_max: c.soc_max,
        prune: c.prune,
        kkt_tol: c.kkt_tol,
        max_iter: c.max_iter,
    };
    let controller = MpcController::new(config, schedule, ctrl_model);

    let f = &scenario.frequency;
    let params = FrequencyModelParams {
        inertia: f.inertia,
        damping: f.damping,
        droop_aggregate: f.droop_aggregate,
        turbine_fraction: f.turbine_fraction,
        time_constant: f.time_constant,
    };
    let freq_model = discretize_frequency_model(&params, ts)?;
    let s = &scenario.services;
    let voltage_setpoint = if s.voltage_setpoint > 0.0 { s.voltage_setpoint } else { v0 };
    let rules = ServiceRules {
        pfc: DroopRule::symmetric(s.pfc_reserve, s.pfc_full_activation)?,
        vc: DroopRule::symmetric(s.vc_reserve, s.vc_full_activation)?,
        voltage_setpoint,
    };
    let agc = AgcEmulator::new(s.agc_kp, s.agc_ki, s.agc_bias)?;
    let e = &scenario.estimation;
    if !(e.sigma_v > 0.0 && e.sigma_p > 0.0) {
        return Err(Error::Config("sensor standard deviations must be positive".into()));
    }
    let suite = SensorSuite { sigma_v: e.sigma_v, sigma_p: e.sigma_p, power_nodes: plant.nodes() };
    let injection_model = InjectionModel::new(&matrices.dlf, v0)?;
    Ok(Setup {
        feeder,
        matrices,
        plant,
        controller,
        freq_model,
        rules,
        agc,
        suite,
        injection_model,
        e_mag,
        z_th,
        z_scale,
        i_max,
        initial,
    })
}

/// Runs a scenario to completion, or until the plant power flow diverges.
pub fn run(scenario: &Scenario) -> Result<ScenarioTrace> {
    run_until(scenario, None).map(|(trace, _)| trace)
}

/// Runs the scenario up to `step` and returns the controller QP assembled there.
pub fn capture_problem(scenario: &Scenario, step: u64) -> Result<MpcProblem> {
    let n_steps = (scenario.duration / scenario.timing.t_sp + 1e-9).floor() as u64;
    if step > n_steps {
        return Err(Error::Config(format!("step {step} is beyond the last step {n_steps}")));
    }
    let (trace, problem) = run_until(scenario, Some(step))?;
    problem.ok_or_else(|| Error::Config(format!("run stopped before step {step}: {}", trace.abort.unwrap_or_default())))
}

fn run_until(scenario: &Scenario, capture: Option<u64>) -> Result<(ScenarioTrace, Option<MpcProblem>)> {
    let Setup {
        feeder,
        matrices,
        mut plant,
        mut controller,
        freq_model,
        rules,
        mut agc,
        suite,
        mut injection_model,
        e_mag,
        z_th,
        z_scale,
        i_max,
        initial,
    } = setup(scenario)?;
    let ts = scenario.timing.t_sp;
    let h = scenario.timing.horizon;
    let n_steps = (scenario.duration / ts + 1e-9).floor() as u64;
    let (sched_p, sched_q) = exports(&initial);
    let n_g = plant.n_g();
    let bess = plant.bess_indices();
    let der_nodes = plant.nodes();

    let mut trace = ScenarioTrace {
        name: scenario.name.clone(),
        seed: scenario.seed,
        t_sp: ts,
        q: controller.schedule.q,
        der_names: plant.units.iter().map(|u| u.name.clone()).collect(),
        bess_names: bess.iter().map(|&i| plant.units[i].name.clone()).collect(),
        bess_energy: bess
            .iter()
            .map(|&i| match plant.units[i].params {
                KindParams::Bess(b) => b.energy,
                _ => unreachable!("bess index"),
            })
            .collect(),
        initial_soc: bess.iter().map(|&i| plant.units[i].soc().unwrap_or(0.0)).collect(),
        v_min: scenario.controller.v_min,
        v_max: scenario.controller.v_max,
        soc_min: scenario.controller.soc_min,
        soc_max: scenario.controller.soc_max,
        pfc_rule: rules.pfc,
        vc_rule: rules.vc,
        voltage_setpoint: rules.voltage_setpoint,
        events: Vec::new(),
        rows: Vec::with_capacity(n_steps as usize + 1),
        abort: None,
    };

    let mut plant_state = PlantState { generation_loss: 0.0, thevenin_z: z_th, schedule_shift: 0.0 };
    let mut freq = FrequencyState::default();
    let mut imbalance = 0.0;
    let mut imbalance_estimate = 0.0;
    let mut g_sfc = 0.0;
    let mut sfc_request = 0.0;
    let mut command = MultirateInput::zeros(n_g);
    let mut voltages = initial.bus_voltages.clone();
    let mut v_est = initial.bus_voltages.clone();
    let mut next_event = 0;
    let mut captured = None;

    for k in 0..=n_steps {
        let t = k as f64 * ts;
        if k > 0 {
            freq = freq_model.advance(freq, imbalance);
            let (dp, dq) = command.setpoint_changes();
            for (d, u) in plant.units.iter_mut().enumerate() {
                step_der(u, dp[d], dq[d], ts);
            }
        }
        while next_event < scenario.events.len() && scenario.events[next_event].time <= t + 1e-9 {
            let ev = &scenario.events[next_event];
            plant_state = apply_event(&plant_state, ev);
            trace.events.push(EventRecord { time: t, step: k, kind: ev.kind, magnitude: ev.magnitude });
            next_event += 1;
        }

        let inj = plant_injections(&feeder, &plant);
        let source = SlackSource::Thevenin { e_mag, z: plant_state.thevenin_z * z_scale };
        let g = &scenario.grid;
        let state = match solve_bfs(&matrices, &inj, source, Some(&voltages), g.powerflow_tol, g.powerflow_max_iter) {
            Ok(sol) => sol.state,
            Err(e) => {
                trace.abort = Some(format!("step {k} (t = {t} s): {e}"));
                break;
            }
        };
        voltages = state.bus_voltages.clone();
        let (p_exp, q_exp) = exports(&state);
        let p0_dev = p_exp - sched_p - plant_state.schedule_shift;
        let q0_dev = q_exp - sched_q;
        let v_pcc = state.slack_voltage;

        // Sensing and estimation.
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(k);
        let readings = sense(&state, &per_node_injections(&inj), &suite, &mut rng);
        injection_model.slack_voltage = v_pcc;
        let meas = build_measurement_set(&readings, &suite, &injection_model, &v_est);
        v_est = wls_estimate(&meas)?.voltages()?;

        // Transmission side: AGC at slow instants, imbalance and RoCoF jumps.
        let sfc_in_force = sfc_request;
        if controller.schedule.z(k) {
            let y = agc.step(freq.omega, 0.0, scenario.timing.t_sa);
            g_sfc = -y;
            sfc_request = clip(scenario.services.sfc_participation * -y, scenario.services.sfc_reserve);
        }
        let feedback = match scenario.frequency.coupling {
            FrequencyCoupling::Open => 0.0,
            FrequencyCoupling::Closed => p0_dev,
        };
        let new_imbalance = plant_state.generation_loss - g_sfc - feedback;
        if new_imbalance != imbalance {
            let rocof_before = freq.omega_dot;
            freq.apply_imbalance_change(new_imbalance - imbalance, &freq_model.params);
            imbalance_estimate += -freq_model.params.inertia * (freq.omega_dot - rocof_before);
            imbalance = new_imbalance;
        }

        // Controller inputs.
        let x0 = controller.model.model.state_of(&plant);
        let i_d = DVector::from_fn(matrices.n(), |i, _| {
            let s_known = Complex64::new(inj.p[i], inj.q[i]);
            -(s_known / v_est[i]).conj()
        });
        let i_pre = matrices.bibc_complex() * i_d;
        let reduced = reduce_for_nodes(&matrices, &der_nodes, &v_est)?;
        let snapshot =
            NetworkSnapshot { reduced, v_pre: v_est.clone(), i_pre, i_max: i_max.clone(), slack_voltage: v_pcc };
        let sens = network_sensitivity(&snapshot.reduced, &controller.model.signs, v_pcc);
        let d0p = x0.rows(0, n_g);
        let d0q = x0.rows(n_g, n_g);
        let p_ctrl = sens.feeder.p_from_p.dot(&d0p) + sens.feeder.p_from_q.dot(&d0q);
        let q_ctrl = sens.feeder.q_from_p.dot(&d0p) + sens.feeder.q_from_q.dot(&d0q);
        let pcc = PccMeasurement {
            step: k,
            p_uncontrolled: p0_dev - p_ctrl,
            q_uncontrolled: q0_dev - q_ctrl,
            voltage: v_pcc,
        };
        let forcing = if scenario.frequency.rocof_estimate { imbalance_estimate } else { imbalance };
        let omega_pred = predict_frequency(&freq_model, freq, forcing, h);
        let targets = reserve_requirements(&omega_pred, &vec![0.0; h], &rules, &pcc, k)?;
        let held = controller.held_slow.clone();
        let inputs = StepInputs {
            k,
            x0: &x0,
            held_slow: &held,
            network: &snapshot,
            pfc: &targets.pfc,
            vc: &targets.vc,
            sfc: sfc_request,
        };
        if capture == Some(k) {
            captured = Some(assemble_qp(&controller.model, &controller.schedule, &controller.config, &inputs)?);
            break;
        }
        let action = controller.step(&inputs)?;

        trace.rows.push(TraceRow {
            step: k,
            time: t,
            freq_dev: freq.omega,
            rocof: freq.omega_dot,
            p0_dev,
            q0_dev,
            p0_import: state.feeder_power.re,
            q0_import: state.feeder_power.im,
            v_pcc,
            i0_re: state.feeder_current().re,
            i0_im: state.feeder_current().im,
            ref_pfc: droop_response(&rules.pfc, -freq.omega),
            ref_sfc: sfc_in_force,
            ref_vc: droop_response(&rules.vc, rules.voltage_setpoint - v_pcc),
            der_p: plant.units.iter().map(|u| u.p).collect(),
            der_q: plant.units.iter().map(|u| u.q).collect(),
            soc: bess.iter().map(|&i| plant.units[i].soc().unwrap_or(0.0)).collect(),
            v_mag: std::iter::once(v_pcc).chain(state.bus_voltages.iter().map(|v| v.norm())).collect(),
            i_ratio: state.branch_currents.iter().zip(i_max.iter()).map(|(i, m)| i.norm() / m).collect(),
            cmd_dp_fast: action.command.dp_fast.clone(),
            cmd_dq_fast: action.command.dq_fast.clone(),
            cmd_dp_slow: action.command.dp_slow.clone(),
            solver_ok: action.outcome.is_ok(),
            diagnostics: action.diagnostics.clone(),
        });
        command = action.command;
    }
    Ok((trace, captured))
}

impl ScenarioTrace {
    /// Writes one CSV row per fast step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step",
            "time",
            "freq_dev",
            "rocof",
            "p0_dev",
            "q0_dev",
            "p0_import",
            "q0_import",
            "v_pcc",
            "i0_re",
            "i0_im",
            "ref_pfc",
            "ref_sfc",
            "ref_vc",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for n in &self.der_names {
            header.push(format!("p_{n}"));
            header.push(format!("q_{n}"));
        }
        for n in &self.bess_names {
            header.push(format!("soc_{n}"));
        }
        for n in &self.der_names {
            header.push(format!("cmd_dp_fast_{n}"));
            header.push(format!("cmd_dq_fast_{n}"));
            header.push(format!("cmd_dp_slow_{n}"));
        }
        if let Some(r) = self.rows.first() {
            for i in 0..r.v_mag.len() {
                header.push(format!("v_{}", i + 1));
            }
            for b in 0..r.i_ratio.len() {
                header.push(format!("i_ratio_{}", b + 1));
            }
        }
        header.extend(["solver_ok", "objective", "kkt_max", "iterations", "solve_ms"].iter().map(|s| s.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec: Vec<String> = [
                r.time,
                r.freq_dev,
                r.rocof,
                r.p0_dev,
                r.q0_dev,
                r.p0_import,
                r.q0_import,
                r.v_pcc,
                r.i0_re,
                r.i0_im,
                r.ref_pfc,
                r.ref_sfc,
                r.ref_vc,
            ]
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
            rec.insert(0, r.step.to_string());
            for d in 0..r.der_p.len() {
                rec.push(format!("{:e}", r.der_p[d]));
                rec.push(format!("{:e}", r.der_q[d]));
            }
            rec.extend(r.soc.iter().map(|v| format!("{v:e}")));
            for d in 0..r.cmd_dp_fast.len() {
                rec.push(format!("{:e}", r.cmd_dp_fast[d]));
                rec.push(format!("{:e}", r.cmd_dq_fast[d]));
                rec.push(format!("{:e}", r.cmd_dp_slow[d]));
            }
            rec.extend(r.v_mag.iter().chain(&r.i_ratio).map(|v| format!("{v:e}")));
            rec.push(r.solver_ok.to_string());
            match &r.diagnostics {
                Some(d) => {
                    rec.push(format!("{:e}", d.objective));
                    rec.push(format!("{:e}", d.stationarity.max(d.primal).max(d.dual).max(d.complementarity)));
                    rec.push(d.iterations.to_string());
                    rec.push(format!("{:.3}", d.assembly_ms + d.solve_ms));
                }
                None => rec.extend(["", "", "", ""].iter().map(|s| s.to_string())),
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the per-step solver diagnostics as JSON lines.
    pub fn write_diagnostics<W: Write>(&self, mut out: W) -> Result<()> {
        for d in self.rows.iter().filter_map(|r| r.diagnostics.as_ref()) {
            serde_json::to_writer(&mut out, d).map_err(|e| Error::Config(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Run-level statistics written alongside the trace.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub steps: usize,
    pub aborted: Option<String>,
    pub events: Vec<EventRecord>,
    pub solves: usize,
    pub solver_failures: usize,
    pub median_step_ms: f64,
    pub max_step_ms: f64,
    pub max_kkt: f64,
    pub voltage_violation_steps: usize,
    pub current_violation_steps: usize,
    pub soc_violation_steps: usize,
    pub min_voltage: f64,
    pub max_voltage: f64,
    pub peak_p_export_dev: f64,
    pub peak_q_export_dev: f64,
    pub final_freq_dev: f64,
    pub final_p0_dev: f64,
    pub final_q0_dev: f64,
    /// Largest |ΔP₀ − (P_pfc + P_sfc)| over all rows.
    pub max_tracking_error: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn summarize(trace: &ScenarioTrace) -> RunSummary {
    let rows = &trace.rows;
    let diags: Vec<&StepDiagnostics> = rows.iter().filter_map(|r| r.diagnostics.as_ref()).collect();
    let tol = 1e-6;
    let last = rows.last();
    let abs_max =
        |f: &dyn Fn(&TraceRow) -> f64| rows.iter().map(f).fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
    RunSummary {
        name: trace.name.clone(),
        seed: trace.seed,
        steps: rows.len(),
        aborted: trace.abort.clone(),
        events: trace.events.clone(),
        solves: diags.len(),
        solver_failures: rows.iter().filter(|r| !r.solver_ok).count(),
        median_step_ms: median(diags.iter().map(|d| d.assembly_ms + d.solve_ms).collect()),
        max_step_ms: diags.iter().map(|d| d.assembly_ms + d.solve_ms).fold(0.0, f64::max),
        max_kkt: diags
            .iter()
            .map(|d| d.stationarity.max(d.primal).max(d.dual).max(d.complementarity))
            .fold(0.0, f64::max),
        voltage_violation_steps: rows
            .iter()
            .filter(|r| r.v_mag.iter().any(|v| *v < trace.v_min - tol || *v > trace.v_max + tol))
            .count(),
        current_violation_steps: rows.iter().filter(|r| r.i_ratio.iter().any(|i| *i > 1.0 + tol)).count(),
        soc_violation_steps: rows
            .iter()
            .filter(|r| r.soc.iter().any(|s| *s < trace.soc_min - tol || *s > trace.soc_max + tol))
            .count(),
        min_voltage: rows.iter().flat_map(|r| r.v_mag.iter().copied()).fold(f64::INFINITY, f64::min),
        max_voltage: rows.iter().flat_map(|r| r.v_mag.iter().copied()).fold(f64::NEG_INFINITY, f64::max),
        peak_p_export_dev: abs_max(&|r| r.p0_dev),
        peak_q_export_dev: abs_max(&|r| r.q0_dev),
        final_freq_dev: last.map_or(0.0, |r| r.freq_dev),
        final_p0_dev: last.map_or(0.0, |r| r.p0_dev),
        final_q0_dev: last.map_or(0.0, |r| r.q0_dev),
        max_tracking_error: rows.iter().map(|r| (r.p0_dev - r.ref_pfc - r.ref_sfc).abs()).fold(0.0, f64::max),
    }
}

/// Error surface over the scenario's fleet, ramped from a DER-free base case.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub granularity: f64,
    pub points: usize,
    pub diverged: usize,
    pub max_error: f64,
    pub error_at_full_ramp: f64,
    /// Largest error with both ramps at or below 0.2.
    pub max_error_small_region: f64,
    /// Ray samples where the error fell while moving outward.
    pub ray_decreases: usize,
    pub wall_ms: f64,
}

/// Runs the continuation error surface for the scenario's feeder and fleet.
///
/// DER `d` ramps by `k_p·P_d^max` and `k_q·Q_d^max`, the largest
/// generation-positive active and reactive injections of its capability set.
pub fn error_surface(scenario: &Scenario, granularity: f64) -> Result<(Vec<ErrorPoint>, SweepSummary)> {
    let start = std::time::Instant::now();
    let feeder = scenario.load_feeder()?;
    let v_s = scenario.grid.pcc_voltage;
    let matrices = build_bfs_matrices(&feeder.topology, v_s);
    let fleet = build_fleet(
        &scenario.fleet,
        &feeder,
        (scenario.controller.soc_min, scenario.controller.soc_max),
        scenario.timing.t_sp,
        &PlantOverrides::identity(),
    )?;
    let mut p_max = Vec::with_capacity(fleet.n_g());
    let mut q_max = Vec::with_capacity(fleet.n_g());
    for (u, cap) in fleet.units.iter().zip(fleet.capabilities()?) {
        let s = u.injection_sign();
        p_max.push(cap.support([s, 0.0]).max(0.0));
        q_max.push(cap.support([0.0, s]).max(0.0));
    }
    let base = InjectionVector::from_demand(&feeder.loads);
    let base_state = solve_bfs(
        &matrices,
        &base,
        SlackSource::Fixed(v_s),
        None,
        scenario.grid.powerflow_tol,
        scenario.grid.powerflow_max_iter,
    )?
    .state;
    let reduced = reduce_for_nodes(&matrices, &fleet.nodes(), &base_state.bus_voltages)?;
    let grid = grid_points(granularity)?;
    let points = continuation_error_surface(&matrices, &reduced, &base, &base_state, &p_max, &q_max, &grid)?;

    let steps = (1.0 / granularity).round() as usize;
    let at = |i: usize, j: usize| &points[i * (steps + 1) + j];
    let mut ray_decreases = 0;
    for i in 0..=steps {
        for j in 0..=steps {
            // Outward neighbour along the ray through the origin, when it lands on the grid.
            let g = gcd(i, j);
            if g == 0 {
                continue;
            }
            let (di, dj) = (i / g, j / g);
            if i + di <= steps && j + dj <= steps {
                let (a, b) = (at(i, j), at(i + di, j + dj));
                if a.converged && b.converged && b.rel_err_2norm < a.rel_err_2norm - 1e-15 {
                    ray_decreases += 1;
                }
            }
        }
    }
    let converged = || points.iter().filter(|p| p.converged);
    let summary = SweepSummary {
        granularity,
        points: points.len(),
        diverged: points.iter().filter(|p| !p.converged).count(),
        max_error: converged().map(|p| p.rel_err_2norm).fold(0.0, f64::max),
        error_at_full_ramp: at(steps, steps).rel_err_2norm,
        max_error_small_region: converged()
            .filter(|p| p.k_p <= 0.2 + 1e-12 && p.k_q <= 0.2 + 1e-12)
            .map(|p| p.rel_err_2norm)
            .fold(0.0, f64::max),
        ray_decreases,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((points, summary))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
