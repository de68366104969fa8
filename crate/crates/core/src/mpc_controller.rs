//! Multirate MPC: schedule bookkeeping, the periodic prediction system, QP
//! assembly and extraction of per-DER setpoint commands.
//!
//! Three channels per DER are commanded: a fast active-power adjustment
//! `ΔP*_p`, a fast reactive adjustment `ΔQ*_p` and a slow active adjustment
//! `ΔP*_a` that may only change at update instants (`k mod q = 0`). All three
//! are levels relative to the unit's baseline setpoint; the physical active
//! setpoint is `P* + ΔP*_p + ΔP*_a`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::der_fleet::{CapabilityPolytope, DerFleet, DerKind, KindParams, PredictionModel};
use crate::error::{Error, Result};
use crate::grid_model::ReducedMatrices;
use crate::qp_solver::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, WarmStart};

/// Fast/slow sampling pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultirateSchedule {
    pub t_sp: f64,
    pub t_sa: f64,
    pub q: u64,
}

pub fn build_schedule(t_sp: f64, t_sa: f64) -> Result<MultirateSchedule> {
    if !(t_sp > 0.0 && t_sa > 0.0) {
        return Err(Error::Schedule(format!("periods must be positive: T_sp {t_sp}, T_sa {t_sa}")));
    }
    let ratio = t_sa / t_sp;
    let q = ratio.round();
    if q < 1.0 || (ratio - q).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Schedule(format!("T_sa / T_sp = {ratio} is not a positive integer")));
    }
    Ok(MultirateSchedule { t_sp, t_sa, q: q as u64 })
}

impl MultirateSchedule {
    /// True at slow-channel update instants.
    pub fn z(&self, k: u64) -> bool {
        k.is_multiple_of(self.q)
    }

    /// Width of the free decision vector at step `k`.
    pub fn m_z(&self, k: u64, n_g: usize) -> usize {
        if self.z(k) {
            3 * n_g
        } else {
            2 * n_g
        }
    }
}

/// Full channel vector `[ΔP*_p; ΔQ*_p; ΔP*_a]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultirateInput {
    pub dp_fast: Vec<f64>,
    pub dq_fast: Vec<f64>,
    pub dp_slow: Vec<f64>,
}

impl MultirateInput {
    pub fn zeros(n_g: usize) -> Self {
        Self { dp_fast: vec![0.0; n_g], dq_fast: vec![0.0; n_g], dp_slow: vec![0.0; n_g] }
    }

    pub fn from_channels(v: &DVector<f64>, n_g: usize) -> Self {
        Self {
            dp_fast: v.rows(0, n_g).iter().copied().collect(),
            dq_fast: v.rows(n_g, n_g).iter().copied().collect(),
            dp_slow: v.rows(2 * n_g, n_g).iter().copied().collect(),
        }
    }

    /// Physical adjustments `(ΔP*, ΔQ*)` per DER.
    pub fn setpoint_changes(&self) -> (Vec<f64>, Vec<f64>) {
        let dp = self.dp_fast.iter().zip(&self.dp_slow).map(|(a, b)| a + b).collect();
        (dp, self.dq_fast.clone())
    }
}

/// Channel selector `C_z` (3n_g × m_z).
pub fn selector(z: bool, n_g: usize) -> DMatrix<f64> {
    let m = if z { 3 * n_g } else { 2 * n_g };
    let mut c = DMatrix::zeros(3 * n_g, m);
    for i in 0..m {
        c[(i, i)] = 1.0;
    }
    c
}

/// Hold injector `F_z` (3n_g × n_z): copies the held slow value into the slow channel when z = 0.
///
/// The augmented state is `[x; held]` with `held` the last `ΔP*_a` when
/// z = 0, and just `x` when z = 1.
pub fn hold_injector(z: bool, n_g: usize, n_s: usize) -> DMatrix<f64> {
    if z {
        return DMatrix::zeros(3 * n_g, n_s);
    }
    let mut f = DMatrix::zeros(3 * n_g, n_s + n_g);
    for d in 0..n_g {
        f[(2 * n_g + d, n_s + d)] = 1.0;
    }
    f
}

/// `C_z ū + û`: full channels from the free decision and the held slow value.
pub fn reconstruct(z: bool, ubar: &DVector<f64>, held: &DVector<f64>, n_g: usize) -> DVector<f64> {
    let mut v = selector(z, n_g) * ubar;
    if !z {
        v.rows_mut(2 * n_g, n_g).copy_from(held);
    }
    v
}

/// Per-DER cost coefficients and the branch-resistance diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CostProfile {
    pub c_p: Vec<f64>,
    pub c_q: Vec<f64>,
    pub c_a: Vec<f64>,
    pub branch_r: DVector<f64>,
}

/// Kind multiplier applied to the base coefficients.
pub fn kind_cost_scale(kind: DerKind) -> f64 {
    match kind {
        DerKind::Pv => 1.0,
        DerKind::Bess => 2.0,
        DerKind::Vshp => 5.0,
        DerKind::Dg => 10.0,
    }
}

impl CostProfile {
    pub fn for_fleet(fleet: &DerFleet, base: (f64, f64, f64), branch_r: DVector<f64>) -> Self {
        let (cq, cp, ca) = base;
        let s: Vec<f64> = fleet.units.iter().map(|u| kind_cost_scale(u.kind())).collect();
        Self {
            c_p: s.iter().map(|k| k * cp).collect(),
            c_q: s.iter().map(|k| k * cq).collect(),
            c_a: s.iter().map(|k| k * ca).collect(),
            branch_r,
        }
    }

    /// Checks `C_Q ≤ C_P ≤ C_A` per unit and the kind ordering pv ≤ bess ≤ vshp ≤ dg.
    pub fn validate(&self, fleet: &DerFleet) -> Result<()> {
        let n = fleet.n_g();
        if self.c_p.len() != n || self.c_q.len() != n || self.c_a.len() != n {
            return Err(Error::Config("cost vectors do not match the fleet".into()));
        }
        for d in 0..n {
            if !(0.0 < self.c_q[d] && self.c_q[d] <= self.c_p[d] && self.c_p[d] <= self.c_a[d]) {
                return Err(Error::Config(format!("unit {d}: costs must satisfy 0 < C_Q <= C_P <= C_A")));
            }
        }
        for (i, ui) in fleet.units.iter().enumerate() {
            for (j, uj) in fleet.units.iter().enumerate() {
                if kind_rank(ui.kind()) < kind_rank(uj.kind())
                    && !(self.c_p[i] <= self.c_p[j] && self.c_q[i] <= self.c_q[j] && self.c_a[i] <= self.c_a[j])
                {
                    return Err(Error::Config(format!(
                        "costs of {} unit {i} exceed those of {} unit {j}",
                        ui.kind().name(),
                        uj.kind().name()
                    )));
                }
            }
        }
        if self.branch_r.iter().any(|r| *r < 0.0) {
            return Err(Error::Config("branch resistances must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn max_coefficient(&self) -> f64 {
        self.c_p.iter().chain(&self.c_q).chain(&self.c_a).copied().fold(0.0, f64::max)
    }
}

fn kind_rank(kind: DerKind) -> u8 {
    match kind {
        DerKind::Pv => 0,
        DerKind::Bess => 1,
        DerKind::Vshp => 2,
        DerKind::Dg => 3,
    }
}

/// One step of the constrained linear periodic system.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicStep {
    pub z: bool,
    pub n_z: usize,
    pub n_z_next: usize,
    /// `n_z_next × n_z`.
    pub a_bar: DMatrix<f64>,
    /// `n_z_next × 3n_g`.
    pub b_bar: DMatrix<f64>,
    pub c_bar: DVector<f64>,
    pub c_z: DMatrix<f64>,
    pub f_z: DMatrix<f64>,
}

/// Periodic system over a horizon starting at absolute step `k0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSystem {
    pub k0: u64,
    pub steps: Vec<PeriodicStep>,
}

impl PeriodicSystem {
    pub fn build(model: &PredictionModel, schedule: &MultirateSchedule, k0: u64, horizon: usize) -> Self {
        let n_g = model.map.n_g;
        let n_s = model.map.n_s();
        let n_z = |k: u64| if schedule.z(k) { n_s } else { n_s + n_g };
        // Λ maps channels to the physical lanes [ΔP*; ΔQ*].
        let mut lanes = DMatrix::zeros(2 * n_g, 3 * n_g);
        for d in 0..n_g {
            lanes[(d, d)] = 1.0;
            lanes[(d, 2 * n_g + d)] = 1.0;
            lanes[(n_g + d, n_g + d)] = 1.0;
        }
        let bl = &model.b * lanes;
        let steps = (0..horizon as u64)
            .map(|j| {
                let k = k0 + j;
                let (nz, nzn) = (n_z(k), n_z(k + 1));
                let mut a_bar = DMatrix::zeros(nzn, nz);
                a_bar.view_mut((0, 0), (n_s, n_s)).copy_from(&model.a);
                let mut b_bar = DMatrix::zeros(nzn, 3 * n_g);
                b_bar.view_mut((0, 0), (n_s, 3 * n_g)).copy_from(&bl);
                let mut c_bar = DVector::zeros(nzn);
                c_bar.rows_mut(0, n_s).copy_from(&model.c);
                if !schedule.z(k + 1) {
                    for d in 0..n_g {
                        b_bar[(n_s + d, 2 * n_g + d)] = 1.0;
                    }
                }
                PeriodicStep {
                    z: schedule.z(k),
                    n_z: nz,
                    n_z_next: nzn,
                    a_bar,
                    b_bar,
                    c_bar,
                    c_z: selector(schedule.z(k), n_g),
                    f_z: hold_injector(schedule.z(k), n_g, n_s),
                }
            })
            .collect();
        Self { k0, steps }
    }

    /// Propagates `x̄_{j+1} = (Ā + B̄ F_z) x̄_j + B̄ C_z ū_j + c̄` for explicit inputs.
    pub fn simulate(&self, x0_bar: &DVector<f64>, ubar: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut out = vec![x0_bar.clone()];
        for (s, u) in self.steps.iter().zip(ubar) {
            let x = out.last().expect("nonempty");
            let next = (&s.a_bar + &s.b_bar * &s.f_z) * x + &s.b_bar * (&s.c_z * u) + &s.c_bar;
            out.push(next);
        }
        out
    }
}

/// Form of the penalty on delivery-constraint violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftPenalty {
    /// Nonnegative slack pairs with a linear cost (exact penalty).
    L1,
    /// Squared residual added to the objective.
    Quadratic,
}

/// Controller settings.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub soft_penalty: SoftPenalty,
    /// Penalty weight relative to the largest setpoint cost coefficient.
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

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
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

/// Export-positive feeder sensitivities to DER output changes (in each unit's own coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct FeederSensitivity {
    pub p_from_p: DVector<f64>,
    pub p_from_q: DVector<f64>,
    pub q_from_p: DVector<f64>,
    pub q_from_q: DVector<f64>,
}

/// Linear map from DER output changes to branch-current and voltage changes.
#[derive(Debug, Clone)]
pub struct NetworkSensitivity {
    /// `N × 2n_g` maps acting on `[δP; δQ]`.
    pub current_re: DMatrix<f64>,
    pub current_im: DMatrix<f64>,
    pub voltage_re: DMatrix<f64>,
    pub feeder: FeederSensitivity,
}

/// Builds the superimposed-circuit maps for DERs with injection signs `signs`.
pub fn network_sensitivity(reduced: &ReducedMatrices, signs: &[f64], v_s: f64) -> NetworkSensitivity {
    let n = reduced.bibc_r.nrows();
    let n_g = reduced.n_g();
    let w: Vec<Complex64> = (0..n_g).map(|d| signs[d] / reduced.v_bar_r[d].conj()).collect();
    // Drawn-current change per unit δP and δQ at each DER.
    let di_p: Vec<Complex64> = w.iter().map(|w| Complex64::new(-w.re, -w.im)).collect();
    let di_q: Vec<Complex64> = w.iter().map(|w| Complex64::new(-w.im, w.re)).collect();
    let mut current_re = DMatrix::zeros(n, 2 * n_g);
    let mut current_im = DMatrix::zeros(n, 2 * n_g);
    let mut voltage_re = DMatrix::zeros(n, 2 * n_g);
    for d in 0..n_g {
        for (col, di) in [(d, di_p[d]), (n_g + d, di_q[d])] {
            for b in 0..n {
                let bibc = reduced.bibc_r[(b, d)];
                current_re[(b, col)] = bibc * di.re;
                current_im[(b, col)] = bibc * di.im;
                voltage_re[(b, col)] = -(reduced.dlf_r[(b, d)] * di).re;
            }
        }
    }
    let row = &reduced.feeder_row;
    let feeder = FeederSensitivity {
        p_from_p: DVector::from_fn(n_g, |d, _| v_s * row[d] * w[d].re),
        p_from_q: DVector::from_fn(n_g, |d, _| v_s * row[d] * w[d].im),
        q_from_p: DVector::from_fn(n_g, |d, _| -v_s * row[d] * w[d].im),
        q_from_q: DVector::from_fn(n_g, |d, _| v_s * row[d] * w[d].re),
    };
    NetworkSensitivity { current_re, current_im, voltage_re, feeder }
}

/// A single linear delivery row `coeff_p · ΔP + coeff_q · ΔQ = target`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRow {
    pub coeff_p: DVector<f64>,
    pub coeff_q: DVector<f64>,
    pub target: f64,
}

/// Feeder delivery rows for PFC (active), VC (reactive) and SFC (slow active lane).
pub fn delivery_targets_to_constraints(
    pfc: f64,
    vc: f64,
    sfc: f64,
    reduced: &ReducedMatrices,
    signs: &[f64],
    v_s: f64,
) -> [DeliveryRow; 3] {
    let f = network_sensitivity(reduced, signs, v_s).feeder;
    let zeros = DVector::zeros(reduced.n_g());
    [
        DeliveryRow { coeff_p: f.p_from_p.clone(), coeff_q: f.p_from_q.clone(), target: pfc },
        DeliveryRow { coeff_p: f.q_from_p, coeff_q: f.q_from_q, target: vc },
        DeliveryRow { coeff_p: f.p_from_p, coeff_q: zeros, target: sfc },
    ]
}

/// Network operating point seen by the controller.
#[derive(Debug, Clone)]
pub struct NetworkSnapshot {
    pub reduced: ReducedMatrices,
    pub v_pre: DVector<Complex64>,
    pub i_pre: DVector<Complex64>,
    pub i_max: DVector<f64>,
    pub slack_voltage: f64,
}

/// Everything that changes from one control step to the next.
#[derive(Debug, Clone)]
pub struct StepInputs<'a> {
    pub k: u64,
    pub x0: &'a DVector<f64>,
    pub held_slow: &'a DVector<f64>,
    pub network: &'a NetworkSnapshot,
    /// Per-step active delivery targets for the fast lanes (length H).
    pub pfc: &'a [f64],
    /// Per-step reactive delivery targets (length H).
    pub vc: &'a [f64],
    /// Slow-lane active delivery target.
    pub sfc: f64,
}

/// Static controller data: fleet model, capabilities and costs.
#[derive(Debug, Clone)]
pub struct ControllerModel {
    pub model: PredictionModel,
    pub capabilities: Vec<CapabilityPolytope>,
    pub baseline: Vec<(f64, f64)>,
    pub signs: Vec<f64>,
    pub costs: CostProfile,
}

impl ControllerModel {
    pub fn new(fleet: &DerFleet, model: PredictionModel, costs: CostProfile) -> Result<Self> {
        costs.validate(fleet)?;
        let capabilities = fleet.capabilities()?;
        for (u, c) in fleet.units.iter().zip(&capabilities) {
            if !c.contains(u.p_set, u.q_set, 1e-9) {
                return Err(Error::Config(format!("baseline setpoint of {} lies outside its capability set", u.name)));
            }
        }
        Ok(Self {
            model,
            capabilities,
            baseline: fleet.units.iter().map(|u| (u.p_set, u.q_set)).collect(),
            signs: fleet.units.iter().map(|u| u.injection_sign()).collect(),
            costs,
        })
    }

    pub fn n_g(&self) -> usize {
        self.model.map.n_g
    }
}

/// Positions of the decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    pub n_g: usize,
    pub offsets: Vec<usize>,
    pub widths: Vec<usize>,
    pub slack_offset: usize,
    pub n_slack: usize,
}

impl DecisionLayout {
    pub fn n_inputs(&self) -> usize {
        self.slack_offset
    }
    pub fn n(&self) -> usize {
        self.slack_offset + self.n_slack
    }
}

/// Assembled MPC problem.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: QpProblem,
    pub layout: DecisionLayout,
    pub k: u64,
    pub z0: bool,
    pub held_slow: DVector<f64>,
    pub n_pruned: usize,
    /// Key of each inequality row.
    pub row_keys: Vec<RowKey>,
    pub delivery: Vec<DeliveryExpr>,
    pub assembly_time: std::time::Duration,
}

/// Delivery expression `g·ū + g0` and its target; `kind` is 0 = PFC, 1 = VC, 2 = SFC.
#[derive(Debug, Clone)]
pub struct DeliveryExpr {
    pub kind: usize,
    pub g: DVector<f64>,
    pub g0: f64,
    pub target: f64,
}

impl DeliveryExpr {
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        self.g.dot(x) + self.g0 - self.target
    }
}

/// Affine expression `M ū + m`.
#[derive(Debug, Clone)]
struct Affine {
    m: DMatrix<f64>,
    c: DVector<f64>,
}

fn interval_bounds(
    model: &PredictionModel,
    x0: &DVector<f64>,
    lane_lo: &DVector<f64>,
    lane_hi: &DVector<f64>,
    horizon: usize,
) -> Vec<(DVector<f64>, DVector<f64>)> {
    let a_abs = model.a.abs();
    let b_abs = model.b.abs();
    let uc = (lane_lo + lane_hi) * 0.5;
    let ur = (lane_hi - lane_lo) * 0.5;
    let mut xc = x0.clone();
    let mut xr = DVector::zeros(x0.len());
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        xc = &model.a * &xc + &model.b * &uc + &model.c;
        xr = &a_abs * &xr + &b_abs * &ur;
        out.push((xc.clone(), xr.clone()));
    }
    out
}

/// Identity of a constraint row that is stable across control steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowKey {
    /// Absolute sampling step the row constrains.
    pub step: u64,
    pub kind: RowKind,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowKind {
    Capability,
    Current,
    VoltageMax,
    VoltageMin,
    SocMax,
    SocMin,
    Delivery,
}

struct RowSink {
    rows: Vec<DVector<f64>>,
    rhs: Vec<f64>,
    keys: Vec<RowKey>,
    n: usize,
    step: u64,
}

impl RowSink {
    fn push(&mut self, kind: RowKind, index: usize, coeffs: DVector<f64>, rhs: f64) {
        debug_assert_eq!(coeffs.len(), self.n);
        self.rows.push(coeffs);
        self.rhs.push(rhs);
        self.keys.push(RowKey { step: self.step, kind, index: index as u32 });
    }
}

/// Builds the QP for one control step.
pub fn assemble_qp(
    ctrl: &ControllerModel,
    schedule: &MultirateSchedule,
    config: &MpcConfig,
    inputs: &StepInputs<'_>,
) -> Result<MpcProblem> {
    let start = Instant::now();
    let h = config.horizon;
    let n_g = ctrl.n_g();
    let model = &ctrl.model;
    let n_s = model.map.n_s();
    let net = inputs.network;
    let n_br = net.reduced.bibc_r.nrows();
    if h == 0 {
        return Err(Error::Assembly("horizon must be at least one step".into()));
    }
    if inputs.x0.len() != n_s || inputs.held_slow.len() != n_g {
        return Err(Error::Assembly(format!(
            "state/held lengths {}/{} do not match n_s = {n_s}, n_g = {n_g}",
            inputs.x0.len(),
            inputs.held_slow.len()
        )));
    }
    if inputs.pfc.len() != h || inputs.vc.len() != h {
        return Err(Error::Assembly(format!("target sequences must have length {h}")));
    }
    if net.reduced.n_g() != n_g || net.v_pre.len() != n_br || net.i_pre.len() != n_br || net.i_max.len() != n_br {
        return Err(Error::Assembly("network snapshot dimensions disagree with the fleet".into()));
    }
    if ctrl.costs.branch_r.len() != n_br {
        return Err(Error::Assembly("branch resistance vector has the wrong length".into()));
    }

    let k0 = inputs.k;
    let mut offsets = Vec::with_capacity(h);
    let mut widths = Vec::with_capacity(h);
    let mut n_in = 0;
    for j in 0..h as u64 {
        offsets.push(n_in);
        let w = schedule.m_z(k0 + j, n_g);
        widths.push(w);
        n_in += w;
    }
    let n_slack = if config.soft_penalty == SoftPenalty::L1 { 3 * h } else { 0 };
    let layout = DecisionLayout { n_g, offsets, widths, slack_offset: n_in, n_slack };
    let n = layout.n();

    // Condensed prediction through the periodic system.
    let sys = PeriodicSystem::build(model, schedule, k0, h);
    let z0 = schedule.z(k0);
    let mut x_bar = Affine { m: DMatrix::zeros(sys.steps[0].n_z, n), c: DVector::zeros(sys.steps[0].n_z) };
    x_bar.c.rows_mut(0, n_s).copy_from(inputs.x0);
    if !z0 {
        x_bar.c.rows_mut(n_s, n_g).copy_from(inputs.held_slow);
    }
    let mut channels: Vec<Affine> = Vec::with_capacity(h);
    let mut states: Vec<Affine> = Vec::with_capacity(h);
    for (j, st) in sys.steps.iter().enumerate() {
        let mut v = Affine { m: &st.f_z * &x_bar.m, c: &st.f_z * &x_bar.c };
        for i in 0..layout.widths[j] {
            for r in 0..3 * n_g {
                let cz = st.c_z[(r, i)];
                if cz != 0.0 {
                    v.m[(r, layout.offsets[j] + i)] += cz;
                }
            }
        }
        let closed = &st.a_bar;
        let next =
            Affine { m: closed * &x_bar.m + &st.b_bar * &v.m, c: closed * &x_bar.c + &st.b_bar * &v.c + &st.c_bar };
        channels.push(v);
        x_bar = next;
        states.push(Affine { m: x_bar.m.rows(0, n_s).into_owned(), c: x_bar.c.rows(0, n_s).into_owned() });
    }

    // Objective.
    let costs = &ctrl.costs;
    let mut hess = DMatrix::zeros(n, n);
    let mut lin = DVector::zeros(n);
    for v in &channels {
        for d in 0..n_g {
            for (row, c) in [(d, costs.c_p[d]), (n_g + d, costs.c_q[d]), (2 * n_g + d, costs.c_a[d])] {
                let r = v.m.row(row);
                let nz: Vec<usize> = (0..n).filter(|&i| r[i] != 0.0).collect();
                for &a in &nz {
                    lin[a] += 2.0 * c * r[a] * v.c[row];
                    for &b in &nz {
                        hess[(a, b)] += 2.0 * c * r[a] * r[b];
                    }
                }
            }
        }
    }
    let sens = network_sensitivity(&net.reduced, &ctrl.signs, net.slack_voltage);
    let delta0 = inputs.x0.rows(0, 2 * n_g).into_owned();
    if config.loss_weight > 0.0 {
        let r = &costs.branch_r;
        let weigh = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for (b, mut row) in out.row_iter_mut().enumerate() {
                row *= r[b];
            }
            out
        };
        let q_loss =
            sens.current_re.tr_mul(&weigh(&sens.current_re)) + sens.current_im.tr_mul(&weigh(&sens.current_im));
        let (ic_re, ic_im) = if config.loss_on_total_current {
            let re = net.i_pre.map(|c| c.re) - &sens.current_re * &delta0;
            let im = net.i_pre.map(|c| c.im) - &sens.current_im * &delta0;
            (re, im)
        } else {
            (DVector::zeros(n_br), DVector::zeros(n_br))
        };
        let g_lin = sens.current_re.tr_mul(&ic_re.component_mul(r)) + sens.current_im.tr_mul(&ic_im.component_mul(r));
        let w = config.loss_weight;
        for st in &states {
            let y = st.m.rows(0, 2 * n_g);
            let yc = st.c.rows(0, 2 * n_g);
            let qy = &q_loss * y;
            hess += (y.transpose() * &qy) * (2.0 * w);
            lin += y.transpose() * (&q_loss * yc + &g_lin) * (2.0 * w);
        }
    }
    let penalty = config.penalty_factor * costs.max_coefficient();
    for s in 0..n_slack {
        lin[layout.slack_offset + s] = penalty;
    }
    let mut delivery = Vec::with_capacity(3 * h);

    // Constraints.
    let mut sink = RowSink { rows: Vec::new(), rhs: Vec::new(), keys: Vec::new(), n, step: k0 };
    let mut n_pruned = 0;

    let mut lane_lo = DVector::zeros(2 * n_g);
    let mut lane_hi = DVector::zeros(2 * n_g);
    for d in 0..n_g {
        let (pb, qb) = ctrl.capabilities[d].bounding_box();
        let (p0, q0) = ctrl.baseline[d];
        lane_lo[d] = pb[0] - p0;
        lane_hi[d] = pb[1] - p0;
        lane_lo[n_g + d] = qb[0] - q0;
        lane_hi[n_g + d] = qb[1] - q0;
    }
    let boxes = interval_bounds(model, inputs.x0, &lane_lo, &lane_hi, h);

    for (j, v) in channels.iter().enumerate() {
        sink.step = k0 + j as u64;
        for d in 0..n_g {
            let cap = &ctrl.capabilities[d];
            let (p0, q0) = ctrl.baseline[d];
            let lane_p = v.m.row(d) + v.m.row(2 * n_g + d);
            let lane_p_c = v.c[d] + v.c[2 * n_g + d];
            let lane_q = v.m.row(n_g + d);
            let lane_q_c = v.c[n_g + d];
            for (face, (a, b)) in cap.a.iter().zip(&cap.b).enumerate() {
                let coeffs = (&lane_p * a[0] + lane_q * a[1]).transpose();
                let rhs = b - a[0] * (p0 + lane_p_c) - a[1] * (q0 + lane_q_c);
                if coeffs.iter().all(|c| *c == 0.0) {
                    if rhs < -1e-9 {
                        return Err(Error::Config(format!("held setpoint of unit {d} violates its capability set")));
                    }
                    continue;
                }
                sink.push(RowKind::Capability, 64 * d + face, coeffs, rhs);
            }
        }
        let st = &states[j];
        let (xc, xr) = &boxes[j];
        let keep = |g: &DVector<f64>, g0: f64, limit: f64, offset: usize| -> bool {
            if !config.prune {
                return true;
            }
            let mut hi = g0;
            for i in 0..g.len() {
                hi += g[i] * xc[offset + i] + g[i].abs() * xr[offset + i];
            }
            hi > limit - 1e-9
        };
        // Network rows act on δ_{j+1} - δ_0.
        let y = st.m.rows(0, 2 * n_g).into_owned();
        let yc = st.c.rows(0, 2 * n_g).into_owned();
        let rad = (PI / 8.0).cos();
        for b in 0..n_br {
            let gr = sens.current_re.row(b).transpose();
            let gi = sens.current_im.row(b).transpose();
            let gv = sens.voltage_re.row(b).transpose();
            let i_pre = net.i_pre[b];
            for i in 0..8 {
                let th = i as f64 * PI / 4.0;
                let g = &gr * th.cos() + &gi * th.sin();
                let g0 = th.cos() * i_pre.re + th.sin() * i_pre.im - g.dot(&delta0);
                let limit = net.i_max[b] * rad;
                if keep(&g, g0, limit, 0) {
                    sink.push(RowKind::Current, 8 * b + i, y.tr_mul(&g), limit - g0 - g.dot(&yc));
                } else {
                    n_pruned += 1;
                }
            }
            let v0 = net.v_pre[b].re - gv.dot(&delta0);
            if keep(&gv, v0, config.v_max, 0) {
                sink.push(RowKind::VoltageMax, b, y.tr_mul(&gv), config.v_max - v0 - gv.dot(&yc));
            } else {
                n_pruned += 1;
            }
            let neg = -&gv;
            if keep(&neg, -v0, -config.v_min, 0) {
                sink.push(RowKind::VoltageMin, b, y.tr_mul(&neg), -config.v_min + v0 + gv.dot(&yc));
            } else {
                n_pruned += 1;
            }
        }
        for b in 0..model.map.n_b {
            let row = model.map.soc(b);
            let mut e = DVector::zeros(n_s);
            e[row] = 1.0;
            let sm = st.m.row(row).transpose();
            let sc = st.c[row];
            if keep(&e, 0.0, config.soc_max, 0) {
                sink.push(RowKind::SocMax, b, sm.clone(), config.soc_max - sc);
            } else {
                n_pruned += 1;
            }
            if keep(&(-&e), 0.0, -config.soc_min, 0) {
                sink.push(RowKind::SocMin, b, -sm, sc - config.soc_min);
            } else {
                n_pruned += 1;
            }
        }

        // Soft delivery rows.
        let f = &sens.feeder;
        let out_p = y.tr_mul(&DVector::from_iterator(2 * n_g, f.p_from_p.iter().chain(f.p_from_q.iter()).copied()));
        let out_p_c = f.p_from_p.dot(&yc.rows(0, n_g)) + f.p_from_q.dot(&yc.rows(n_g, n_g));
        let out_q = y.tr_mul(&DVector::from_iterator(2 * n_g, f.q_from_p.iter().chain(f.q_from_q.iter()).copied()));
        let out_q_c = f.q_from_p.dot(&yc.rows(0, n_g)) + f.q_from_q.dot(&yc.rows(n_g, n_g));
        let slow = v.m.rows(2 * n_g, n_g).tr_mul(&f.p_from_p);
        let slow_c = f.p_from_p.dot(&v.c.rows(2 * n_g, n_g));
        let exprs = [
            (&out_p - &slow, out_p_c - slow_c, inputs.pfc[j]),
            (out_q, out_q_c, inputs.vc[j]),
            (slow.clone(), slow_c, inputs.sfc),
        ];
        for (e, (g, g0, target)) in exprs.into_iter().enumerate() {
            match config.soft_penalty {
                SoftPenalty::L1 => {
                    let t = layout.slack_offset + 3 * j + e;
                    let mut up = g.clone();
                    up[t] = -1.0;
                    sink.push(RowKind::Delivery, 2 * e, up, target - g0);
                    let mut dn = -&g;
                    dn[t] = -1.0;
                    sink.push(RowKind::Delivery, 2 * e + 1, dn, g0 - target);
                }
                SoftPenalty::Quadratic => {
                    let nz: Vec<usize> = (0..n).filter(|&i| g[i] != 0.0).collect();
                    for &a in &nz {
                        lin[a] += 2.0 * penalty * g[a] * (g0 - target);
                        for &b in &nz {
                            hess[(a, b)] += 2.0 * penalty * g[a] * g[b];
                        }
                    }
                }
            }
            delivery.push(DeliveryExpr { kind: e, g, g0, target });
        }
    }

    let hess = (&hess + hess.transpose()) * 0.5;
    let m = sink.rows.len();
    let mut a_in = DMatrix::zeros(m, n);
    for (i, r) in sink.rows.iter().enumerate() {
        a_in.set_row(i, &r.transpose());
    }
    let b_in = DVector::from_vec(sink.rhs);
    let row_keys = sink.keys;
    let mut qp = QpProblem::new(hess, lin).with_ineq(a_in, b_in);
    if n_slack > 0 {
        let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
        for s in 0..n_slack {
            lower[layout.slack_offset + s] = 0.0;
        }
        qp = qp.with_bounds(Some(lower), None);
    }
    Ok(MpcProblem {
        qp,
        layout,
        k: k0,
        z0,
        held_slow: inputs.held_slow.clone(),
        n_pruned,
        row_keys,
        delivery,
        assembly_time: start.elapsed(),
    })
}

/// Per-step solver diagnostics (one JSON line each).
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub status: String,
    pub objective: f64,
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    pub slack_pfc: f64,
    pub slack_vc: f64,
    pub slack_sfc: f64,
    pub slack_total: f64,
    pub active_constraints: usize,
    pub n_variables: usize,
    pub n_constraints: usize,
    pub n_pruned: usize,
    pub iterations: usize,
    pub polished: bool,
    pub assembly_ms: f64,
    pub solve_ms: f64,
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub command: MultirateInput,
    /// Raw first-step decision `ū_0`.
    pub ubar0: DVector<f64>,
    /// Full decision trajectory.
    pub solution: QpSolution,
    pub diagnostics: StepDiagnostics,
}

/// Solves an assembled problem and extracts the receding-horizon command.
pub fn solve_step(problem: &MpcProblem, config: &MpcConfig, warm: Option<&WarmStart>) -> Result<StepOutcome> {
    let settings = QpSettings { kkt_tol: config.kkt_tol, max_iter: config.max_iter, ..QpSettings::default() };
    let sol = QpSolver::new(problem.qp.clone(), settings)?.solve(warm)?;
    let lay = &problem.layout;
    let n_g = lay.n_g;
    let slack =
        |e: usize| problem.delivery.iter().filter(|d| d.kind == e).map(|d| d.residual(&sol.primal).abs()).sum::<f64>();
    let diagnostics = StepDiagnostics {
        step: problem.k,
        status: sol.status.to_string(),
        objective: sol.objective,
        stationarity: sol.kkt.stationarity,
        primal: sol.kkt.primal,
        dual: sol.kkt.dual,
        complementarity: sol.kkt.complementarity,
        slack_pfc: slack(0),
        slack_vc: slack(1),
        slack_sfc: slack(2),
        slack_total: slack(0) + slack(1) + slack(2),
        active_constraints: sol.dual_ineq.iter().filter(|&&y| y > 1e-9).count(),
        n_variables: lay.n(),
        n_constraints: problem.qp.b_in.len(),
        n_pruned: problem.n_pruned,
        iterations: sol.iterations,
        polished: sol.polished,
        assembly_ms: problem.assembly_time.as_secs_f64() * 1e3,
        solve_ms: sol.solve_time.as_secs_f64() * 1e3,
    };
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver { status: sol.status.to_string(), residual: sol.kkt.max() });
    }
    let ubar0 = sol.primal.rows(lay.offsets[0], lay.widths[0]).into_owned();
    let channels = reconstruct(problem.z0, &ubar0, &problem.held_slow, n_g);
    Ok(StepOutcome { command: MultirateInput::from_channels(&channels, n_g), ubar0, solution: sol, diagnostics })
}

/// Stateful controller: holds the slow channel and the last applied command.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    pub schedule: MultirateSchedule,
    pub model: ControllerModel,
    pub held_slow: DVector<f64>,
    pub last_command: MultirateInput,
    pub failures: usize,
    previous: Option<PreviousSolution>,
}

#[derive(Debug, Clone)]
struct PreviousSolution {
    k: u64,
    offsets: Vec<usize>,
    widths: Vec<usize>,
    primal: DVector<f64>,
    duals: HashMap<RowKey, f64>,
}

impl PreviousSolution {
    fn new(problem: &MpcProblem, sol: &QpSolution) -> Self {
        let duals = problem
            .row_keys
            .iter()
            .zip(sol.dual_ineq.iter())
            .filter(|(_, &y)| y != 0.0)
            .map(|(k, &y)| (*k, y))
            .collect();
        Self {
            k: problem.k,
            offsets: problem.layout.offsets.clone(),
            widths: problem.layout.widths.clone(),
            primal: sol.primal.clone(),
            duals,
        }
    }

    /// Previous trajectory shifted onto `problem`'s horizon; the step beyond the
    /// old horizon repeats the last step with the same width.
    fn shifted(&self, problem: &MpcProblem) -> Option<WarmStart> {
        let lay = &problem.layout;
        let shift = problem.k.checked_sub(self.k)? as usize;
        let mut x = DVector::zeros(lay.n());
        for j in 0..lay.widths.len() {
            let w = lay.widths[j];
            let src = (j + shift..self.widths.len()).chain((0..self.widths.len()).rev()).find(|&i| self.widths[i] == w);
            if let Some(i) = src {
                x.rows_mut(lay.offsets[j], w).copy_from(&self.primal.rows(self.offsets[i], w));
            }
        }
        let m = problem.qp.b_in.len();
        let mut y = DVector::zeros(m + if lay.n_slack > 0 { lay.n() } else { 0 });
        let last = self.k + self.widths.len() as u64 - 1;
        for (r, key) in problem.row_keys.iter().enumerate() {
            let key = if key.step > last { RowKey { step: last, ..*key } } else { *key };
            if let Some(v) = self.duals.get(&key) {
                y[r] = *v;
            }
        }
        Some(WarmStart { x, y })
    }
}

/// Command applied after a control step, with the solver outcome when it succeeded.
#[derive(Debug, Clone)]
pub struct ControlAction {
    pub command: MultirateInput,
    pub outcome: std::result::Result<StepOutcome, String>,
    pub diagnostics: Option<StepDiagnostics>,
}

impl MpcController {
    pub fn new(config: MpcConfig, schedule: MultirateSchedule, model: ControllerModel) -> Self {
        let n_g = model.n_g();
        Self {
            config,
            schedule,
            model,
            held_slow: DVector::zeros(n_g),
            last_command: MultirateInput::zeros(n_g),
            failures: 0,
            previous: None,
        }
    }

    /// Assembles and solves; on failure the previous command is held for this step.
    pub fn step(&mut self, inputs: &StepInputs<'_>) -> Result<ControlAction> {
        let problem = assemble_qp(&self.model, &self.schedule, &self.config, inputs)?;
        let warm = self.previous.as_ref().and_then(|p| p.shifted(&problem));
        let mut result = solve_step(&problem, &self.config, warm.as_ref());
        if warm.is_some() && matches!(result, Err(Error::Solver { .. })) {
            result = solve_step(&problem, &self.config, None);
        }
        match result {
            Ok(out) => {
                self.previous = Some(PreviousSolution::new(&problem, &out.solution));
                self.held_slow = DVector::from_vec(out.command.dp_slow.clone());
                self.last_command = out.command.clone();
                let diag = out.diagnostics.clone();
                Ok(ControlAction { command: out.command.clone(), outcome: Ok(out), diagnostics: Some(diag) })
            }
            Err(e @ Error::Solver { .. }) => {
                self.failures += 1;
                self.previous = None;
                log::warn!("step {}: {e}; holding previous command", inputs.k);
                Ok(ControlAction { command: self.last_command.clone(), outcome: Err(e.to_string()), diagnostics: None })
            }
            Err(e) => Err(e),
        }
    }
}

/// Whether a unit kind uses the reactive fast channel.
pub fn uses_reactive_channel(params: &KindParams) -> bool {
    !matches!(params, KindParams::Vshp(_))
}
