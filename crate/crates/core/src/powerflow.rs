//! Linearized single-iteration BFS, the superimposed Δ-circuit and an exact
//! sweep solver used as the nonlinear reference.
//!
//! Injections are generation-positive. The current *drawn* at a node is
//! `I_d = -conj(S_gen / V)`, branch currents are `BIBC · I_d` and flow away
//! from the substation, and the feeder power `V_s · conj(I_0)` is the power
//! imported by the network.

use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid_model::{BfsMatrices, ReducedMatrices};

/// Nodal injections over the non-slack nodes, generation positive.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl InjectionVector {
    pub fn zeros(n: usize) -> Self {
        Self { p: DVector::zeros(n), q: DVector::zeros(n) }
    }

    /// Injections equal to minus the given per-node demand (index 0 is the substation).
    pub fn from_demand(loads: &[Complex64]) -> Self {
        let n = loads.len() - 1;
        Self {
            p: DVector::from_iterator(n, loads[1..].iter().map(|s| -s.re)),
            q: DVector::from_iterator(n, loads[1..].iter().map(|s| -s.im)),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Adds `(dp, dq)` at internal node `node`.
    pub fn add_at(&mut self, node: usize, dp: f64, dq: f64) {
        self.p[node - 1] += dp;
        self.q[node - 1] += dq;
    }

    pub fn complex(&self, i: usize) -> Complex64 {
        Complex64::new(self.p[i], self.q[i])
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.p.len() != n || self.q.len() != n {
            return Err(Error::Assembly(format!("injection vector has length {}, expected {n}", self.p.len())));
        }
        if self.p.iter().chain(self.q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Assembly("non-finite injection".into()));
        }
        Ok(())
    }
}

/// Bus voltages, branch currents and feeder power of one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub bus_voltages: DVector<Complex64>,
    pub branch_currents: DVector<Complex64>,
    /// Imported power `V_s · conj(I_feeder)`.
    pub feeder_power: Complex64,
    pub slack_voltage: f64,
}

impl NetworkState {
    /// Flat state with every node at the slack voltage and no current.
    pub fn flat(n: usize, slack_voltage: f64) -> Self {
        Self {
            bus_voltages: DVector::from_element(n, Complex64::new(slack_voltage, 0.0)),
            branch_currents: DVector::zeros(n),
            feeder_power: Complex64::new(0.0, 0.0),
            slack_voltage,
        }
    }

    pub fn feeder_current(&self) -> Complex64 {
        self.branch_currents[0]
    }

    pub fn voltage_magnitudes(&self) -> Vec<f64> {
        self.bus_voltages.iter().map(|v| v.norm()).collect()
    }
}

/// Branch-current and bus-voltage changes of the superimposed circuit.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperposedDelta {
    pub delta_i: DVector<Complex64>,
    pub delta_v: DVector<Complex64>,
}

fn drawn_currents(inj: &InjectionVector, v: &DVector<Complex64>) -> Result<DVector<Complex64>> {
    let mut out = DVector::zeros(inj.len());
    for i in 0..inj.len() {
        if v[i].norm() < 1e-12 {
            return Err(Error::SingularLinearization { node: i + 1 });
        }
        out[i] = -(inj.complex(i) / v[i]).conj();
    }
    Ok(out)
}

fn state_from_drawn(m: &BfsMatrices, i_d: &DVector<Complex64>, v_s: f64) -> NetworkState {
    let branch_currents = m.bibc_complex() * i_d;
    let drop = &m.dlf * i_d;
    let bus_voltages = drop.map(|d| Complex64::new(v_s, 0.0) - d);
    let feeder_power = v_s * branch_currents[0].conj();
    NetworkState { bus_voltages, branch_currents, feeder_power, slack_voltage: v_s }
}

/// One linearized BFS iteration about `linearization_voltages`.
pub fn linear_bfs_step(
    matrices: &BfsMatrices,
    injections: &InjectionVector,
    linearization_voltages: &DVector<Complex64>,
) -> Result<NetworkState> {
    injections.check(matrices.n())?;
    let i_d = drawn_currents(injections, linearization_voltages)?;
    Ok(state_from_drawn(matrices, &i_d, matrices.slack_voltage))
}

/// Δ-currents and Δ-voltages caused by DER injection changes.
pub fn superposed_delta(reduced: &ReducedMatrices, delta_p: &[f64], delta_q: &[f64]) -> Result<SuperposedDelta> {
    let n_g = reduced.n_g();
    if delta_p.len() != n_g || delta_q.len() != n_g {
        return Err(Error::Assembly(format!(
            "delta vectors have lengths {}/{}, expected {n_g}",
            delta_p.len(),
            delta_q.len()
        )));
    }
    let di_d = DVector::from_iterator(
        n_g,
        (0..n_g).map(|c| -(Complex64::new(delta_p[c], delta_q[c]) / reduced.v_bar_r[c]).conj()),
    );
    let bibc = reduced.bibc_r.map(|v| Complex64::new(v, 0.0));
    Ok(SuperposedDelta { delta_i: bibc * &di_d, delta_v: -(&reduced.dlf_r * di_d) })
}

/// Source feeding the slack bus during an exact power-flow solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlackSource {
    /// Fixed real slack voltage.
    Fixed(f64),
    /// Source `|E|` behind impedance `z`; the slack voltage is taken as the angle reference.
    Thevenin { e_mag: f64, z: Complex64 },
}

/// Result of an exact power-flow solve.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub state: NetworkState,
    pub iterations: usize,
    pub mismatch: f64,
}

fn thevenin_voltage(e_mag: f64, z: Complex64, i_feeder: Complex64) -> Option<f64> {
    let zi = z * i_feeder;
    let disc = e_mag * e_mag - zi.im * zi.im;
    (disc >= 0.0).then(|| -zi.re + disc.sqrt())
}

/// Backward/forward sweep iterated until the nodal power mismatch drops below `tol`.
pub fn solve_bfs(
    matrices: &BfsMatrices,
    injections: &InjectionVector,
    source: SlackSource,
    initial: Option<&DVector<Complex64>>,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution> {
    let n = matrices.n();
    injections.check(n)?;
    let mut v_s = match source {
        SlackSource::Fixed(v) => v,
        SlackSource::Thevenin { e_mag, .. } => e_mag,
    };
    let mut v = match initial {
        Some(v0) => v0.clone(),
        None => DVector::from_element(n, Complex64::new(v_s, 0.0)),
    };
    let bibc = matrices.bibc_complex();
    let demand: Vec<Complex64> = (0..n).map(|i| -injections.complex(i)).collect();
    let mut mismatch = f64::INFINITY;
    for it in 1..=max_iter {
        let i_d = drawn_currents(injections, &v).map_err(|_| Error::Divergence { iterations: it, mismatch })?;
        if let SlackSource::Thevenin { e_mag, z } = source {
            let i_feeder = (bibc.row(0) * &i_d)[0];
            v_s = thevenin_voltage(e_mag, z, i_feeder).ok_or(Error::Divergence { iterations: it, mismatch })?;
        }
        let v_new = (&matrices.dlf * &i_d).map(|d| Complex64::new(v_s, 0.0) - d);
        mismatch = (0..n).map(|i| (v_new[i] * i_d[i].conj() - demand[i]).norm()).fold(0.0, f64::max);
        if !mismatch.is_finite() {
            return Err(Error::Divergence { iterations: it, mismatch });
        }
        v = v_new;
        if mismatch < tol {
            let i_d = drawn_currents(injections, &v)?;
            let mut state = state_from_drawn(matrices, &i_d, v_s);
            state.bus_voltages = v;
            return Ok(PowerFlowSolution { state, iterations: it, mismatch });
        }
    }
    Err(Error::Divergence { iterations: max_iter, mismatch })
}

/// Exact power flow at the matrices' slack voltage (defaults: tol 1e-8, 100 iterations).
pub fn nonlinear_powerflow(
    matrices: &BfsMatrices,
    injections: &InjectionVector,
    tol: f64,
    max_iter: usize,
) -> Result<NetworkState> {
    solve_bfs(matrices, injections, SlackSource::Fixed(matrices.slack_voltage), None, tol, max_iter).map(|s| s.state)
}

/// One row of the continuation error surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub k_p: f64,
    pub k_q: f64,
    pub rel_err_2norm: f64,
    pub rel_err_max: f64,
    pub converged: bool,
}

/// `(k_p, k_q)` samples on `[0,1]²` with the given spacing, `k_p` major.
pub fn grid_points(granularity: f64) -> Result<Vec<(f64, f64)>> {
    if !(granularity > 0.0 && granularity <= 1.0) {
        return Err(Error::Config(format!("granularity {granularity} outside (0, 1]")));
    }
    let steps = (1.0 / granularity).round() as usize;
    if ((steps as f64) * granularity - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("granularity {granularity} does not divide 1")));
    }
    let k = |i: usize| i as f64 / steps as f64;
    Ok((0..=steps).flat_map(|i| (0..=steps).map(move |j| (k(i), k(j)))).collect())
}

/// Linearization error of `pre + Δ` against the exact solve along DER ramps.
///
/// At each sample, DER `d` changes its injection by `k_p · p_max[d]` and
/// `k_q · q_max[d]` from `base_state`. The error is the vector of relative
/// magnitude deviations `(|V_0 + ΔV| - |V|) / |V|` over all non-slack nodes.
pub fn continuation_error_surface(
    matrices: &BfsMatrices,
    reduced: &ReducedMatrices,
    base_injections: &InjectionVector,
    base_state: &NetworkState,
    p_max: &[f64],
    q_max: &[f64],
    grid: &[(f64, f64)],
) -> Result<Vec<ErrorPoint>> {
    let n_g = reduced.n_g();
    if p_max.len() != n_g || q_max.len() != n_g {
        return Err(Error::Assembly("ramp vectors do not match the DER count".into()));
    }
    let points = grid
        .par_iter()
        .map(|&(k_p, k_q)| -> Result<ErrorPoint> {
            let dp: Vec<f64> = p_max.iter().map(|p| k_p * p).collect();
            let dq: Vec<f64> = q_max.iter().map(|q| k_q * q).collect();
            let delta = superposed_delta(reduced, &dp, &dq)?;
            let mut inj = base_injections.clone();
            for (c, &node) in reduced.nodes.iter().enumerate() {
                inj.add_at(node, dp[c], dq[c]);
            }
            let exact = match solve_bfs(
                matrices,
                &inj,
                SlackSource::Fixed(matrices.slack_voltage),
                Some(&base_state.bus_voltages),
                1e-10,
                200,
            ) {
                Ok(sol) => sol.state,
                Err(Error::Divergence { .. }) => {
                    return Ok(ErrorPoint {
                        k_p,
                        k_q,
                        rel_err_2norm: f64::NAN,
                        rel_err_max: f64::NAN,
                        converged: false,
                    })
                }
                Err(e) => return Err(e),
            };
            let mut sum_sq = 0.0;
            let mut max = 0.0_f64;
            for i in 0..matrices.n() {
                let v_exact = exact.bus_voltages[i].norm();
                let v_lin = (base_state.bus_voltages[i] + delta.delta_v[i]).norm();
                let e = (v_lin - v_exact) / v_exact;
                sum_sq += e * e;
                max = max.max(e.abs());
            }
            Ok(ErrorPoint { k_p, k_q, rel_err_2norm: sum_sq.sqrt(), rel_err_max: max, converged: true })
        })
        .collect::<Vec<_>>();
    points.into_iter().collect()
}

/// Writes the surface as CSV with columns `k_p,k_q,rel_err_2norm,rel_err_max,converged`.
pub fn write_error_surface<W: Write>(points: &[ErrorPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
