//! DER dynamics, state-of-charge accounting and polytopic capability sets.
//!
//! Every unit carries a baseline setpoint `(P*, Q*)`. The controller commands
//! adjustment levels `(ΔP*, ΔQ*)` relative to that baseline. Heat-pump powers
//! are consumption-positive; all other units are generation-positive.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DerKind {
    Dg,
    Pv,
    Bess,
    Vshp,
}

impl DerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dg => "dg",
            Self::Pv => "pv",
            Self::Bess => "bess",
            Self::Vshp => "vshp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgParams {
    pub governor_time_constant: f64,
    pub exciter_time_constant: f64,
    pub p_min: f64,
}

impl DgParams {
    pub fn a_p(&self, ts: f64) -> f64 {
        1.0 - (-ts / self.governor_time_constant).exp()
    }

    pub fn a_q(&self, ts: f64) -> f64 {
        1.0 - (-ts / self.exciter_time_constant).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PvParams {
    pub available: f64,
    pub pf_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BessParams {
    /// Energy capacity in pu·s.
    pub energy: f64,
    pub soc: f64,
    pub soc_min: f64,
    pub soc_max: f64,
}

/// Companion-form discrete dynamics `ν⁺ = F ν + g u`, `δP = h ν`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VshpCoefficients {
    pub a0: f64,
    pub a2: f64,
    pub a3: f64,
    pub h: [f64; 3],
}

impl VshpCoefficients {
    /// Exact ZOH equivalent of a unit-gain triple lag `1/(τs+1)³`.
    pub fn critically_damped(tau: f64, ts: f64) -> Result<Self> {
        if !(tau > 0.0 && ts > 0.0) {
            return Err(Error::Config(format!("heat-pump time constant {tau} and step {ts} must be positive")));
        }
        let r = (-ts / tau).exp();
        let mut c = Self { a0: 3.0 * r, a2: -3.0 * r * r / ts, a3: r * r * r / ts / ts, h: [0.0; 3] };
        let step = |t: f64| {
            let x = t / tau;
            1.0 - (-x).exp() * (1.0 + x + 0.5 * x * x)
        };
        let markov = RowVector3::new(step(ts), step(2.0 * ts) - step(ts), step(3.0 * ts) - step(2.0 * ts));
        let (f, g) = (c.f(ts), c.g(ts));
        let ctrb = Matrix3::from_columns(&[g, f * g, f * f * g]);
        let inv = ctrb.try_inverse().ok_or_else(|| Error::Config("heat-pump model is not controllable".into()))?;
        let h = markov * inv;
        c.h = [h[0], h[1], h[2]];
        Ok(c)
    }

    pub fn f(&self, ts: f64) -> Matrix3<f64> {
        Matrix3::new(0.0, ts, 0.0, 0.0, 0.0, ts, self.a3, self.a2, self.a0)
    }

    pub fn g(&self, ts: f64) -> Vector3<f64> {
        Vector3::new(ts, 0.0, 0.0)
    }

    pub fn h(&self) -> RowVector3<f64> {
        RowVector3::new(self.h[0], self.h[1], self.h[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VshpParams {
    pub time_constant: f64,
    /// Power factor cos φ; the sign of `reactive_ratio` carries the quadrant.
    pub power_factor: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub coefficients: VshpCoefficients,
    pub nu: [f64; 3],
}

impl VshpParams {
    /// `Q / P` at constant power factor.
    pub fn reactive_ratio(&self) -> f64 {
        self.power_factor.clamp(-1.0, 1.0).acos().tan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KindParams {
    Dg(DgParams),
    Pv(PvParams),
    Bess(BessParams),
    Vshp(VshpParams),
}

/// One controllable unit with its baseline setpoint and current outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DerUnit {
    pub name: String,
    pub node: usize,
    pub rating: f64,
    pub params: KindParams,
    pub p_set: f64,
    pub q_set: f64,
    pub p: f64,
    pub q: f64,
}

impl DerUnit {
    pub fn kind(&self) -> DerKind {
        match self.params {
            KindParams::Dg(_) => DerKind::Dg,
            KindParams::Pv(_) => DerKind::Pv,
            KindParams::Bess(_) => DerKind::Bess,
            KindParams::Vshp(_) => DerKind::Vshp,
        }
    }

    /// +1 for generation-positive units, -1 for consumption-positive ones.
    pub fn injection_sign(&self) -> f64 {
        if self.kind() == DerKind::Vshp {
            -1.0
        } else {
            1.0
        }
    }

    pub fn soc(&self) -> Option<f64> {
        match self.params {
            KindParams::Bess(b) => Some(b.soc),
            _ => None,
        }
    }

    /// Generation-positive nodal injection of this unit.
    pub fn injection(&self) -> (f64, f64) {
        (self.injection_sign() * self.p, self.injection_sign() * self.q)
    }
}

/// Advances a unit by one step under adjustment `(dp, dq)` relative to its baseline.
pub fn step_der(unit: &mut DerUnit, dp: f64, dq: f64, ts: f64) {
    let p_cmd = unit.p_set + dp;
    let q_cmd = unit.q_set + dq;
    match &mut unit.params {
        KindParams::Pv(_) => {
            unit.p = p_cmd;
            unit.q = q_cmd;
        }
        KindParams::Bess(b) => {
            unit.p = p_cmd;
            unit.q = q_cmd;
            b.soc -= ts * p_cmd / b.energy;
        }
        KindParams::Dg(d) => {
            let (a_p, a_q) = (d.a_p(ts), d.a_q(ts));
            unit.p = a_p * p_cmd + (1.0 - a_p) * unit.p;
            unit.q = a_q * q_cmd + (1.0 - a_q) * unit.q;
        }
        KindParams::Vshp(v) => {
            let c = v.coefficients;
            let nu = c.f(ts) * Vector3::from(v.nu) + c.g(ts) * dp;
            v.nu = [nu[0], nu[1], nu[2]];
            unit.p = unit.p_set + (c.h() * nu)[0];
            unit.q = unit.p * v.reactive_ratio();
        }
    }
}

/// Half-plane description `A [P Q]ᵀ ≤ b` with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CapabilityPolytope {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<f64>,
}

const POLY_TOL: f64 = 1e-9;

impl CapabilityPolytope {
    fn push(&mut self, a: [f64; 2], b: f64) {
        let n = a[0].hypot(a[1]);
        self.a.push([a[0] / n, a[1] / n]);
        self.b.push(b / n);
    }

    pub fn rows(&self) -> usize {
        self.b.len()
    }

    /// Largest constraint violation at `(p, q)` (negative when strictly inside).
    pub fn violation(&self, p: f64, q: f64) -> f64 {
        self.a.iter().zip(&self.b).map(|(a, b)| a[0] * p + a[1] * q - b).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, p: f64, q: f64, tol: f64) -> bool {
        self.violation(p, q) <= tol
    }

    /// Vertices from pairwise intersections of the boundary lines.
    pub fn vertices(&self) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = Vec::new();
        for i in 0..self.rows() {
            for j in i + 1..self.rows() {
                let (a1, a2) = (self.a[i], self.a[j]);
                let det = a1[0] * a2[1] - a1[1] * a2[0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let p = (self.b[i] * a2[1] - a1[1] * self.b[j]) / det;
                let q = (a1[0] * self.b[j] - self.b[i] * a2[0]) / det;
                if self.contains(p, q, POLY_TOL) && !out.iter().any(|v| (v[0] - p).hypot(v[1] - q) < 1e-9) {
                    out.push([p, q]);
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.vertices().is_empty()
    }

    /// `max_{x ∈ F} dir · x`.
    pub fn support(&self, dir: [f64; 2]) -> f64 {
        self.vertices().iter().map(|v| dir[0] * v[0] + dir[1] * v[1]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Axis-aligned bounds `([p_lo, p_hi], [q_lo, q_hi])`.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        ([-self.support([-1.0, 0.0]), self.support([1.0, 0.0])], [-self.support([0.0, -1.0]), self.support([0.0, 1.0])])
    }

    /// Euclidean projection onto the polytope.
    pub fn project(&self, p: f64, q: f64) -> (f64, f64) {
        if self.contains(p, q, 0.0) {
            return (p, q);
        }
        let mut best = (f64::INFINITY, p, q);
        let mut consider = |x: f64, y: f64| {
            if self.contains(x, y, POLY_TOL) {
                let d = (x - p).hypot(y - q);
                if d < best.0 {
                    best = (d, x, y);
                }
            }
        };
        for (a, b) in self.a.iter().zip(&self.b) {
            let s = a[0] * p + a[1] * q - b;
            consider(p - s * a[0], q - s * a[1]);
        }
        for v in self.vertices() {
            consider(v[0], v[1]);
        }
        (best.1, best.2)
    }
}

fn push_circle(poly: &mut CapabilityPolytope, radius: f64) {
    for i in 0..12 {
        let th = (2 * i + 1) as f64 * PI / 12.0;
        poly.push([th.cos(), th.sin()], radius * (PI / 12.0).cos());
    }
}

/// Capability set of a unit in its own power coordinates.
pub fn build_capability(rating: f64, params: &KindParams) -> Result<CapabilityPolytope> {
    if !(rating > 0.0) {
        return Err(Error::Config(format!("rating must be positive, got {rating}")));
    }
    let mut poly = CapabilityPolytope { a: Vec::new(), b: Vec::new() };
    match params {
        KindParams::Dg(d) => {
            push_circle(&mut poly, rating);
            poly.push([-1.0, 0.0], -d.p_min);
        }
        KindParams::Pv(pv) => {
            push_circle(&mut poly, rating);
            let t = pv.pf_min.clamp(0.0, 1.0).acos().tan();
            poly.push([-t, 1.0], 0.0);
            poly.push([-t, -1.0], 0.0);
            poly.push([-1.0, 0.0], 0.0);
            poly.push([1.0, 0.0], pv.available);
        }
        KindParams::Bess(_) => {
            poly.push([1.0, 0.0], rating);
            poly.push([-1.0, 0.0], rating);
            poly.push([0.0, 1.0], rating);
            poly.push([0.0, -1.0], rating);
        }
        KindParams::Vshp(v) => {
            let t = v.reactive_ratio();
            poly.push([-t, 1.0], 0.0);
            poly.push([t, -1.0], 0.0);
            poly.push([-1.0, 0.0], -v.p_min);
            poly.push([1.0, 0.0], v.p_max);
        }
    }
    if poly.is_empty() {
        return Err(Error::Config(format!("empty capability set for rating {rating} and {params:?}")));
    }
    Ok(poly)
}

/// Ordered collection of units (DG, PV, BESS, VSHP).
#[derive(Debug, Clone, PartialEq)]
pub struct DerFleet {
    pub units: Vec<DerUnit>,
}

impl DerFleet {
    pub fn n_g(&self) -> usize {
        self.units.len()
    }

    pub fn bess_indices(&self) -> Vec<usize> {
        self.indices(DerKind::Bess)
    }

    pub fn vshp_indices(&self) -> Vec<usize> {
        self.indices(DerKind::Vshp)
    }

    pub fn indices(&self, kind: DerKind) -> Vec<usize> {
        (0..self.n_g()).filter(|&i| self.units[i].kind() == kind).collect()
    }

    pub fn nodes(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.node).collect()
    }

    pub fn capabilities(&self) -> Result<Vec<CapabilityPolytope>> {
        self.units.iter().map(|u| build_capability(u.rating, &u.params)).collect()
    }
}

/// Index ranges of the prediction-model state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMap {
    pub n_g: usize,
    pub n_b: usize,
    pub n_v: usize,
}

impl StateMap {
    pub fn n_s(&self) -> usize {
        2 * self.n_g + self.n_b + 3 * self.n_v
    }
    pub fn p(&self, d: usize) -> usize {
        d
    }
    pub fn q(&self, d: usize) -> usize {
        self.n_g + d
    }
    pub fn soc(&self, b: usize) -> usize {
        2 * self.n_g + b
    }
    pub fn nu(&self, v: usize, i: usize) -> usize {
        2 * self.n_g + self.n_b + 3 * v + i
    }
}

/// Affine prediction model `x⁺ = A x + B u + c` with `u = [ΔP*; ΔQ*]`.
///
/// The state holds output deviations from the baseline setpoints, the BESS
/// states of charge and the heat-pump internal states.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub map: StateMap,
    pub ts: f64,
}

impl PredictionModel {
    /// Current model state of the fleet.
    pub fn state_of(&self, fleet: &DerFleet) -> DVector<f64> {
        let map = &self.map;
        let mut x = DVector::zeros(map.n_s());
        let mut nb = 0;
        let mut nv = 0;
        for (d, u) in fleet.units.iter().enumerate() {
            x[map.p(d)] = u.p - u.p_set;
            x[map.q(d)] = u.q - u.q_set;
            match u.params {
                KindParams::Bess(b) => {
                    x[map.soc(nb)] = b.soc;
                    nb += 1;
                }
                KindParams::Vshp(v) => {
                    for i in 0..3 {
                        x[map.nu(nv, i)] = v.nu[i];
                    }
                    nv += 1;
                }
                _ => {}
            }
        }
        x
    }
}

pub fn assemble_prediction_model(fleet: &DerFleet, ts: f64) -> Result<PredictionModel> {
    if fleet.units.is_empty() {
        return Err(Error::Config("fleet is empty".into()));
    }
    if !(ts > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {ts}")));
    }
    let n_g = fleet.n_g();
    let map = StateMap { n_g, n_b: fleet.bess_indices().len(), n_v: fleet.vshp_indices().len() };
    let n_s = map.n_s();
    let mut a = DMatrix::zeros(n_s, n_s);
    let mut b = DMatrix::zeros(n_s, 2 * n_g);
    let mut c = DVector::zeros(n_s);
    let (mut nb, mut nv) = (0, 0);
    for (d, u) in fleet.units.iter().enumerate() {
        let (ip, iq) = (map.p(d), map.q(d));
        match u.params {
            KindParams::Pv(_) => {
                b[(ip, d)] = 1.0;
                b[(iq, n_g + d)] = 1.0;
            }
            KindParams::Bess(bp) => {
                b[(ip, d)] = 1.0;
                b[(iq, n_g + d)] = 1.0;
                let is = map.soc(nb);
                a[(is, is)] = 1.0;
                b[(is, d)] = -ts / bp.energy;
                c[is] = -ts * u.p_set / bp.energy;
                nb += 1;
            }
            KindParams::Dg(dg) => {
                let (a_p, a_q) = (dg.a_p(ts), dg.a_q(ts));
                a[(ip, ip)] = 1.0 - a_p;
                b[(ip, d)] = a_p;
                a[(iq, iq)] = 1.0 - a_q;
                b[(iq, n_g + d)] = a_q;
            }
            KindParams::Vshp(v) => {
                let co = v.coefficients;
                let (f, g, h) = (co.f(ts), co.g(ts), co.h());
                let t = v.reactive_ratio();
                let hf = h * f;
                let hg = (h * g)[0];
                for i in 0..3 {
                    let row = map.nu(nv, i);
                    for j in 0..3 {
                        a[(row, map.nu(nv, j))] = f[(i, j)];
                    }
                    b[(row, d)] = g[i];
                    a[(ip, map.nu(nv, i))] = hf[i];
                    a[(iq, map.nu(nv, i))] = t * hf[i];
                }
                b[(ip, d)] = hg;
                b[(iq, d)] = t * hg;
                nv += 1;
            }
        }
    }
    Ok(PredictionModel { a, b, c, map, ts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vshp_model_has_unit_dc_gain() {
        let c = VshpCoefficients::critically_damped(5.0, 1.0).unwrap();
        let f = c.f(1.0);
        let gain = c.h() * (Matrix3::identity() - f).try_inverse().unwrap() * c.g(1.0);
        assert!((gain[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dg_capability_respects_minimum_output() {
        let params = KindParams::Dg(DgParams { governor_time_constant: 10.0, exciter_time_constant: 1.0, p_min: 0.1 });
        let poly = build_capability(0.67, &params).unwrap();
        assert!(!poly.contains(0.05, 0.0, 1e-12));
        assert!(poly.contains(0.1, 0.0, 1e-12));
        let bad = KindParams::Dg(DgParams { governor_time_constant: 10.0, exciter_time_constant: 1.0, p_min: 0.8 });
        assert!(matches!(build_capability(0.67, &bad), Err(Error::Config(_))));
    }
}
