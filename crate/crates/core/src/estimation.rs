//! Weighted least-squares state estimation over a linear measurement model.
//!
//! The state is the rectangular nodal voltage vector `[Re V; Im V]` over the
//! non-slack nodes. Voltage phasor sensors are exactly linear in it; nodal
//! power sensors are linearized about the previous estimate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::powerflow::NetworkState;

/// Measurements `y = H x + ξ` with diagonal noise covariance.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    pub values: DVector<f64>,
    pub mapping: DMatrix<f64>,
    /// Diagonal of the noise covariance.
    pub noise_var: DVector<f64>,
}

/// WLS estimate and its weighted residual norm.
#[derive(Debug, Clone)]
pub struct EstimatedState {
    pub x_hat: DVector<f64>,
    pub residual_norm: f64,
}

impl EstimatedState {
    /// Complex voltages from the rectangular state, checked against a plausibility band.
    pub fn voltages(&self) -> Result<DVector<Complex64>> {
        let n = self.x_hat.len() / 2;
        let v = DVector::from_iterator(n, (0..n).map(|i| Complex64::new(self.x_hat[i], self.x_hat[n + i])));
        if let Some(i) = v.iter().position(|v| !(0.5..1.5).contains(&v.norm())) {
            return Err(Error::Observability(format!(
                "estimated voltage {:.4} pu at node {} is implausible",
                v[i].norm(),
                i + 1
            )));
        }
        Ok(v)
    }
}

/// Rectangular state vector of a network state.
pub fn rectangular_state(state: &NetworkState) -> DVector<f64> {
    let v = &state.bus_voltages;
    let n = v.len();
    DVector::from_iterator(2 * n, v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)))
}

/// Minimizes `(y - Hx)ᵀ Σ⁻¹ (y - Hx)` via the normal equations.
pub fn wls_estimate(m: &MeasurementSet) -> Result<EstimatedState> {
    let (n_y, n_x) = m.mapping.shape();
    if m.values.len() != n_y || m.noise_var.len() != n_y {
        return Err(Error::Assembly("measurement dimensions disagree".into()));
    }
    if m.noise_var.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Observability("noise variances must be positive".into()));
    }
    let w = m.noise_var.map(|s| 1.0 / s);
    let mut hw = m.mapping.clone();
    for (r, mut row) in hw.row_iter_mut().enumerate() {
        row *= w[r].sqrt();
    }
    let sv = hw.singular_values();
    let sv_max = sv.max();
    if n_y < n_x || sv.min() <= 1e-10 * sv_max.max(f64::MIN_POSITIVE) {
        return Err(Error::Observability(format!("measurement mapping has rank below {n_x}")));
    }
    let gain = hw.tr_mul(&hw);
    let rhs = m.mapping.tr_mul(&m.values.component_mul(&w));
    let chol =
        gain.clone().cholesky().ok_or_else(|| Error::Observability("gain matrix is not positive definite".into()))?;
    let mut x = chol.solve(&rhs);
    let r = &rhs - &gain * &x;
    x += chol.solve(&r);
    let res = &m.values - &m.mapping * &x;
    let residual_norm = res.component_mul(&res).dot(&w).sqrt();
    Ok(EstimatedState { x_hat: x, residual_norm })
}

/// Draws `values = H x_true + N(0, Σ)` from a seeded generator.
pub fn synthesize_measurements(
    true_state: &DVector<f64>,
    mapping: DMatrix<f64>,
    noise_var: DVector<f64>,
    seed: u64,
) -> MeasurementSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = &mapping * true_state;
    for (v, s) in values.iter_mut().zip(noise_var.iter()) {
        *v += gaussian(&mut rng, s.sqrt());
    }
    MeasurementSet { values, mapping, noise_var }
}

fn gaussian<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd).expect("finite standard deviation").sample(rng)
}

/// Sensor suite used in closed-loop simulation.
#[derive(Debug, Clone)]
pub struct SensorSuite {
    pub sigma_v: f64,
    pub sigma_p: f64,
    /// Nodes with nodal power sensors.
    pub power_nodes: Vec<usize>,
}

/// Raw noisy sensor readings.
#[derive(Debug, Clone)]
pub struct Readings {
    pub voltages: DVector<Complex64>,
    /// Generation-positive nodal injections at `power_nodes`.
    pub powers: Vec<Complex64>,
}

/// Samples all sensors of `suite` around the true operating point.
pub fn sense<R: Rng>(state: &NetworkState, injections: &[Complex64], suite: &SensorSuite, rng: &mut R) -> Readings {
    let voltages =
        state.bus_voltages.map(|v| v + Complex64::new(gaussian(rng, suite.sigma_v), gaussian(rng, suite.sigma_v)));
    let powers = suite
        .power_nodes
        .iter()
        .map(|&n| injections[n - 1] + Complex64::new(gaussian(rng, suite.sigma_p), gaussian(rng, suite.sigma_p)))
        .collect();
    Readings { voltages, powers }
}

/// Nodal admittance view of the radial network, `I_d = Y (V_s 1 - V)` with `Y = DLF⁻¹`.
#[derive(Debug, Clone)]
pub struct InjectionModel {
    pub y: DMatrix<Complex64>,
    pub slack_voltage: f64,
}

impl InjectionModel {
    pub fn new(dlf: &DMatrix<Complex64>, slack_voltage: f64) -> Result<Self> {
        let y = dlf.clone().try_inverse().ok_or_else(|| Error::Observability("DLF is singular".into()))?;
        Ok(Self { y, slack_voltage })
    }

    /// Generation-positive nodal injection at every non-slack node.
    pub fn injections(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        let drop = v.map(|vi| Complex64::new(self.slack_voltage, 0.0) - vi);
        let i_d = &self.y * drop;
        v.zip_map(&i_d, |vi, ii| -vi * ii.conj())
    }
}

/// Builds the linear measurement set from readings, linearizing power rows at `v_lin`.
pub fn build_measurement_set(
    readings: &Readings,
    suite: &SensorSuite,
    model: &InjectionModel,
    v_lin: &DVector<Complex64>,
) -> MeasurementSet {
    let n = v_lin.len();
    let n_p = suite.power_nodes.len();
    let n_y = 2 * n + 2 * n_p;
    let mut h = DMatrix::zeros(n_y, 2 * n);
    let mut y = DVector::zeros(n_y);
    let mut var = DVector::zeros(n_y);
    for i in 0..n {
        h[(i, i)] = 1.0;
        h[(n + i, n + i)] = 1.0;
        y[i] = readings.voltages[i].re;
        y[n + i] = readings.voltages[i].im;
        var[i] = suite.sigma_v * suite.sigma_v;
        var[n + i] = suite.sigma_v * suite.sigma_v;
    }
    let s_lin = model.injections(v_lin);
    let drop = v_lin.map(|vi| Complex64::new(model.slack_voltage, 0.0) - vi);
    let c = &model.y * drop;
    for (k, &node) in suite.power_nodes.iter().enumerate() {
        let i = node - 1;
        let (rp, rq) = (2 * n + k, 2 * n + n_p + k);
        // δS_i = -conj(c_i) δV_i + Σ_j V_i conj(Y_ij) conj(δV_j)
        let mut row = vec![Complex64::new(0.0, 0.0); 2 * n];
        let a = -c[i].conj();
        row[i] += Complex64::new(a.re, a.im);
        row[n + i] += Complex64::new(-a.im, a.re);
        for j in 0..n {
            let b = v_lin[i] * model.y[(i, j)].conj();
            row[j] += Complex64::new(b.re, b.im);
            row[n + j] += Complex64::new(b.im, -b.re);
        }
        let mut lin_const = s_lin[i];
        for j in 0..2 * n {
            let xj = if j < n { v_lin[j].re } else { v_lin[j - n].im };
            h[(rp, j)] = row[j].re;
            h[(rq, j)] = row[j].im;
            lin_const -= Complex64::new(row[j].re * xj, row[j].im * xj);
        }
        y[rp] = readings.powers[k].re - lin_const.re;
        y[rq] = readings.powers[k].im - lin_const.im;
        var[rp] = suite.sigma_p * suite.sigma_p;
        var[rq] = suite.sigma_p * suite.sigma_p;
    }
    MeasurementSet { values: y, mapping: h, noise_var: var }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_weighted_average() {
        let m = MeasurementSet {
            values: DVector::from_vec(vec![1.0, 2.0]),
            mapping: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            noise_var: DVector::from_vec(vec![1.0, 0.25]),
        };
        let est = wls_estimate(&m).unwrap();
        assert!((est.x_hat[0] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let m = MeasurementSet {
            values: DVector::from_vec(vec![1.0, 2.0]),
            mapping: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            noise_var: DVector::from_vec(vec![1.0, 1.0]),
        };
        assert!(matches!(wls_estimate(&m), Err(Error::Observability(_))));
    }
}
