//! Built-in verification suites: each check compares an implementation
//! result with an independent recomputation and counts disagreements.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::estimation::{build_measurement_set, sense, wls_estimate, InjectionModel, SensorSuite};
use crate::grid_model::{build_bfs_matrices, parse_feeder, reduce_for_nodes, BfsMatrices, FeederData, IEEE33_FEEDER};
use crate::powerflow::{linear_bfs_step, nonlinear_powerflow, superposed_delta, InjectionVector, NetworkState};
use crate::qp_solver::{check_kkt, solve, Candidate, QpProblem, QpSettings, QpStatus};
use crate::scenario::{Event, EventKind, Scenario};
use crate::simulator::{run, ScenarioTrace};

/// Knobs for [`run_suites`].
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Flips one BIBC entry after construction (negative control).
    pub corrupt_bibc: bool,
    pub qp_instances: usize,
    pub seed: u64,
    /// Simulated time of the closed-loop run behind the trace suites (s).
    pub sim_duration: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { corrupt_bibc: false, qp_instances: 200, seed: 20_240_601, sim_duration: 30.0 }
    }
}

/// Outcome of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub failures: usize,
    pub wall_ms: f64,
    /// First few failure descriptions.
    pub details: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }
}

struct Tally {
    checks: usize,
    failures: usize,
    details: Vec<String>,
}

impl Tally {
    fn new() -> Self {
        Self { checks: 0, failures: 0, details: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
            if self.details.len() < 5 {
                self.details.push(what());
            }
        }
    }

    fn finish(self, name: &str, start: Instant) -> SuiteReport {
        SuiteReport {
            name: name.into(),
            checks: self.checks,
            failures: self.failures,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            details: self.details,
        }
    }
}

fn feeder_matrices(opts: &VerifyOptions) -> Result<(FeederData, BfsMatrices)> {
    let feeder = parse_feeder(IEEE33_FEEDER)?;
    let mut m = build_bfs_matrices(&feeder.topology, 1.0);
    if opts.corrupt_bibc {
        let (b, n) = (2, m.n() - 1);
        m.bibc[(b, n)] = 1.0 - m.bibc[(b, n)];
        m.dlf = &m.bcbv * m.bibc_complex();
    }
    Ok((feeder, m))
}

/// Runs every suite in order.
pub fn run_suites(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let (feeder, matrices) = feeder_matrices(opts)?;
    let mut reports =
        vec![path_property(&feeder, &matrices), oracle_equivalence(&feeder, &matrices, opts)?, kkt_suite(opts)];
    let start = Instant::now();
    let trace = closed_loop_trace(opts)?;
    let sim_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut multirate = multirate_suite(&trace);
    multirate.wall_ms += sim_ms;
    reports.push(multirate);
    reports.push(conservation_suite(&trace));
    Ok(reports)
}

/// BIBC against a parent-pointer walk and DLF against impedance path sums.
pub fn path_property(feeder: &FeederData, m: &BfsMatrices) -> SuiteReport {
    let start = Instant::now();
    let mut t = Tally::new();
    let topo = &feeder.topology;
    let n = topo.n_branches();
    let mut on_path = vec![vec![false; n]; n];
    for node in 1..=n {
        let mut cur = node;
        while let Some(parent) = topo.parent(cur) {
            // Branch b feeds node b + 1.
            on_path[node - 1][cur - 1] = true;
            cur = parent;
        }
    }
    for node in 0..n {
        for b in 0..n {
            let expected = if on_path[node][b] { 1.0 } else { 0.0 };
            t.check(m.bibc[(b, node)] == expected, || format!("BIBC[{b},{node}] = {}", m.bibc[(b, node)]));
        }
    }
    for i in 0..n {
        for j in 0..n {
            let z: Complex64 =
                (0..n).filter(|&b| on_path[i][b] && on_path[j][b]).map(|b| topo.branches()[b].impedance).sum();
            let err = (m.dlf[(i, j)] - z).norm();
            t.check(err <= 1e-12, || format!("DLF[{i},{j}] off the path sum by {err:.3e}"));
        }
    }
    t.finish("path-property", start)
}

fn max_rel_magnitude_error(a: &NetworkState, b: &NetworkState) -> f64 {
    a.bus_voltages
        .iter()
        .zip(b.bus_voltages.iter())
        .map(|(x, y)| ((x.norm() - y.norm()) / y.norm()).abs())
        .fold(0.0, f64::max)
}

/// Linear BFS against the converged power flow, and superposition exactness.
pub fn oracle_equivalence(feeder: &FeederData, m: &BfsMatrices, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut t = Tally::new();
    let n = m.n();
    let inj = InjectionVector::from_demand(&feeder.loads);
    let exact = nonlinear_powerflow(m, &inj, 1e-10, 100)?;

    let flat = DVector::from_element(n, Complex64::new(m.slack_voltage, 0.0));
    let lin_flat = linear_bfs_step(m, &inj, &flat)?;
    let e_flat = max_rel_magnitude_error(&lin_flat, &exact);
    t.check(e_flat <= 0.02, || format!("flat-start error {e_flat:.4} > 2%"));

    let suite = SensorSuite { sigma_v: 1e-3, sigma_p: 1e-2, power_nodes: (1..=n).collect() };
    let model = InjectionModel::new(&m.dlf, m.slack_voltage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let injections: Vec<Complex64> = (0..n).map(|i| inj.complex(i)).collect();
    let readings = sense(&exact, &injections, &suite, &mut rng);
    let mut v_hat = flat.clone();
    for _ in 0..3 {
        let set = build_measurement_set(&readings, &suite, &model, &v_hat);
        v_hat = wls_estimate(&set)?.voltages()?;
    }
    let lin_est = linear_bfs_step(m, &inj, &v_hat)?;
    let e_est = max_rel_magnitude_error(&lin_est, &exact);
    t.check(e_est <= 0.002, || format!("estimated-state error {e_est:.5} > 0.2%"));

    let nodes = feeder.placement.der_nodes();
    let reduced = reduce_for_nodes(m, &nodes, &v_hat)?;
    for _ in 0..20 {
        let dp: Vec<f64> = nodes.iter().map(|_| rng.gen_range(-0.3..0.3)).collect();
        let dq: Vec<f64> = nodes.iter().map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mut shifted = inj.clone();
        for (c, &node) in nodes.iter().enumerate() {
            shifted.add_at(node, dp[c], dq[c]);
        }
        let base = linear_bfs_step(m, &inj, &v_hat)?;
        let moved = linear_bfs_step(m, &shifted, &v_hat)?;
        let delta = superposed_delta(&reduced, &dp, &dq)?;
        let dv =
            (&moved.bus_voltages - &base.bus_voltages - &delta.delta_v).iter().map(|c| c.norm()).fold(0.0, f64::max);
        let di = (&moved.branch_currents - &base.branch_currents - &delta.delta_i)
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        t.check(dv.max(di) <= 1e-12, || format!("superposition residual {:.3e}", dv.max(di)));
    }
    Ok(t.finish("oracle-equivalence", start))
}

/// Accelerated projected gradient with gradient-based restart on a box; the
/// reference for the KKT suite.
pub fn projected_gradient_box(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    let lip = h.symmetric_eigenvalues().max().max(1e-12);
    let project = |x: DVector<f64>| x.zip_zip_map(lo, hi, |v, l, u| v.clamp(l, u));
    let mut x = project(DVector::zeros(f.len()));
    let mut yv = x.clone();
    let mut tk = 1.0_f64;
    for _ in 0..1_000_000 {
        let x_next = project(&yv - (h * &yv + f) / lip);
        let step = &x_next - &x;
        if (&yv - &x_next).dot(&step) > 0.0 {
            tk = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        yv = &x_next + &step * ((tk - 1.0) / t_next);
        x = x_next;
        tk = t_next;
        if step.amax() < 1e-15 {
            break;
        }
    }
    x
}

/// Random box-constrained PSD instances against the projected-gradient reference.
pub fn kkt_suite(opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let mut t = Tally::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    for inst in 0..opts.qp_instances {
        let n = rng.gen_range(1..=30);
        let rank = rng.gen_range(1..=n);
        let g = DMatrix::from_fn(rank, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = g.tr_mul(&g) + DMatrix::identity(n, n) * 1e-3;
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let lo = DVector::from_fn(n, |_, _| rng.gen_range(-1.5..-0.1));
        let hi = DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.5));
        let qp = QpProblem::new(h.clone(), f.clone()).with_bounds(Some(lo.clone()), Some(hi.clone()));
        let settings = QpSettings { kkt_tol: 1e-6, ..QpSettings::default() };
        let sol = match solve(&qp, &settings) {
            Ok(s) => s,
            Err(e) => {
                t.check(false, || format!("instance {inst}: {e}"));
                continue;
            }
        };
        t.check(sol.status == QpStatus::Optimal, || format!("instance {inst}: status {}", sol.status));
        let report = check_kkt(
            &qp,
            Candidate {
                primal: &sol.primal,
                dual_eq: &sol.dual_eq,
                dual_ineq: &sol.dual_ineq,
                dual_bounds: Some(&sol.dual_bounds),
            },
        );
        t.check(report.max() <= 1e-6, || format!("instance {inst}: KKT {:.3e}", report.max()));
        let reference = projected_gradient_box(&h, &f, &lo, &hi);
        let (a, b) = (qp.objective(&sol.primal), qp.objective(&reference));
        t.check((a - b).abs() <= 1e-6 * b.abs().max(1.0), || format!("instance {inst}: objective {a} vs {b}"));
    }
    t.finish("kkt", start)
}

fn closed_loop_trace(opts: &VerifyOptions) -> Result<ScenarioTrace> {
    let mut s = Scenario { name: "verify".into(), duration: opts.sim_duration, seed: opts.seed, ..Scenario::default() };
    s.events = vec![
        Event { time: 3.0, kind: EventKind::GenerationLoss, magnitude: 0.5 },
        Event { time: 0.5 * opts.sim_duration, kind: EventKind::SetpointChange, magnitude: 0.1 },
    ];
    s.validate()?;
    run(&s)
}

/// Slow commands hold between update instants; every accepted solve meets the KKT tolerance.
pub fn multirate_suite(trace: &ScenarioTrace) -> SuiteReport {
    let start = Instant::now();
    let mut t = Tally::new();
    for w in trace.rows.windows(2) {
        if w[1].step % trace.q != 0 {
            t.check(w[1].cmd_dp_slow == w[0].cmd_dp_slow, || format!("slow command moved at step {}", w[1].step));
        }
    }
    for r in &trace.rows {
        if let Some(d) = r.diagnostics.as_ref().filter(|_| r.solver_ok) {
            let kkt = d.stationarity.max(d.primal).max(d.dual).max(d.complementarity);
            t.check(kkt <= 1e-6, || format!("step {}: KKT {kkt:.3e}", r.step));
        }
    }
    t.check(trace.abort.is_none(), || format!("run aborted: {:?}", trace.abort));
    t.finish("multirate", start)
}

/// SoC telescoping and feeder-power bookkeeping identities on every row.
pub fn conservation_suite(trace: &ScenarioTrace) -> SuiteReport {
    let start = Instant::now();
    let mut t = Tally::new();
    for (b, name) in trace.bess_names.iter().enumerate() {
        let d = trace.der_names.iter().position(|n| n == name).expect("BESS names come from the fleet");
        let mut drawn = 0.0;
        for r in &trace.rows {
            if r.step > 0 {
                drawn += r.der_p[d];
            }
            let expected = trace.initial_soc[b] - trace.t_sp * drawn / trace.bess_energy[b];
            let err = (r.soc[b] - expected).abs();
            t.check(err <= 1e-9, || format!("{name} step {}: SoC off by {err:.3e}", r.step));
        }
    }
    for r in &trace.rows {
        let s = Complex64::new(r.v_pcc, 0.0) * Complex64::new(r.i0_re, r.i0_im).conj();
        let err = (s - Complex64::new(r.p0_import, r.q0_import)).norm();
        t.check(err <= 1e-9, || format!("step {}: feeder power off by {err:.3e}", r.step));
    }
    t.finish("conservation", start)
}
