use dermpc::error::Error;
use dermpc::grid_model::*;
use dermpc::powerflow::*;
use dermpc::scenario::Scenario;
use dermpc::simulator::error_surface;
use nalgebra::DVector;
use num_complex::Complex64;
use proptest::prelude::*;

fn ieee33() -> (FeederData, BfsMatrices) {
    let f = parse_feeder(IEEE33_FEEDER).unwrap();
    let m = build_bfs_matrices(&f.topology, 1.0);
    (f, m)
}

/// Textbook sweep over the parent array: accumulate child currents upward,
/// then propagate voltage drops downward. Shares nothing with the matrix code.
fn parent_array_sweep(t: &NetworkTopology, s_gen: &[Complex64], v_s: f64) -> Vec<Complex64> {
    let n = t.n_nodes();
    let z: Vec<Complex64> = t.branches().iter().map(|b| b.impedance).collect();
    let mut v = vec![Complex64::new(v_s, 0.0); n];
    for _ in 0..500 {
        let mut i_branch = vec![Complex64::new(0.0, 0.0); n];
        for node in (1..n).rev() {
            i_branch[node] += -(s_gen[node] / v[node]).conj();
            let p = t.parent(node).unwrap();
            if p > 0 {
                let c = i_branch[node];
                i_branch[p] += c;
            }
        }
        let mut next = v.clone();
        for node in 1..n {
            let p = t.parent(node).unwrap();
            next[node] = next[p] - z[node - 1] * i_branch[node];
        }
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        v = next;
        if change < 1e-14 {
            break;
        }
    }
    v
}

fn nominal(f: &FeederData) -> InjectionVector {
    InjectionVector::from_demand(&f.loads)
}

#[test]
fn nominal_load_matches_parent_array_oracle() {
    let (f, m) = ieee33();
    let inj = nominal(&f);
    let state = nonlinear_powerflow(&m, &inj, 1e-10, 100).unwrap();
    let s_gen: Vec<Complex64> = f.loads.iter().map(|s| -s).collect();
    let oracle = parent_array_sweep(&f.topology, &s_gen, 1.0);
    for i in 0..32 {
        assert!((state.bus_voltages[i] - oracle[i + 1]).norm() < 1e-9, "node {}", i + 1);
    }
    let v_min = state.voltage_magnitudes().into_iter().fold(f64::INFINITY, f64::min);
    // Frozen from the parent-array oracle.
    assert!((v_min - 0.913_090_48).abs() < 1e-8, "min |V| = {v_min}");
}

#[test]
fn zero_injection_is_flat() {
    let (_, m) = ieee33();
    let sol = solve_bfs(&m, &InjectionVector::zeros(32), SlackSource::Fixed(1.0), None, 1e-8, 100).unwrap();
    assert_eq!(sol.iterations, 1);
    assert!(sol.state.bus_voltages.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
}

#[test]
fn absurd_load_diverges() {
    let (f, m) = ieee33();
    let mut inj = nominal(&f);
    let node = f.topology.node_of_label(18).unwrap();
    inj.add_at(node, -100.0, 0.0);
    assert!(matches!(nonlinear_powerflow(&m, &inj, 1e-8, 100), Err(Error::Divergence { .. })));
}

#[test]
fn converged_state_is_a_fixed_point() {
    let (f, m) = ieee33();
    let inj = nominal(&f);
    let state = nonlinear_powerflow(&m, &inj, 1e-12, 100).unwrap();
    let again = linear_bfs_step(&m, &inj, &state.bus_voltages).unwrap();
    for i in 0..32 {
        assert!((again.bus_voltages[i] - state.bus_voltages[i]).norm() < 1e-10);
    }
}

#[test]
fn feeder_bookkeeping_holds() {
    let (f, m) = ieee33();
    let inj = nominal(&f);
    let exact = nonlinear_powerflow(&m, &inj, 1e-10, 100).unwrap();
    let flat = DVector::from_element(32, Complex64::new(1.0, 0.0));
    let lin = linear_bfs_step(&m, &inj, &flat).unwrap();
    let z = Complex64::new(0.002, 0.01);
    let th = solve_bfs(&m, &inj, SlackSource::Thevenin { e_mag: 1.02, z }, None, 1e-10, 100).unwrap().state;
    for s in [&exact, &lin, &th] {
        let expected = s.slack_voltage * s.feeder_current().conj();
        assert!((s.feeder_power - expected).norm() < 1e-12);
    }
    assert!((exact.feeder_power - f.total_load()).re > 0.0);
    let e = Complex64::new(th.slack_voltage, 0.0) + z * th.feeder_current();
    assert!((e.norm() - 1.02).abs() < 1e-12);
}

#[test]
fn small_ramp_currents_match_oracle() {
    let (f, m) = ieee33();
    let base_inj = nominal(&f);
    let base = nonlinear_powerflow(&m, &base_inj, 1e-10, 100).unwrap();
    let reduced = reduce_for_ders(&m, &f.placement, &base.bus_voltages).unwrap();
    let d = superposed_delta(&reduced, &[0.1; 6], &[0.1; 6]).unwrap();
    let mut inj = base_inj.clone();
    for &node in &reduced.nodes {
        inj.add_at(node, 0.1, 0.1);
    }
    let exact = nonlinear_powerflow(&m, &inj, 1e-10, 100).unwrap();
    let worst = (0..32)
        .map(|b| {
            let lin = base.branch_currents[b] + d.delta_i[b];
            (lin - exact.branch_currents[b]).norm() / exact.branch_currents[b].norm()
        })
        .fold(0.0, f64::max);
    assert!(worst < 0.03, "max relative current error {worst}");
}

#[test]
fn zero_delta_is_zero() {
    let (f, m) = ieee33();
    let v = DVector::from_element(32, Complex64::new(1.0, 0.0));
    let r = reduce_for_ders(&m, &f.placement, &v).unwrap();
    let d = superposed_delta(&r, &[0.0; 6], &[0.0; 6]).unwrap();
    assert!(d.delta_i.iter().chain(d.delta_v.iter()).all(|x| x.norm() == 0.0));
}

#[test]
fn sweep_origin_has_no_error() {
    let scenario = Scenario::default();
    let (points, summary) = error_surface(&scenario, 0.5).unwrap();
    assert_eq!(points.len(), 9);
    assert_eq!(summary.diverged, 0);
    let origin = points.iter().find(|p| p.k_p == 0.0 && p.k_q == 0.0).unwrap();
    assert!(origin.rel_err_2norm < 1e-9);
    assert!(summary.error_at_full_ramp <= 0.05);
}

#[test]
fn error_surface_csv_header() {
    let pts = [ErrorPoint { k_p: 0.0, k_q: 0.5, rel_err_2norm: 0.1, rel_err_max: 0.05, converged: true }];
    let mut buf = Vec::new();
    write_error_surface(&pts, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "k_p,k_q,rel_err_2norm,rel_err_max,converged");
    assert_eq!(text.lines().count(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn superposition_is_exact(
        dp in prop::collection::vec(-0.3..0.3f64, 6),
        dq in prop::collection::vec(-0.3..0.3f64, 6),
        alpha in -2.0..2.0f64,
    ) {
        let (f, m) = ieee33();
        let base_inj = nominal(&f);
        let v_bar = nonlinear_powerflow(&m, &base_inj, 1e-10, 100).unwrap().bus_voltages;
        let r = reduce_for_ders(&m, &f.placement, &v_bar).unwrap();
        let mut inj = base_inj.clone();
        for (c, &node) in r.nodes.iter().enumerate() {
            inj.add_at(node, dp[c], dq[c]);
        }
        let a = linear_bfs_step(&m, &base_inj, &v_bar).unwrap();
        let b = linear_bfs_step(&m, &inj, &v_bar).unwrap();
        let d = superposed_delta(&r, &dp, &dq).unwrap();
        for i in 0..32 {
            prop_assert!((b.bus_voltages[i] - a.bus_voltages[i] - d.delta_v[i]).norm() < 1e-12);
            prop_assert!((b.branch_currents[i] - a.branch_currents[i] - d.delta_i[i]).norm() < 1e-12);
        }
        let sp: Vec<f64> = dp.iter().map(|x| alpha * x).collect();
        let sq: Vec<f64> = dq.iter().map(|x| alpha * x).collect();
        let ds = superposed_delta(&r, &sp, &sq).unwrap();
        for i in 0..32 {
            prop_assert!((ds.delta_v[i] - d.delta_v[i] * alpha).norm() < 1e-14);
        }
    }
}
