use dermpc::der_fleet::*;
use dermpc::error::Error;
use dermpc::grid_model::*;
use dermpc::mpc_controller::*;
use dermpc::powerflow::{nonlinear_powerflow, InjectionVector};
use dermpc::qp_solver::{check_kkt, Candidate};
use dermpc::scenario::reference_fleet;
use dermpc::simulator::{build_fleet, PlantOverrides};
use nalgebra::DVector;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    fleet: DerFleet,
    ctrl: ControllerModel,
    network: NetworkSnapshot,
    schedule: MultirateSchedule,
}

fn reference_setup() -> Setup {
    let feeder = parse_feeder(IEEE33_FEEDER).unwrap();
    let fleet = build_fleet(&reference_fleet(), &feeder, (0.1, 0.9), 1.0, &PlantOverrides::identity()).unwrap();
    let m = build_bfs_matrices(&feeder.topology, 1.0);
    let mut inj = InjectionVector::from_demand(&feeder.loads);
    for u in &fleet.units {
        let (p, q) = u.injection();
        inj.add_at(u.node, p, q);
    }
    let state = nonlinear_powerflow(&m, &inj, 1e-10, 100).unwrap();
    let reduced = reduce_for_nodes(&m, &fleet.nodes(), &state.bus_voltages).unwrap();
    let i_max = state.branch_currents.map(|c| 2.0 * c.norm() + 0.05);
    let network = NetworkSnapshot {
        reduced,
        v_pre: state.bus_voltages.clone(),
        i_pre: state.branch_currents.clone(),
        i_max,
        slack_voltage: 1.0,
    };
    let branch_r = DVector::from_iterator(32, feeder.topology.branches().iter().map(|b| b.impedance.re));
    let model = assemble_prediction_model(&fleet, 1.0).unwrap();
    let costs = CostProfile::for_fleet(&fleet, (1.0, 2.0, 4.0), branch_r);
    let ctrl = ControllerModel::new(&fleet, model, costs).unwrap();
    Setup { fleet, ctrl, network, schedule: build_schedule(1.0, 10.0).unwrap() }
}

fn bess(name: &str, node: usize) -> DerUnit {
    DerUnit {
        name: name.into(),
        node,
        rating: 0.5,
        params: KindParams::Bess(BessParams { energy: 576.0, soc: 0.5, soc_min: 0.1, soc_max: 0.9 }),
        p_set: 0.0,
        q_set: 0.0,
        p: 0.0,
        q: 0.0,
    }
}

/// Chain feeder with one BESS per node and flat voltages.
fn bess_chain(n: usize, c_a: &[f64]) -> Setup {
    let edges: Vec<(u32, u32, Complex64)> = (0..n as u32).map(|i| (i, i + 1, Complex64::new(0.001, 0.002))).collect();
    let t = NetworkTopology::new(&edges, 0, 1.0, 1.0).unwrap();
    let m = build_bfs_matrices(&t, 1.0);
    let fleet = DerFleet { units: (1..=n).map(|node| bess(&format!("b{node}"), node)).collect() };
    let flat = DVector::from_element(n, Complex64::new(1.0, 0.0));
    let reduced = reduce_for_nodes(&m, &fleet.nodes(), &flat).unwrap();
    let network = NetworkSnapshot {
        reduced,
        v_pre: flat,
        i_pre: DVector::zeros(n),
        i_max: DVector::from_element(n, 10.0),
        slack_voltage: 1.0,
    };
    let model = assemble_prediction_model(&fleet, 1.0).unwrap();
    let mut costs = CostProfile::for_fleet(&fleet, (1.0, 1.0, 1.0), DVector::from_element(n, 0.001));
    costs.c_a = c_a.to_vec();
    let ctrl = ControllerModel::new(&fleet, model, costs).unwrap();
    Setup { fleet, ctrl, network, schedule: build_schedule(1.0, 10.0).unwrap() }
}

fn lossless(horizon: usize) -> MpcConfig {
    MpcConfig { horizon, loss_weight: 0.0, ..MpcConfig::default() }
}

fn problem(s: &Setup, config: &MpcConfig, k: u64, held: &DVector<f64>, pfc: f64, vc: f64, sfc: f64) -> MpcProblem {
    let x0 = s.ctrl.model.state_of(&s.fleet);
    let h = config.horizon;
    let (pfc, vc) = (vec![pfc; h], vec![vc; h]);
    let inputs = StepInputs { k, x0: &x0, held_slow: held, network: &s.network, pfc: &pfc, vc: &vc, sfc };
    assemble_qp(&s.ctrl, &s.schedule, config, &inputs).unwrap()
}

#[test]
fn schedule_examples() {
    let s = build_schedule(1.0, 10.0).unwrap();
    assert_eq!(s.q, 10);
    assert!(!s.z(7));
    assert_eq!(s.m_z(7, 6), 12);
    assert!(s.z(20));
    assert_eq!(s.m_z(20, 6), 18);
    let every = build_schedule(1.0, 1.0).unwrap();
    assert!((0..50).all(|k| every.z(k)));
    assert!(matches!(build_schedule(1.0, 2.5), Err(Error::Schedule(_))));
    assert!(matches!(build_schedule(2.0, 1.0), Err(Error::Schedule(_))));
    assert!(build_schedule(0.0, 1.0).is_err());
}

#[test]
fn reference_layout_dimensions() {
    let s = reference_setup();
    let config = MpcConfig::default();
    let p = problem(&s, &config, 0, &DVector::zeros(6), 0.0, 0.0, 0.0);
    assert_eq!(p.layout.n_inputs(), 378);
    assert_eq!(p.layout.n_slack, 90);
    let short = MpcConfig { horizon: 15, ..config.clone() };
    assert_eq!(problem(&s, &short, 5, &DVector::zeros(6), 0.0, 0.0, 0.0).layout.n_inputs(), 18 + 14 * 12);
    assert_eq!(problem(&s, &short, 0, &DVector::zeros(6), 0.0, 0.0, 0.0).layout.n_inputs(), 2 * 18 + 13 * 12);
    let quad = MpcConfig { soft_penalty: SoftPenalty::Quadratic, ..config };
    assert_eq!(problem(&s, &quad, 0, &DVector::zeros(6), 0.0, 0.0, 0.0).layout.n_slack, 0);
}

#[test]
fn zero_targets_give_zero_command() {
    let s = reference_setup();
    let config = MpcConfig::default();
    let p = problem(&s, &config, 0, &DVector::zeros(6), 0.0, 0.0, 0.0);
    let out = solve_step(&p, &config, None).unwrap();
    assert!(out.solution.primal.amax() < 1e-6);
    assert!(out.diagnostics.objective.abs() < 1e-8);
    assert!(out.command.dp_fast.iter().chain(&out.command.dq_fast).chain(&out.command.dp_slow).all(|v| v.abs() < 1e-6));
}

#[test]
fn single_unit_follows_secondary_target() {
    let s = bess_chain(1, &[2.0]);
    let rows = delivery_targets_to_constraints(0.0, 0.0, 0.2, &s.network.reduced, &s.ctrl.signs, 1.0);
    assert!((rows[2].coeff_p[0] - 1.0).abs() < 1e-12);
    assert_eq!(rows[2].coeff_q[0], 0.0);
    let config = lossless(10);
    let out = solve_step(&problem(&s, &config, 0, &DVector::zeros(1), 0.0, 0.0, 0.2), &config, None).unwrap();
    assert!((out.command.dp_slow[0] - 0.2).abs() < 1e-6);
    assert!(out.command.dp_fast[0].abs() < 1e-6);
    assert!(out.diagnostics.slack_total < 1e-6);
}

#[test]
fn over_capability_target_leaves_the_shortfall_in_the_slack() {
    let s = bess_chain(1, &[2.0]);
    let config = lossless(10);
    let target = 0.8;
    let out = solve_step(&problem(&s, &config, 0, &DVector::zeros(1), 0.0, 0.0, target), &config, None).unwrap();
    let reach = s.ctrl.capabilities[0].support([1.0, 0.0]) - s.fleet.units[0].p_set;
    let shortfall = target - reach;
    assert!((shortfall - 0.3).abs() < 1e-12);
    assert!((out.diagnostics.slack_sfc - 10.0 * shortfall).abs() < 1e-5, "{}", out.diagnostics.slack_sfc);
    assert!(out.diagnostics.slack_pfc < 1e-5);
    assert!((out.command.dp_slow[0] - reach).abs() < 1e-6);
}

#[test]
fn secondary_share_follows_cost_ratio() {
    let config = lossless(10);
    let share = |c_a: [f64; 2]| {
        let s = bess_chain(2, &c_a);
        let out = solve_step(&problem(&s, &config, 0, &DVector::zeros(2), 0.0, 0.0, 0.4), &config, None).unwrap();
        out.command.dp_slow
    };
    let even = share([2.0, 2.0]);
    let skewed = share([6.0, 2.0]);
    assert!((even[0] - 0.2).abs() < 1e-4 && (even[1] - 0.2).abs() < 1e-4);
    // Minimizer of c0·a0² + c1·a1² subject to a0 + a1 = 0.4.
    assert!((skewed[0] - 0.4 * 2.0 / 8.0).abs() < 1e-4, "{skewed:?}");
    assert!(skewed[0].abs() <= even[0].abs() + 1e-6);
}

#[test]
fn hessian_is_positive_semidefinite() {
    let s = reference_setup();
    for cfg in [MpcConfig::default(), MpcConfig { loss_on_total_current: true, ..MpcConfig::default() }] {
        let p = problem(&s, &cfg, 3, &DVector::zeros(6), 0.05, 0.02, 0.03);
        let h = &p.qp.hessian;
        assert!((h - h.transpose()).amax() < 1e-12);
        let eig = h.clone().symmetric_eigen().eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-9 * h.amax(), "min eigenvalue {min}");
    }
}

#[test]
fn held_slow_value_reaches_the_delivery_rows() {
    let s = reference_setup();
    let config = MpcConfig { horizon: 15, ..MpcConfig::default() };
    let held = DVector::from_element(6, 0.01);
    let k = 3;
    let p = problem(&s, &config, k, &held, 0.02, 0.0, 0.04);
    assert!(!p.z0);
    let out = solve_step(&p, &config, None).unwrap();
    let x = &out.solution.primal;
    let sens = network_sensitivity(&s.network.reduced, &s.ctrl.signs, 1.0);
    let mut current = held.clone();
    let sfc_rows = p.delivery.iter().filter(|d| d.kind == 2);
    for (j, d) in sfc_rows.enumerate() {
        let z = s.schedule.z(k + j as u64);
        let u = x.rows(p.layout.offsets[j], p.layout.widths[j]).into_owned();
        let ch = reconstruct(z, &u, &current, 6);
        if z {
            current = ch.rows(12, 6).into_owned();
        } else {
            assert_eq!(ch.rows(12, 6), current.rows(0, 6));
        }
        let expected = sens.feeder.p_from_p.dot(&ch.rows(12, 6));
        assert!((d.g.dot(x) + d.g0 - expected).abs() < 1e-12, "step {j}");
    }
    assert_eq!(out.command.dp_slow, vec![0.01; 6]);
}

#[test]
fn accepted_solutions_meet_kkt_tolerance() {
    let s = reference_setup();
    let config = MpcConfig::default();
    for (k, pfc, vc, sfc) in [(0, 0.05, 0.0, 0.02), (4, -0.1, 0.05, 0.0), (10, 0.2, -0.05, 0.1)] {
        let p = problem(&s, &config, k, &DVector::zeros(6), pfc, vc, sfc);
        let out = solve_step(&p, &config, None).unwrap();
        let sol = &out.solution;
        let report = check_kkt(
            &p.qp,
            Candidate {
                primal: &sol.primal,
                dual_eq: &sol.dual_eq,
                dual_ineq: &sol.dual_ineq,
                dual_bounds: Some(&sol.dual_bounds),
            },
        );
        assert!(report.max() <= 1e-6, "step {k}: {report:?}");
    }
}

#[test]
fn warm_start_matches_cold_solve() {
    let s = reference_setup();
    let config = MpcConfig::default();
    let mut ctrl = MpcController::new(config.clone(), s.schedule, s.ctrl.clone());
    let x0 = s.ctrl.model.state_of(&s.fleet);
    let (pfc, vc) = (vec![0.08; 30], vec![0.02; 30]);
    for k in 0..3 {
        let held = ctrl.held_slow.clone();
        let inputs = StepInputs { k, x0: &x0, held_slow: &held, network: &s.network, pfc: &pfc, vc: &vc, sfc: 0.05 };
        let warm = ctrl.step(&inputs).unwrap();
        let cold = solve_step(&assemble_qp(&s.ctrl, &s.schedule, &config, &inputs).unwrap(), &config, None).unwrap();
        let (a, b) = (warm.command.setpoint_changes(), cold.command.setpoint_changes());
        for d in 0..6 {
            assert!((a.0[d] - b.0[d]).abs() < 1e-5 && (a.1[d] - b.1[d]).abs() < 1e-5, "step {k}, unit {d}");
        }
    }
    assert_eq!(ctrl.failures, 0);
}

#[test]
fn assembly_rejects_inconsistent_inputs() {
    let s = reference_setup();
    let x0 = s.ctrl.model.state_of(&s.fleet);
    let held = DVector::zeros(6);
    let t = vec![0.0; 30];
    let ok = StepInputs { k: 0, x0: &x0, held_slow: &held, network: &s.network, pfc: &t, vc: &t, sfc: 0.0 };
    let zero_h = MpcConfig { horizon: 0, ..MpcConfig::default() };
    assert!(matches!(assemble_qp(&s.ctrl, &s.schedule, &zero_h, &ok), Err(Error::Assembly(_))));
    let short = vec![0.0; 29];
    let bad = StepInputs { pfc: &short, ..ok.clone() };
    assert!(matches!(assemble_qp(&s.ctrl, &s.schedule, &MpcConfig::default(), &bad), Err(Error::Assembly(_))));
    let held5 = DVector::zeros(5);
    let bad = StepInputs { held_slow: &held5, ..ok };
    assert!(matches!(assemble_qp(&s.ctrl, &s.schedule, &MpcConfig::default(), &bad), Err(Error::Assembly(_))));
}

#[test]
fn cost_ordering_is_validated() {
    let s = reference_setup();
    let mut costs = s.ctrl.costs.clone();
    assert!(costs.validate(&s.fleet).is_ok());
    let dg = s.fleet.indices(DerKind::Dg)[0];
    costs.c_a[dg] *= 0.1;
    assert!(matches!(costs.validate(&s.fleet), Err(Error::Config(_))));
    let mut inverted = s.ctrl.costs.clone();
    inverted.c_q[0] = 2.0 * inverted.c_p[0];
    assert!(inverted.validate(&s.fleet).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_update_equals_boundary_hold(v in prop::collection::vec(-1.0..1.0f64, 18)) {
        let full = DVector::from_vec(v);
        let fast = full.rows(0, 12).into_owned();
        let held = full.rows(12, 6).into_owned();
        prop_assert_eq!(reconstruct(true, &full, &DVector::zeros(6), 6), reconstruct(false, &fast, &held, 6));
    }

    #[test]
    fn periodic_system_matches_held_simulation(k0 in 0u64..25, horizon in 1usize..25, seed in 0u64..1000) {
        let s = reference_setup();
        let model = &s.ctrl.model;
        let (n_g, n_s) = (6, model.map.n_s());
        let sys = PeriodicSystem::build(model, &s.schedule, k0, horizon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = model.state_of(&s.fleet);
        let mut held = DVector::from_fn(n_g, |_, _| rng.gen_range(-0.1..0.1));
        let mut x0_bar = x0.clone();
        if !s.schedule.z(k0) {
            x0_bar = DVector::from_iterator(n_s + n_g, x0.iter().chain(held.iter()).copied());
        }
        let ubar: Vec<DVector<f64>> = (0..horizon as u64)
            .map(|j| DVector::from_fn(s.schedule.m_z(k0 + j, n_g), |_, _| rng.gen_range(-0.1..0.1)))
            .collect();
        let traj = sys.simulate(&x0_bar, &ubar);
        let mut x = x0;
        for (j, u) in ubar.iter().enumerate() {
            let k = k0 + j as u64;
            if s.schedule.z(k) {
                held = u.rows(2 * n_g, n_g).into_owned();
            }
            let lanes = DVector::from_fn(2 * n_g, |i, _| if i < n_g { u[i] + held[i] } else { u[i] });
            x = &model.a * &x + &model.b * lanes + &model.c;
            let next = &traj[j + 1];
            prop_assert!((next.rows(0, n_s) - &x).amax() < 1e-12);
            if !s.schedule.z(k + 1) {
                prop_assert!((next.rows(n_s, n_g) - &held).amax() == 0.0);
            }
        }
    }
}
