use dermpc::der_fleet::*;
use dermpc::error::Error;
use dermpc::grid_model::{parse_feeder, IEEE33_FEEDER};
use dermpc::scenario::{reference_fleet, UnitSpec};
use dermpc::simulator::{build_fleet, PlantOverrides};
use nalgebra::DVector;
use proptest::prelude::*;

fn fleet_from(specs: &[UnitSpec]) -> DerFleet {
    let feeder = parse_feeder(IEEE33_FEEDER).unwrap();
    build_fleet(specs, &feeder, (0.1, 0.9), 1.0, &PlantOverrides::identity()).unwrap()
}

fn reference() -> DerFleet {
    fleet_from(&reference_fleet())
}

fn dg(p_set: f64) -> DerUnit {
    DerUnit {
        name: "dg".into(),
        node: 1,
        rating: 1.0,
        params: KindParams::Dg(DgParams { governor_time_constant: 10.0, exciter_time_constant: 1.0, p_min: 0.0 }),
        p_set,
        q_set: 0.0,
        p: p_set,
        q: 0.0,
    }
}

#[test]
fn dg_filter_fixed_point_and_step() {
    let mut u = dg(0.3);
    step_der(&mut u, 0.0, 0.0, 1.0);
    assert_eq!(u.p, 0.3);

    let mut u = dg(0.0);
    for _ in 0..10 {
        step_der(&mut u, 1.0, 0.0, 1.0);
    }
    assert!((u.p - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    assert!((u.p - 0.632).abs() < 1e-3);
}

#[test]
fn dg_error_shrinks_geometrically() {
    let mut u = dg(0.0);
    let ratio = (-0.1f64).exp();
    let mut err = 1.0;
    for _ in 0..20 {
        step_der(&mut u, 1.0, 0.0, 1.0);
        let e = 1.0 - u.p;
        assert!((e - err * ratio).abs() < 1e-12);
        err = e;
    }
}

#[test]
fn bess_soc_step() {
    let mut u = DerUnit {
        name: "b".into(),
        node: 1,
        rating: 0.5,
        params: KindParams::Bess(BessParams { energy: 576.0, soc: 0.5, soc_min: 0.1, soc_max: 0.9 }),
        p_set: 0.0,
        q_set: 0.0,
        p: 0.0,
        q: 0.0,
    };
    step_der(&mut u, 0.5, 0.0, 1.0);
    let d = u.soc().unwrap() - 0.5;
    assert!((d + 0.5 / 576.0).abs() < 1e-15);
    assert!((d + 8.68e-4).abs() < 1e-6);
}

#[test]
fn vshp_samples_the_continuous_triple_lag() {
    let fleet = reference();
    let mut u = fleet.units[fleet.vshp_indices()[0]].clone();
    let tau = 5.0;
    let step = |t: f64| {
        let x = t / tau;
        1.0 - (-x).exp() * (1.0 + x + 0.5 * x * x)
    };
    for k in 1..=40 {
        step_der(&mut u, -0.1, 0.0, 1.0);
        assert!((u.p - u.p_set + 0.1 * step(k as f64)).abs() < 1e-12, "step {k}");
        assert_eq!(u.q, 0.0);
    }
}

#[test]
fn vshp_reactive_coupling_follows_power_factor() {
    let c = VshpCoefficients::critically_damped(5.0, 1.0).unwrap();
    let params =
        VshpParams { time_constant: 5.0, power_factor: 0.8, p_min: 0.0, p_max: 1.0, coefficients: c, nu: [0.0; 3] };
    let mut u = DerUnit {
        name: "hp".into(),
        node: 1,
        rating: 1.0,
        params: KindParams::Vshp(params),
        p_set: 0.5,
        q_set: 0.375,
        p: 0.5,
        q: 0.375,
    };
    for _ in 0..10 {
        step_der(&mut u, 0.2, 0.0, 1.0);
        assert!((u.q - u.p * 0.75).abs() < 1e-12);
    }
}

#[test]
fn capability_examples() {
    let bess =
        build_capability(0.5, &KindParams::Bess(BessParams { energy: 576.0, soc: 0.5, soc_min: 0.1, soc_max: 0.9 }))
            .unwrap();
    assert_eq!(bess.rows(), 4);
    assert!(bess.contains(0.0, 0.0, 0.0));
    assert!(bess.contains(0.5, -0.5, 1e-12));

    let dg = KindParams::Dg(DgParams { governor_time_constant: 10.0, exciter_time_constant: 1.0, p_min: 0.1 });
    let poly = build_capability(0.67, &dg).unwrap();
    assert!(!poly.contains(0.05, 0.0, 1e-12));
    assert!(poly.contains(0.1, 0.0, 1e-12));

    let pv = build_capability(0.3, &KindParams::Pv(PvParams { available: 0.27, pf_min: 0.9 })).unwrap();
    assert!(pv.contains(0.27, 0.0, 1e-12));
    assert!(!pv.contains(0.31, 0.0, 1e-12));
    assert!(!pv.contains(-0.01, 0.0, 1e-12));

    let too_high = KindParams::Dg(DgParams { governor_time_constant: 10.0, exciter_time_constant: 1.0, p_min: 0.8 });
    assert!(matches!(build_capability(0.67, &too_high), Err(Error::Config(_))));
    assert!(build_capability(0.0, &dg).is_err());
}

#[test]
fn inner_polygon_stays_inside_the_circle() {
    let dg = KindParams::Dg(DgParams { governor_time_constant: 10.0, exciter_time_constant: 1.0, p_min: 0.0 });
    let poly = build_capability(1.0, &dg).unwrap();
    for v in poly.vertices() {
        assert!(v[0].hypot(v[1]) <= 1.0 + 1e-12);
    }
}

#[test]
fn pv_only_fleet_is_deadbeat() {
    let spec = reference_fleet().into_iter().find(|s| s.kind == "pv").unwrap();
    let fleet = fleet_from(&[spec]);
    let m = assemble_prediction_model(&fleet, 1.0).unwrap();
    assert_eq!(m.map.n_s(), 2);
    assert!(m.a.iter().all(|&x| x == 0.0));
    assert_eq!(m.b, nalgebra::DMatrix::identity(2, 2));
}

#[test]
fn reference_fleet_dimensions_and_stability() {
    let fleet = reference();
    let m = assemble_prediction_model(&fleet, 1.0).unwrap();
    assert_eq!(m.map.n_s(), 17);
    assert_eq!((m.a.nrows(), m.b.ncols()), (17, 12));
    let rho = m.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(rho <= 1.0 + 1e-12);
    let d = fleet.indices(DerKind::Dg)[0];
    assert!(m.a[(m.map.p(d), m.map.p(d))] < 1.0);
    let nu: Vec<usize> = (0..3).map(|i| m.map.nu(0, i)).collect();
    let sub = nalgebra::DMatrix::from_fn(3, 3, |i, j| m.a[(nu[i], nu[j])]);
    assert!(sub.complex_eigenvalues().iter().all(|z| z.norm() < 1.0));
    assert!(assemble_prediction_model(&DerFleet { units: vec![] }, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_matches_unit_updates(cmds in prop::collection::vec(prop::collection::vec(-0.1..0.1f64, 12), 1..15)) {
        let mut fleet = reference();
        let m = assemble_prediction_model(&fleet, 1.0).unwrap();
        let mut x = m.state_of(&fleet);
        for u in &cmds {
            let uv = DVector::from_column_slice(u);
            x = &m.a * &x + &m.b * &uv + &m.c;
            for (d, unit) in fleet.units.iter_mut().enumerate() {
                step_der(unit, u[d], u[6 + d], 1.0);
            }
            let actual = m.state_of(&fleet);
            prop_assert!((&x - actual).amax() < 1e-12);
        }
    }

    #[test]
    fn soc_telescopes(powers in prop::collection::vec(-0.5..0.5f64, 1..50)) {
        let fleet = reference();
        let mut u = fleet.units[fleet.bess_indices()[0]].clone();
        let (soc0, energy) = match u.params { KindParams::Bess(b) => (b.soc, b.energy), _ => unreachable!() };
        for &p in &powers {
            step_der(&mut u, p, 0.0, 1.0);
        }
        let expected = soc0 - powers.iter().map(|p| u.p_set + p).sum::<f64>() / energy;
        prop_assert!((u.soc().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rows_are_unit_norm(rating in 0.05..2.0f64, p_min_frac in 0.0..0.9f64, pf in 0.5..1.0f64) {
        let kinds = [
            KindParams::Dg(DgParams { governor_time_constant: 1.0, exciter_time_constant: 1.0, p_min: p_min_frac * rating }),
            KindParams::Pv(PvParams { available: 0.9 * rating, pf_min: pf }),
            KindParams::Bess(BessParams { energy: 1.0, soc: 0.5, soc_min: 0.1, soc_max: 0.9 }),
        ];
        for k in &kinds {
            let poly = build_capability(rating, k).unwrap();
            for a in &poly.a {
                prop_assert!((a[0].hypot(a[1]) - 1.0).abs() < 1e-12);
            }
            let (p, q) = poly.project(3.0 * rating, -2.0 * rating);
            prop_assert!(poly.contains(p, q, 1e-9));
        }
    }
}
