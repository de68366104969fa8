use std::path::PathBuf;

use dermpc::error::Error;
use dermpc::scenario::{Event, EventKind, MismatchConfig, Scenario};
use dermpc::simulator::*;
use dermpc::verify::{conservation_suite, multirate_suite};
use num_complex::Complex64;

fn scenario_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn short_genloss(duration: f64) -> Scenario {
    let mut s = Scenario::load(&scenario_file("genloss.scenario"), &[]).unwrap();
    s.duration = duration;
    s
}

/// Every simulated quantity of a row, as raw bits; wall-clock timings are excluded.
fn fingerprint(trace: &ScenarioTrace) -> Vec<u64> {
    let mut out = Vec::new();
    for r in &trace.rows {
        let scalars = [
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
        ];
        let vectors =
            [&r.der_p, &r.der_q, &r.soc, &r.v_mag, &r.i_ratio, &r.cmd_dp_fast, &r.cmd_dq_fast, &r.cmd_dp_slow];
        out.push(r.step);
        out.extend(scalars.iter().map(|v| v.to_bits()));
        out.extend(vectors.iter().flat_map(|v| v.iter().map(|x| x.to_bits())));
        if let Some(d) = &r.diagnostics {
            out.extend([d.objective.to_bits(), d.iterations as u64, d.n_pruned as u64]);
        }
    }
    out
}

#[test]
fn runs_are_deterministic() {
    let s = short_genloss(15.0);
    let a = run(&s).unwrap();
    let b = run(&s).unwrap();
    assert_eq!(a.rows.len(), 16);
    assert_eq!(fingerprint(&a), fingerprint(&b));
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(fingerprint(&a), fingerprint(&run(&other).unwrap()));
}

#[test]
fn generation_loss_run_keeps_its_invariants() {
    let trace = run(&short_genloss(40.0)).unwrap();
    assert!(trace.abort.is_none());
    assert_eq!(trace.rows.len(), 41);
    assert_eq!(trace.events.len(), 1);
    assert_eq!(trace.events[0].step, 5);
    let m = multirate_suite(&trace);
    assert!(m.passed(), "{:?}", m.details);
    let c = conservation_suite(&trace);
    assert!(c.passed(), "{:?}", c.details);

    let before = &trace.rows[4];
    assert!(before.ref_pfc.abs() < 1e-12 && before.freq_dev == 0.0);
    let after = &trace.rows[20];
    assert!(after.freq_dev < 0.0);
    assert!(after.ref_pfc > 0.0);
    assert!(after.p0_dev > 0.5 * (after.ref_pfc + after.ref_sfc));

    let summary = summarize(&trace);
    assert_eq!(summary.solver_failures, 0);
    assert_eq!(summary.solves, 41);
    assert!(summary.max_kkt <= 1e-6);
    assert_eq!(summary.voltage_violation_steps, 0);
    assert_eq!(summary.current_violation_steps, 0);
}

#[test]
fn slow_commands_change_only_at_update_instants() {
    let trace = run(&short_genloss(35.0)).unwrap();
    for w in trace.rows.windows(2) {
        if w[1].step % trace.q != 0 {
            assert_eq!(w[1].cmd_dp_slow, w[0].cmd_dp_slow, "step {}", w[1].step);
        }
    }
    assert!(trace.rows.iter().any(|r| r.cmd_dp_slow.iter().any(|v| v.abs() > 1e-6)));
}

#[test]
fn undisturbed_run_commands_nothing() {
    let mut s = Scenario::load(&scenario_file("noevent.scenario"), &[]).unwrap();
    s.duration = 20.0;
    let trace = run(&s).unwrap();
    for r in &trace.rows {
        let worst =
            r.cmd_dp_fast.iter().chain(&r.cmd_dq_fast).chain(&r.cmd_dp_slow).fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-6, "step {}: {worst}", r.step);
    }
}

#[test]
fn mismatched_plant_still_runs() {
    let mut s = short_genloss(30.0);
    s.mismatch = MismatchConfig { dg_governor: 2.0, dg_exciter: 2.0, vshp_time_constant: 2.0, bess_energy: 0.5 };
    let trace = run(&s).unwrap();
    assert!(trace.abort.is_none());
    assert_eq!(summarize(&trace).solver_failures, 0);
    assert!(conservation_suite(&trace).passed());

    let mut slow_dg = short_genloss(30.0);
    slow_dg.mismatch.dg_governor = 1.2;
    let nominal = run(&short_genloss(30.0)).unwrap();
    let lagged = run(&slow_dg).unwrap();
    let dg = nominal.der_names.iter().position(|n| n.starts_with("dg")).unwrap();
    let diff =
        nominal.rows.iter().zip(&lagged.rows).map(|(a, b)| (a.der_p[dg] - b.der_p[dg]).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0);
}

#[test]
fn mismatch_factors_are_bounded() {
    let bad = MismatchConfig { dg_governor: 2.5, ..MismatchConfig::default() };
    assert!(matches!(plant_model_mismatch(&bad), Err(Error::Config(_))));
    let low = MismatchConfig { bess_energy: 0.4, ..MismatchConfig::default() };
    assert!(plant_model_mismatch(&low).is_err());
    assert_eq!(plant_model_mismatch(&MismatchConfig::default()).unwrap(), PlantOverrides::identity());
}

#[test]
fn event_examples() {
    let base = PlantState { generation_loss: 0.0, thevenin_z: Complex64::new(0.02, 0.1), schedule_shift: 0.0 };
    let ev = |kind, magnitude| Event { time: 5.0, kind, magnitude };
    let s = apply_event(&base, &ev(EventKind::GenerationLoss, 0.5));
    assert_eq!(s.generation_loss, 0.5);
    assert_eq!(s.thevenin_z, base.thevenin_z);
    let s = apply_event(&base, &ev(EventKind::LineTrip, 0.1));
    assert!((s.thevenin_z - Complex64::new(0.12, 0.1)).norm() < 1e-15);
    let s =
        apply_event(&apply_event(&base, &ev(EventKind::SetpointChange, 0.2)), &ev(EventKind::SetpointChange, -0.05));
    assert!((s.schedule_shift - 0.15).abs() < 1e-15);
}

#[test]
fn captured_problem_matches_the_step() {
    let s = short_genloss(20.0);
    let p = capture_problem(&s, 12).unwrap();
    assert_eq!(p.k, 12);
    assert!(!p.z0);
    assert_eq!(p.layout.n_inputs(), 30 * 12 + 3 * 6);
    assert!(capture_problem(&s, 21).is_err());
}

#[test]
fn trace_csv_columns_match_the_rows() {
    let trace = run(&short_genloss(6.0)).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), trace.rows.len() + 1);
    assert!(lines[0].starts_with("step,time,freq_dev,rocof,p0_dev,q0_dev"));
    let width = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
    let mut diag = Vec::new();
    trace.write_diagnostics(&mut diag).unwrap();
    assert_eq!(String::from_utf8(diag).unwrap().lines().count(), trace.rows.len());
}
