use dermpc::grid_model::{build_bfs_matrices, parse_feeder, IEEE33_FEEDER};
use dermpc::verify::*;
use nalgebra::{DMatrix, DVector};

fn options(corrupt_bibc: bool) -> VerifyOptions {
    VerifyOptions { corrupt_bibc, qp_instances: 20, ..VerifyOptions::default() }
}

#[test]
fn static_suites_pass_on_clean_matrices() {
    let f = parse_feeder(IEEE33_FEEDER).unwrap();
    let m = build_bfs_matrices(&f.topology, 1.0);
    let path = path_property(&f, &m);
    assert!(path.passed(), "{:?}", path.details);
    let oracle = oracle_equivalence(&f, &m, &options(false)).unwrap();
    assert!(oracle.passed(), "{:?}", oracle.details);
    let kkt = kkt_suite(&options(false));
    assert!(kkt.passed(), "{:?}", kkt.details);
    assert!(kkt.checks >= 20);
}

#[test]
fn corrupted_bibc_is_caught() {
    let f = parse_feeder(IEEE33_FEEDER).unwrap();
    let mut m = build_bfs_matrices(&f.topology, 1.0);
    let n = m.n() - 1;
    m.bibc[(2, n)] = 1.0 - m.bibc[(2, n)];
    m.dlf = &m.bcbv * m.bibc_complex();
    let path = path_property(&f, &m);
    assert!(!path.passed());
    assert!(!path.details.is_empty());
}

#[test]
fn projected_gradient_solves_a_box_example() {
    // min (x0 - 2)² + (x1 + 3)² on [-1, 1]²: the clipped unconstrained minimizer.
    let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
    let f = DVector::from_vec(vec![-4.0, 6.0]);
    let lo = DVector::from_element(2, -1.0);
    let hi = DVector::from_element(2, 1.0);
    let x = projected_gradient_box(&h, &f, &lo, &hi);
    assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] + 1.0).abs() < 1e-9);
}
