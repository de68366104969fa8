use dermpc::error::Error;
use dermpc::grid_model::*;
use nalgebra::DVector;
use num_complex::Complex64;
use proptest::prelude::*;

fn ieee33() -> FeederData {
    parse_feeder(IEEE33_FEEDER).unwrap()
}

/// Branches on the path from `node` to the substation, found by walking parents.
fn ancestors(t: &NetworkTopology, node: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = node;
    while let Some(p) = t.parent(n) {
        out.push(n - 1);
        n = p;
    }
    out
}

#[test]
fn ieee33_dimensions() {
    let f = ieee33();
    assert_eq!(f.topology.n_nodes(), 33);
    assert_eq!(f.topology.n_branches(), 32);
    assert_eq!(f.topology.feeder_branch(), 0);
    assert_eq!(f.placement.n_g(), 6);
    let labels: Vec<u32> = f.placement.der_nodes().iter().map(|&n| f.topology.label(n)).collect();
    let mut sorted = labels.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, vec![3, 8, 18, 22, 25, 30]);
}

#[test]
fn two_node_chain() {
    let t = NetworkTopology::new(&[(0, 1, Complex64::new(0.01, 0.01))], 0, 1.0, 1.0).unwrap();
    assert_eq!(t.n_branches(), 1);
    assert_eq!(t.path_branches(1), vec![0]);
    let m = build_bfs_matrices(&t, 1.0);
    assert_eq!(m.bibc[(0, 0)], 1.0);
    assert_eq!(m.dlf[(0, 0)], Complex64::new(0.01, 0.01));
}

#[test]
fn bibc_matches_parent_walk() {
    let f = ieee33();
    let m = build_bfs_matrices(&f.topology, 1.0);
    for node in 1..=32 {
        let path = ancestors(&f.topology, node);
        for b in 0..32 {
            let expected = if path.contains(&b) { 1.0 } else { 0.0 };
            assert_eq!(m.bibc[(b, node - 1)], expected, "branch {b}, node {node}");
        }
    }
}

#[test]
fn dlf_matches_path_sum_oracle() {
    let f = ieee33();
    let m = build_bfs_matrices(&f.topology, 1.0);
    let z: Vec<Complex64> = f.topology.branches().iter().map(|b| b.impedance).collect();
    for i in 1..=32 {
        let pi = ancestors(&f.topology, i);
        for j in 1..=32 {
            let pj = ancestors(&f.topology, j);
            let common: Complex64 = pi.iter().filter(|b| pj.contains(b)).map(|&b| z[b]).sum();
            assert!((m.dlf[(i - 1, j - 1)] - common).norm() < 1e-12, "DLF[{i}][{j}]");
        }
    }
}

#[test]
fn per_unit_round_trip_against_file() {
    let f = ieee33();
    let z_base = f.topology.impedance_base();
    assert!((z_base - 12.66 * 12.66 / 1.0).abs() < 1e-12);
    let mut rows = 0;
    let mut in_branches = false;
    for line in IEEE33_FEEDER.lines() {
        let line = line.split('#').next().unwrap().trim();
        if line.starts_with('[') {
            in_branches = line == "[branches]";
            continue;
        }
        if !in_branches || line.is_empty() || line.starts_with("from") {
            continue;
        }
        let c: Vec<&str> = line.split(',').collect();
        let to: u32 = c[1].parse().unwrap();
        let (r, x): (f64, f64) = (c[2].parse().unwrap(), c[3].parse().unwrap());
        let node = f.topology.node_of_label(to).unwrap();
        let ohm = pu_to_ohm(f.topology.branches()[node - 1].impedance, z_base);
        assert!((ohm.re - r).abs() <= 1e-9 * r.abs().max(1e-12));
        assert!((ohm.im - x).abs() <= 1e-9 * x.abs().max(1e-12));
        rows += 1;
    }
    assert_eq!(rows, 32);
    let total = f.total_load() * 1000.0;
    assert!((total - Complex64::new(3715.0, 2300.0)).norm() < 1e-9);
}

#[test]
fn full_placement_is_no_reduction() {
    let f = ieee33();
    let m = build_bfs_matrices(&f.topology, 1.0);
    let v = DVector::from_element(32, Complex64::new(1.0, 0.0));
    let all: Vec<usize> = (1..=32).collect();
    let r = reduce_for_nodes(&m, &all, &v).unwrap();
    assert_eq!(r.bibc_r, m.bibc);
    assert_eq!(r.dlf_r, m.dlf);
}

#[test]
fn reference_placement_shape() {
    let f = ieee33();
    let m = build_bfs_matrices(&f.topology, 1.0);
    let v = DVector::from_element(32, Complex64::new(1.0, 0.0));
    let r = reduce_for_ders(&m, &f.placement, &v).unwrap();
    assert_eq!((r.bibc_r.nrows(), r.bibc_r.ncols()), (32, 6));
    assert_eq!(r.feeder_row.iter().copied().collect::<Vec<_>>(), vec![1.0; 6]);
    assert!((&r.bibc_r * DVector::zeros(6)).iter().all(|&x| x == 0.0));
}

#[test]
fn parse_errors_carry_lines() {
    let bad = "[header]\nbase_mva = 1\nbase_kv = 1\nslack = 1\n[branches]\nfrom,to,r_ohm,x_ohm\n1,2,0.1\n[loads]\nnode,p_kw,q_kvar\n2,1,1\n";
    match parse_feeder(bad) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let missing_load = "[header]\nbase_mva = 1\nbase_kv = 1\nslack = 1\n[branches]\nfrom,to,r_ohm,x_ohm\n1,2,0.1,0.1\n2,3,0.1,0.1\n[loads]\nnode,p_kw,q_kvar\n2,1,1\n";
    assert!(matches!(parse_feeder(missing_load), Err(Error::Parse { .. })));
    let looped = "[header]\nbase_mva = 1\nbase_kv = 1\nslack = 1\n[branches]\nfrom,to,r_ohm,x_ohm\n1,2,0.1,0.1\n5,5,0.1,0.1\n[loads]\nnode,p_kw,q_kvar\n2,1,1\n";
    assert!(matches!(parse_feeder(looped), Err(Error::Topology(_))));
}

proptest! {
    #[test]
    fn reduction_is_lossless(
        mask in prop::collection::vec(any::<bool>(), 32),
        values in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 32),
    ) {
        let f = ieee33();
        let m = build_bfs_matrices(&f.topology, 1.0);
        let nodes: Vec<usize> = (1..=32).filter(|&n| mask[n - 1]).collect();
        prop_assume!(!nodes.is_empty());
        let v = DVector::from_element(32, Complex64::new(1.0, 0.0));
        let r = reduce_for_nodes(&m, &nodes, &v).unwrap();
        let i_r = DVector::from_iterator(nodes.len(), nodes.iter().map(|&n| Complex64::new(values[n - 1].0, values[n - 1].1)));
        let mut i_full = DVector::zeros(32);
        for &n in &nodes {
            i_full[n - 1] = Complex64::new(values[n - 1].0, values[n - 1].1);
        }
        let full_i = m.bibc_complex() * &i_full;
        let red_i = r.bibc_r.map(|x| Complex64::new(x, 0.0)) * &i_r;
        let full_v = &m.dlf * &i_full;
        let red_v = &r.dlf_r * &i_r;
        prop_assert!((full_i - red_i).iter().all(|d| d.norm() == 0.0));
        prop_assert!((full_v - red_v).iter().all(|d| d.norm() < 1e-15));
    }

    #[test]
    fn ohm_pu_round_trip(r in 1e-4..10.0f64, x in -10.0..10.0f64, base in 0.1..1000.0f64) {
        let z = Complex64::new(r, x);
        let back = pu_to_ohm(ohm_to_pu(z, base), base);
        prop_assert!((back - z).norm() <= 1e-9 * z.norm());
    }
}
