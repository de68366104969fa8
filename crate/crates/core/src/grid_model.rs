//! Radial network representation and the backward/forward sweep matrices.
//!
//! Nodes are stored in a topological order fixed at load time: the
//! substation is node 0 and every node appears after its parent. Branch `b`
//! is the unique branch feeding node `b + 1`, which makes BIBC unit upper
//! triangular. Vectors over non-slack nodes are indexed by `node - 1`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector, RowDVector};
use num_complex::Complex64;
use serde::Deserialize;

use crate::error::{Error, Result};

/// A branch between a parent (`from`) and a child (`to`) node, per-unit impedance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub impedance: Complex64,
}

/// Connected radial graph with per-unit branch impedances.
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    labels: Vec<u32>,
    parent: Vec<Option<usize>>,
    branches: Vec<Branch>,
    pub base_mva: f64,
    pub base_kv: f64,
}

impl NetworkTopology {
    /// Builds a topology from labelled edges with per-unit impedances.
    ///
    /// Edges may be listed in any orientation; they are oriented away from
    /// the slack. Nodes are renumbered so that each parent precedes its
    /// children, breaking ties by the smallest label.
    pub fn new(edges: &[(u32, u32, Complex64)], slack: u32, base_mva: f64, base_kv: f64) -> Result<Self> {
        if !(base_mva > 0.0 && base_kv > 0.0) {
            return Err(Error::Topology("bases must be positive".into()));
        }
        let mut adjacency: BTreeMap<u32, Vec<(u32, usize)>> = BTreeMap::new();
        adjacency.entry(slack).or_default();
        for (e, &(a, b, z)) in edges.iter().enumerate() {
            if a == b {
                return Err(Error::Topology(format!("self-loop at node {a}")));
            }
            if !(z.re >= 0.0) || !z.im.is_finite() {
                return Err(Error::Topology(format!("branch ({a},{b}) has invalid impedance {z}")));
            }
            adjacency.entry(a).or_default().push((b, e));
            adjacency.entry(b).or_default().push((a, e));
        }
        let n_nodes = adjacency.len();
        if edges.len() + 1 != n_nodes {
            let kind = if edges.len() + 1 > n_nodes { "cycle detected" } else { "network is disconnected" };
            return Err(Error::Topology(format!("{kind}: {} branches for {n_nodes} nodes", edges.len())));
        }
        if adjacency[&slack].len() != 1 {
            return Err(Error::Topology(format!(
                "substation {slack} must feed exactly one main feeder branch, found {}",
                adjacency[&slack].len()
            )));
        }

        let mut index: HashMap<u32, usize> = HashMap::new();
        let mut labels = Vec::with_capacity(n_nodes);
        let mut parent = Vec::with_capacity(n_nodes);
        let mut branches = Vec::with_capacity(n_nodes - 1);
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((slack, None::<(u32, usize)>)));
        while let Some(Reverse((label, via))) = heap.pop() {
            if index.contains_key(&label) {
                return Err(Error::Topology(format!("cycle detected through node {label}")));
            }
            let idx = labels.len();
            index.insert(label, idx);
            labels.push(label);
            match via {
                None => parent.push(None),
                Some((p, e)) => {
                    let p_idx = index[&p];
                    parent.push(Some(p_idx));
                    branches.push(Branch { from: p_idx, to: idx, impedance: edges[e].2 });
                }
            }
            for &(next, e) in &adjacency[&label] {
                if via.map(|(p, _)| p) == Some(next) {
                    continue;
                }
                if index.contains_key(&next) {
                    return Err(Error::Topology(format!("cycle detected through node {next}")));
                }
                heap.push(Reverse((next, Some((label, e)))));
            }
        }
        if labels.len() != n_nodes {
            return Err(Error::Topology("network is disconnected".into()));
        }
        Ok(Self { labels, parent, branches, base_mva, base_kv })
    }

    /// Number of nodes including the substation (N + 1).
    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of branches, equal to the number of non-slack nodes N.
    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn label(&self, node: usize) -> u32 {
        self.labels[node]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn node_of_label(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    /// Impedance base in ohm.
    pub fn impedance_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    /// Index of the main feeder branch (the one leaving the substation).
    pub fn feeder_branch(&self) -> usize {
        0
    }

    /// Branches on the path from the substation to `node`, root first.
    pub fn path_branches(&self, node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut n = node;
        while let Some(p) = self.parent[n] {
            path.push(n - 1);
            n = p;
        }
        path.reverse();
        path
    }

    /// Replaces the impedance of branch `b` (used for corruption tests and events).
    pub fn set_impedance(&mut self, b: usize, z: Complex64) {
        self.branches[b].impedance = z;
    }
}

/// Converts an impedance in ohm to per-unit.
pub fn ohm_to_pu(z: Complex64, z_base: f64) -> Complex64 {
    z / z_base
}

/// Converts a per-unit impedance back to ohm.
pub fn pu_to_ohm(z: Complex64, z_base: f64) -> Complex64 {
    z * z_base
}

/// Node-index sets hosting each DER class and the loads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DerPlacement {
    pub dg_nodes: Vec<usize>,
    pub pv_nodes: Vec<usize>,
    pub bess_nodes: Vec<usize>,
    pub vshp_nodes: Vec<usize>,
    pub load_nodes: Vec<usize>,
}

impl DerPlacement {
    /// All controllable DER nodes in the order DG, PV, BESS, VSHP.
    pub fn der_nodes(&self) -> Vec<usize> {
        self.dg_nodes.iter().chain(&self.pv_nodes).chain(&self.bess_nodes).chain(&self.vshp_nodes).copied().collect()
    }

    pub fn n_g(&self) -> usize {
        self.dg_nodes.len() + self.pv_nodes.len() + self.bess_nodes.len() + self.vshp_nodes.len()
    }

    /// Checks node ranges and that no node hosts two controllable units.
    pub fn validate(&self, n_branches: usize) -> Result<()> {
        let mut seen = vec![false; n_branches + 1];
        for node in self.der_nodes() {
            if node == 0 || node > n_branches {
                return Err(Error::Config(format!("DER node index {node} outside 1..={n_branches}")));
            }
            if seen[node] {
                return Err(Error::Config(format!("node {node} hosts more than one controllable unit")));
            }
            seen[node] = true;
        }
        if let Some(&bad) = self.load_nodes.iter().find(|&&n| n == 0 || n > n_branches) {
            return Err(Error::Config(format!("load node index {bad} outside 1..={n_branches}")));
        }
        Ok(())
    }
}

/// Kind tag used in the placement section of a feeder file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementKind {
    Dg,
    Pv,
    Bess,
    Vshp,
}

impl std::str::FromStr for PlacementKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dg" => Ok(Self::Dg),
            "pv" => Ok(Self::Pv),
            "bess" => Ok(Self::Bess),
            "vshp" => Ok(Self::Vshp),
            other => Err(format!("unknown DER kind '{other}'")),
        }
    }
}

/// Parsed feeder description: topology, nodal demand and DER placement.
#[derive(Debug, Clone)]
pub struct FeederData {
    pub topology: NetworkTopology,
    /// Per-unit demand P + jQ for every node (index 0 is the substation, always zero).
    pub loads: Vec<Complex64>,
    pub placement: DerPlacement,
}

impl FeederData {
    /// Total demand in per-unit.
    pub fn total_load(&self) -> Complex64 {
        self.loads.iter().sum()
    }
}

#[derive(Debug, Deserialize)]
struct BranchRow {
    from: u32,
    to: u32,
    r_ohm: f64,
    x_ohm: f64,
}

#[derive(Debug, Deserialize)]
struct LoadRow {
    node: u32,
    p_kw: f64,
    q_kvar: f64,
}

#[derive(Debug, Deserialize)]
struct DerRow {
    kind: String,
    node: u32,
}

struct Section {
    name: String,
    header_line: usize,
    /// Source line number of each retained line of `text`.
    lines: Vec<usize>,
    text: String,
}

impl Section {
    fn source_line(&self, i: usize) -> usize {
        self.lines.get(i).copied().unwrap_or(self.header_line)
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(Error::Parse { line: line_no, msg: format!("malformed section header '{line}'") });
            }
            sections.push(Section {
                name: line[1..line.len() - 1].trim().to_ascii_lowercase(),
                header_line: line_no,
                lines: Vec::new(),
                text: String::new(),
            });
            continue;
        }
        let Some(sec) = sections.last_mut() else {
            return Err(Error::Parse { line: line_no, msg: "content before the first section header".into() });
        };
        sec.lines.push(line_no);
        sec.text.push_str(line);
        sec.text.push('\n');
    }
    Ok(sections)
}

fn table<T: for<'de> Deserialize<'de>>(sec: &Section) -> Result<Vec<(usize, T)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(sec.text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<T>().enumerate() {
        let line = sec.source_line(i + 1);
        match rec {
            Ok(row) => rows.push((line, row)),
            Err(e) => {
                let line = e.position().map(|p| sec.source_line(p.line() as usize - 1)).unwrap_or(line);
                return Err(Error::Parse { line, msg: format!("[{}] {e}", sec.name) });
            }
        }
    }
    Ok(rows)
}

/// Parses the feeder text format.
///
/// ```text
/// [header]
/// base_mva = 1.0
/// base_kv = 12.66
/// slack = 1
/// [branches]
/// from,to,r_ohm,x_ohm
/// 1,2,0.0922,0.0470
/// [loads]
/// node,p_kw,q_kvar
/// 2,100,60
/// [ders]
/// kind,node
/// pv,3
/// ```
///
/// Node identifiers in the file are labels; the returned structures use
/// internal topological indices.
pub fn parse_feeder(text: &str) -> Result<FeederData> {
    let sections = split_sections(text)?;
    let find = |name: &str| sections.iter().find(|s| s.name == name);

    let header = find("header").ok_or(Error::Parse { line: 1, msg: "missing [header] section".into() })?;
    let mut base_mva = None;
    let mut base_kv = None;
    let mut slack = None;
    for (i, line) in header.text.lines().enumerate() {
        let line_no = header.source_line(i);
        let (k, v) = line
            .split_once('=')
            .ok_or(Error::Parse { line: line_no, msg: format!("expected key = value, got '{line}'") })?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("invalid number '{}'", v.trim()) })?;
        match k.trim() {
            "base_mva" => base_mva = Some(value),
            "base_kv" => base_kv = Some(value),
            "slack" => slack = Some(value as u32),
            other => return Err(Error::Parse { line: line_no, msg: format!("unknown header key '{other}'") }),
        }
    }
    let missing = |k: &str| Error::Parse { line: header.header_line, msg: format!("header is missing '{k}'") };
    let base_mva = base_mva.ok_or_else(|| missing("base_mva"))?;
    let base_kv = base_kv.ok_or_else(|| missing("base_kv"))?;
    let slack = slack.ok_or_else(|| missing("slack"))?;
    let z_base = base_kv * base_kv / base_mva;

    let branch_sec = find("branches").ok_or(Error::Parse { line: 1, msg: "missing [branches] section".into() })?;
    let branch_rows: Vec<(usize, BranchRow)> = table(branch_sec)?;
    let edges: Vec<(u32, u32, Complex64)> =
        branch_rows.iter().map(|(_, r)| (r.from, r.to, ohm_to_pu(Complex64::new(r.r_ohm, r.x_ohm), z_base))).collect();
    let topology = NetworkTopology::new(&edges, slack, base_mva, base_kv)?;

    let load_sec = find("loads").ok_or(Error::Parse { line: 1, msg: "missing [loads] section".into() })?;
    let mut loads = vec![Complex64::new(0.0, 0.0); topology.n_nodes()];
    let mut has_load = vec![false; topology.n_nodes()];
    let mut load_nodes = Vec::new();
    for (line, r) in table::<LoadRow>(load_sec)? {
        let node = topology
            .node_of_label(r.node)
            .ok_or(Error::Parse { line, msg: format!("load at unknown node {}", r.node) })?;
        if node == 0 {
            return Err(Error::Parse { line, msg: "load declared at the substation".into() });
        }
        loads[node] = Complex64::new(r.p_kw, r.q_kvar) / (1000.0 * base_mva);
        has_load[node] = true;
        if r.p_kw != 0.0 || r.q_kvar != 0.0 {
            load_nodes.push(node);
        }
    }
    if let Some(n) = (1..topology.n_nodes()).find(|&n| !has_load[n]) {
        return Err(Error::Parse {
            line: load_sec.header_line,
            msg: format!("node {} has no load entry", topology.label(n)),
        });
    }
    load_nodes.sort_unstable();

    let mut placement = DerPlacement { load_nodes, ..Default::default() };
    if let Some(der_sec) = find("ders") {
        for (line, r) in table::<DerRow>(der_sec)? {
            let kind: PlacementKind = r.kind.parse().map_err(|msg| Error::Parse { line, msg })?;
            let node = topology
                .node_of_label(r.node)
                .ok_or(Error::Parse { line, msg: format!("DER at unknown node {}", r.node) })?;
            match kind {
                PlacementKind::Dg => placement.dg_nodes.push(node),
                PlacementKind::Pv => placement.pv_nodes.push(node),
                PlacementKind::Bess => placement.bess_nodes.push(node),
                PlacementKind::Vshp => placement.vshp_nodes.push(node),
            }
        }
    }
    placement.validate(topology.n_branches())?;
    Ok(FeederData { topology, loads, placement })
}

/// Bundled IEEE 33-bus feeder with its reference DER placement.
pub const IEEE33_FEEDER: &str = include_str!("../data/ieee33.feeder");

/// Reads and parses a feeder file.
pub fn load_feeder(path: &Path) -> Result<FeederData> {
    let text = std::fs::read_to_string(path)?;
    parse_feeder(&text)
}

/// BIBC, BCBV and DLF for a topology.
#[derive(Debug, Clone)]
pub struct BfsMatrices {
    /// `bibc[(b, n)] = 1` iff branch `b` lies on the path to node `n + 1`.
    pub bibc: DMatrix<f64>,
    /// Maps branch currents to bus voltage drops.
    pub bcbv: DMatrix<Complex64>,
    /// `bcbv * bibc`.
    pub dlf: DMatrix<Complex64>,
    pub slack_voltage: f64,
}

/// Builds the sweep matrices by walking each node's path to the substation.
pub fn build_bfs_matrices(topology: &NetworkTopology, slack_voltage: f64) -> BfsMatrices {
    let n = topology.n_branches();
    let mut bibc = DMatrix::<f64>::zeros(n, n);
    for node in 1..=n {
        for b in topology.path_branches(node) {
            bibc[(b, node - 1)] = 1.0;
        }
    }
    let mut bcbv = DMatrix::<Complex64>::zeros(n, n);
    for row in 0..n {
        for b in 0..n {
            if bibc[(b, row)] != 0.0 {
                bcbv[(row, b)] = topology.branches()[b].impedance;
            }
        }
    }
    let bibc_c = bibc.map(|v| Complex64::new(v, 0.0));
    let dlf = &bcbv * &bibc_c;
    BfsMatrices { bibc, bcbv, dlf, slack_voltage }
}

impl BfsMatrices {
    pub fn n(&self) -> usize {
        self.bibc.nrows()
    }

    /// BIBC as a complex matrix.
    pub fn bibc_complex(&self) -> DMatrix<Complex64> {
        self.bibc.map(|v| Complex64::new(v, 0.0))
    }
}

/// Superimposed-circuit matrices restricted to the DER injection nodes.
#[derive(Debug, Clone)]
pub struct ReducedMatrices {
    /// DER nodes (internal indices, 1..=N) in column order.
    pub nodes: Vec<usize>,
    pub bibc_r: DMatrix<f64>,
    pub dlf_r: DMatrix<Complex64>,
    pub v_bar_r: DVector<Complex64>,
    /// Row of `bibc_r` for the main feeder branch.
    pub feeder_row: RowDVector<f64>,
    pub slack_voltage: f64,
}

impl ReducedMatrices {
    pub fn n_g(&self) -> usize {
        self.nodes.len()
    }
}

/// Restricts BIBC/DLF to the columns of the given DER nodes.
///
/// Columns of nodes without injection changes never contribute to the
/// superimposed circuit, so the restriction is exact.
pub fn reduce_for_nodes(
    matrices: &BfsMatrices,
    nodes: &[usize],
    linearization_voltages: &DVector<Complex64>,
) -> Result<ReducedMatrices> {
    let n = matrices.n();
    if linearization_voltages.len() != n {
        return Err(Error::Assembly(format!(
            "linearization vector has length {}, expected {n}",
            linearization_voltages.len()
        )));
    }
    let n_g = nodes.len();
    let mut bibc_r = DMatrix::<f64>::zeros(n, n_g);
    let mut dlf_r = DMatrix::<Complex64>::zeros(n, n_g);
    let mut v_bar_r = DVector::<Complex64>::zeros(n_g);
    for (c, &node) in nodes.iter().enumerate() {
        if node == 0 || node > n {
            return Err(Error::Config(format!("DER node index {node} outside 1..={n}")));
        }
        let v = linearization_voltages[node - 1];
        if v.norm() < 1e-12 {
            return Err(Error::SingularLinearization { node });
        }
        if !(0.5..1.5).contains(&v.norm()) {
            return Err(Error::Config(format!(
                "linearization voltage {:.4} pu at node {node} outside (0.5, 1.5)",
                v.norm()
            )));
        }
        bibc_r.set_column(c, &matrices.bibc.column(node - 1));
        dlf_r.set_column(c, &matrices.dlf.column(node - 1));
        v_bar_r[c] = v;
    }
    let feeder_row = bibc_r.row(0).into_owned();
    Ok(ReducedMatrices {
        nodes: nodes.to_vec(),
        bibc_r,
        dlf_r,
        v_bar_r,
        feeder_row,
        slack_voltage: matrices.slack_voltage,
    })
}

/// Restricts to the placement's DER nodes (order DG, PV, BESS, VSHP).
pub fn reduce_for_ders(
    matrices: &BfsMatrices,
    placement: &DerPlacement,
    linearization_voltages: &DVector<Complex64>,
) -> Result<ReducedMatrices> {
    placement.validate(matrices.n())?;
    reduce_for_nodes(matrices, &placement.der_nodes(), linearization_voltages)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> NetworkTopology {
        let z = Complex64::new(0.01, 0.02);
        NetworkTopology::new(&[(0, 1, z), (1, 2, z)], 0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn chain_bibc_and_dlf() {
        let m = build_bfs_matrices(&chain(), 1.0);
        assert_eq!(m.bibc, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        let d = m.dlf[(1, 1)];
        assert!((d - Complex64::new(0.02, 0.04)).norm() < 1e-15);
    }

    #[test]
    fn rejects_self_loop_and_cycles() {
        let z = Complex64::new(0.01, 0.01);
        assert!(matches!(NetworkTopology::new(&[(0, 1, z), (5, 5, z)], 0, 1.0, 1.0), Err(Error::Topology(_))));
        let cyc = [(0, 1, z), (1, 2, z), (2, 3, z), (3, 1, z)];
        assert!(matches!(NetworkTopology::new(&cyc, 0, 1.0, 1.0), Err(Error::Topology(_))));
        let split = [(0, 1, z), (2, 3, z)];
        assert!(matches!(NetworkTopology::new(&split, 0, 1.0, 1.0), Err(Error::Topology(_))));
    }

    #[test]
    fn orientation_follows_the_slack() {
        let z = Complex64::new(0.01, 0.01);
        let t = NetworkTopology::new(&[(2, 1, z), (1, 7, z)], 7, 1.0, 1.0).unwrap();
        assert_eq!(t.labels(), &[7, 1, 2]);
        assert_eq!(t.parent(2), Some(1));
    }

    #[test]
    fn zero_linearization_voltage_is_singular() {
        let m = build_bfs_matrices(&chain(), 1.0);
        let v = DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        assert!(matches!(reduce_for_nodes(&m, &[2], &v), Err(Error::SingularLinearization { node: 2 })));
    }
}
