//! Model rewrites: directed models to pairwise form, and internal
//! observations to observed leaves.
//!
//! [`moralize`] converts a directed model with at most two parents per node
//! into an undirected pairwise model over the moral graph (parents of a
//! common child get married). A two-parent table factors exactly into
//! pairwise terms only when its log has no three-way interaction; tables
//! that do carry one are rejected rather than silently approximated.
//!
//! [`normalize_observed_leaves`] rewrites observed internal nodes: each one
//! gets a fresh duplicate leaf tied to it by an identity coupling, and the
//! observation marking moves to the duplicate. The scaling solver requires
//! observations to sit on leaves; this makes any model conform without
//! changing its distribution.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::dense::DENSE_CAP_DEFAULT;
use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::potential::Potentials;

/// Conditional table of one node given its parents (at most two).
#[derive(Debug, Clone)]
pub enum Cpt {
    /// `table[c] = p(x_v = c)`.
    Root(Array1<f64>),
    /// `table[a, c] = p(x_v = c | x_parent = a)`.
    One { parent: usize, table: Array2<f64> },
    /// `table[a, b, c] = p(x_v = c | x_p1 = a, x_p2 = b)`.
    Two { parents: (usize, usize), table: Array3<f64> },
}

impl Cpt {
    fn parents(&self) -> Vec<usize> {
        match self {
            Cpt::Root(_) => Vec::new(),
            Cpt::One { parent, .. } => vec![*parent],
            Cpt::Two { parents, .. } => vec![parents.0, parents.1],
        }
    }
}

/// Directed model: one conditional table per node, parent structure acyclic.
#[derive(Debug, Clone)]
pub struct DirectedModel {
    dims: Vec<usize>,
    cpts: Vec<Cpt>,
}

impl DirectedModel {
    pub fn new(dims: Vec<usize>, cpts: Vec<Cpt>) -> Result<Self> {
        let n = dims.len();
        if n == 0 {
            return Err(Error::InvalidModel("empty model".into()));
        }
        if cpts.len() != n {
            return Err(Error::InvalidModel(format!(
                "{n} nodes but {} conditional tables",
                cpts.len()
            )));
        }
        if let Some(v) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidModel(format!("node {v} has dimension 0")));
        }
        for (v, cpt) in cpts.iter().enumerate() {
            let ps = cpt.parents();
            for &p in &ps {
                if p >= n {
                    return Err(Error::InvalidModel(format!("node {v} has parent {p} out of range")));
                }
                if p == v {
                    return Err(Error::InvalidModel(format!("node {v} is its own parent")));
                }
            }
            if ps.len() == 2 && ps[0] == ps[1] {
                return Err(Error::InvalidModel(format!("node {v} lists parent {} twice", ps[0])));
            }
            let check_rows = |rows: Vec<(String, Vec<f64>)>| -> Result<()> {
                for (label, row) in rows {
                    let mut sum = 0.0;
                    for &x in &row {
                        if !x.is_finite() || x < 0.0 {
                            return Err(Error::InvalidModel(format!(
                                "table for node {v} has entry {x} at {label}"
                            )));
                        }
                        sum += x;
                    }
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidModel(format!(
                            "table for node {v} at {label} sums to {sum}, expected 1"
                        )));
                    }
                }
                Ok(())
            };
            match cpt {
                Cpt::Root(t) => {
                    if t.len() != dims[v] {
                        return Err(Error::InvalidModel(format!(
                            "prior for node {v} has length {}, expected {}",
                            t.len(),
                            dims[v]
                        )));
                    }
                    check_rows(vec![("()".into(), t.to_vec())])?;
                }
                Cpt::One { parent, table } => {
                    if table.nrows() != dims[*parent] || table.ncols() != dims[v] {
                        return Err(Error::InvalidModel(format!(
                            "table for node {v} has shape {}x{}, expected {}x{}",
                            table.nrows(),
                            table.ncols(),
                            dims[*parent],
                            dims[v]
                        )));
                    }
                    check_rows(
                        table
                            .outer_iter()
                            .enumerate()
                            .map(|(a, r)| (format!("parent state {a}"), r.to_vec()))
                            .collect(),
                    )?;
                }
                Cpt::Two { parents, table } => {
                    let want = (dims[parents.0], dims[parents.1], dims[v]);
                    if table.dim() != want {
                        return Err(Error::InvalidModel(format!(
                            "table for node {v} has shape {:?}, expected {:?}",
                            table.dim(),
                            want
                        )));
                    }
                    let mut rows = Vec::new();
                    for a in 0..want.0 {
                        for b in 0..want.1 {
                            let row: Vec<f64> = (0..want.2).map(|c| table[[a, b, c]]).collect();
                            rows.push((format!("parent states ({a}, {b})"), row));
                        }
                    }
                    check_rows(rows)?;
                }
            }
        }
        // Kahn's algorithm over parent -> child arcs.
        let mut indeg: Vec<usize> = cpts.iter().map(|c| c.parents().len()).collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (v, cpt) in cpts.iter().enumerate() {
            for p in cpt.parents() {
                children[p].push(v);
            }
        }
        let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut done = 0;
        while let Some(v) = queue.pop() {
            done += 1;
            for &c in &children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if done != n {
            return Err(Error::InvalidModel("parent structure has a directed cycle".into()));
        }
        Ok(DirectedModel { dims, cpts })
    }

    pub fn node_count(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn cpt(&self, v: usize) -> &Cpt {
        &self.cpts[v]
    }

    /// Full joint as a dense tensor; for small models and tests.
    pub fn joint(&self) -> Result<ArrayD<f64>> {
        let entries: usize = self.dims.iter().product();
        if entries > DENSE_CAP_DEFAULT {
            return Err(Error::SizeCap { entries, cap: DENSE_CAP_DEFAULT });
        }
        let mut t = ArrayD::ones(IxDyn(&self.dims));
        for (idx, v) in t.indexed_iter_mut() {
            let idx: &IxDyn = &idx;
            for (node, cpt) in self.cpts.iter().enumerate() {
                let c = idx[node];
                *v *= match cpt {
                    Cpt::Root(p) => p[c],
                    Cpt::One { parent, table } => table[[idx[*parent], c]],
                    Cpt::Two { parents, table } => table[[idx[parents.0], idx[parents.1], c]],
                };
            }
        }
        Ok(t)
    }
}

/// Additive split of a log-table into main effects and pairwise
/// interactions. The leftover three-way term must vanish for an exact
/// pairwise rewrite.
struct LogSplit {
    /// Includes the grand mean.
    pair_ab: Array2<f64>,
    pair_ac: Array2<f64>,
    pair_bc: Array2<f64>,
    main_a: Array1<f64>,
    main_b: Array1<f64>,
    main_c: Array1<f64>,
}

fn split_log_table(log: &Array3<f64>, node: usize) -> Result<LogSplit> {
    let (an, bn, cn) = log.dim();
    let mu = log.sum() / (an * bn * cn) as f64;
    let mean_ab = log.mean_axis(Axis(2)).expect("nonempty");
    let mean_ac = log.mean_axis(Axis(1)).expect("nonempty");
    let mean_bc = log.mean_axis(Axis(0)).expect("nonempty");
    let mean_a = mean_ab.mean_axis(Axis(1)).expect("nonempty");
    let mean_b = mean_ab.mean_axis(Axis(0)).expect("nonempty");
    let mean_c = mean_ac.mean_axis(Axis(0)).expect("nonempty");

    let scale = 1.0 + log.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for a in 0..an {
        for b in 0..bn {
            for c in 0..cn {
                let resid = log[[a, b, c]] - mean_ab[[a, b]] - mean_ac[[a, c]] - mean_bc[[b, c]]
                    + mean_a[a]
                    + mean_b[b]
                    + mean_c[c]
                    - mu;
                worst = worst.max(resid.abs());
            }
        }
    }
    if worst > 1e-9 * scale {
        return Err(Error::NotDecomposable(format!(
            "table for node {node} has a three-way interaction of size {worst:.3e}"
        )));
    }

    let mut pair_ab = mean_ab;
    for a in 0..an {
        for b in 0..bn {
            pair_ab[[a, b]] += mu - mean_a[a] - mean_b[b];
        }
    }
    let mut pair_ac = mean_ac;
    for a in 0..an {
        for c in 0..cn {
            pair_ac[[a, c]] += -mean_a[a] - mean_c[c] + mu;
        }
    }
    let mut pair_bc = mean_bc;
    for b in 0..bn {
        for c in 0..cn {
            pair_bc[[b, c]] += -mean_b[b] - mean_c[c] + mu;
        }
    }
    // Grand mean rides along once on the parent-parent edge; main effects
    // keep their own mean so the reassembled log matches exactly:
    // L = (ab + mu - a - b) + (ac - a - c + mu) + (bc - b - c + mu)
    //     + (a - mu) + (b - mu) + (c - mu).
    Ok(LogSplit {
        pair_ab,
        pair_ac,
        pair_bc,
        main_a: mean_a.mapv(|v| v - mu),
        main_b: mean_b.mapv(|v| v - mu),
        main_c: mean_c.mapv(|v| v - mu),
    })
}

fn add_oriented(
    edges: &mut BTreeMap<(usize, usize), Array2<f64>>,
    dims: &[usize],
    i: usize,
    j: usize,
    contrib: &Array2<f64>,
) {
    let (lo, hi) = (i.min(j), i.max(j));
    let slot = edges
        .entry((lo, hi))
        .or_insert_with(|| Array2::zeros((dims[lo], dims[hi])));
    if i == lo {
        *slot += contrib;
    } else {
        *slot += &contrib.t();
    }
}

/// Converts a directed model into an equivalent pairwise model over its
/// moral graph: parent-child edges plus a marriage edge between the two
/// parents of each common child. Node-local terms are folded into the edge
/// toward each node's lowest-indexed neighbor. Tables must be strictly
/// positive; a two-parent table with a genuine three-way interaction is
/// rejected.
pub fn moralize(model: &DirectedModel) -> Result<(TreeGraph, Potentials)> {
    let n = model.node_count();
    let dims = model.dims();
    let mut edge_logs: BTreeMap<(usize, usize), Array2<f64>> = BTreeMap::new();
    let mut node_logs: Vec<Array1<f64>> = dims.iter().map(|&d| Array1::zeros(d)).collect();

    let positive = |v: f64, node: usize| -> Result<f64> {
        if v > 0.0 {
            Ok(v.ln())
        } else {
            Err(Error::InvalidModel(format!(
                "table for node {node} has a zero entry; the pairwise rewrite needs strictly positive tables"
            )))
        }
    };

    for (v, cpt) in model.cpts.iter().enumerate() {
        match cpt {
            Cpt::Root(p) => {
                for (c, &x) in p.iter().enumerate() {
                    node_logs[v][c] += positive(x, v)?;
                }
            }
            Cpt::One { parent, table } => {
                let mut log = Array2::zeros(table.dim());
                for ((a, c), &x) in table.indexed_iter() {
                    log[[a, c]] = positive(x, v)?;
                }
                add_oriented(&mut edge_logs, dims, *parent, v, &log);
            }
            Cpt::Two { parents, table } => {
                let (p, q) = *parents;
                let mut log = Array3::zeros(table.dim());
                for ((a, b, c), &x) in table.indexed_iter() {
                    log[[a, b, c]] = positive(x, v)?;
                }
                let split = split_log_table(&log, v)?;
                node_logs[p] += &split.main_a;
                node_logs[q] += &split.main_b;
                node_logs[v] += &split.main_c;
                add_oriented(&mut edge_logs, dims, p, q, &split.pair_ab);
                add_oriented(&mut edge_logs, dims, p, v, &split.pair_ac);
                add_oriented(&mut edge_logs, dims, q, v, &split.pair_bc);
            }
        }
    }

    let keys: Vec<(usize, usize)> = edge_logs.keys().copied().collect();
    if keys.is_empty() {
        return Err(Error::InvalidModel("model has no edges after the rewrite".into()));
    }
    let mut lowest_neighbor = vec![usize::MAX; n];
    for &(i, j) in &keys {
        lowest_neighbor[i] = lowest_neighbor[i].min(j);
        lowest_neighbor[j] = lowest_neighbor[j].min(i);
    }
    for v in 0..n {
        if node_logs[v].iter().all(|&x| x == 0.0) {
            continue;
        }
        let w = lowest_neighbor[v];
        if w == usize::MAX {
            return Err(Error::InvalidModel(format!(
                "node {v} is disconnected in the moral graph"
            )));
        }
        let (lo, hi) = (v.min(w), v.max(w));
        let slot = edge_logs.get_mut(&(lo, hi)).expect("edge exists");
        if v == lo {
            for (r, mut row) in slot.outer_iter_mut().enumerate() {
                row += node_logs[v][r];
            }
        } else {
            for (c, mut col) in slot.axis_iter_mut(Axis(1)).enumerate() {
                col += node_logs[v][c];
            }
        }
    }

    let graph = TreeGraph::with_cycles(dims.to_vec(), keys.clone(), [])?;
    let mut tables = Vec::with_capacity(keys.len());
    for key in keys {
        tables.push(Arc::new(edge_logs.remove(&key).expect("present").mapv(f64::exp)));
    }
    Ok((graph, Potentials::from_shared(tables)))
}

/// Where each original node ended up after a rewrite.
#[derive(Debug, Clone)]
pub struct NodeMapping {
    /// Index by new node id to get the original node it represents;
    /// duplicate leaves map to the node they were split from.
    pub to_original: Vec<usize>,
    /// For each originally observed node, the node that now carries its
    /// observation.
    pub observation_site: BTreeMap<usize, usize>,
}

/// Ensures every observed node is a leaf. Observed internal nodes get a
/// duplicate leaf attached through an identity coupling, and the observed
/// marking moves to the duplicate; observed nodes that already are leaves
/// stay put. Node and edge ids of the original graph are preserved.
pub fn normalize_observed_leaves(
    graph: &TreeGraph,
    pots: &Potentials,
) -> Result<(TreeGraph, Potentials, NodeMapping)> {
    let n = graph.node_count();
    let mut dims = graph.dims().to_vec();
    let mut edges: Vec<(usize, usize)> = (0..graph.edge_count())
        .map(|e| graph.edge_endpoints(e))
        .collect();
    let mut tables: Vec<Arc<Array2<f64>>> =
        (0..graph.edge_count()).map(|e| pots.shared(e)).collect();
    let mut to_original: Vec<usize> = (0..n).collect();
    let mut observation_site = BTreeMap::new();

    for &v in graph.observed() {
        if graph.is_leaf(v) {
            observation_site.insert(v, v);
        } else {
            let dup = dims.len();
            dims.push(graph.dim(v));
            edges.push((v, dup));
            tables.push(Arc::new(Array2::eye(graph.dim(v))));
            to_original.push(v);
            observation_site.insert(v, dup);
        }
    }

    let observed: Vec<usize> = observation_site.values().copied().collect();
    let out = if graph.is_tree() {
        TreeGraph::tree(dims, edges, observed)?
    } else {
        TreeGraph::with_cycles(dims, edges, observed)?
    };
    Ok((out, Potentials::from_shared(tables), NodeMapping { to_original, observation_site }))
}
