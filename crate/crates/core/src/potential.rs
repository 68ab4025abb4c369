//! Edge potentials and marginal containers.
//!
//! Potentials are stored once per undirected edge, oriented from the lower
//! node index to the higher. [`Potentials::oriented`] hands out a view in
//! either direction so message code never transposes tables by hand. Node
//! potentials are not represented: models absorb them into the edge toward
//! the lowest-indexed neighbor before construction.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::graph::TreeGraph;

/// A pairwise potential table between nodes `i` and `j`, indexed
/// `table[[x_i, x_j]]`.
#[derive(Debug, Clone)]
pub struct EdgePotential {
    pub i: usize,
    pub j: usize,
    pub table: Array2<f64>,
}

impl EdgePotential {
    /// Requires strictly positive, finite entries; solvers take logs of these
    /// tables.
    pub fn new(i: usize, j: usize, table: Array2<f64>) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidModel(format!("potential on self-loop at node {i}")));
        }
        for &v in table.iter() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "potential ({i}, {j}) has a non-positive or non-finite entry"
                )));
            }
        }
        Ok(EdgePotential { i, j, table })
    }

    /// Like [`EdgePotential::new`] but admits zero entries, for models with
    /// structural support restrictions (identity couplings from node splits,
    /// movement radii). Operations that take logs reject or guard zeros.
    pub fn with_zeros(i: usize, j: usize, table: Array2<f64>) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidModel(format!("potential on self-loop at node {i}")));
        }
        for &v in table.iter() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "potential ({i}, {j}) has a negative or non-finite entry"
                )));
            }
        }
        Ok(EdgePotential { i, j, table })
    }
}

/// Edge-id-aligned collection of potential tables for one graph. Tables are
/// reference-counted so time-homogeneous chains share a single allocation.
#[derive(Debug, Clone)]
pub struct Potentials {
    tables: Vec<Arc<Array2<f64>>>,
}

impl Potentials {
    /// Collects one potential per graph edge. Each table is reoriented so its
    /// first axis belongs to the lower-indexed endpoint.
    pub fn from_edge_potentials(graph: &TreeGraph, pots: Vec<EdgePotential>) -> Result<Self> {
        let mut tables: Vec<Option<Arc<Array2<f64>>>> = vec![None; graph.edge_count()];
        for p in pots {
            let edge = graph.edge_id(p.i, p.j).ok_or_else(|| {
                Error::InvalidModel(format!("potential for missing edge ({}, {})", p.i, p.j))
            })?;
            let (lo, hi) = graph.edge_endpoints(edge);
            let table = if p.i == lo { p.table } else { p.table.t().to_owned() };
            if table.nrows() != graph.dim(lo) || table.ncols() != graph.dim(hi) {
                return Err(Error::InvalidModel(format!(
                    "potential ({lo}, {hi}) has shape {}x{}, expected {}x{}",
                    table.nrows(),
                    table.ncols(),
                    graph.dim(lo),
                    graph.dim(hi)
                )));
            }
            if tables[edge].replace(Arc::new(table)).is_some() {
                return Err(Error::InvalidModel(format!("duplicate potential for edge ({lo}, {hi})")));
            }
        }
        let tables: Vec<Arc<Array2<f64>>> = tables
            .into_iter()
            .enumerate()
            .map(|(e, t)| {
                t.ok_or_else(|| {
                    let (i, j) = graph.edge_endpoints(e);
                    Error::InvalidModel(format!("no potential for edge ({i}, {j})"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Potentials { tables })
    }

    pub(crate) fn from_shared(tables: Vec<Arc<Array2<f64>>>) -> Self {
        Potentials { tables }
    }

    /// Table for an edge id, oriented lower-node-first.
    pub fn table(&self, edge: usize) -> &Array2<f64> {
        &self.tables[edge]
    }

    pub(crate) fn shared(&self, edge: usize) -> Arc<Array2<f64>> {
        Arc::clone(&self.tables[edge])
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// View of the potential on edge `(from, to)` oriented so that
    /// [`Oriented::apply`] maps a vector over `from` states to one over `to`
    /// states.
    pub fn oriented<'a>(&'a self, graph: &TreeGraph, from: usize, to: usize) -> Oriented<'a> {
        let edge = graph
            .edge_id(from, to)
            .unwrap_or_else(|| panic!("no edge ({from}, {to})"));
        let (lo, _) = graph.edge_endpoints(edge);
        Oriented { table: &self.tables[edge], transposed: from != lo }
    }
}

/// Direction-resolved view of one potential table.
#[derive(Debug, Clone, Copy)]
pub struct Oriented<'a> {
    table: &'a Array2<f64>,
    transposed: bool,
}

impl<'a> Oriented<'a> {
    pub fn value(&self, x_from: usize, x_to: usize) -> f64 {
        if self.transposed {
            self.table[[x_to, x_from]]
        } else {
            self.table[[x_from, x_to]]
        }
    }

    pub fn from_dim(&self) -> usize {
        if self.transposed { self.table.ncols() } else { self.table.nrows() }
    }

    pub fn to_dim(&self) -> usize {
        if self.transposed { self.table.nrows() } else { self.table.ncols() }
    }

    /// Computes `out[x_to] = sum_{x_from} psi(x_from, x_to) * v[x_from]`.
    pub fn apply(&self, v: &ArrayView1<f64>) -> Array1<f64> {
        if self.transposed {
            self.table.dot(v)
        } else {
            self.table.t().dot(v)
        }
    }
}

/// A normalized marginal over one node's states.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateMarginal {
    pub node: usize,
    pub probs: Array1<f64>,
}

impl AggregateMarginal {
    /// Entries must be finite, nonnegative, and sum to 1 within 1e-12.
    pub fn new(node: usize, probs: Array1<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for &p in probs.iter() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "marginal for node {node} has a negative or non-finite entry"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!(
                "marginal for node {node} sums to {sum}, expected 1"
            )));
        }
        Ok(AggregateMarginal { node, probs })
    }

    /// Normalizes raw nonnegative weights into a marginal.
    pub fn normalized(node: usize, raw: Array1<f64>) -> Result<Self> {
        let sum: f64 = raw.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot normalize marginal for node {node}: mass {sum}"
            )));
        }
        Ok(AggregateMarginal { node, probs: raw / sum })
    }
}

/// A normalized joint marginal over the two endpoints of an edge, indexed
/// `table[[x_i, x_j]]` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMarginal {
    pub i: usize,
    pub j: usize,
    pub table: Array2<f64>,
}

impl EdgeMarginal {
    pub fn new(i: usize, j: usize, table: Array2<f64>) -> Result<Self> {
        let sum: f64 = table.iter().sum();
        if table.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!(
                "edge marginal ({i}, {j}) is not a normalized nonnegative table"
            )));
        }
        Ok(EdgeMarginal { i, j, table })
    }
}

/// Node and edge marginals for a whole graph; edge tables are edge-id
/// aligned and oriented lower-node-first. Entries may be normalized
/// probabilities or expected counts depending on context.
#[derive(Debug, Clone)]
pub struct MarginalSet {
    pub nodes: Vec<Array1<f64>>,
    pub edges: Vec<Array2<f64>>,
}

impl MarginalSet {
    /// Maximum violation of edge-to-node consistency: each edge table must
    /// marginalize to its endpoint node vectors.
    pub fn consistency_gap(&self, graph: &TreeGraph) -> f64 {
        let mut worst = 0.0f64;
        for (e, table) in self.edges.iter().enumerate() {
            let (i, j) = graph.edge_endpoints(e);
            let row_sums = table.sum_axis(ndarray::Axis(1));
            let col_sums = table.sum_axis(ndarray::Axis(0));
            for (a, b) in row_sums.iter().zip(self.nodes[i].iter()) {
                worst = worst.max((a - b).abs());
            }
            for (a, b) in col_sums.iter().zip(self.nodes[j].iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Largest absolute difference across all node entries.
    pub fn node_distance(&self, other: &MarginalSet) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.nodes.iter().zip(other.nodes.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

pub(crate) fn l1_distance(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}
