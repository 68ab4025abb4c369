//! Sum-product belief propagation.
//!
//! A directed message `m_{i->j}` is a vector over `x_j`:
//!
//! ```text
//! m_{i->j}(x_j)  prop.  sum_{x_i} psi_ij(x_i, x_j) prod_{k in N(i) \ j} m_{k->i}(x_i)
//! ```
//!
//! Messages are sum-normalized after every update. On a tree one
//! leaf-to-root pass followed by root-to-leaf (root = node 0, children in
//! index order) makes every belief exact. On cyclic graphs [`solve`] falls
//! back to synchronous fixed-point iteration and reports whether it
//! converged.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::potential::Potentials;

/// All directed messages of one graph, indexed by edge id and direction
/// (direction 0 points from the lower endpoint to the higher).
#[derive(Debug, Clone)]
pub struct MessageStore {
    msgs: Vec<Array1<f64>>,
}

impl MessageStore {
    /// Uniform messages everywhere.
    pub fn uniform(graph: &TreeGraph) -> Self {
        let mut msgs = Vec::with_capacity(2 * graph.edge_count());
        for e in 0..graph.edge_count() {
            let (i, j) = graph.edge_endpoints(e);
            msgs.push(Array1::from_elem(graph.dim(j), 1.0 / graph.dim(j) as f64));
            msgs.push(Array1::from_elem(graph.dim(i), 1.0 / graph.dim(i) as f64));
        }
        MessageStore { msgs }
    }

    fn slot(graph: &TreeGraph, from: usize, to: usize) -> usize {
        let edge = graph
            .edge_id(from, to)
            .unwrap_or_else(|| panic!("no edge ({from}, {to})"));
        let (lo, _) = graph.edge_endpoints(edge);
        2 * edge + usize::from(from != lo)
    }

    pub fn get(&self, graph: &TreeGraph, from: usize, to: usize) -> &Array1<f64> {
        &self.msgs[Self::slot(graph, from, to)]
    }

    pub fn set(&mut self, graph: &TreeGraph, from: usize, to: usize, msg: Array1<f64>) {
        debug_assert_eq!(msg.len(), graph.dim(to), "message {from}->{to} has wrong length");
        self.msgs[Self::slot(graph, from, to)] = msg;
    }

}

fn normalized(mut v: Array1<f64>, from: usize, to: usize) -> Result<Array1<f64>> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numeric(format!(
            "message {from}->{to} lost all mass (normalizer {sum})"
        )));
    }
    v.mapv_inplace(|x| x / sum);
    Ok(v)
}

/// Computes the update for `m_{i->j}` without writing it back. When `weight`
/// is given it multiplies the product of inbound messages entrywise over
/// `x_i`; the scaling step at observed leaves passes `y_i / m_{j->i}` here,
/// which turns this same kernel into the constrained update.
pub(crate) fn compute_message(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &MessageStore,
    i: usize,
    j: usize,
    weight: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let mut prod = match weight {
        Some(w) => w.clone(),
        None => Array1::ones(graph.dim(i)),
    };
    for nb in graph.neighbors(i) {
        if nb.node == j {
            continue;
        }
        let m = store.get(graph, nb.node, i);
        for (p, &mv) in prod.iter_mut().zip(m.iter()) {
            *p *= mv;
        }
    }
    let out = pots.oriented(graph, i, j).apply(&prod.view());
    normalized(out, i, j)
}

/// One sum-product update of `m_{i->j}` from the current store contents.
pub fn message_update(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &MessageStore,
    i: usize,
    j: usize,
) -> Result<Array1<f64>> {
    compute_message(graph, pots, store, i, j, None)
}

#[derive(Debug, Clone)]
pub struct BpOptions {
    /// Per-entry change threshold for loopy iteration.
    pub tol: f64,
    pub max_iters: usize,
    /// Loopy damping weight on the old message; 0 replaces outright.
    pub damping: f64,
}

impl Default for BpOptions {
    fn default() -> Self {
        BpOptions { tol: 1e-9, max_iters: 1000, damping: 0.0 }
    }
}

#[derive(Debug)]
pub struct BpResult {
    pub messages: MessageStore,
    pub converged: bool,
    pub iterations: usize,
    /// Largest per-entry message change per loopy iteration; empty for the
    /// tree schedule.
    pub residuals: Vec<f64>,
}

/// Solves for all messages. Trees get the exact two-pass schedule; cyclic
/// graphs get damped synchronous iteration with `converged` reporting
/// whether the fixed point was reached.
pub fn solve(graph: &TreeGraph, pots: &Potentials, opts: &BpOptions) -> Result<BpResult> {
    let mut store = MessageStore::uniform(graph);
    if graph.is_tree() {
        tree_sweep(graph, pots, &mut store, None)?;
        return Ok(BpResult { messages: store, converged: true, iterations: 1, residuals: Vec::new() });
    }
    let (converged, iterations, residuals) = loopy_iterate(graph, pots, &mut store, None, opts)?;
    Ok(BpResult { messages: store, converged, iterations, residuals })
}

/// One exact leaf-to-root plus root-to-leaf sweep rooted at node 0.
/// `weights` optionally attaches scaling vectors at observed leaves.
pub fn tree_sweep(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &mut MessageStore,
    weights: Option<&dyn Fn(usize) -> Option<Array1<f64>>>,
) -> Result<()> {
    let (order, parent) = graph.bfs_order(0);
    for &v in order.iter().rev() {
        let p = parent[v];
        if p == usize::MAX {
            continue;
        }
        let w = weights.and_then(|f| f(v));
        let msg = compute_message(graph, pots, store, v, p, w.as_ref())?;
        store.set(graph, v, p, msg);
    }
    for &v in order.iter() {
        for nb in graph.neighbors(v) {
            if parent[nb.node] == v {
                let w = weights.and_then(|f| f(v));
                let msg = compute_message(graph, pots, store, v, nb.node, w.as_ref())?;
                store.set(graph, v, nb.node, msg);
            }
        }
    }
    Ok(())
}

/// Damped synchronous iteration until message changes fall below tolerance.
pub(crate) fn loopy_iterate(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &mut MessageStore,
    weights: Option<&dyn Fn(usize) -> Option<Array1<f64>>>,
    opts: &BpOptions,
) -> Result<(bool, usize, Vec<f64>)> {
    let mut residuals = Vec::new();
    for iter in 1..=opts.max_iters {
        let mut next = store.clone();
        let mut worst = 0.0f64;
        for e in 0..graph.edge_count() {
            let (i, j) = graph.edge_endpoints(e);
            for (from, to) in [(i, j), (j, i)] {
                let w = weights.and_then(|f| f(from));
                let mut msg = compute_message(graph, pots, store, from, to, w.as_ref())?;
                let old = store.get(graph, from, to);
                if opts.damping > 0.0 {
                    msg = &msg * (1.0 - opts.damping) + old * opts.damping;
                }
                for (a, b) in msg.iter().zip(old.iter()) {
                    worst = worst.max((a - b).abs());
                }
                next.set(graph, from, to, msg);
            }
        }
        *store = next;
        residuals.push(worst);
        if worst <= opts.tol {
            return Ok((true, iter, residuals));
        }
    }
    Ok((false, opts.max_iters, residuals))
}

/// Belief at a node: normalized product of all inbound messages.
pub fn node_marginal(graph: &TreeGraph, store: &MessageStore, i: usize) -> Result<Array1<f64>> {
    let mut prod = Array1::ones(graph.dim(i));
    for nb in graph.neighbors(i) {
        let m = store.get(graph, nb.node, i);
        for (p, &mv) in prod.iter_mut().zip(m.iter()) {
            *p *= mv;
        }
    }
    normalized(prod, i, i)
}

/// Belief over an edge, oriented `(x_i, x_j)` with `i < j` as stored:
/// `psi_ij` times the products of inbound messages at both ends excluding
/// the edge itself.
pub fn edge_marginal(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &MessageStore,
    i: usize,
    j: usize,
) -> Result<Array2<f64>> {
    edge_marginal_with(graph, pots, store, i, j, None, None)
}

/// Edge belief with optional extra entrywise factors at either endpoint
/// (the scaling vectors of constrained leaves).
pub(crate) fn edge_marginal_with(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &MessageStore,
    i: usize,
    j: usize,
    weight_i: Option<&Array1<f64>>,
    weight_j: Option<&Array1<f64>>,
) -> Result<Array2<f64>> {
    let edge = graph
        .edge_id(i, j)
        .ok_or_else(|| Error::InvalidModel(format!("no edge ({i}, {j})")))?;
    let (lo, hi) = graph.edge_endpoints(edge);
    let (w_lo, w_hi) = if i == lo { (weight_i, weight_j) } else { (weight_j, weight_i) };
    let pre = |v: usize, other: usize, w: Option<&Array1<f64>>| -> Array1<f64> {
        let mut prod = match w {
            Some(w) => w.clone(),
            None => Array1::ones(graph.dim(v)),
        };
        for nb in graph.neighbors(v) {
            if nb.node == other {
                continue;
            }
            let m = store.get(graph, nb.node, v);
            for (p, &mv) in prod.iter_mut().zip(m.iter()) {
                *p *= mv;
            }
        }
        prod
    };
    let a = pre(lo, hi, w_lo);
    let b = pre(hi, lo, w_hi);
    let table = pots.table(edge);
    let mut out = Array2::zeros((graph.dim(lo), graph.dim(hi)));
    for xi in 0..graph.dim(lo) {
        for xj in 0..graph.dim(hi) {
            out[[xi, xj]] = table[[xi, xj]] * a[xi] * b[xj];
        }
    }
    let sum: f64 = out.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numeric(format!("edge belief ({lo}, {hi}) lost all mass")));
    }
    out.mapv_inplace(|v| v / sum);
    Ok(out)
}
