//! Scaling belief propagation: marginal-constrained inference on pairwise
//! models.
//!
//! Observed nodes carry target marginals `y_i` instead of point evidence.
//! The solver alternates two kinds of updates:
//!
//! * a scaling update at an observed leaf `i` with neighbor `j`, which sets
//!   `u_i = y_i / m_{j->i}` and sends
//!   `m_{i->j}(x_j) prop. sum_{x_i} psi(x_i, x_j) u_i(x_i)`, the Sinkhorn
//!   rescaling of axis `i` expressed through messages;
//! * ordinary sum-product updates along the tree path to the next scheduled
//!   observed node, which is the only part of the message state the next
//!   scaling reads.
//!
//! One pass over the cyclic schedule visits every observed node; per-sweep
//! residuals `||P_i - y_i||_1` are measured immediately before each node's
//! own update, so they report how far the constraint drifted since its last
//! rescaling. On trees each scheduled step touches one scaling message plus
//! the path messages and nothing else; on cyclic graphs the solver falls
//! back to full loopy sweeps between scalings, best-effort.

use std::collections::BTreeMap;

use ndarray::Array1;

use crate::bp::{self, BpOptions, MessageStore};
use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::potential::{l1_distance, AggregateMarginal, MarginalSet, Potentials};

/// Cyclic visiting order over the observed nodes plus the tree path between
/// consecutive entries.
#[derive(Debug, Clone)]
pub struct Schedule {
    template: Vec<usize>,
    /// `paths[k]` runs from `template[k]` to `template[(k+1) % len]`,
    /// endpoints included.
    paths: Vec<Vec<usize>>,
}

impl Schedule {
    /// Default order: depth-first traversal from node 0 that enters observed
    /// leaves before descending further, followed by the reverse of the
    /// interior. On a chain with one observation hanging off each node this
    /// reproduces the forward-then-backward filtering order.
    pub fn default_for(graph: &TreeGraph) -> Result<Self> {
        if !graph.is_tree() {
            return Err(Error::NotATree("schedules need a tree; cyclic solving ignores them".into()));
        }
        let n = graph.node_count();
        let mut seen = vec![false; n];
        let mut order = Vec::new();
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if graph.is_observed(v) {
                order.push(v);
            }
            // Children are pushed in reverse so pops come out observed
            // leaves first, then the rest, each in ascending order.
            let mut obs: Vec<usize> = Vec::new();
            let mut rest: Vec<usize> = Vec::new();
            for nb in graph.neighbors(v) {
                if seen[nb.node] {
                    continue;
                }
                if graph.is_observed(nb.node) && graph.is_leaf(nb.node) {
                    obs.push(nb.node);
                } else {
                    rest.push(nb.node);
                }
            }
            for &w in rest.iter().rev() {
                stack.push(w);
            }
            for &w in obs.iter().rev() {
                stack.push(w);
            }
        }
        let mut template = order.clone();
        if order.len() > 2 {
            template.extend(order[1..order.len() - 1].iter().rev().copied());
        }
        Self::from_template(graph, template)
    }

    /// Builds a schedule from an explicit cyclic template. The template must
    /// cover every observed node, contain only observed nodes, and have no
    /// equal consecutive entries (wrapping around).
    pub fn from_template(graph: &TreeGraph, template: Vec<usize>) -> Result<Self> {
        if template.is_empty() {
            if graph.observed().is_empty() {
                return Ok(Schedule { template, paths: Vec::new() });
            }
            return Err(Error::InvalidModel("empty schedule for a constrained model".into()));
        }
        let mut covered = std::collections::BTreeSet::new();
        for &v in &template {
            if !graph.is_observed(v) {
                return Err(Error::InvalidModel(format!("schedule entry {v} is not observed")));
            }
            covered.insert(v);
        }
        if &covered != graph.observed() {
            return Err(Error::InvalidModel("schedule does not cover all observed nodes".into()));
        }
        if template.len() > 1 {
            for k in 0..template.len() {
                let next = template[(k + 1) % template.len()];
                if template[k] == next {
                    return Err(Error::InvalidModel(format!(
                        "schedule repeats node {} consecutively",
                        template[k]
                    )));
                }
            }
        }
        let mut paths = Vec::with_capacity(template.len());
        for k in 0..template.len() {
            let next = template[(k + 1) % template.len()];
            paths.push(graph.path(template[k], next)?);
        }
        Ok(Schedule { template, paths })
    }

    pub fn template(&self) -> &[usize] {
        &self.template
    }

    pub fn path(&self, k: usize) -> &[usize] {
        &self.paths[k]
    }
}

/// Per-sweep residual record: `(observed node, ||P_i - y_i||_1)` with
/// residuals measured just before each node's own update; nodes visited
/// twice in a sweep keep the later measurement.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub sweep: usize,
    pub residuals: Vec<(usize, f64)>,
    /// Nanoseconds since the solve started, taken when the sweep finished.
    pub wall_ns: u64,
}

impl SweepRecord {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, &(_, r)| a.max(r))
    }

    pub fn sum_residual(&self) -> f64 {
        self.residuals.iter().map(|&(_, r)| r).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SbpOptions {
    /// Convergence threshold on the largest pre-update residual in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Custom visiting order; defaults to [`Schedule::default_for`].
    pub schedule: Option<Schedule>,
    /// Inner loopy-propagation settings, used only on cyclic graphs.
    pub inner: BpOptions,
    /// After every scaling update, refresh the whole tree with a full
    /// two-pass sweep instead of only the scheduled path. Same fixed point,
    /// strictly more message work; kept for comparisons.
    pub full_refresh: bool,
    /// Record node marginals after every sweep.
    pub record_marginals: bool,
}

impl Default for SbpOptions {
    fn default() -> Self {
        SbpOptions {
            tol: 1e-9,
            max_sweeps: 10_000,
            schedule: None,
            inner: BpOptions::default(),
            full_refresh: false,
            record_marginals: false,
        }
    }
}

/// Message state of a run plus bookkeeping: scaling vectors per observed
/// node, the residual trace, and how many messages each scheduled step
/// touched.
#[derive(Debug)]
pub struct SbpState {
    pub messages: MessageStore,
    pub scalings: BTreeMap<usize, Array1<f64>>,
    pub trace: Vec<SweepRecord>,
    /// Messages updated per scheduled step (scaling plus path), tree mode
    /// only.
    pub touched_per_step: Vec<usize>,
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Debug)]
pub struct SbpResult {
    pub state: SbpState,
    pub schedule: Schedule,
    /// Node marginals for every node; observed nodes report the scaled
    /// belief `u_i * m_{j->i}`, which equals `y_i` at convergence.
    pub marginals: Vec<Array1<f64>>,
    /// Per-sweep marginal snapshots when requested.
    pub history: Vec<Vec<Array1<f64>>>,
}

fn check_problem(
    graph: &TreeGraph,
    observations: &[AggregateMarginal],
) -> Result<BTreeMap<usize, Array1<f64>>> {
    let mut map = BTreeMap::new();
    for m in observations {
        if !graph.is_observed(m.node) {
            return Err(Error::InvalidModel(format!(
                "observation for node {} which is not marked observed",
                m.node
            )));
        }
        if m.probs.len() != graph.dim(m.node) {
            return Err(Error::InvalidModel(format!(
                "observation for node {} has wrong dimension",
                m.node
            )));
        }
        if map.insert(m.node, m.probs.clone()).is_some() {
            return Err(Error::InvalidModel(format!("duplicate observation for node {}", m.node)));
        }
    }
    for &v in graph.observed() {
        if !map.contains_key(&v) {
            return Err(Error::InvalidModel(format!("observed node {v} has no observation")));
        }
        if !graph.is_leaf(v) {
            return Err(Error::InvalidModel(format!(
                "observed node {v} is internal; rewrite it to a leaf first (normalize_observed_leaves)"
            )));
        }
    }
    Ok(map)
}

/// Scaling update at observed leaf `node`: measures the pre-update residual,
/// replaces the scaling vector with `y / m_in`, and re-sends the outgoing
/// message. Returns the pre-update residual.
pub fn scaling_update(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &mut MessageStore,
    scalings: &mut BTreeMap<usize, Array1<f64>>,
    node: usize,
    target: &Array1<f64>,
) -> Result<f64> {
    let nbs = graph.neighbors(node);
    if nbs.len() != 1 {
        return Err(Error::InvalidModel(format!(
            "scaling update needs a leaf, node {node} has degree {}",
            nbs.len()
        )));
    }
    let j = nbs[0].node;
    let m_in = store.get(graph, j, node).clone();

    let residual = {
        let u_old = scalings
            .get(&node)
            .cloned()
            .unwrap_or_else(|| Array1::ones(graph.dim(node)));
        let mut cur = &u_old * &m_in;
        let mass: f64 = cur.iter().sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Numeric(format!(
                "belief at observed node {node} lost all mass"
            )));
        }
        cur.mapv_inplace(|v| v / mass);
        l1_distance(&cur, target)
    };

    let mut u = Array1::zeros(graph.dim(node));
    for x in 0..graph.dim(node) {
        let y = target[x];
        if y == 0.0 {
            u[x] = 0.0;
        } else if m_in[x] > 0.0 {
            u[x] = y / m_in[x];
        } else {
            return Err(Error::Infeasible(format!(
                "node {node} state {x} has target mass {y} but the model puts zero mass there"
            )));
        }
    }
    let msg = bp::compute_message(graph, pots, store, node, j, Some(&u))?;
    store.set(graph, node, j, msg);
    scalings.insert(node, u);
    Ok(residual)
}

/// Refreshes the sum-product messages along a scheduled path, skipping the
/// first hop (that message is produced by the scaling update at the path's
/// origin). Returns how many messages were updated: `path.len() - 2`.
pub fn path_propagate(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &mut MessageStore,
    path: &[usize],
) -> Result<usize> {
    if path.len() < 3 {
        return Ok(0);
    }
    for k in 1..path.len() - 1 {
        let msg = bp::compute_message(graph, pots, store, path[k], path[k + 1], None)?;
        store.set(graph, path[k], path[k + 1], msg);
    }
    Ok(path.len() - 2)
}

/// Node marginal from a run's state: product of inbound messages, times the
/// scaling vector at observed nodes.
pub fn node_marginal(
    graph: &TreeGraph,
    state: &SbpState,
    node: usize,
) -> Result<Array1<f64>> {
    let mut prod = match state.scalings.get(&node) {
        Some(u) => u.clone(),
        None => Array1::ones(graph.dim(node)),
    };
    for nb in graph.neighbors(node) {
        let m = state.messages.get(graph, nb.node, node);
        for (p, &mv) in prod.iter_mut().zip(m.iter()) {
            *p *= mv;
        }
    }
    let sum: f64 = prod.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numeric(format!("marginal at node {node} lost all mass")));
    }
    Ok(prod / sum)
}

/// All node and edge marginals from a run's state.
pub fn marginals(graph: &TreeGraph, pots: &Potentials, state: &SbpState) -> Result<MarginalSet> {
    let nodes: Vec<Array1<f64>> = (0..graph.node_count())
        .map(|v| node_marginal(graph, state, v))
        .collect::<Result<_>>()?;
    let mut edges = Vec::with_capacity(graph.edge_count());
    for e in 0..graph.edge_count() {
        let (i, j) = graph.edge_endpoints(e);
        let wi = state.scalings.get(&i);
        let wj = state.scalings.get(&j);
        edges.push(bp::edge_marginal_with(graph, pots, &state.messages, i, j, wi, wj)?);
    }
    Ok(MarginalSet { nodes, edges })
}

/// Solves the constrained problem. Requires every observed node to be a
/// leaf; internal observations must be rewritten first.
pub fn solve(
    graph: &TreeGraph,
    pots: &Potentials,
    observations: &[AggregateMarginal],
    opts: &SbpOptions,
) -> Result<SbpResult> {
    let targets = check_problem(graph, observations)?;

    let mut store = MessageStore::uniform(graph);
    if graph.is_tree() {
        bp::tree_sweep(graph, pots, &mut store, None)?;
    } else {
        bp::loopy_iterate(graph, pots, &mut store, None, &opts.inner)?;
    }

    let schedule = match &opts.schedule {
        Some(s) => s.clone(),
        None => {
            if graph.is_tree() {
                Schedule::default_for(graph)?
            } else {
                // Cyclic mode sweeps the observed set in ascending order;
                // paths are unused.
                Schedule {
                    template: graph.observed().iter().copied().collect(),
                    paths: Vec::new(),
                }
            }
        }
    };

    let mut state = SbpState {
        messages: store,
        scalings: BTreeMap::new(),
        trace: Vec::new(),
        touched_per_step: Vec::new(),
        sweeps: 0,
        converged: targets.is_empty(),
    };
    let mut history = Vec::new();
    let clock = std::time::Instant::now();

    while state.sweeps < opts.max_sweeps && !state.converged {
        state.sweeps += 1;
        let mut last_residual: BTreeMap<usize, f64> = BTreeMap::new();
        let mut worst = 0.0f64;
        for (k, &i) in schedule.template.iter().enumerate() {
            if !graph.is_tree() {
                let weights = |v: usize| state.scalings.get(&v).cloned();
                bp::loopy_iterate(
                    graph,
                    pots,
                    &mut state.messages,
                    Some(&weights),
                    &opts.inner,
                )?;
            }
            let r = scaling_update(
                graph,
                pots,
                &mut state.messages,
                &mut state.scalings,
                i,
                &targets[&i],
            )?;
            let mut touched = 1;
            if graph.is_tree() {
                if opts.full_refresh {
                    bp::tree_sweep(graph, pots, &mut state.messages, Some(&|v: usize| {
                        state.scalings.get(&v).cloned()
                    }))?;
                    touched += 2 * graph.edge_count();
                } else {
                    touched += path_propagate(graph, pots, &mut state.messages, schedule.path(k))?;
                }
                state.touched_per_step.push(touched);
            }
            last_residual.insert(i, r);
            worst = worst.max(r);
        }
        state.trace.push(SweepRecord {
            sweep: state.sweeps,
            residuals: last_residual.into_iter().collect(),
            wall_ns: clock.elapsed().as_nanos() as u64,
        });
        if opts.record_marginals {
            history.push(refreshed_node_marginals(graph, pots, &state, &opts.inner)?);
        }
        if worst <= opts.tol {
            state.converged = true;
        }
    }

    // Path steps never touch messages pointing away from the scheduled
    // routes, so messages into unobserved side branches are stale by now.
    // One full refresh with the final scalings fixes them; messages already
    // at their fixed point are reproduced unchanged.
    refresh_messages(graph, pots, &mut state.messages, &state.scalings, &opts.inner)?;

    let node_marginals: Vec<Array1<f64>> = (0..graph.node_count())
        .map(|v| node_marginal(graph, &state, v))
        .collect::<Result<_>>()?;
    Ok(SbpResult { state, schedule, marginals: node_marginals, history })
}

fn refresh_messages(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &mut MessageStore,
    scalings: &BTreeMap<usize, Array1<f64>>,
    inner: &BpOptions,
) -> Result<()> {
    let weights = |v: usize| scalings.get(&v).cloned();
    if graph.is_tree() {
        bp::tree_sweep(graph, pots, store, Some(&weights))
    } else {
        bp::loopy_iterate(graph, pots, store, Some(&weights), inner).map(|_| ())
    }
}

/// Marginals as they would be reported right now: computed on a refreshed
/// copy of the messages so the live state is left untouched.
fn refreshed_node_marginals(
    graph: &TreeGraph,
    pots: &Potentials,
    state: &SbpState,
    inner: &BpOptions,
) -> Result<Vec<Array1<f64>>> {
    let mut fresh = state.messages.clone();
    refresh_messages(graph, pots, &mut fresh, &state.scalings, inner)?;
    (0..graph.node_count())
        .map(|v| {
            let mut prod = match state.scalings.get(&v) {
                Some(u) => u.clone(),
                None => Array1::ones(graph.dim(v)),
            };
            for nb in graph.neighbors(v) {
                let m = fresh.get(graph, nb.node, v);
                for (p, &mv) in prod.iter_mut().zip(m.iter()) {
                    *p *= mv;
                }
            }
            let sum: f64 = prod.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::Numeric(format!("marginal at node {v} lost all mass")));
            }
            Ok(prod / sum)
        })
        .collect()
}

/// Largest 1-norm deviation of any directed message from its own update
/// equation: the sum-product form at unobserved sources, the scaling form
/// (with the scaling vector recomputed from current messages) at observed
/// sources. Zero at a fixed point.
pub fn fixed_point_residual(
    graph: &TreeGraph,
    pots: &Potentials,
    state: &SbpState,
    observations: &[AggregateMarginal],
) -> Result<f64> {
    let targets: BTreeMap<usize, &Array1<f64>> =
        observations.iter().map(|m| (m.node, &m.probs)).collect();
    let mut worst = 0.0f64;
    for e in 0..graph.edge_count() {
        let (a, b) = graph.edge_endpoints(e);
        for (i, j) in [(a, b), (b, a)] {
            let rhs = if let Some(&y) = targets.get(&i) {
                let m_in = state.messages.get(graph, j, i);
                let mut u = Array1::zeros(graph.dim(i));
                for x in 0..graph.dim(i) {
                    if y[x] == 0.0 {
                        u[x] = 0.0;
                    } else if m_in[x] > 0.0 {
                        u[x] = y[x] / m_in[x];
                    } else {
                        return Err(Error::Infeasible(format!(
                            "node {i} state {x} has target mass but zero message mass"
                        )));
                    }
                }
                bp::compute_message(graph, pots, &state.messages, i, j, Some(&u))?
            } else {
                bp::compute_message(graph, pots, &state.messages, i, j, None)?
            };
            worst = worst.max(l1_distance(&rhs, state.messages.get(graph, i, j)));
        }
    }
    Ok(worst)
}

/// Largest 1-norm gap between each reported edge marginal and its
/// reconstruction from node marginals and messages,
/// `psi_ij (n_i/m_{j->i}) (n_j/m_{i->j})` normalized. The ratios recover the
/// equality-constraint multipliers without materializing them.
pub fn stationarity_residual(
    graph: &TreeGraph,
    pots: &Potentials,
    state: &SbpState,
) -> Result<f64> {
    let ms = marginals(graph, pots, state)?;
    let ratio = |n: &Array1<f64>, m: &Array1<f64>| -> Array1<f64> {
        let mut out = Array1::zeros(n.len());
        for x in 0..n.len() {
            if n[x] != 0.0 {
                out[x] = n[x] / m[x];
            }
        }
        out
    };
    let mut worst = 0.0f64;
    for e in 0..graph.edge_count() {
        let (i, j) = graph.edge_endpoints(e);
        let ri = ratio(&ms.nodes[i], state.messages.get(graph, j, i));
        let rj = ratio(&ms.nodes[j], state.messages.get(graph, i, j));
        let table = pots.table(e);
        let mut recon = ndarray::Array2::zeros((graph.dim(i), graph.dim(j)));
        for xi in 0..graph.dim(i) {
            for xj in 0..graph.dim(j) {
                recon[[xi, xj]] = table[[xi, xj]] * ri[xi] * rj[xj];
            }
        }
        let sum: f64 = recon.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Numeric(format!("edge ({i}, {j}) reconstruction lost all mass")));
        }
        recon.mapv_inplace(|v| v / sum);
        let diff: f64 = recon.iter().zip(ms.edges[e].iter()).map(|(x, y)| (x - y).abs()).sum();
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// Bethe free energy of a normalized, edge-consistent marginal set:
///
/// ```text
/// F = sum_edges sum n_ij ln(n_ij / psi_ij) - sum_i (deg_i - 1) sum n_i ln n_i
/// ```
///
/// with the convention `0 ln 0 = 0`. On a tree this equals the exact
/// KL divergence between the implied joint and the unnormalized product of
/// potentials, up to the constant log-partition term.
pub fn bethe_free_energy(
    marginals: &MarginalSet,
    graph: &TreeGraph,
    pots: &Potentials,
) -> Result<f64> {
    for (v, n) in marginals.nodes.iter().enumerate() {
        let sum: f64 = n.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidModel(format!(
                "node marginal {v} sums to {sum}, expected 1"
            )));
        }
    }
    let gap = marginals.consistency_gap(graph);
    if gap > 1e-6 {
        return Err(Error::InvalidModel(format!(
            "marginals are not edge-consistent (gap {gap:.3e})"
        )));
    }
    let mut f = 0.0;
    for e in 0..graph.edge_count() {
        let table = pots.table(e);
        for (n, psi) in marginals.edges[e].iter().zip(table.iter()) {
            if *n > 0.0 {
                if *psi == 0.0 {
                    return Ok(f64::INFINITY);
                }
                f += n * (n.ln() - psi.ln());
            }
        }
    }
    for v in 0..graph.node_count() {
        let weight = graph.degree(v) as f64 - 1.0;
        if weight == 0.0 {
            continue;
        }
        let h: f64 = marginals.nodes[v]
            .iter()
            .filter(|&&n| n > 0.0)
            .map(|&n| n * n.ln())
            .sum();
        f -= weight * h;
    }
    Ok(f)
}
