//! Approximate solvers for noisy aggregate observations.
//!
//! Here the evidence is a vector of noisy counts per observed node (for a
//! population of `M` individuals) rather than an exact marginal. The target
//! is a stationary point of the count-scale objective
//!
//! ```text
//! F(n) = sum_edges sum n_ij ln(n_ij / psi_ij)
//!        - sum_i (deg_i - 1) sum n_i ln n_i
//!        - sum_i ln p(y_i | n_i)
//! ```
//!
//! over edge-consistent count tables with node mass `M`. All three solvers
//! reshape the potentials from the current iterate and re-run sum-product:
//!
//! * [`nlbp_solve`] tilts each observed node's potential by the exponential
//!   of its likelihood gradient and damps the resulting marginals;
//! * [`bethe_rda_solve`] tilts by a running average of past gradients with
//!   a decaying step, which trades speed for stability;
//! * [`prox_solve`] solves a proximal subproblem per iteration: potentials
//!   are blended geometrically with the previous marginals, so each step
//!   stays close in relative entropy.
//!
//! They share their fixed points: a converged iterate of any of them makes
//! the objective stationary. Numerical breakdown (what propagation returns
//! on a zero count where evidence demands mass, say) is reported as
//! [`SolveStatus::Diverged`], never a panic.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};

use crate::bp::{self, BpOptions, MessageStore};
use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::potential::{l1_distance, MarginalSet, Potentials};

/// Likelihood of noisy counts given count-scale node marginals.
pub trait ObservationModel {
    /// Nodes that carry observations.
    fn nodes(&self) -> Vec<usize>;
    /// `ln p(y_node | counts)`; zero for unobserved nodes.
    fn log_likelihood(&self, node: usize, counts: &Array1<f64>) -> f64;
    /// Entrywise gradient of [`Self::log_likelihood`] in `counts`; zeros
    /// for unobserved nodes.
    fn gradient(&self, node: usize, counts: &Array1<f64>) -> Array1<f64>;
}

fn ln_factorial(y: f64) -> f64 {
    let n = y.round();
    if n <= 100.0 {
        let mut acc = 0.0;
        let mut k = 2.0;
        while k <= n {
            acc += k.ln();
            k += 1.0;
        }
        acc
    } else {
        n * n.ln() - n + 0.5 * (2.0 * std::f64::consts::PI * n).ln() + 1.0 / (12.0 * n)
            - 1.0 / (360.0 * n * n * n)
    }
}

/// Independent Poisson counts per state: `y_i(x) ~ Poisson(rate * n_i(x))`.
#[derive(Debug, Clone)]
pub struct PoissonModel {
    counts: BTreeMap<usize, Array1<f64>>,
    rate: f64,
}

impl PoissonModel {
    pub fn new(counts: BTreeMap<usize, Array1<f64>>, rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidModel(format!("detection rate must be positive, got {rate}")));
        }
        for (node, y) in &counts {
            if y.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "counts for node {node} contain a negative or non-finite entry"
                )));
            }
        }
        Ok(PoissonModel { counts, rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn counts(&self, node: usize) -> Option<&Array1<f64>> {
        self.counts.get(&node)
    }
}

impl ObservationModel for PoissonModel {
    fn nodes(&self) -> Vec<usize> {
        self.counts.keys().copied().collect()
    }

    fn log_likelihood(&self, node: usize, counts: &Array1<f64>) -> f64 {
        let Some(y) = self.counts.get(&node) else { return 0.0 };
        let mut ll = 0.0;
        for (x, &c) in counts.iter().enumerate() {
            let lambda = self.rate * c;
            if lambda > 0.0 {
                ll += y[x] * lambda.ln() - lambda - ln_factorial(y[x]);
            } else if y[x] > 0.0 {
                return f64::NEG_INFINITY;
            }
        }
        ll
    }

    fn gradient(&self, node: usize, counts: &Array1<f64>) -> Array1<f64> {
        let Some(y) = self.counts.get(&node) else { return Array1::zeros(counts.len()) };
        let mut g = Array1::zeros(counts.len());
        for (x, &c) in counts.iter().enumerate() {
            g[x] = if y[x] == 0.0 {
                -self.rate
            } else if c > 0.0 {
                y[x] / c - self.rate
            } else {
                f64::INFINITY
            };
        }
        g
    }
}

/// Count-scale objective: entropy-regularized edge energies minus the
/// observation log-likelihood, evaluated at `population * marginals`.
/// Returns infinity when mass sits on a zero potential entry or the
/// likelihood vanishes; no consistency checking here, callers feed
/// propagation output.
pub fn cgm_free_energy(
    graph: &TreeGraph,
    pots: &Potentials,
    marginals: &MarginalSet,
    obs: &dyn ObservationModel,
    population: f64,
) -> f64 {
    let m = population;
    let mut f = 0.0;
    for e in 0..graph.edge_count() {
        let table = pots.table(e);
        for (nv, psi) in marginals.edges[e].iter().zip(table.iter()) {
            let c = m * nv;
            if c > 0.0 {
                if *psi == 0.0 {
                    return f64::INFINITY;
                }
                f += c * (c.ln() - psi.ln());
            }
        }
    }
    for v in 0..graph.node_count() {
        let weight = graph.degree(v) as f64 - 1.0;
        if weight != 0.0 {
            let h: f64 = marginals.nodes[v]
                .iter()
                .filter(|&&nv| nv > 0.0)
                .map(|&nv| {
                    let c = m * nv;
                    c * c.ln()
                })
                .sum();
            f -= weight * h;
        }
    }
    for node in obs.nodes() {
        let counts = marginals.nodes[node].mapv(|nv| m * nv);
        f -= obs.log_likelihood(node, &counts);
    }
    f
}

/// Multiplies each listed node's log-tilt into the potential on the edge
/// toward its lowest-indexed neighbor. Tilts must be finite.
pub fn tilt_potentials(
    graph: &TreeGraph,
    pots: &Potentials,
    log_tilts: &BTreeMap<usize, Array1<f64>>,
) -> Result<Potentials> {
    let mut tables: Vec<Option<Array2<f64>>> = vec![None; graph.edge_count()];
    for (&v, tilt) in log_tilts {
        if v >= graph.node_count() {
            return Err(Error::InvalidModel(format!("tilt for node {v} out of range")));
        }
        if tilt.len() != graph.dim(v) {
            return Err(Error::InvalidModel(format!(
                "tilt for node {v} has length {}, expected {}",
                tilt.len(),
                graph.dim(v)
            )));
        }
        if tilt.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("tilt for node {v} is not finite")));
        }
        let w = graph
            .neighbors(v)
            .first()
            .ok_or_else(|| Error::InvalidModel(format!("node {v} has no neighbors")))?
            .node;
        let e = graph.edge_id(v, w).expect("neighbor edge");
        let table = tables[e].get_or_insert_with(|| pots.table(e).clone());
        let (lo, _) = graph.edge_endpoints(e);
        if v == lo {
            for (r, mut row) in table.outer_iter_mut().enumerate() {
                row.mapv_inplace(|x| x * tilt[r].exp());
            }
        } else {
            for (c, mut col) in table.axis_iter_mut(Axis(1)).enumerate() {
                col.mapv_inplace(|x| x * tilt[c].exp());
            }
        }
    }
    let mut out = Vec::with_capacity(graph.edge_count());
    for (e, slot) in tables.into_iter().enumerate() {
        match slot {
            Some(t) => out.push(std::sync::Arc::new(t)),
            None => out.push(pots.shared(e)),
        }
    }
    Ok(Potentials::from_shared(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget exhausted before the residual dropped under `tol`.
    MaxIters,
    /// Numerical breakdown; the result holds the last finite iterate.
    Diverged,
}

/// One row per iteration: largest node-marginal change of the update and
/// the objective value after it.
#[derive(Debug, Clone)]
pub struct BaselineTrace {
    pub iter: usize,
    pub residual: f64,
    pub energy: f64,
    /// Nanoseconds since the solve started, taken when the iteration finished.
    pub wall_ns: u64,
}

#[derive(Debug, Clone)]
pub struct BaselineOptions {
    /// Population size `M` converting marginals to counts.
    pub population: f64,
    /// Convergence threshold on the largest node-marginal change.
    pub tol: f64,
    pub max_iters: usize,
    /// Weight of the new iterate in the damped update; 1 disables damping.
    pub damping: f64,
    /// Proximal strength for [`prox_solve`]; larger takes bolder steps.
    pub prox_step: f64,
    /// Learning rate for [`bethe_rda_solve`]: the step weight is
    /// `t / (rda_rate + t)`, so larger values damp early iterations.
    pub rda_rate: f64,
    /// Inner propagation settings for cyclic graphs.
    pub inner: BpOptions,
    /// Keep per-iteration node marginals.
    pub record_marginals: bool,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            population: 1.0,
            tol: 1e-9,
            max_iters: 1000,
            damping: 0.5,
            prox_step: 1.0,
            rda_rate: 1.0,
            inner: BpOptions::default(),
            record_marginals: false,
        }
    }
}

#[derive(Debug)]
pub struct BaselineResult {
    /// Normalized marginals; multiply by the population for counts.
    pub marginals: MarginalSet,
    pub status: SolveStatus,
    pub trace: Vec<BaselineTrace>,
    /// Per-iteration node marginals when requested.
    pub history: Vec<Vec<Array1<f64>>>,
}

fn propagate(
    graph: &TreeGraph,
    pots: &Potentials,
    store: &mut MessageStore,
    inner: &BpOptions,
) -> Result<MarginalSet> {
    if graph.is_tree() {
        bp::tree_sweep(graph, pots, store, None)?;
    } else {
        bp::loopy_iterate(graph, pots, store, None, inner)?;
    }
    let nodes: Vec<Array1<f64>> = (0..graph.node_count())
        .map(|v| bp::node_marginal(graph, store, v))
        .collect::<Result<_>>()?;
    let edges: Vec<Array2<f64>> = (0..graph.edge_count())
        .map(|e| {
            let (i, j) = graph.edge_endpoints(e);
            bp::edge_marginal(graph, pots, store, i, j)
        })
        .collect::<Result<_>>()?;
    Ok(MarginalSet { nodes, edges })
}

fn is_finite_set(ms: &MarginalSet) -> bool {
    ms.nodes.iter().all(|n| n.iter().all(|v| v.is_finite()))
        && ms.edges.iter().all(|t| t.iter().all(|v| v.is_finite()))
}

fn blend(cur: &mut MarginalSet, new: &MarginalSet, alpha: f64) {
    for (c, n) in cur.nodes.iter_mut().zip(&new.nodes) {
        c.zip_mut_with(n, |a, &b| *a = (1.0 - alpha) * *a + alpha * b);
    }
    for (c, n) in cur.edges.iter_mut().zip(&new.edges) {
        c.zip_mut_with(n, |a, &b| *a = (1.0 - alpha) * *a + alpha * b);
    }
}

fn check_observed(graph: &TreeGraph, obs: &dyn ObservationModel) -> Result<()> {
    for node in obs.nodes() {
        if node >= graph.node_count() {
            return Err(Error::InvalidModel(format!("observation for node {node} out of range")));
        }
    }
    Ok(())
}

/// Per-node likelihood gradients at count scale; `None` when any entry is
/// non-finite, which the solvers report as divergence.
fn gradients(
    graph: &TreeGraph,
    obs: &dyn ObservationModel,
    ms: &MarginalSet,
    population: f64,
) -> Option<BTreeMap<usize, Array1<f64>>> {
    let mut out = BTreeMap::new();
    for node in obs.nodes() {
        let counts = ms.nodes[node].mapv(|v| population * v);
        let g = obs.gradient(node, &counts);
        debug_assert_eq!(g.len(), graph.dim(node));
        if g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        out.insert(node, g);
    }
    Some(out)
}

struct Driver<'a> {
    graph: &'a TreeGraph,
    pots: &'a Potentials,
    obs: &'a dyn ObservationModel,
    opts: &'a BaselineOptions,
    clock: std::time::Instant,
    trace: Vec<BaselineTrace>,
    history: Vec<Vec<Array1<f64>>>,
}

impl<'a> Driver<'a> {
    fn finish(self, marginals: MarginalSet, status: SolveStatus) -> BaselineResult {
        BaselineResult { marginals, status, trace: self.trace, history: self.history }
    }

    fn record(&mut self, iter: usize, residual: f64, ms: &MarginalSet) {
        let energy = cgm_free_energy(self.graph, self.pots, ms, self.obs, self.opts.population);
        let wall_ns = self.clock.elapsed().as_nanos() as u64;
        self.trace.push(BaselineTrace { iter, residual, energy, wall_ns });
        if self.opts.record_marginals {
            self.history.push(ms.nodes.clone());
        }
    }
}

/// Tilted propagation: each iteration multiplies the potentials by the
/// exponentiated likelihood gradient at the current counts, re-runs
/// sum-product, and damps the marginals toward the result.
pub fn nlbp_solve(
    graph: &TreeGraph,
    pots: &Potentials,
    obs: &dyn ObservationModel,
    opts: &BaselineOptions,
) -> Result<BaselineResult> {
    check_observed(graph, obs)?;
    let mut store = MessageStore::uniform(graph);
    let mut current = propagate(graph, pots, &mut store, &opts.inner)?;
    let mut driver = Driver {
        graph,
        pots,
        obs,
        opts,
        clock: std::time::Instant::now(),
        trace: Vec::new(),
        history: Vec::new(),
    };
    if obs.nodes().is_empty() {
        driver.record(1, 0.0, &current);
        return Ok(driver.finish(current, SolveStatus::Converged));
    }
    for iter in 1..=opts.max_iters {
        let Some(grads) = gradients(graph, obs, &current, opts.population) else {
            return Ok(driver.finish(current, SolveStatus::Diverged));
        };
        let tilted = tilt_potentials(graph, pots, &grads)?;
        let proposal = match propagate(graph, &tilted, &mut store, &opts.inner) {
            Ok(ms) if is_finite_set(&ms) => ms,
            Ok(_) | Err(Error::Numeric(_)) => {
                return Ok(driver.finish(current, SolveStatus::Diverged))
            }
            Err(e) => return Err(e),
        };
        let residual = current
            .nodes
            .iter()
            .zip(&proposal.nodes)
            .map(|(a, b)| l1_distance(a, b))
            .fold(0.0f64, f64::max);
        blend(&mut current, &proposal, opts.damping);
        driver.record(iter, residual, &current);
        if residual <= opts.tol {
            return Ok(driver.finish(current, SolveStatus::Converged));
        }
    }
    Ok(driver.finish(current, SolveStatus::MaxIters))
}

/// Averaged-gradient tilting: the tilt uses the running mean of past
/// likelihood gradients with step `t / (1 + t)`, so early noisy directions
/// fade instead of being chased.
pub fn bethe_rda_solve(
    graph: &TreeGraph,
    pots: &Potentials,
    obs: &dyn ObservationModel,
    opts: &BaselineOptions,
) -> Result<BaselineResult> {
    check_observed(graph, obs)?;
    if !(opts.rda_rate > 0.0) {
        return Err(Error::InvalidModel(format!(
            "learning rate must be positive, got {}",
            opts.rda_rate
        )));
    }
    let mut store = MessageStore::uniform(graph);
    let mut current = propagate(graph, pots, &mut store, &opts.inner)?;
    let mut driver = Driver {
        graph,
        pots,
        obs,
        opts,
        clock: std::time::Instant::now(),
        trace: Vec::new(),
        history: Vec::new(),
    };
    if obs.nodes().is_empty() {
        driver.record(1, 0.0, &current);
        return Ok(driver.finish(current, SolveStatus::Converged));
    }
    let mut avg: BTreeMap<usize, Array1<f64>> = obs
        .nodes()
        .into_iter()
        .map(|v| (v, Array1::zeros(graph.dim(v))))
        .collect();
    for iter in 1..=opts.max_iters {
        let Some(grads) = gradients(graph, obs, &current, opts.population) else {
            return Ok(driver.finish(current, SolveStatus::Diverged));
        };
        let t = iter as f64;
        for (v, g) in &grads {
            let slot = avg.get_mut(v).expect("tracked node");
            slot.zip_mut_with(g, |a, &gi| *a = ((t - 1.0) / t) * *a - gi / t);
        }
        let step = t / (opts.rda_rate + t);
        let tilts: BTreeMap<usize, Array1<f64>> =
            avg.iter().map(|(&v, a)| (v, a.mapv(|x| -step * x))).collect();
        let tilted = tilt_potentials(graph, pots, &tilts)?;
        let proposal = match propagate(graph, &tilted, &mut store, &opts.inner) {
            Ok(ms) if is_finite_set(&ms) => ms,
            Ok(_) | Err(Error::Numeric(_)) => {
                return Ok(driver.finish(current, SolveStatus::Diverged))
            }
            Err(e) => return Err(e),
        };
        let residual = current
            .nodes
            .iter()
            .zip(&proposal.nodes)
            .map(|(a, b)| l1_distance(a, b))
            .fold(0.0f64, f64::max);
        current = proposal;
        driver.record(iter, residual, &current);
        if residual <= opts.tol {
            return Ok(driver.finish(current, SolveStatus::Converged));
        }
    }
    Ok(driver.finish(current, SolveStatus::MaxIters))
}

/// Proximal iteration: with weight `w = step / (step + 1)` the subproblem
/// potentials are `psi^w * m_ij^(1-w)` on edges and
/// `m_i^(-(deg-1)(1-w)) * exp(w * gradient)` on nodes, both anchored at
/// the previous marginals `m`. Solving it with sum-product yields the next
/// iterate; the anchor keeps every step close to the last one in relative
/// entropy.
pub fn prox_solve(
    graph: &TreeGraph,
    pots: &Potentials,
    obs: &dyn ObservationModel,
    opts: &BaselineOptions,
) -> Result<BaselineResult> {
    check_observed(graph, obs)?;
    if !(opts.prox_step > 0.0) {
        return Err(Error::InvalidModel(format!(
            "proximal step must be positive, got {}",
            opts.prox_step
        )));
    }
    let w = opts.prox_step / (opts.prox_step + 1.0);
    let mut store = MessageStore::uniform(graph);
    let mut current = propagate(graph, pots, &mut store, &opts.inner)?;
    let mut driver = Driver {
        graph,
        pots,
        obs,
        opts,
        clock: std::time::Instant::now(),
        trace: Vec::new(),
        history: Vec::new(),
    };
    if obs.nodes().is_empty() {
        driver.record(1, 0.0, &current);
        return Ok(driver.finish(current, SolveStatus::Converged));
    }
    for iter in 1..=opts.max_iters {
        let Some(grads) = gradients(graph, obs, &current, opts.population) else {
            return Ok(driver.finish(current, SolveStatus::Diverged));
        };
        // Edge anchor: psi^w * m_ij^(1-w).
        let mut tables = Vec::with_capacity(graph.edge_count());
        for e in 0..graph.edge_count() {
            let base = pots.table(e);
            let anchor = &current.edges[e];
            let mut t = Array2::zeros(base.dim());
            ndarray::Zip::from(&mut t).and(base).and(anchor).for_each(|out, &p, &m| {
                *out = p.powf(w) * m.powf(1.0 - w);
            });
            tables.push(std::sync::Arc::new(t));
        }
        let anchored = Potentials::from_shared(tables);
        // Node anchor plus gradient, in log space. The anchor's node part
        // carries a negative exponent: it cancels the extra copies of the
        // previous marginal that the blended edge tables introduce at
        // shared nodes.
        let mut tilts: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
        let mut bad = false;
        for v in 0..graph.node_count() {
            let exponent = -((graph.degree(v) as f64 - 1.0) * (1.0 - w));
            let mut log_tilt = current.nodes[v].mapv(|m| {
                if m > 0.0 {
                    exponent * m.ln()
                } else if exponent == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            });
            if let Some(g) = grads.get(&v) {
                log_tilt.zip_mut_with(g, |a, &gi| *a += w * gi);
            }
            if log_tilt.iter().any(|x| !x.is_finite()) {
                bad = true;
                break;
            }
            if log_tilt.iter().any(|&x| x != 0.0) {
                tilts.insert(v, log_tilt);
            }
        }
        if bad {
            return Ok(driver.finish(current, SolveStatus::Diverged));
        }
        let subproblem = tilt_potentials(graph, &anchored, &tilts)?;
        let proposal = match propagate(graph, &subproblem, &mut store, &opts.inner) {
            Ok(ms) if is_finite_set(&ms) => ms,
            Ok(_) | Err(Error::Numeric(_)) => {
                return Ok(driver.finish(current, SolveStatus::Diverged))
            }
            Err(e) => return Err(e),
        };
        let residual = current
            .nodes
            .iter()
            .zip(&proposal.nodes)
            .map(|(a, b)| l1_distance(a, b))
            .fold(0.0f64, f64::max);
        current = proposal;
        driver.record(iter, residual, &current);
        if residual <= opts.tol {
            return Ok(driver.finish(current, SolveStatus::Converged));
        }
    }
    Ok(driver.finish(current, SolveStatus::MaxIters))
}
