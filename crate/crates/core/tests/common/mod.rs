//! Shared helpers for the integration suites: random instance generators
//! and reference solvers implemented independently of the library's own
//! message-passing code paths.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use sbp_core::potential::{AggregateMarginal, EdgePotential, Potentials};
use sbp_core::TreeGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random positive table with entries `exp(scale * N(0, 1))`.
pub fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| (scale * rng.sample::<f64, _>(normal)).exp())
}

/// Random distribution with entries bounded away from zero.
pub fn random_distribution(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(dim, |_| 0.05 + rng.random::<f64>());
    let sum = v.sum();
    v.mapv_inplace(|x| x / sum);
    v
}

/// A random tree instance for oracle comparisons.
pub struct TreeInstance {
    pub graph: TreeGraph,
    pub potentials: Potentials,
    pub observations: Vec<AggregateMarginal>,
}

/// Random tree with 2..=max_nodes nodes, per-node dimensions 2..=max_dim,
/// and 1..=max_observed observed leaves carrying random targets.
pub fn random_tree_instance(
    rng: &mut ChaCha8Rng,
    max_nodes: usize,
    max_dim: usize,
    max_observed: usize,
) -> TreeInstance {
    let n = rng.random_range(2..=max_nodes);
    let dims: Vec<usize> = (0..n).map(|_| rng.random_range(2..=max_dim)).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    let mut degree = vec![0usize; n];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let leaves: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    let k = rng.random_range(1..=max_observed.min(leaves.len()));
    let mut picked = leaves.clone();
    // Fisher-Yates prefix of size k.
    for i in 0..k {
        let j = rng.random_range(i..picked.len());
        picked.swap(i, j);
    }
    picked.truncate(k);
    picked.sort_unstable();

    let graph = TreeGraph::tree(dims.clone(), edges.clone(), picked.clone()).unwrap();
    let pots = (0..edges.len())
        .map(|e| {
            let (i, j) = graph.edge_endpoints(e);
            EdgePotential::new(i, j, random_table(rng, dims[i], dims[j], 0.7)).unwrap()
        })
        .collect();
    let potentials = Potentials::from_edge_potentials(&graph, pots).unwrap();
    let observations = picked
        .iter()
        .map(|&v| AggregateMarginal::new(v, random_distribution(rng, dims[v])).unwrap())
        .collect();
    TreeInstance { graph, potentials, observations }
}

/// Largest per-node 1-norm gap between two marginal lists.
pub fn max_node_l1(a: &[Array1<f64>], b: &[Array1<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Odometer over mixed-radix assignments.
fn next_assignment(idx: &mut [usize], dims: &[usize]) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return true;
        }
        idx[k] = 0;
    }
    false
}

/// Exact node and edge marginals by explicit enumeration of every joint
/// assignment, entirely separate from the library's tensor and message
/// code. `weights` multiplies per-node factors into the joint.
pub fn enumerate_marginals(
    dims: &[usize],
    edges: &[(usize, usize)],
    tables: &[Array2<f64>],
    weights: &BTreeMap<usize, Array1<f64>>,
) -> (Vec<Array1<f64>>, Vec<Array2<f64>>) {
    let n = dims.len();
    let mut nodes: Vec<Array1<f64>> = dims.iter().map(|&d| Array1::zeros(d)).collect();
    let mut pair: Vec<Array2<f64>> = edges
        .iter()
        .map(|&(i, j)| Array2::zeros((dims[i], dims[j])))
        .collect();
    let mut idx = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (e, &(i, j)) in edges.iter().enumerate() {
            w *= tables[e][[idx[i], idx[j]]];
        }
        for (&v, vec) in weights {
            w *= vec[idx[v]];
        }
        total += w;
        for v in 0..n {
            nodes[v][idx[v]] += w;
        }
        for (e, &(i, j)) in edges.iter().enumerate() {
            pair[e][[idx[i], idx[j]]] += w;
        }
        if !next_assignment(&mut idx, dims) {
            break;
        }
    }
    assert!(total > 0.0, "joint mass vanished");
    for v in nodes.iter_mut() {
        v.mapv_inplace(|x| x / total);
    }
    for p in pair.iter_mut() {
        p.mapv_inplace(|x| x / total);
    }
    (nodes, pair)
}

/// Least-squares line through `(index, ln value)`. Returns the slope and
/// the coefficient of determination; a constant sequence yields `(0, 0)`.
pub fn log_linear_fit(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let ys: Vec<f64> = values.iter().map(|&v| v.max(1e-300).ln()).collect();
    let nf = n as f64;
    let xbar = (nf - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        let dy = y - ybar;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy <= 1e-300 {
        return (0.0, 0.0);
    }
    let slope = sxy / sxx;
    let ss_res = syy - sxy * sxy / sxx;
    (slope, 1.0 - ss_res / syy)
}

/// Classic two-marginal Sinkhorn on a matrix kernel: alternating row and
/// column fits of `diag(u) K diag(v)` to `(r, c)`.
pub fn two_marginal_sinkhorn(
    kernel: &Array2<f64>,
    r: &Array1<f64>,
    c: &Array1<f64>,
    iters: usize,
) -> (Array1<f64>, Array1<f64>) {
    let mut u = Array1::ones(r.len());
    let mut v = Array1::ones(c.len());
    for _ in 0..iters {
        let kv = kernel.dot(&v);
        for i in 0..u.len() {
            u[i] = r[i] / kv[i];
        }
        let ktu = kernel.t().dot(&u);
        for j in 0..v.len() {
            v[j] = c[j] / ktu[j];
        }
    }
    (u, v)
}

pub struct SimplexOptions {
    pub max_iters: usize,
    /// Target on the first-order optimality gap `<g, x> - min_i g_i`.
    pub tol: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions { max_iters: 20_000, tol: 1e-11 }
    }
}

/// Minimizes a smooth convex function over the probability simplex by
/// multiplicative gradient steps with backtracking. Returns the point and
/// the final optimality gap; for a convex objective the gap bounds the
/// objective suboptimality directly.
pub fn minimize_on_simplex(
    start: Vec<f64>,
    eval: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    opts: &SimplexOptions,
) -> (Vec<f64>, f64) {
    let mut x = start;
    let total: f64 = x.iter().sum();
    for v in x.iter_mut() {
        *v /= total;
    }
    let (mut fx, mut g) = eval(&x);
    let mut eta = 1.0;
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let gx: f64 = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let gmin = g.iter().cloned().fold(f64::INFINITY, f64::min);
        gap = gx - gmin;
        if gap <= opts.tol {
            break;
        }
        // Multiplicative step, centered so the largest exponent is zero.
        let mut accepted = false;
        for _ in 0..70 {
            let mut cand: Vec<f64> = x
                .iter()
                .zip(g.iter())
                .map(|(&xi, &gi)| xi * (-eta * (gi - gmin)).exp())
                .collect();
            let z: f64 = cand.iter().sum();
            if z > 0.0 && z.is_finite() {
                for v in cand.iter_mut() {
                    *v /= z;
                }
                let (fc, gc) = eval(&cand);
                if fc.is_finite() && fc <= fx {
                    x = cand;
                    fx = fc;
                    g = gc;
                    accepted = true;
                    break;
                }
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
        eta *= 1.3;
    }
    (x, gap)
}

/// Solution of an equality-constrained entropic minimization, plus a
/// first-order certificate.
pub struct PolytopeSolution {
    pub nodes: Vec<Array1<f64>>,
    pub edges: Vec<Array2<f64>>,
    /// Infinity norm of the gradient component orthogonal to the
    /// constraint rows at the returned point.
    pub kkt_residual: f64,
    pub objective: f64,
}

/// Minimizes
///
/// ```text
/// sum_E sum n_e ln(n_e / psi_e)  -  sum_v (deg_v - 1) sum n_v ln n_v
/// ```
///
/// over edge tables and node vectors tied by marginalization constraints,
/// with some node vectors pinned to given distributions. Damped Newton on
/// the KKT system; independent of the message-passing solvers.
pub fn minimize_constrained_bethe(
    dims: &[usize],
    edges: &[(usize, usize)],
    tables: &[Array2<f64>],
    pinned: &BTreeMap<usize, Array1<f64>>,
    max_iters: usize,
) -> PolytopeSolution {
    let n = dims.len();
    let mut degree = vec![0usize; n];
    for &(a, b) in edges {
        degree[a] += 1;
        degree[b] += 1;
    }

    // Variable layout: all edge tables row-major, then all node vectors.
    let mut edge_off = Vec::with_capacity(edges.len());
    let mut off = 0;
    for &(i, j) in edges {
        edge_off.push(off);
        off += dims[i] * dims[j];
    }
    let mut node_off = Vec::with_capacity(n);
    for &d in dims {
        node_off.push(off);
        off += d;
    }
    let nvar = off;

    // Constraint rows: edge-to-node consistency for both endpoints, node
    // normalization for free nodes, pins for pinned nodes.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for (e, &(i, j)) in edges.iter().enumerate() {
        let (di, dj) = (dims[i], dims[j]);
        for a in 0..di {
            let mut row = vec![(node_off[i] + a, -1.0)];
            for b in 0..dj {
                row.push((edge_off[e] + a * dj + b, 1.0));
            }
            rows.push(row);
            rhs.push(0.0);
        }
        for b in 0..dj {
            let mut row = vec![(node_off[j] + b, -1.0)];
            for a in 0..di {
                row.push((edge_off[e] + a * dj + b, 1.0));
            }
            rows.push(row);
            rhs.push(0.0);
        }
    }
    for v in 0..n {
        if let Some(y) = pinned.get(&v) {
            for x in 0..dims[v] {
                rows.push(vec![(node_off[v] + x, 1.0)]);
                rhs.push(y[x]);
            }
        } else {
            rows.push((0..dims[v]).map(|x| (node_off[v] + x, 1.0)).collect());
            rhs.push(1.0);
        }
    }
    let m = rows.len();
    let mut a_mat = DMatrix::<f64>::zeros(m, nvar);
    for (r, row) in rows.iter().enumerate() {
        for &(c, val) in row {
            a_mat[(r, c)] = val;
        }
    }

    // Interior feasible start: product edge tables over the node vectors.
    let mut x = DVector::<f64>::zeros(nvar);
    let node_start: Vec<Array1<f64>> = (0..n)
        .map(|v| match pinned.get(&v) {
            Some(y) => y.clone(),
            None => Array1::from_elem(dims[v], 1.0 / dims[v] as f64),
        })
        .collect();
    for v in 0..n {
        for s in 0..dims[v] {
            x[node_off[v] + s] = node_start[v][s];
        }
    }
    for (e, &(i, j)) in edges.iter().enumerate() {
        for a in 0..dims[i] {
            for b in 0..dims[j] {
                x[edge_off[e] + a * dims[j] + b] = node_start[i][a] * node_start[j][b];
            }
        }
    }

    let objective = |x: &DVector<f64>| -> f64 {
        let mut f = 0.0;
        for (e, &(i, j)) in edges.iter().enumerate() {
            for a in 0..dims[i] {
                for b in 0..dims[j] {
                    let v = x[edge_off[e] + a * dims[j] + b];
                    if v > 0.0 {
                        f += v * (v / tables[e][[a, b]]).ln();
                    }
                }
            }
        }
        for v in 0..n {
            let coef = degree[v] as f64 - 1.0;
            for s in 0..dims[v] {
                let nv = x[node_off[v] + s];
                if nv > 0.0 {
                    f -= coef * nv * nv.ln();
                }
            }
        }
        f
    };
    let gradient = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::<f64>::zeros(nvar);
        for (e, &(i, j)) in edges.iter().enumerate() {
            for a in 0..dims[i] {
                for b in 0..dims[j] {
                    let k = edge_off[e] + a * dims[j] + b;
                    g[k] = (x[k] / tables[e][[a, b]]).ln() + 1.0;
                }
            }
        }
        for v in 0..n {
            let coef = degree[v] as f64 - 1.0;
            for s in 0..dims[v] {
                let k = node_off[v] + s;
                g[k] = -coef * (x[k].ln() + 1.0);
            }
        }
        g
    };

    let mut fx = objective(&x);
    for _ in 0..max_iters {
        let g = gradient(&x);
        let mut kkt = DMatrix::<f64>::zeros(nvar + m, nvar + m);
        for k in 0..nvar {
            let h = if k < node_off[0] {
                1.0 / x[k]
            } else {
                // Node block: locate which node this index belongs to.
                let v = (0..n).rev().find(|&v| k >= node_off[v]).unwrap();
                -(degree[v] as f64 - 1.0) / x[k]
            };
            kkt[(k, k)] = h;
        }
        for r in 0..m {
            for c in 0..nvar {
                kkt[(nvar + r, c)] = a_mat[(r, c)];
                kkt[(c, nvar + r)] = a_mat[(r, c)];
            }
        }
        let mut rhs_vec = DVector::<f64>::zeros(nvar + m);
        for k in 0..nvar {
            rhs_vec[k] = -g[k];
        }
        // Iterates stay feasible, so the constraint part of the residual
        // is zero.
        let svd = kkt.svd(true, true);
        let sol = match svd.solve(&rhs_vec, 1e-11) {
            Ok(s) => s,
            Err(_) => break,
        };
        let p = sol.rows(0, nvar).into_owned();
        let pnorm = p.amax();
        if pnorm < 1e-12 {
            break;
        }
        // Fraction-to-boundary, then Armijo.
        let mut alpha: f64 = 1.0;
        for k in 0..nvar {
            if p[k] < 0.0 {
                alpha = alpha.min(-0.95 * x[k] / p[k]);
            }
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &x + &p * alpha;
            let fc = objective(&cand);
            if fc.is_finite() && fc <= fx + 1e-14 * fx.abs().max(1.0) {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        if pnorm * alpha < 1e-13 {
            break;
        }
    }

    // Certificate: leftover gradient after removing the constraint-row span.
    let g = gradient(&x);
    let at = a_mat.transpose();
    let svd = at.clone().svd(true, true);
    let lambda = svd.solve(&g, 1e-11).expect("least squares on constraint span");
    let resid = &g - &at * lambda;
    let kkt_residual = resid.amax();

    let mut nodes = Vec::with_capacity(n);
    for v in 0..n {
        nodes.push(Array1::from_shape_fn(dims[v], |s| x[node_off[v] + s]));
    }
    let mut out_edges = Vec::with_capacity(edges.len());
    for (e, &(i, j)) in edges.iter().enumerate() {
        out_edges.push(Array2::from_shape_fn((dims[i], dims[j]), |(a, b)| {
            x[edge_off[e] + a * dims[j] + b]
        }));
    }
    PolytopeSolution { nodes, edges: out_edges, kkt_residual, objective: fx }
}

/// Chain of `len` spine nodes with an observed leaf attached to both ends
/// and every third interior node, all dimensions 3.
pub fn chain_with_leaf_observations(
    rng: &mut ChaCha8Rng,
    len: usize,
) -> (TreeGraph, Potentials, Vec<AggregateMarginal>) {
    let d = 3;
    let mut dims = vec![d; len];
    let mut edges: Vec<(usize, usize)> = (1..len).map(|v| (v - 1, v)).collect();
    let mut observed = Vec::new();
    let mut leaf_parents = vec![0, len - 1];
    leaf_parents.extend((3..len - 1).step_by(3));
    for &p in &leaf_parents {
        let leaf = dims.len();
        dims.push(d);
        edges.push((p, leaf));
        observed.push(leaf);
    }
    let g = TreeGraph::tree(dims.clone(), edges.clone(), observed.clone()).unwrap();
    let pots = (0..edges.len())
        .map(|e| {
            let (i, j) = g.edge_endpoints(e);
            EdgePotential::new(i, j, random_table(rng, dims[i], dims[j], 0.5)).unwrap()
        })
        .collect();
    let pots = Potentials::from_edge_potentials(&g, pots).unwrap();
    let obs = observed
        .iter()
        .map(|&v| AggregateMarginal::new(v, random_distribution(rng, d)).unwrap())
        .collect();
    (g, pots, obs)
}

/// Random row-stochastic table with entries bounded away from zero.
pub fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut t = Array2::from_shape_fn((rows, cols), |_| 0.05 + rng.random::<f64>());
    for mut row in t.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    t
}

/// Random homogeneous chain model with 1..=max_t steps and hidden and
/// observation dimensions 2..=max_dim.
pub fn random_hmm(rng: &mut ChaCha8Rng, max_t: usize, max_dim: usize) -> sbp_core::hmm::HmmModel {
    let t = rng.random_range(1..=max_t);
    let d = rng.random_range(2..=max_dim);
    let k = rng.random_range(2..=max_dim);
    sbp_core::hmm::HmmModel::homogeneous(
        t,
        random_distribution(rng, d),
        random_stochastic(rng, d, d),
        random_stochastic(rng, d, k),
    )
    .unwrap()
}
