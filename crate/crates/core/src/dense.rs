//! Dense-tensor reference machinery.
//!
//! These operations enumerate the full joint over all nodes, so they only
//! apply at small scale; they exist to give the message-passing solvers an
//! independent target to agree with. [`sinkhorn`] solves
//!
//! ```text
//! min_B KL(B || K)   s.t.  P_j(B) = mu_j  for the constrained axes
//! ```
//!
//! by cyclically rescaling each constrained axis, where `P_j` projects the
//! tensor onto axis `j`. With `K = exp(-C)` built from pairwise potentials
//! this is exactly the aggregate-inference problem the sparse solvers
//! approximate, so converged marginals can be compared entry by entry.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::potential::{l1_distance, AggregateMarginal, Potentials};

/// Default cap on dense tensor size.
pub const DENSE_CAP_DEFAULT: usize = 10_000_000;

/// Full joint over all node states as a dense tensor.
pub type DenseTensor = ArrayD<f64>;

fn checked_size(dims: &[usize], cap: usize) -> Result<usize> {
    let mut total: usize = 1;
    for &d in dims {
        total = total.checked_mul(d).ok_or(Error::SizeCap { entries: usize::MAX, cap })?;
        if total > cap {
            return Err(Error::SizeCap { entries: total, cap });
        }
    }
    Ok(total)
}

/// Multiplies `f(x_i, x_j)` into every tensor entry, broadcast over the two
/// named axes.
fn combine_pairwise(t: &mut ArrayD<f64>, ai: usize, aj: usize, f: impl Fn(usize, usize) -> f64, add: bool) {
    for (idx, v) in t.indexed_iter_mut() {
        let idx: &IxDyn = &idx;
        let val = f(idx[ai], idx[aj]);
        if add {
            *v += val;
        } else {
            *v *= val;
        }
    }
}

/// Normalized joint distribution of the pairwise model: the product of all
/// edge potentials, enumerated over every assignment. Fails if the tensor
/// would exceed `cap` entries (default [`DENSE_CAP_DEFAULT`]).
pub fn joint_distribution(
    graph: &TreeGraph,
    pots: &Potentials,
    cap: Option<usize>,
) -> Result<DenseTensor> {
    let cap = cap.unwrap_or(DENSE_CAP_DEFAULT);
    checked_size(graph.dims(), cap)?;
    let mut t = ArrayD::ones(IxDyn(graph.dims()));
    for e in 0..graph.edge_count() {
        let (i, j) = graph.edge_endpoints(e);
        let table = pots.table(e);
        combine_pairwise(&mut t, i, j, |xi, xj| table[[xi, xj]], false);
    }
    let sum: f64 = t.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numeric(format!("joint has non-normalizable mass {sum}")));
    }
    t.mapv_inplace(|v| v / sum);
    Ok(t)
}

/// Projection of a tensor onto one axis: sums out every other axis.
pub fn project(t: &DenseTensor, axis: usize) -> Array1<f64> {
    let mut out = Array1::zeros(t.shape()[axis]);
    for (idx, &v) in t.indexed_iter() {
        let idx: &IxDyn = &idx;
        out[idx[axis]] += v;
    }
    out
}

/// Projection onto an ordered pair of axes.
pub fn project_pair(t: &DenseTensor, ai: usize, aj: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t.shape()[ai], t.shape()[aj]));
    for (idx, &v) in t.indexed_iter() {
        let idx: &IxDyn = &idx;
        out[[idx[ai], idx[aj]]] += v;
    }
    out
}

/// Cost tensor `C(x) = -sum_edges ln psi_ij(x_i, x_j)`. Requires strictly
/// positive potentials.
pub fn cost_from_potentials(
    graph: &TreeGraph,
    pots: &Potentials,
    cap: Option<usize>,
) -> Result<DenseTensor> {
    let cap = cap.unwrap_or(DENSE_CAP_DEFAULT);
    checked_size(graph.dims(), cap)?;
    for e in 0..graph.edge_count() {
        if pots.table(e).iter().any(|&v| !(v > 0.0)) {
            let (i, j) = graph.edge_endpoints(e);
            return Err(Error::InvalidModel(format!(
                "cost needs positive potentials, edge ({i}, {j}) has a zero"
            )));
        }
    }
    let mut t = ArrayD::zeros(IxDyn(graph.dims()));
    for e in 0..graph.edge_count() {
        let (i, j) = graph.edge_endpoints(e);
        let table = pots.table(e);
        combine_pairwise(&mut t, i, j, |xi, xj| -table[[xi, xj]].ln(), true);
    }
    Ok(t)
}

/// Kernel `exp(-C / epsilon)` for the regularized problem. `epsilon = 1`
/// makes the transport optimum coincide with the inference problem.
pub fn kernel_from_cost(cost: &DenseTensor, epsilon: f64) -> Result<DenseTensor> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidModel(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(cost.mapv(|c| (-c / epsilon).exp()))
}

#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    /// Convergence threshold on the largest pre-update marginal residual
    /// `||P_j(B) - mu_j||_1` within a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions { tol: 1e-9, max_sweeps: 10_000 }
    }
}

/// One scaling vector per axis; axes without a constraint stay all-ones.
pub type ScalingVectors = Vec<Array1<f64>>;

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub scalings: ScalingVectors,
    /// The rescaled plan `K (x) U`.
    pub plan: DenseTensor,
    /// Largest pre-update residual per sweep.
    pub residuals: Vec<f64>,
    /// Nanoseconds since the solve started, one entry per residual.
    pub sweep_ns: Vec<u64>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Cyclic scaling over the constrained axes, ascending by node index. Each
/// visit rescales axis `j` so its marginal matches `mu_j` exactly; zero
/// target entries force the corresponding scaling entries to zero and are
/// excluded from the division.
pub fn sinkhorn(
    kernel: &DenseTensor,
    targets: &[AggregateMarginal],
    opts: &SinkhornOptions,
) -> Result<SinkhornResult> {
    if kernel.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidModel("kernel must be strictly positive".into()));
    }
    let shape = kernel.shape().to_vec();
    let mut targets: Vec<&AggregateMarginal> = targets.iter().collect();
    targets.sort_by_key(|m| m.node);
    for w in targets.windows(2) {
        if w[0].node == w[1].node {
            return Err(Error::InvalidModel(format!("duplicate target for axis {}", w[0].node)));
        }
    }
    for m in &targets {
        if m.node >= shape.len() || m.probs.len() != shape[m.node] {
            return Err(Error::InvalidModel(format!(
                "target for axis {} does not match tensor shape",
                m.node
            )));
        }
    }

    let mut plan = kernel.clone();
    let mut scalings: ScalingVectors = shape.iter().map(|&d| Array1::ones(d)).collect();
    let mut residuals = Vec::new();
    let mut sweep_ns = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let clock = std::time::Instant::now();

    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut worst = 0.0f64;
        for m in &targets {
            let axis = m.node;
            let proj = project(&plan, axis);
            worst = worst.max(l1_distance(&proj, &m.probs));
            let mut factor = Array1::zeros(shape[axis]);
            for x in 0..shape[axis] {
                let mu = m.probs[x];
                if mu == 0.0 {
                    factor[x] = 0.0;
                } else if proj[x] > 0.0 {
                    factor[x] = mu / proj[x];
                } else {
                    return Err(Error::Infeasible(format!(
                        "axis {axis} state {x} has target mass {mu} but zero plan mass"
                    )));
                }
            }
            for (i, s) in scalings[axis].iter_mut().enumerate() {
                *s *= factor[i];
            }
            for (idx, v) in plan.indexed_iter_mut() {
                let idx: &IxDyn = &idx;
                *v *= factor[idx[axis]];
            }
        }
        residuals.push(worst);
        sweep_ns.push(clock.elapsed().as_nanos() as u64);
        if worst <= opts.tol {
            converged = true;
            break;
        }
    }

    Ok(SinkhornResult { scalings, plan, residuals, sweep_ns, converged, sweeps })
}
