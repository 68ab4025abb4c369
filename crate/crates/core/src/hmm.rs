//! Hidden Markov chains with aggregate observations.
//!
//! A model holds a prior over the initial hidden state, row-stochastic
//! transition tables, and row-stochastic emission tables. Evidence per time
//! step is an aggregate distribution over observation symbols (a histogram
//! of what a whole population reported), not a single symbol.
//!
//! [`collective_forward_backward`] fits the hidden marginals to such
//! evidence by interleaving forward/backward recursions with per-step
//! Sinkhorn rescaling. It is the chain-shaped special case of the scaling
//! propagation in [`crate::sbp`]: converting the model with
//! [`HmmModel::to_pgm`] and running the default schedule performs the same
//! update sequence.

use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::potential::Potentials;
use crate::sbp::SweepRecord;

/// Per-step tables, either one shared table or one per step.
#[derive(Debug, Clone)]
pub enum Tables {
    Homogeneous(Arc<Array2<f64>>),
    PerStep(Vec<Arc<Array2<f64>>>),
}

impl Tables {
    pub fn homogeneous(table: Array2<f64>) -> Self {
        Tables::Homogeneous(Arc::new(table))
    }

    pub fn per_step(tables: Vec<Array2<f64>>) -> Self {
        Tables::PerStep(tables.into_iter().map(Arc::new).collect())
    }

    fn get(&self, t: usize) -> &Array2<f64> {
        match self {
            Tables::Homogeneous(a) => a,
            Tables::PerStep(v) => &v[t],
        }
    }

    fn shared(&self, t: usize) -> Arc<Array2<f64>> {
        match self {
            Tables::Homogeneous(a) => Arc::clone(a),
            Tables::PerStep(v) => Arc::clone(&v[t]),
        }
    }

    fn count(&self) -> Option<usize> {
        match self {
            Tables::Homogeneous(_) => None,
            Tables::PerStep(v) => Some(v.len()),
        }
    }
}

fn check_stochastic(table: &Array2<f64>, what: &str, t: usize) -> Result<()> {
    for (r, row) in table.outer_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "{what} table {t} row {r} has entry {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!(
                "{what} table {t} row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Hidden Markov chain over `steps` time points.
///
/// `transition(t)[a, b] = p(x_{t+1} = b | x_t = a)` for `t < steps - 1`;
/// `emission(t)[a, o] = p(obs = o | x_t = a)`.
#[derive(Debug, Clone)]
pub struct HmmModel {
    steps: usize,
    prior: Array1<f64>,
    transitions: Tables,
    emissions: Tables,
}

impl HmmModel {
    pub fn new(
        steps: usize,
        prior: Array1<f64>,
        transitions: Tables,
        emissions: Tables,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidModel("a chain needs at least one step".into()));
        }
        let d = prior.len();
        if d == 0 {
            return Err(Error::InvalidModel("empty state space".into()));
        }
        let psum: f64 = prior.iter().sum();
        if prior.iter().any(|&v| !v.is_finite() || v < 0.0) || (psum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel("prior is not a distribution".into()));
        }
        if let Some(c) = transitions.count() {
            if c != steps.saturating_sub(1) {
                return Err(Error::InvalidModel(format!(
                    "expected {} transition tables, got {c}",
                    steps - 1
                )));
            }
        }
        if let Some(c) = emissions.count() {
            if c != steps {
                return Err(Error::InvalidModel(format!(
                    "expected {steps} emission tables, got {c}"
                )));
            }
        }
        for t in 0..steps.saturating_sub(1) {
            let tr = transitions.get(t);
            if tr.nrows() != d || tr.ncols() != d {
                return Err(Error::InvalidModel(format!(
                    "transition table {t} has shape {}x{}, expected {d}x{d}",
                    tr.nrows(),
                    tr.ncols()
                )));
            }
            check_stochastic(tr, "transition", t)?;
        }
        let obs_dim = emissions.get(0).ncols();
        if obs_dim == 0 {
            return Err(Error::InvalidModel("empty observation space".into()));
        }
        for t in 0..steps {
            let em = emissions.get(t);
            if em.nrows() != d || em.ncols() != obs_dim {
                return Err(Error::InvalidModel(format!(
                    "emission table {t} has shape {}x{}, expected {d}x{obs_dim}",
                    em.nrows(),
                    em.ncols()
                )));
            }
            check_stochastic(em, "emission", t)?;
        }
        Ok(HmmModel { steps, prior, transitions, emissions })
    }

    pub fn homogeneous(
        steps: usize,
        prior: Array1<f64>,
        transition: Array2<f64>,
        emission: Array2<f64>,
    ) -> Result<Self> {
        HmmModel::new(
            steps,
            prior,
            Tables::homogeneous(transition),
            Tables::homogeneous(emission),
        )
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn hidden_dim(&self) -> usize {
        self.prior.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.emissions.get(0).ncols()
    }

    pub fn prior(&self) -> &Array1<f64> {
        &self.prior
    }

    pub fn transition(&self, t: usize) -> &Array2<f64> {
        self.transitions.get(t)
    }

    pub fn emission(&self, t: usize) -> &Array2<f64> {
        self.emissions.get(t)
    }

    /// Hidden marginals with no evidence: the prior pushed through the
    /// transitions.
    pub fn propagated_prior(&self) -> Vec<Array1<f64>> {
        let mut out = Vec::with_capacity(self.steps);
        out.push(self.prior.clone());
        for t in 1..self.steps {
            let prev = &out[t - 1];
            let next = self.transition(t - 1).t().dot(prev);
            let sum: f64 = next.iter().sum();
            out.push(next / sum);
        }
        out
    }

    /// Equivalent pairwise model. Hidden node `t` is node `t`; the
    /// observation leaf for step `t` is node `steps + t`. The prior is
    /// folded into the first transition edge (or the first emission edge
    /// when there is a single step). Only steps listed in `observed_steps`
    /// are marked observed; the rest keep their leaves as ordinary nodes.
    pub fn to_pgm(&self, observed_steps: &[usize]) -> Result<(TreeGraph, Potentials)> {
        let t_len = self.steps;
        let d = self.hidden_dim();
        let mut dims = vec![d; t_len];
        dims.extend(std::iter::repeat(self.obs_dim()).take(t_len));
        let mut edges = Vec::with_capacity(2 * t_len - 1);
        for t in 0..t_len - 1 {
            edges.push((t, t + 1));
        }
        for t in 0..t_len {
            edges.push((t, t_len + t));
        }
        for &s in observed_steps {
            if s >= t_len {
                return Err(Error::InvalidModel(format!("observed step {s} out of range")));
            }
        }
        let observed: Vec<usize> = observed_steps.iter().map(|&s| t_len + s).collect();
        let graph = TreeGraph::tree(dims, edges, observed)?;

        let mut tables: Vec<Arc<Array2<f64>>> = Vec::with_capacity(2 * t_len - 1);
        for t in 0..t_len - 1 {
            if t == 0 {
                let mut first = self.transition(0).clone();
                for (r, mut row) in first.outer_iter_mut().enumerate() {
                    row.mapv_inplace(|v| v * self.prior[r]);
                }
                tables.push(Arc::new(first));
            } else {
                tables.push(self.transitions.shared(t));
            }
        }
        for t in 0..t_len {
            if t_len == 1 {
                let mut only = self.emission(0).clone();
                for (r, mut row) in only.outer_iter_mut().enumerate() {
                    row.mapv_inplace(|v| v * self.prior[r]);
                }
                tables.push(Arc::new(only));
            } else {
                tables.push(self.emissions.shared(t));
            }
        }
        Ok((graph, Potentials::from_shared(tables)))
    }
}

fn normalize(mut v: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numeric(format!("{what} lost all mass (normalizer {sum})")));
    }
    v.mapv_inplace(|x| x / sum);
    Ok(v)
}

/// Predicted aggregate observation distribution at step `t`:
/// `xi_t prop. E_t^T (alpha_t * beta_t)`.
pub fn update_xi(model: &HmmModel, t: usize, alpha: &Array1<f64>, beta: &Array1<f64>) -> Result<Array1<f64>> {
    let prod = alpha * beta;
    normalize(model.emission(t).t().dot(&prod), "predicted observation")
}

/// Observation message at step `t` from a scaling vector over symbols:
/// `gamma_t prop. E_t u`.
pub fn update_gamma(model: &HmmModel, t: usize, scaling: &Array1<f64>) -> Result<Array1<f64>> {
    normalize(model.emission(t).dot(scaling), "observation message")
}

/// Forward recursion `alpha_t prop. A_{t-1}^T (alpha_{t-1} * gamma_{t-1})`,
/// valid for `t >= 1`.
pub fn forward_step(
    model: &HmmModel,
    t: usize,
    alpha_prev: &Array1<f64>,
    gamma_prev: &Array1<f64>,
) -> Result<Array1<f64>> {
    let prod = alpha_prev * gamma_prev;
    normalize(model.transition(t - 1).t().dot(&prod), "forward message")
}

/// Backward recursion `beta_t prop. A_t (beta_{t+1} * gamma_{t+1})`, valid
/// for `t <= steps - 2`.
pub fn backward_step(
    model: &HmmModel,
    t: usize,
    beta_next: &Array1<f64>,
    gamma_next: &Array1<f64>,
) -> Result<Array1<f64>> {
    let prod = beta_next * gamma_next;
    normalize(model.transition(t).dot(&prod), "backward message")
}

fn scaling_vector(target: &Array1<f64>, xi: &Array1<f64>, t: usize) -> Result<Array1<f64>> {
    let mut u = Array1::zeros(target.len());
    for o in 0..target.len() {
        if target[o] == 0.0 {
            u[o] = 0.0;
        } else if xi[o] > 0.0 {
            u[o] = target[o] / xi[o];
        } else {
            return Err(Error::Infeasible(format!(
                "step {t} symbol {o} has target mass {} but predicted mass zero",
                target[o]
            )));
        }
    }
    Ok(u)
}

#[derive(Debug, Clone)]
pub struct CfbOptions {
    /// Convergence threshold on the largest pre-update residual in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for CfbOptions {
    fn default() -> Self {
        CfbOptions { tol: 1e-9, max_sweeps: 10_000 }
    }
}

/// State and diagnostics of a collective smoothing run.
#[derive(Debug)]
pub struct CfbResult {
    /// Hidden-state marginals per step, `alpha * beta * gamma` normalized.
    pub marginals: Vec<Array1<f64>>,
    pub alphas: Vec<Array1<f64>>,
    pub betas: Vec<Array1<f64>>,
    pub gammas: Vec<Array1<f64>>,
    /// Predicted observation distributions per step.
    pub xis: Vec<Array1<f64>>,
    /// Sinkhorn scaling vectors per step; ones where no observation was
    /// given.
    pub scalings: Vec<Array1<f64>>,
    /// Residual records keyed by time step.
    pub trace: Vec<SweepRecord>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Fits hidden marginals to aggregate observations by forward and backward
/// sweeps with Sinkhorn rescaling at each observed step. `observations[t]`
/// is the target distribution over symbols at step `t`, or `None` to leave
/// the step unconstrained. Residuals are measured immediately before each
/// step's own rescaling.
pub fn collective_forward_backward(
    model: &HmmModel,
    observations: &[Option<Array1<f64>>],
    opts: &CfbOptions,
) -> Result<CfbResult> {
    let t_len = model.steps();
    let d = model.hidden_dim();
    if observations.len() != t_len {
        return Err(Error::InvalidModel(format!(
            "expected {} observation slots, got {}",
            t_len,
            observations.len()
        )));
    }
    for (t, obs) in observations.iter().enumerate() {
        if let Some(y) = obs {
            if y.len() != model.obs_dim() {
                return Err(Error::InvalidModel(format!(
                    "observation at step {t} has length {}, expected {}",
                    y.len(),
                    model.obs_dim()
                )));
            }
            let sum: f64 = y.iter().sum();
            if y.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!(
                    "observation at step {t} is not a distribution"
                )));
            }
        }
    }

    // Unconstrained start: uniform observation messages, prior-propagated
    // forward pass, neutral backward pass.
    let uniform_d = Array1::from_elem(d, 1.0 / d as f64);
    let mut gammas = vec![uniform_d.clone(); t_len];
    let mut alphas = vec![model.prior().clone(); t_len];
    for t in 1..t_len {
        alphas[t] = forward_step(model, t, &alphas[t - 1], &gammas[t - 1])?;
    }
    let mut betas = vec![uniform_d.clone(); t_len];
    for t in (0..t_len.saturating_sub(1)).rev() {
        betas[t] = backward_step(model, t, &betas[t + 1], &gammas[t + 1])?;
    }
    let mut xis = Vec::with_capacity(t_len);
    for t in 0..t_len {
        xis.push(update_xi(model, t, &alphas[t], &betas[t])?);
    }
    let mut scalings = vec![Array1::ones(model.obs_dim()); t_len];

    let any_obs = observations.iter().any(Option::is_some);
    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut converged = !any_obs;
    let clock = std::time::Instant::now();

    while sweeps < opts.max_sweeps && !converged {
        sweeps += 1;
        let mut last_residual: std::collections::BTreeMap<usize, f64> = Default::default();
        let mut worst = 0.0f64;
        let rescale = |s: usize,
                           xis: &[Array1<f64>],
                           gammas: &mut [Array1<f64>],
                           scalings: &mut [Array1<f64>],
                           last_residual: &mut std::collections::BTreeMap<usize, f64>,
                           worst: &mut f64|
         -> Result<()> {
            if let Some(y) = &observations[s] {
                let fitted = normalize(&scalings[s] * &xis[s], "fitted observation")?;
                let r = crate::potential::l1_distance(&fitted, y);
                scalings[s] = scaling_vector(y, &xis[s], s)?;
                gammas[s] = update_gamma(model, s, &scalings[s])?;
                last_residual.insert(s, r);
                *worst = worst.max(r);
            }
            Ok(())
        };

        if t_len == 1 {
            rescale(0, &xis, &mut gammas, &mut scalings, &mut last_residual, &mut worst)?;
            xis[0] = update_xi(model, 0, &alphas[0], &betas[0])?;
        }
        for t in 1..t_len {
            rescale(t - 1, &xis, &mut gammas, &mut scalings, &mut last_residual, &mut worst)?;
            alphas[t] = forward_step(model, t, &alphas[t - 1], &gammas[t - 1])?;
            xis[t] = update_xi(model, t, &alphas[t], &betas[t])?;
        }
        for t in (0..t_len.saturating_sub(1)).rev() {
            rescale(t + 1, &xis, &mut gammas, &mut scalings, &mut last_residual, &mut worst)?;
            betas[t] = backward_step(model, t, &betas[t + 1], &gammas[t + 1])?;
            xis[t] = update_xi(model, t, &alphas[t], &betas[t])?;
        }

        trace.push(SweepRecord {
            sweep: sweeps,
            residuals: last_residual.into_iter().collect(),
            wall_ns: clock.elapsed().as_nanos() as u64,
        });
        if worst <= opts.tol {
            converged = true;
        }
    }

    let mut marginals = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let prod = &alphas[t] * &betas[t] * &gammas[t];
        marginals.push(normalize(prod, "hidden marginal")?);
    }
    Ok(CfbResult {
        marginals,
        alphas,
        betas,
        gammas,
        xis,
        scalings,
        trace,
        sweeps,
        converged,
    })
}

/// Exact posterior marginals given at most one observed symbol per step
/// (`None` marks a missing observation).
pub fn standard_forward_backward(
    model: &HmmModel,
    observations: &[Option<usize>],
) -> Result<Vec<Array1<f64>>> {
    let t_len = model.steps();
    if observations.len() != t_len {
        return Err(Error::InvalidModel(format!(
            "expected {} observation slots, got {}",
            t_len,
            observations.len()
        )));
    }
    let evidence = |t: usize| -> Result<Array1<f64>> {
        match observations[t] {
            None => Ok(Array1::ones(model.hidden_dim())),
            Some(o) => {
                if o >= model.obs_dim() {
                    return Err(Error::InvalidModel(format!(
                        "symbol {o} at step {t} out of range"
                    )));
                }
                Ok(model.emission(t).column(o).to_owned())
            }
        }
    };
    let mut alphas = vec![model.prior().clone(); t_len];
    for t in 1..t_len {
        let prod = &alphas[t - 1] * &evidence(t - 1)?;
        alphas[t] = normalize(model.transition(t - 1).t().dot(&prod), "forward message")?;
    }
    let mut betas = vec![Array1::ones(model.hidden_dim()); t_len];
    for t in (0..t_len - 1).rev() {
        let prod = &betas[t + 1] * &evidence(t + 1)?;
        betas[t] = normalize(model.transition(t).dot(&prod), "backward message")?;
    }
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        out.push(normalize(&alphas[t] * &betas[t] * &evidence(t)?, "posterior")?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::l1_distance;
    use ndarray::array;

    fn toy() -> HmmModel {
        HmmModel::homogeneous(
            4,
            array![0.5, 0.3, 0.2],
            array![[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.1, 0.3, 0.6]],
            array![[0.8, 0.2], [0.4, 0.6], [0.1, 0.9]],
        )
        .unwrap()
    }

    #[test]
    fn delta_observations_recover_the_exact_posterior() {
        // A point observation per step, written as a one-hot aggregate,
        // reduces collective smoothing to ordinary smoothing.
        let model = toy();
        let symbols = [0usize, 1, 1, 0];
        let aggregates: Vec<Option<Array1<f64>>> = symbols
            .iter()
            .map(|&o| {
                let mut y = Array1::zeros(2);
                y[o] = 1.0;
                Some(y)
            })
            .collect();
        let res = collective_forward_backward(
            &model,
            &aggregates,
            &CfbOptions { tol: 1e-13, ..Default::default() },
        )
        .unwrap();
        assert!(res.converged);
        let exact = standard_forward_backward(
            &model,
            &symbols.iter().map(|&o| Some(o)).collect::<Vec<_>>(),
        )
        .unwrap();
        for t in 0..4 {
            assert!(
                l1_distance(&res.marginals[t], &exact[t]) < 1e-10,
                "step {t}: {:?} vs {:?}",
                res.marginals[t],
                exact[t]
            );
        }
    }

    #[test]
    fn no_evidence_gives_the_propagated_prior() {
        let model = toy();
        let res = collective_forward_backward(
            &model,
            &[None, None, None, None],
            &CfbOptions::default(),
        )
        .unwrap();
        assert!(res.converged);
        assert_eq!(res.sweeps, 0);
        for (got, want) in res.marginals.iter().zip(model.propagated_prior()) {
            assert!(l1_distance(got, &want) < 1e-12);
        }
    }

    #[test]
    fn missing_middle_step_stays_unconstrained() {
        let model = toy();
        let y = Some(array![0.5, 0.5]);
        let res = collective_forward_backward(
            &model,
            &[y.clone(), None, None, y],
            &CfbOptions { tol: 1e-12, ..Default::default() },
        )
        .unwrap();
        assert!(res.converged);
        assert!(l1_distance(&res.gammas[1], &Array1::from_elem(3, 1.0 / 3.0)) < 1e-15);
        // Constrained steps hit their targets.
        let fitted = normalize(&res.scalings[0] * &res.xis[0], "t").unwrap();
        assert!(l1_distance(&fitted, &array![0.5, 0.5]) < 1e-11);
    }

    #[test]
    fn fitted_observations_match_targets_at_convergence() {
        let model = toy();
        let ys = [
            array![0.6, 0.4],
            array![0.2, 0.8],
            array![0.5, 0.5],
            array![0.35, 0.65],
        ];
        let aggregates: Vec<_> = ys.iter().cloned().map(Some).collect();
        let res = collective_forward_backward(
            &model,
            &aggregates,
            &CfbOptions { tol: 1e-12, ..Default::default() },
        )
        .unwrap();
        assert!(res.converged);
        for t in 0..4 {
            let fitted = normalize(&res.scalings[t] * &res.xis[t], "t").unwrap();
            assert!(l1_distance(&fitted, &ys[t]) < 1e-10, "step {t}");
        }
        // Residual trace is recorded per constrained step.
        assert_eq!(res.trace.last().unwrap().residuals.len(), 4);
    }

    #[test]
    fn single_step_chain_matches_bayes_rule() {
        let model = HmmModel::homogeneous(
            1,
            array![0.3, 0.7],
            Array2::eye(2),
            array![[0.9, 0.1], [0.2, 0.8]],
        )
        .unwrap();
        // Delta observation of symbol 0: posterior prop. prior * likelihood.
        let res = collective_forward_backward(
            &model,
            &[Some(array![1.0, 0.0])],
            &CfbOptions { tol: 1e-13, ..Default::default() },
        )
        .unwrap();
        assert!(res.converged);
        let post = array![0.3 * 0.9, 0.7 * 0.2];
        let post = &post / post.sum();
        assert!(l1_distance(&res.marginals[0], &post) < 1e-11);
    }

    #[test]
    fn pgm_conversion_reproduces_the_joint() {
        let model = HmmModel::homogeneous(
            2,
            array![0.4, 0.6],
            array![[0.9, 0.1], [0.3, 0.7]],
            array![[0.8, 0.2], [0.25, 0.75]],
        )
        .unwrap();
        let (g, pots) = model.to_pgm(&[0, 1]).unwrap();
        assert_eq!(g.node_count(), 4);
        assert!(g.is_tree());
        let joint = crate::dense::joint_distribution(&g, &pots, None).unwrap();
        for x0 in 0..2 {
            for x1 in 0..2 {
                for o0 in 0..2 {
                    for o1 in 0..2 {
                        let want = model.prior()[x0]
                            * model.transition(0)[[x0, x1]]
                            * model.emission(0)[[x0, o0]]
                            * model.emission(1)[[x1, o1]];
                        let got = joint[[x0, x1, o0, o1]];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn homogeneous_pgm_shares_tables() {
        let model = toy();
        let (_, pots) = model.to_pgm(&[0, 1, 2, 3]).unwrap();
        // Transition edges 1 and 2 alias one allocation; edge 0 carries the
        // prior fold and must not.
        assert!(std::ptr::eq(pots.table(1), pots.table(2)));
        assert!(!std::ptr::eq(pots.table(0), pots.table(1)));
        assert!(std::ptr::eq(pots.table(3), pots.table(4)));
    }

    #[test]
    fn model_validation_catches_bad_rows() {
        let bad = HmmModel::homogeneous(
            3,
            array![0.5, 0.5],
            array![[0.9, 0.2], [0.3, 0.7]],
            array![[1.0, 0.0], [0.0, 1.0]],
        );
        assert!(bad.is_err());
    }
}
