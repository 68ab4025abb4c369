//! Synthetic population data on a grid world.
//!
//! Agents live on a rectangular grid and move under a log-linear transition
//! law with four features: travel distance, alignment with a wind
//! direction, alignment with the direction to a goal cell, and a
//! stay-in-place bonus. Moves beyond a Chebyshev radius get probability
//! zero, so transition tables carry structural zeros.
//!
//! Sampling is deterministic per (seed, agent): every agent draws from its
//! own counter-mode stream, so populations can be sampled in any order or
//! in parallel and still reproduce bit-identically.

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};

use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::hmm::{HmmModel, Tables};
use crate::potential::{AggregateMarginal, Potentials};

/// Rectangular grid; state `i` sits at `(x, y) = (i % width, i / width)`
/// with unit spacing.
#[derive(Debug, Clone, Copy)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
}

impl GridWorld {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidModel(format!("degenerate grid {width}x{height}")));
        }
        Ok(GridWorld { width, height })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn position(&self, state: usize) -> (usize, usize) {
        (state % self.width, state / self.width)
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }
}

/// Feature weights of the movement law.
#[derive(Debug, Clone, Copy)]
pub struct TransitionWeights {
    /// Penalty per unit of travel distance.
    pub distance: f64,
    /// Preference for moving downwind.
    pub wind: f64,
    /// Preference for moving toward the goal.
    pub goal: f64,
    /// Bonus for staying put.
    pub stay: f64,
}

impl Default for TransitionWeights {
    fn default() -> Self {
        TransitionWeights { distance: 3.0, wind: 5.0, goal: 5.0, stay: 10.0 }
    }
}

/// Row-stochastic transition table for the grid movement law. `wind_angle`
/// is in radians, `goal` a grid cell, and `radius` the maximum Chebyshev
/// step; farther cells get probability zero.
pub fn loglinear_transition(
    grid: &GridWorld,
    weights: &TransitionWeights,
    wind_angle: f64,
    goal: (usize, usize),
    radius: usize,
) -> Result<Array2<f64>> {
    if goal.0 >= grid.width || goal.1 >= grid.height {
        return Err(Error::InvalidModel(format!("goal {goal:?} outside the grid")));
    }
    if radius == 0 {
        return Err(Error::InvalidModel("radius 0 would freeze every agent".into()));
    }
    let d = grid.cells();
    let wind = (wind_angle.cos(), wind_angle.sin());
    let mut table = Array2::zeros((d, d));
    for from in 0..d {
        let (x, y) = grid.position(from);
        let to_goal = (goal.0 as f64 - x as f64, goal.1 as f64 - y as f64);
        let goal_norm = (to_goal.0 * to_goal.0 + to_goal.1 * to_goal.1).sqrt();
        let mut row_sum = 0.0;
        for to in 0..d {
            let (tx, ty) = grid.position(to);
            let cheb = x.abs_diff(tx).max(y.abs_diff(ty));
            if cheb > radius {
                continue;
            }
            let disp = (tx as f64 - x as f64, ty as f64 - y as f64);
            let dist = (disp.0 * disp.0 + disp.1 * disp.1).sqrt();
            let mut energy = -weights.distance * dist;
            if dist > 0.0 {
                energy += weights.wind * (disp.0 * wind.0 + disp.1 * wind.1) / dist;
                if goal_norm > 0.0 {
                    energy += weights.goal * (disp.0 * to_goal.0 + disp.1 * to_goal.1)
                        / (dist * goal_norm);
                }
            } else {
                energy += weights.stay;
            }
            let p = energy.exp();
            table[[from, to]] = p;
            row_sum += p;
        }
        for to in 0..d {
            table[[from, to]] /= row_sum;
        }
    }
    Ok(table)
}

/// Initial distribution decaying exponentially with distance from one cell.
pub fn corner_initial(grid: &GridWorld, corner: (usize, usize), spread: f64) -> Result<Array1<f64>> {
    if corner.0 >= grid.width || corner.1 >= grid.height {
        return Err(Error::InvalidModel(format!("corner {corner:?} outside the grid")));
    }
    if !(spread > 0.0) {
        return Err(Error::InvalidModel(format!("spread must be positive, got {spread}")));
    }
    let mut p = Array1::zeros(grid.cells());
    for s in 0..grid.cells() {
        let (x, y) = grid.position(s);
        let dx = x as f64 - corner.0 as f64;
        let dy = y as f64 - corner.1 as f64;
        p[s] = (-(dx * dx + dy * dy).sqrt() / spread).exp();
    }
    let sum = p.sum();
    Ok(p / sum)
}

/// Even mixture of two exponential bumps.
pub fn two_cluster_initial(
    grid: &GridWorld,
    first: (usize, usize),
    second: (usize, usize),
    spread: f64,
) -> Result<Array1<f64>> {
    let a = corner_initial(grid, first, spread)?;
    let b = corner_initial(grid, second, spread)?;
    Ok((&a + &b) / 2.0)
}

/// How a sensor's response falls off with distance to the agent.
#[derive(Debug, Clone, Copy)]
pub enum SensorResponse {
    Gaussian { width: f64 },
    ExponentialDecay { scale: f64 },
}

/// Fixed sensors in the plane; an agent triggers exactly one per step, with
/// probability proportional to the response at its cell.
#[derive(Debug, Clone)]
pub struct SensorField {
    pub positions: Vec<(f64, f64)>,
    pub response: SensorResponse,
}

impl SensorField {
    /// Evenly spaced `nx * ny` sensor lattice over the grid's bounding box.
    pub fn lattice(grid: &GridWorld, nx: usize, ny: usize, response: SensorResponse) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidModel("a sensor lattice needs at least one sensor".into()));
        }
        let mut positions = Vec::with_capacity(nx * ny);
        let step_x = (grid.width.max(2) - 1) as f64 / nx as f64;
        let step_y = (grid.height.max(2) - 1) as f64 / ny as f64;
        for j in 0..ny {
            for i in 0..nx {
                positions.push((step_x * (i as f64 + 0.5), step_y * (j as f64 + 0.5)));
            }
        }
        Ok(SensorField { positions, response })
    }

    /// Row-stochastic emission table: cell by sensor.
    pub fn emission_table(&self, grid: &GridWorld) -> Result<Array2<f64>> {
        if self.positions.is_empty() {
            return Err(Error::InvalidModel("sensor field has no sensors".into()));
        }
        let scale_ok = match self.response {
            SensorResponse::Gaussian { width } => width > 0.0,
            SensorResponse::ExponentialDecay { scale } => scale > 0.0,
        };
        if !scale_ok {
            return Err(Error::InvalidModel("sensor response scale must be positive".into()));
        }
        let d = grid.cells();
        let k = self.positions.len();
        let mut table = Array2::zeros((d, k));
        for s in 0..d {
            let (x, y) = grid.position(s);
            let mut row_sum = 0.0;
            for (j, &(px, py)) in self.positions.iter().enumerate() {
                let dx = x as f64 - px;
                let dy = y as f64 - py;
                let dist2 = dx * dx + dy * dy;
                let r = match self.response {
                    SensorResponse::Gaussian { width } => (-dist2 / (2.0 * width * width)).exp(),
                    SensorResponse::ExponentialDecay { scale } => (-dist2.sqrt() / scale).exp(),
                };
                table[[s, j]] = r;
                row_sum += r;
            }
            for j in 0..k {
                table[[s, j]] /= row_sum;
            }
        }
        Ok(table)
    }
}

/// Chain model for a grid population: homogeneous movement law plus sensor
/// emissions.
pub fn grid_hmm(
    grid: &GridWorld,
    weights: &TransitionWeights,
    wind_angle: f64,
    goal: (usize, usize),
    radius: usize,
    initial: Array1<f64>,
    sensors: &SensorField,
    steps: usize,
) -> Result<HmmModel> {
    let transition = loglinear_transition(grid, weights, wind_angle, goal, radius)?;
    let emission = sensors.emission_table(grid)?;
    HmmModel::new(
        steps,
        initial,
        Tables::homogeneous(transition),
        Tables::homogeneous(emission),
    )
}

/// Sampled hidden trajectories plus their per-step state histograms.
#[derive(Debug)]
pub struct PopulationSample {
    /// `trajectories[agent][t]` is the agent's state at step `t`.
    pub trajectories: Vec<Vec<usize>>,
    /// `counts[t][x]` is how many agents sat in state `x` at step `t`.
    pub counts: Vec<Array1<f64>>,
}

fn agent_rng(seed: u64, agent: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent);
    rng
}

/// Samples `agents` independent trajectories. Agent `a` uses stream `a` of
/// a counter-mode generator keyed by `seed`, so the result does not depend
/// on sampling order.
pub fn sample_population(model: &HmmModel, agents: usize, seed: u64) -> Result<PopulationSample> {
    let t_len = model.steps();
    let d = model.hidden_dim();
    let prior_dist = WeightedIndex::new(model.prior().iter().copied())
        .map_err(|e| Error::InvalidModel(format!("prior not sampleable: {e}")))?;
    let mut step_dists: Vec<Vec<WeightedIndex<f64>>> = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len - 1 {
        let table = model.transition(t);
        let rows: Vec<WeightedIndex<f64>> = (0..d)
            .map(|r| {
                WeightedIndex::new(table.row(r).iter().copied()).map_err(|e| {
                    Error::InvalidModel(format!("transition row {r} at step {t} not sampleable: {e}"))
                })
            })
            .collect::<Result<_>>()?;
        step_dists.push(rows);
    }

    let mut trajectories = Vec::with_capacity(agents);
    let mut counts = vec![Array1::zeros(d); t_len];
    for a in 0..agents {
        let mut rng = agent_rng(seed, a as u64);
        let mut path = Vec::with_capacity(t_len);
        let mut x = prior_dist.sample(&mut rng);
        path.push(x);
        counts[0][x] += 1.0;
        for t in 1..t_len {
            x = step_dists[t - 1][x].sample(&mut rng);
            path.push(x);
            counts[t][x] += 1.0;
        }
        trajectories.push(path);
    }
    Ok(PopulationSample { trajectories, counts })
}

/// Per-step histograms of sampled observation symbols, one draw per agent
/// per step. Use a seed distinct from the trajectory seed; agents again get
/// independent streams.
pub fn observe_histograms(
    model: &HmmModel,
    sample: &PopulationSample,
    seed: u64,
) -> Result<Vec<Array1<f64>>> {
    let t_len = model.steps();
    let d = model.hidden_dim();
    let mut row_dists: Vec<Vec<WeightedIndex<f64>>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let table = model.emission(t);
        let rows: Vec<WeightedIndex<f64>> = (0..d)
            .map(|r| {
                WeightedIndex::new(table.row(r).iter().copied()).map_err(|e| {
                    Error::InvalidModel(format!("emission row {r} at step {t} not sampleable: {e}"))
                })
            })
            .collect::<Result<_>>()?;
        row_dists.push(rows);
    }
    let mut hists = vec![Array1::zeros(model.obs_dim()); t_len];
    for (a, path) in sample.trajectories.iter().enumerate() {
        if path.len() != t_len {
            return Err(Error::InvalidModel(format!(
                "trajectory {a} has length {}, expected {t_len}",
                path.len()
            )));
        }
        let mut rng = agent_rng(seed, a as u64);
        for (t, &x) in path.iter().enumerate() {
            let o = row_dists[t][x].sample(&mut rng);
            hists[t][o] += 1.0;
        }
    }
    Ok(hists)
}

/// Entrywise Poisson thinning of a count vector: each state's noisy count
/// is `Poisson(rate * count)`.
pub fn observe_poisson(counts: &Array1<f64>, rate: f64, rng: &mut impl Rng) -> Result<Array1<f64>> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidModel(format!("rate must be positive, got {rate}")));
    }
    let mut out = Array1::zeros(counts.len());
    for (o, &c) in out.iter_mut().zip(counts.iter()) {
        if c < 0.0 || !c.is_finite() {
            return Err(Error::InvalidModel(format!("negative or non-finite count {c}")));
        }
        let lambda = rate * c;
        if lambda > 0.0 {
            let p = Poisson::new(lambda)
                .map_err(|e| Error::InvalidModel(format!("bad Poisson rate {lambda}: {e}")))?;
            *o = p.sample(rng);
        }
    }
    Ok(out)
}

/// Cyclic test instance: a four-node ring, one observed leaf hanging off
/// each ring node, every variable `dim`-valued. Potentials are `exp(I + Q)`
/// with standard normal `Q`, so couplings are random but favor agreement;
/// each leaf gets a random normalized observation target.
pub fn build_loopy_instance(
    dim: usize,
    seed: u64,
) -> Result<(TreeGraph, Potentials, Vec<AggregateMarginal>)> {
    if dim == 0 {
        return Err(Error::InvalidModel("dimension 0".into()));
    }
    let edges = vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 5), (2, 6), (3, 7)];
    let graph = TreeGraph::with_cycles(vec![dim; 8], edges, [4, 5, 6, 7])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tables = Vec::with_capacity(graph.edge_count());
    for _ in 0..graph.edge_count() {
        let mut t = Array2::zeros((dim, dim));
        for r in 0..dim {
            for c in 0..dim {
                let base = if r == c { 1.0 } else { 0.0 };
                t[[r, c]] = (base + normal.sample(&mut rng)).exp();
            }
        }
        tables.push(std::sync::Arc::new(t));
    }
    let mut targets = Vec::with_capacity(4);
    for leaf in 4..8 {
        let raw = Array1::from_iter((0..dim).map(|_| rng.random::<f64>()));
        targets.push(AggregateMarginal::normalized(leaf, raw)?);
    }
    Ok((graph, Potentials::from_shared(tables), targets))
}
