//! On-disk formats for models, observations, and solver traces.
//!
//! Two JSON model formats and a handful of CSV schemas:
//!
//! * Pairwise model: `{nodes: [{id, dim, observed}], edges: [{i, j,
//!   table}], directed: [{child, parents, table}]}`. Edge tables are
//!   row-major `d_i x d_j` with `i < j`. The `directed` section is
//!   optional and mutually exclusive with `edges`; it describes a Bayesian
//!   network to be moralized by the caller.
//! * Hidden Markov chain: `{T, hidden_dim, obs_dim, pi, transition,
//!   emission}`. `transition` is row-major with rows indexed by the
//!   source state. `emission` rows are indexed by the observation symbol,
//!   so the flat layout is the transpose of the in-memory table.
//! * Aggregate observations: a headerless numeric CSV, one row per time
//!   step, one column per observation symbol.
//! * Traces: small headed CSVs, `(sweep, node, residual)` for scaling
//!   sweeps, `(iter, residual, energy)` for the variational solvers,
//!   `(node, state, prob)` for marginals, and `(t, <index>, count)` in
//!   tidy form for simulator output.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineTrace;
use crate::error::{Error, Result};
use crate::graph::TreeGraph;
use crate::hmm::HmmModel;
use crate::potential::{EdgePotential, MarginalSet, Potentials};
use crate::sbp::SweepRecord;
use crate::transform::{Cpt, DirectedModel};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    id: usize,
    dim: usize,
    observed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeSpec {
    i: usize,
    j: usize,
    table: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorSpec {
    child: usize,
    parents: Vec<usize>,
    table: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    nodes: Vec<NodeSpec>,
    edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    directed: Vec<FactorSpec>,
}

/// A parsed model file, either ready-to-solve pairwise form or a Bayesian
/// network still to be moralized.
#[derive(Debug)]
pub enum ModelSource {
    Undirected { graph: TreeGraph, potentials: Potentials },
    Directed { model: DirectedModel, observed: Vec<usize> },
}

fn parse_error(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {msg}", path.display()))
}

/// Node records sorted by id; ids must be exactly `0..n`.
fn node_dims(path: &Path, nodes: &[NodeSpec]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = nodes.len();
    let mut dims = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut observed = Vec::new();
    for rec in nodes {
        if rec.id >= n || seen[rec.id] {
            return Err(parse_error(path, format!("node ids must cover 0..{n} once; saw {} twice or out of range", rec.id)));
        }
        seen[rec.id] = true;
        dims[rec.id] = rec.dim;
        if rec.observed {
            observed.push(rec.id);
        }
    }
    Ok((dims, observed))
}

/// Reads a pairwise or directed model file.
pub fn read_model(path: &Path) -> Result<ModelSource> {
    let text = fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    let (dims, observed) = node_dims(path, &file.nodes)?;
    if !file.directed.is_empty() {
        if !file.edges.is_empty() {
            return Err(parse_error(path, "a model carries either edges or a directed section, not both"));
        }
        let model = directed_from_specs(path, &dims, file.directed)?;
        return Ok(ModelSource::Directed { model, observed });
    }
    let mut pots = Vec::with_capacity(file.edges.len());
    let mut edges = Vec::with_capacity(file.edges.len());
    for spec in file.edges {
        let (di, dj) = match (dims.get(spec.i), dims.get(spec.j)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(parse_error(path, format!("edge ({}, {}) leaves the node range", spec.i, spec.j))),
        };
        if spec.table.len() != di * dj {
            return Err(parse_error(path, format!(
                "edge ({}, {}) table has {} entries, expected {}",
                spec.i, spec.j, spec.table.len(), di * dj
            )));
        }
        let table = Array2::from_shape_vec((di, dj), spec.table).expect("length checked");
        edges.push((spec.i, spec.j));
        pots.push(EdgePotential::with_zeros(spec.i, spec.j, table)?);
    }
    let graph = TreeGraph::with_cycles(dims, edges, observed)?;
    let potentials = Potentials::from_edge_potentials(&graph, pots)?;
    Ok(ModelSource::Undirected { graph, potentials })
}

fn directed_from_specs(path: &Path, dims: &[usize], specs: Vec<FactorSpec>) -> Result<DirectedModel> {
    let n = dims.len();
    if specs.len() != n {
        return Err(parse_error(path, format!("{} factors for {n} nodes; every node needs exactly one", specs.len())));
    }
    let mut cpts: Vec<Option<Cpt>> = (0..n).map(|_| None).collect();
    for spec in specs {
        let c = spec.child;
        if c >= n || cpts[c].is_some() {
            return Err(parse_error(path, format!("factor child {c} duplicated or out of range")));
        }
        let dc = dims[c];
        let pdims: Vec<usize> = spec
            .parents
            .iter()
            .map(|&p| dims.get(p).copied().ok_or_else(|| parse_error(path, format!("parent {p} of node {c} out of range"))))
            .collect::<Result<_>>()?;
        let expect: usize = pdims.iter().product::<usize>() * dc;
        if spec.table.len() != expect {
            return Err(parse_error(path, format!(
                "factor for node {c} has {} entries, expected {expect}",
                spec.table.len()
            )));
        }
        let cpt = match spec.parents.as_slice() {
            [] => Cpt::Root(Array1::from_vec(spec.table)),
            [p] => Cpt::One {
                parent: *p,
                table: Array2::from_shape_vec((pdims[0], dc), spec.table).expect("length checked"),
            },
            [a, b] => Cpt::Two {
                parents: (*a, *b),
                table: Array3::from_shape_vec((pdims[0], pdims[1], dc), spec.table).expect("length checked"),
            },
            more => {
                return Err(parse_error(path, format!("node {c} lists {} parents; at most two are supported", more.len())))
            }
        };
        cpts[c] = Some(cpt);
    }
    DirectedModel::new(dims.to_vec(), cpts.into_iter().map(|c| c.expect("all slots filled")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_error(path, e))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes a pairwise model.
pub fn write_model(path: &Path, graph: &TreeGraph, potentials: &Potentials) -> Result<()> {
    let nodes = (0..graph.node_count())
        .map(|v| NodeSpec { id: v, dim: graph.dim(v), observed: graph.is_observed(v) })
        .collect();
    let edges = (0..graph.edge_count())
        .map(|e| {
            let (i, j) = graph.edge_endpoints(e);
            EdgeSpec { i, j, table: potentials.table(e).iter().copied().collect() }
        })
        .collect();
    write_json(path, &ModelFile { nodes, edges, directed: Vec::new() })
}

/// Writes a Bayesian network with its observation flags.
pub fn write_directed_model(path: &Path, model: &DirectedModel, observed: &[usize]) -> Result<()> {
    let nodes = (0..model.node_count())
        .map(|v| NodeSpec { id: v, dim: model.dims()[v], observed: observed.contains(&v) })
        .collect();
    let directed = (0..model.node_count())
        .map(|v| match model.cpt(v) {
            Cpt::Root(p) => FactorSpec { child: v, parents: vec![], table: p.to_vec() },
            Cpt::One { parent, table } => FactorSpec {
                child: v,
                parents: vec![*parent],
                table: table.iter().copied().collect(),
            },
            Cpt::Two { parents, table } => FactorSpec {
                child: v,
                parents: vec![parents.0, parents.1],
                table: table.iter().copied().collect(),
            },
        })
        .collect();
    write_json(path, &ModelFile { nodes, edges: Vec::new(), directed })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HmmFile {
    #[serde(rename = "T")]
    steps: usize,
    hidden_dim: usize,
    obs_dim: usize,
    pi: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
}

/// Writes a time-homogeneous chain model. Models with per-step tables
/// have no file form and are rejected.
pub fn write_hmm(path: &Path, model: &HmmModel) -> Result<()> {
    let d = model.hidden_dim();
    let k = model.obs_dim();
    for t in 1..model.steps() {
        if t < model.steps() - 1 && model.transition(t) != model.transition(0) {
            return Err(Error::InvalidModel("per-step transition tables have no file form".into()));
        }
        if model.emission(t) != model.emission(0) {
            return Err(Error::InvalidModel("per-step emission tables have no file form".into()));
        }
    }
    let tr = if model.steps() > 1 {
        model.transition(0).iter().copied().collect()
    } else {
        // A single-step chain never applies its transition; store the
        // identity so the file stays well-formed.
        Array2::eye(d).iter().copied().collect()
    };
    let em = model.emission(0);
    let mut em_rows = Vec::with_capacity(d * k);
    for o in 0..k {
        for x in 0..d {
            em_rows.push(em[[x, o]]);
        }
    }
    let file = HmmFile {
        steps: model.steps(),
        hidden_dim: d,
        obs_dim: k,
        pi: model.prior().to_vec(),
        transition: tr,
        emission: em_rows,
    };
    write_json(path, &file)
}

/// Reads a chain model written by [`write_hmm`].
pub fn read_hmm(path: &Path) -> Result<HmmModel> {
    let text = fs::read_to_string(path)?;
    let file: HmmFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
    let d = file.hidden_dim;
    let k = file.obs_dim;
    if file.pi.len() != d {
        return Err(parse_error(path, format!("pi has {} entries, expected {d}", file.pi.len())));
    }
    if file.transition.len() != d * d {
        return Err(parse_error(path, format!("transition has {} entries, expected {}", file.transition.len(), d * d)));
    }
    if file.emission.len() != k * d {
        return Err(parse_error(path, format!("emission has {} entries, expected {}", file.emission.len(), k * d)));
    }
    let transition = Array2::from_shape_vec((d, d), file.transition).expect("length checked");
    let mut emission = Array2::zeros((d, k));
    for o in 0..k {
        for x in 0..d {
            emission[[x, o]] = file.emission[o * d + x];
        }
    }
    HmmModel::homogeneous(file.steps, Array1::from_vec(file.pi), transition, emission)
}

/// Writes per-step observation vectors as a headerless numeric matrix.
pub fn write_observation_csv(path: &Path, rows: &[Array1<f64>]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| parse_error(path, e))?;
    for row in rows {
        wtr.serialize(row.to_vec()).map_err(|e| parse_error(path, e))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a headerless numeric matrix; all rows must share one width.
pub fn read_observation_csv(path: &Path) -> Result<Vec<Array1<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| parse_error(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<Vec<f64>>() {
        let rec = rec.map_err(|e| parse_error(path, e))?;
        rows.push(Array1::from_vec(rec));
    }
    if let Some(w) = rows.first().map(|r| r.len()) {
        if let Some(bad) = rows.iter().position(|r| r.len() != w) {
            return Err(parse_error(path, format!("row {bad} has {} columns, expected {w}", rows[bad].len())));
        }
    }
    Ok(rows)
}

/// Tidy per-step counts: header `t,<index_name>,count`, one row per
/// (step, index) pair.
pub fn write_tidy_counts(path: &Path, index_name: &str, steps: &[Array1<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| parse_error(path, e))?;
    wtr.write_record(["t", index_name, "count"]).map_err(|e| parse_error(path, e))?;
    for (t, row) in steps.iter().enumerate() {
        for (idx, &v) in row.iter().enumerate() {
            wtr.serialize((t, idx, v)).map_err(|e| parse_error(path, e))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Scaling-sweep residual trace: `sweep,node,residual`.
pub fn write_sweep_csv(path: &Path, trace: &[SweepRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| parse_error(path, e))?;
    wtr.write_record(["sweep", "node", "residual"]).map_err(|e| parse_error(path, e))?;
    for rec in trace {
        for &(node, residual) in &rec.residuals {
            wtr.serialize((rec.sweep, node, residual)).map_err(|e| parse_error(path, e))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Variational-solver trace: `iter,residual,energy`.
pub fn write_baseline_csv(path: &Path, trace: &[BaselineTrace]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| parse_error(path, e))?;
    wtr.write_record(["iter", "residual", "energy"]).map_err(|e| parse_error(path, e))?;
    for rec in trace {
        wtr.serialize((rec.iter, rec.residual, rec.energy)).map_err(|e| parse_error(path, e))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Node marginals: `node,state,prob`.
pub fn write_marginals_csv(path: &Path, marginals: &MarginalSet) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| parse_error(path, e))?;
    wtr.write_record(["node", "state", "prob"]).map_err(|e| parse_error(path, e))?;
    for (v, m) in marginals.nodes.iter().enumerate() {
        for (s, &p) in m.iter().enumerate() {
            wtr.serialize((v, s, p)).map_err(|e| parse_error(path, e))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Per-step marginal vectors as `t,state,prob` rows.
pub fn write_step_marginals_csv(path: &Path, steps: &[Array1<f64>]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| parse_error(path, e))?;
    wtr.write_record(["node", "state", "prob"]).map_err(|e| parse_error(path, e))?;
    for (t, m) in steps.iter().enumerate() {
        for (s, &p) in m.iter().enumerate() {
            wtr.serialize((t, s, p)).map_err(|e| parse_error(path, e))?;
        }
    }
    wtr.flush()?;
    Ok(())
}
