//! Undirected graph structure for pairwise models.
//!
//! Nodes are indexed `0..n`, each carrying a finite state dimension. A subset
//! of nodes is marked observed: those are the nodes whose aggregate marginals
//! are constrained during solving. Most solvers require a tree; cyclic graphs
//! are permitted only through the explicit [`TreeGraph::with_cycles`]
//! constructor and are handled best-effort.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Adjacency entry: neighboring node plus the id of the connecting edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub node: usize,
    pub edge: usize,
}

/// Why an edge list fails to be a tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeDefect {
    SelfLoop(usize),
    DuplicateEdge(usize, usize),
    EndpointOutOfRange(usize),
    /// Node sequence of the first cycle found.
    Cycle(Vec<usize>),
    /// Nodes of the first component not reachable from node 0.
    Disconnected(Vec<usize>),
    Empty,
}

impl fmt::Display for TreeDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeDefect::SelfLoop(v) => write!(f, "self-loop at node {v}"),
            TreeDefect::DuplicateEdge(i, j) => write!(f, "duplicate edge ({i}, {j})"),
            TreeDefect::EndpointOutOfRange(v) => write!(f, "edge endpoint {v} out of range"),
            TreeDefect::Cycle(c) => {
                let s: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                write!(f, "cycle {}", s.join("-"))
            }
            TreeDefect::Disconnected(comp) => {
                let s: Vec<String> = comp.iter().map(|v| v.to_string()).collect();
                write!(f, "disconnected component {{{}}}", s.join(", "))
            }
            TreeDefect::Empty => write!(f, "graph has no nodes"),
        }
    }
}

/// Result of [`validate_tree`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeCheck {
    pub is_tree: bool,
    pub defect: Option<TreeDefect>,
}

/// Checks whether `edges` on `node_count` nodes form a single connected tree.
/// The diagnostic names the first defect found: a structural problem with the
/// edge list itself, the first cycle, or the first disconnected component.
pub fn validate_tree(node_count: usize, edges: &[(usize, usize)]) -> TreeCheck {
    if node_count == 0 {
        return TreeCheck { is_tree: false, defect: Some(TreeDefect::Empty) };
    }
    let mut seen = BTreeSet::new();
    for &(i, j) in edges {
        if i == j {
            return TreeCheck { is_tree: false, defect: Some(TreeDefect::SelfLoop(i)) };
        }
        if i >= node_count || j >= node_count {
            let v = if i >= node_count { i } else { j };
            return TreeCheck { is_tree: false, defect: Some(TreeDefect::EndpointOutOfRange(v)) };
        }
        let key = (i.min(j), i.max(j));
        if !seen.insert(key) {
            return TreeCheck { is_tree: false, defect: Some(TreeDefect::DuplicateEdge(key.0, key.1)) };
        }
    }
    let mut adj = vec![Vec::new(); node_count];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
    }
    // DFS with parent tracking; a visited non-parent neighbor closes a cycle.
    let mut parent = vec![usize::MAX; node_count];
    let mut state = vec![0u8; node_count]; // 0 unvisited, 1 visited
    let mut stack = vec![(0usize, usize::MAX)];
    while let Some((v, par)) = stack.pop() {
        if state[v] == 1 {
            continue;
        }
        state[v] = 1;
        parent[v] = par;
        for &w in adj[v].iter().rev() {
            if w == par {
                continue;
            }
            if state[w] == 1 {
                // Reconstruct the cycle w .. v, w.
                let mut cyc = vec![w];
                let mut cur = v;
                while cur != w && cur != usize::MAX {
                    cyc.push(cur);
                    cur = parent[cur];
                }
                cyc.reverse();
                return TreeCheck { is_tree: false, defect: Some(TreeDefect::Cycle(cyc)) };
            }
            stack.push((w, v));
        }
    }
    let unreached: Vec<usize> = (0..node_count).filter(|&v| state[v] == 0).collect();
    if !unreached.is_empty() {
        // Report the whole component containing the smallest unreached node.
        let seed = unreached[0];
        let mut comp = BTreeSet::new();
        let mut stack = vec![seed];
        while let Some(v) = stack.pop() {
            if !comp.insert(v) {
                continue;
            }
            stack.extend(adj[v].iter().copied());
        }
        return TreeCheck {
            is_tree: false,
            defect: Some(TreeDefect::Disconnected(comp.into_iter().collect())),
        };
    }
    if edges.len() != node_count - 1 {
        // Connected and acyclic implies n-1 edges, so this is unreachable,
        // but keep the invariant explicit.
        return TreeCheck { is_tree: false, defect: Some(TreeDefect::Empty) };
    }
    TreeCheck { is_tree: true, defect: None }
}

/// Connected pairwise graph with per-node state dimensions and an observed
/// node set.
#[derive(Debug, Clone)]
pub struct TreeGraph {
    dims: Vec<usize>,
    edges: Vec<(usize, usize)>,
    adj: Vec<Vec<Neighbor>>,
    observed: BTreeSet<usize>,
    is_tree: bool,
}

impl TreeGraph {
    /// Builds a tree. Fails with a diagnostic if the edges contain a cycle or
    /// do not connect all nodes.
    pub fn tree(
        dims: Vec<usize>,
        edges: Vec<(usize, usize)>,
        observed: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let check = validate_tree(dims.len(), &edges);
        if !check.is_tree {
            return Err(Error::NotATree(
                check.defect.map(|d| d.to_string()).unwrap_or_default(),
            ));
        }
        Self::build(dims, edges, observed, true)
    }

    /// Builds a connected graph that may contain cycles. Solvers treat such
    /// graphs best-effort; callers opt in explicitly.
    pub fn with_cycles(
        dims: Vec<usize>,
        edges: Vec<(usize, usize)>,
        observed: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let check = validate_tree(dims.len(), &edges);
        match check.defect {
            None | Some(TreeDefect::Cycle(_)) => {}
            Some(d) => return Err(Error::InvalidModel(d.to_string())),
        }
        Self::build(dims, edges, observed, check.is_tree)
    }

    fn build(
        dims: Vec<usize>,
        edges: Vec<(usize, usize)>,
        observed: impl IntoIterator<Item = usize>,
        is_tree: bool,
    ) -> Result<Self> {
        let n = dims.len();
        if let Some(d) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidModel(format!("node {d} has dimension 0")));
        }
        let edges: Vec<(usize, usize)> = edges
            .into_iter()
            .map(|(i, j)| (i.min(j), i.max(j)))
            .collect();
        let mut adj = vec![Vec::new(); n];
        for (e, &(i, j)) in edges.iter().enumerate() {
            adj[i].push(Neighbor { node: j, edge: e });
            adj[j].push(Neighbor { node: i, edge: e });
        }
        for a in adj.iter_mut() {
            a.sort_by_key(|nb| nb.node);
        }
        let mut obs = BTreeSet::new();
        for v in observed {
            if v >= n {
                return Err(Error::InvalidModel(format!("observed node {v} out of range")));
            }
            obs.insert(v);
        }
        Ok(TreeGraph { dims, edges, adj, observed: obs, is_tree })
    }

    /// Replaces the observed set.
    pub fn with_observed(mut self, observed: impl IntoIterator<Item = usize>) -> Result<Self> {
        let n = self.node_count();
        let mut obs = BTreeSet::new();
        for v in observed {
            if v >= n {
                return Err(Error::InvalidModel(format!("observed node {v} out of range")));
            }
            obs.insert(v);
        }
        self.observed = obs;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        self.dims.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn dim(&self, node: usize) -> usize {
        self.dims[node]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adj[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[Neighbor] {
        &self.adj[node]
    }

    /// Edge endpoints with the lower node first.
    pub fn edge_endpoints(&self, edge: usize) -> (usize, usize) {
        self.edges[edge]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_id(&self, i: usize, j: usize) -> Option<usize> {
        self.adj[i].iter().find(|nb| nb.node == j).map(|nb| nb.edge)
    }

    pub fn observed(&self) -> &BTreeSet<usize> {
        &self.observed
    }

    pub fn is_observed(&self, node: usize) -> bool {
        self.observed.contains(&node)
    }

    pub fn is_tree(&self) -> bool {
        self.is_tree
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.adj[node].len() == 1
    }

    /// Shortest path between two nodes as a node sequence, endpoints
    /// included. On a tree this is the unique path.
    pub fn path(&self, from: usize, to: usize) -> Result<Vec<usize>> {
        let n = self.node_count();
        if from >= n || to >= n {
            return Err(Error::InvalidModel("path endpoint out of range".into()));
        }
        if from == to {
            return Ok(vec![from]);
        }
        let mut parent = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        parent[from] = from;
        queue.push_back(from);
        while let Some(v) = queue.pop_front() {
            if v == to {
                break;
            }
            for nb in &self.adj[v] {
                if parent[nb.node] == usize::MAX {
                    parent[nb.node] = v;
                    queue.push_back(nb.node);
                }
            }
        }
        if parent[to] == usize::MAX {
            return Err(Error::InvalidModel(format!("no path from {from} to {to}")));
        }
        let mut path = vec![to];
        let mut cur = to;
        while cur != from {
            cur = parent[cur];
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    /// BFS order from `root` together with the parent of each visited node.
    /// Parents of the root and of unreachable nodes are `usize::MAX`.
    pub fn bfs_order(&self, root: usize) -> (Vec<usize>, Vec<usize>) {
        let n = self.node_count();
        let mut order = Vec::with_capacity(n);
        let mut parent = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        seen[root] = true;
        queue.push_back(root);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for nb in &self.adj[v] {
                if !seen[nb.node] {
                    seen[nb.node] = true;
                    parent[nb.node] = v;
                    queue.push_back(nb.node);
                }
            }
        }
        (order, parent)
    }
}
