//! Attributed undirected graphs, GCN normalization and structural edits.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::sparse::Csr;

/// Label value for nodes whose class is unknown.
pub const UNLABELED: i64 = -1;

/// Undirected edge stored as `(min, max)`.
pub type Edge = (usize, usize);

pub fn edge(u: usize, v: usize) -> Edge {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

#[derive(Debug)]
pub struct Graph {
    features: Array2<f64>,
    edges: BTreeSet<Edge>,
    labels: Vec<i64>,
    num_classes: usize,
    adjacency: OnceLock<Vec<Vec<usize>>>,
}

impl Clone for Graph {
    fn clone(&self) -> Self {
        Graph {
            features: self.features.clone(),
            edges: self.edges.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            adjacency: self.adjacency.clone(),
        }
    }
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.edges == other.edges
            && self.features == other.features
    }
}

impl Graph {
    pub fn new(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = Edge>,
        labels: Vec<i64>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels
            .iter()
            .find(|&&l| l != UNLABELED && (l < 0 || l as usize >= num_classes))
        {
            return Err(Error::InvalidGraph(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) has an endpoint outside 0..{n}"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            set.insert(edge(u, v));
        }
        Ok(Graph {
            features,
            edges: set,
            labels,
            num_classes,
            adjacency: OnceLock::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        let l = self.labels[node];
        (l >= 0).then_some(l as usize)
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&edge(u, v))
    }

    /// Sorted neighbor lists, built on first use.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        self.adjacency.get_or_init(|| {
            let mut adj = vec![Vec::new(); self.num_nodes()];
            for &(u, v) in &self.edges {
                adj[u].push(v);
                adj[v].push(u);
            }
            for list in &mut adj {
                list.sort_unstable();
            }
            adj
        })
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency()[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency()[node].len()
    }

    /// Same structure and labels, different node attributes.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Graph> {
        if features.dim() != self.features.dim() {
            return Err(Error::shape(
                "with_features",
                format!("{:?}", self.features.dim()),
                format!("{:?}", features.dim()),
            ));
        }
        Ok(Graph {
            features,
            edges: self.edges.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            adjacency: self.adjacency.clone(),
        })
    }

    /// Appends nodes (with their attribute rows and labels) and extra edges.
    pub fn with_appended_nodes(
        &self,
        features: ArrayView2<'_, f64>,
        labels: &[i64],
        new_edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Graph> {
        if features.ncols() != self.num_features() || features.nrows() != labels.len() {
            return Err(Error::shape(
                "with_appended_nodes",
                format!("(k, {})", self.num_features()),
                format!("{:?} with {} labels", features.dim(), labels.len()),
            ));
        }
        let mut all = self.features.clone();
        all.append(Axis(0), features)
            .map_err(|e| Error::InvalidGraph(e.to_string()))?;
        let mut all_labels = self.labels.clone();
        all_labels.extend_from_slice(labels);
        Graph::new(
            all,
            self.edges.iter().copied().chain(new_edges),
            all_labels,
            self.num_classes,
        )
    }

    /// Induced subgraph on `nodes` (in the given order, which becomes the new indexing).
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Graph {
        let mut new_id = vec![usize::MAX; self.num_nodes()];
        for (i, &v) in nodes.iter().enumerate() {
            new_id[v] = i;
        }
        let mut features = Array2::zeros((nodes.len(), self.num_features()));
        for (i, &v) in nodes.iter().enumerate() {
            features.row_mut(i).assign(&self.features.row(v));
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| new_id[u] != usize::MAX && new_id[v] != usize::MAX)
            .map(|&(u, v)| edge(new_id[u], new_id[v]));
        let labels = nodes.iter().map(|&v| self.labels[v]).collect();
        Graph::new(features, edges, labels, self.num_classes)
            .expect("induced subgraph of a valid graph is valid")
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` where `D̃` is the degree matrix of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency(Csr);

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Csr {
        &self.0
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.0.to_dense()
    }
}

pub fn normalize_adjacency(graph: &Graph) -> NormalizedAdjacency {
    let n = graph.num_nodes();
    let deg: Vec<f64> = (0..n).map(|i| 1.0 + graph.degree(i) as f64).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * graph.num_edges());
    for i in 0..n {
        triplets.push((i, i, 1.0 / deg[i]));
    }
    for &(u, v) in graph.edges() {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    NormalizedAdjacency(Csr::from_triplets(n, n, triplets))
}

/// Largest connected component, re-indexed densely in increasing original id.
/// Returns the subgraph and the original id of every new node.
pub fn largest_connected_component_with_map(graph: &Graph) -> (Graph, Vec<usize>) {
    let n = graph.num_nodes();
    let mut comp = vec![usize::MAX; n];
    let mut best: Option<(usize, usize)> = None; // (size, component id)
    let mut ncomp = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        // Components are discovered in order of their minimum node id, so a
        // strict `>` keeps the earliest on ties.
        let mut stack = vec![start];
        comp[start] = ncomp;
        let mut size = 0;
        while let Some(u) = stack.pop() {
            size += 1;
            for &w in graph.neighbors(u) {
                if comp[w] == usize::MAX {
                    comp[w] = ncomp;
                    stack.push(w);
                }
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, ncomp));
        }
        ncomp += 1;
    }
    let Some((_, keep)) = best else {
        return (graph.clone(), Vec::new());
    };
    let nodes: Vec<usize> = (0..n).filter(|&v| comp[v] == keep).collect();
    (graph.induced_subgraph(&nodes), nodes)
}

pub fn largest_connected_component(graph: &Graph) -> Graph {
    largest_connected_component_with_map(graph).0
}

/// Uniform neighbor of `node`; an isolated node is its own neighbor.
pub fn sample_neighbor(graph: &Graph, node: usize, rng: &mut impl rand::Rng) -> Result<usize> {
    if node >= graph.num_nodes() {
        return Err(Error::InvalidArgument(format!(
            "node {node} outside 0..{}",
            graph.num_nodes()
        )));
    }
    let nbrs = graph.neighbors(node);
    if nbrs.is_empty() {
        return Ok(node);
    }
    Ok(nbrs[rng.random_range(0..nbrs.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditAction {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct EdgeEdit {
    pub pair: Edge,
    pub action: EditAction,
}

impl EdgeEdit {
    pub fn add(u: usize, v: usize) -> Self {
        EdgeEdit {
            pair: edge(u, v),
            action: EditAction::Add,
        }
    }

    pub fn remove(u: usize, v: usize) -> Self {
        EdgeEdit {
            pair: edge(u, v),
            action: EditAction::Remove,
        }
    }

    /// The edit that toggles `{u, v}` in `graph`.
    pub fn flip(graph: &Graph, u: usize, v: usize) -> Self {
        if graph.has_edge(u, v) {
            Self::remove(u, v)
        } else {
            Self::add(u, v)
        }
    }
}

impl fmt::Display for EdgeEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verb = match self.action {
            EditAction::Add => "add",
            EditAction::Remove => "remove",
        };
        write!(f, "{verb} {{{}, {}}}", self.pair.0, self.pair.1)
    }
}

/// Applies edits in order to a copy of `graph`. Each edit must be valid against
/// the state left by the edits before it.
pub fn apply_edge_edits(graph: &Graph, edits: &[EdgeEdit]) -> Result<Graph> {
    let n = graph.num_nodes();
    let mut edges = graph.edges.clone();
    for (index, e) in edits.iter().enumerate() {
        let (u, v) = e.pair;
        let invalid = |reason| Error::InvalidEdit {
            index,
            edit: e.to_string(),
            reason,
        };
        if u >= n || v >= n {
            return Err(invalid("endpoint out of range"));
        }
        if u == v {
            return Err(invalid("self-loop"));
        }
        let key = edge(u, v);
        match e.action {
            EditAction::Add => {
                if !edges.insert(key) {
                    return Err(invalid("edge already present"));
                }
            }
            EditAction::Remove => {
                if !edges.remove(&key) {
                    return Err(invalid("edge not present"));
                }
            }
        }
    }
    Ok(Graph {
        features: graph.features.clone(),
        edges,
        labels: graph.labels.clone(),
        num_classes: graph.num_classes,
        adjacency: OnceLock::new(),
    })
}

/// Rows `rows` of the feature matrix, copied.
pub fn feature_rows(graph: &Graph, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), graph.num_features()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&graph.features.slice(s![r, ..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn path3() -> Graph {
        Graph::new(Array2::zeros((3, 1)), [(0, 1), (1, 2)], vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn normalize_single_node() {
        let g = Graph::new(Array2::zeros((1, 1)), [], vec![0], 1).unwrap();
        assert_eq!(normalize_adjacency(&g).to_dense(), ndarray::array![[1.0]]);
    }

    #[test]
    fn normalize_two_nodes() {
        let g = Graph::new(Array2::zeros((2, 1)), [(0, 1)], vec![0, 0], 1).unwrap();
        let m = normalize_adjacency(&g).to_dense();
        for v in m.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn normalize_path() {
        let m = normalize_adjacency(&path3()).to_dense();
        assert_abs_diff_eq!(m[[0, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[[1, 1]], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[[2, 2]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[[0, 1]], 1.0 / 6f64.sqrt(), epsilon = 1e-15);
        assert_eq!(m[[0, 2]], 0.0);
        assert_eq!(m, m.t());
    }

    #[test]
    fn lcc_picks_larger_component() {
        let g = Graph::new(
            Array2::from_shape_fn((5, 1), |(i, _)| i as f64),
            [(0, 1), (2, 3), (3, 4)],
            vec![0; 5],
            1,
        )
        .unwrap();
        let (lcc, map) = largest_connected_component_with_map(&g);
        assert_eq!(lcc.num_nodes(), 3);
        assert_eq!(map, vec![2, 3, 4]);
        assert_eq!(lcc.features()[[0, 0]], 2.0);
        assert_eq!(lcc.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn lcc_tie_keeps_smallest_min_id() {
        let g = Graph::new(Array2::zeros((4, 1)), [(1, 3), (0, 2)], vec![0; 4], 1).unwrap();
        let (_, map) = largest_connected_component_with_map(&g);
        assert_eq!(map, vec![0, 2]);
    }

    #[test]
    fn lcc_empty_graph() {
        let g = Graph::new(Array2::zeros((0, 3)), [], vec![], 2).unwrap();
        assert_eq!(largest_connected_component(&g).num_nodes(), 0);
    }

    #[test]
    fn neighbor_sampling_rules() {
        let mut rng = crate::rng::Rng::seed_from_u64(1);
        let g = Graph::new(Array2::zeros((8, 1)), [(2, 7)], vec![0; 8], 1).unwrap();
        assert_eq!(sample_neighbor(&g, 2, &mut rng).unwrap(), 7);
        assert_eq!(sample_neighbor(&g, 3, &mut rng).unwrap(), 3);
        assert!(sample_neighbor(&g, 8, &mut rng).is_err());
    }

    #[test]
    fn neighbor_sampling_is_uniform() {
        let mut rng = crate::rng::Rng::seed_from_u64(2);
        let g = Graph::new(Array2::zeros((5, 1)), [(0, 1), (0, 2), (0, 4)], vec![0; 5], 1).unwrap();
        let mut counts = [0usize; 5];
        let draws = 30_000;
        for _ in 0..draws {
            counts[sample_neighbor(&g, 0, &mut rng).unwrap()] += 1;
        }
        for k in [1, 2, 4] {
            let f = counts[k] as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.01, "node {k}: {f}");
        }
    }

    #[test]
    fn edits_apply_and_validate() {
        let g = path3();
        assert_eq!(apply_edge_edits(&g, &[]).unwrap(), g);
        let tri = apply_edge_edits(&g, &[EdgeEdit::add(0, 2)]).unwrap();
        assert_eq!(tri.num_edges(), 3);
        let back = apply_edge_edits(&g, &[EdgeEdit::add(2, 0), EdgeEdit::remove(0, 2)]).unwrap();
        assert_eq!(back, g);
        let err = apply_edge_edits(&g, &[EdgeEdit::add(0, 2), EdgeEdit::add(0, 1)]).unwrap_err();
        assert!(err.to_string().contains("#1"), "{err}");
        assert!(apply_edge_edits(&g, &[EdgeEdit::remove(0, 2)]).is_err());
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert!(Graph::new(Array2::zeros((2, 1)), [(0, 0)], vec![0, 0], 1).is_err());
        assert!(Graph::new(Array2::zeros((2, 1)), [(0, 2)], vec![0, 0], 1).is_err());
        assert!(Graph::new(Array2::zeros((2, 1)), [], vec![0], 1).is_err());
        assert!(Graph::new(Array2::zeros((2, 1)), [], vec![0, 3], 2).is_err());
    }
}
