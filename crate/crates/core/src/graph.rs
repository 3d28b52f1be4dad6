//! Undirected labeled graphs and the elementary algorithms the rest of the
//! crate builds on: BFS hop distances, connectivity and the virtual-node
//! transform.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node label reserved for the virtual node. Atom labels are atomic numbers
/// (or arbitrary small ids for explicit graphs), so this never collides.
pub const VIRTUAL_NODE_LABEL: u32 = 1000;

/// Edge label used for the spokes connecting the virtual node.
pub const VIRTUAL_EDGE_LABEL: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("edge ({u}, {v}) references a node outside 0..{num_nodes}")]
    NodeOutOfRange { u: usize, v: usize, num_nodes: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is disconnected: node {from} cannot reach node {to}")]
    Disconnected { from: usize, to: usize },
    #[error("graph has no nodes")]
    Empty,
}

/// One undirected edge, stored once with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub label: u32,
}

/// Undirected graph with categorical node and edge labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    node_labels: Vec<u32>,
    edges: Vec<Edge>,
}

impl Graph {
    /// Builds a graph, normalizing every edge to `u < v` and rejecting
    /// self-loops, duplicates and out-of-range endpoints.
    pub fn new(
        node_labels: Vec<u32>,
        edges: impl IntoIterator<Item = (usize, usize, u32)>,
    ) -> Result<Self, GraphError> {
        let n = node_labels.len();
        let mut out: Vec<Edge> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (a, b, label) in edges {
            if a >= n || b >= n {
                return Err(GraphError::NodeOutOfRange { u: a, v: b, num_nodes: n });
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let (u, v) = if a < b { (a, b) } else { (b, a) };
            if !seen.insert((u, v)) {
                return Err(GraphError::DuplicateEdge(u, v));
            }
            out.push(Edge { u, v, label });
        }
        Ok(Graph { node_labels, edges: out })
    }

    /// Path 0-1-...-(n-1) with uniform labels.
    pub fn path(n: usize) -> Self {
        let edges = (1..n).map(|i| (i - 1, i, 0));
        Graph::new(vec![6; n], edges).expect("path is valid")
    }

    /// Cycle of length `n >= 3` with uniform labels.
    pub fn cycle(n: usize) -> Self {
        assert!(n >= 3, "cycle needs at least 3 nodes");
        let edges = (0..n).map(|i| (i, (i + 1) % n, 0));
        Graph::new(vec![6; n], edges).expect("cycle is valid")
    }

    /// Complete graph on `n` nodes with uniform labels.
    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j, 0));
            }
        }
        Graph::new(vec![6; n], edges).expect("complete graph is valid")
    }

    pub fn num_nodes(&self) -> usize {
        self.node_labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_labels(&self) -> &[u32] {
        &self.node_labels
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbor lists sorted by node index.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for e in &self.edges {
            adj[e.u].push(e.v);
            adj[e.v].push(e.u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for e in &self.edges {
            deg[e.u] += 1;
            deg[e.v] += 1;
        }
        deg
    }

    pub fn edge_label(&self, a: usize, b: usize) -> Option<u32> {
        let (u, v) = if a < b { (a, b) } else { (b, a) };
        self.edges.iter().find(|e| e.u == u && e.v == v).map(|e| e.label)
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_from(&self, source: usize) -> Vec<Option<usize>> {
        bfs(&self.adjacency(), source)
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes() > 0 && self.bfs_from(0).iter().all(Option::is_some)
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Graph {
        assert_eq!(perm.len(), self.num_nodes());
        let mut labels = vec![0; self.num_nodes()];
        for (i, &p) in perm.iter().enumerate() {
            labels[p] = self.node_labels[i];
        }
        let edges = self.edges.iter().map(|e| (perm[e.u], perm[e.v], e.label));
        Graph::new(labels, edges).expect("permutation preserves validity")
    }
}

fn bfs(adj: &[Vec<usize>], source: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; adj.len()];
    let mut queue = VecDeque::new();
    dist[source] = Some(0);
    queue.push_back(source);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap();
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Edges whose removal disconnects their endpoints, as `(u, v)` with `u < v`.
pub fn bridges(g: &Graph) -> Vec<(usize, usize)> {
    let n = g.num_nodes();
    let adj = g.adjacency();
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut timer = 0;
    let mut out = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // (node, parent, next neighbor position)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(top) = stack.len().checked_sub(1) {
            let (u, parent, pos) = stack[top];
            if pos < adj[u].len() {
                let v = adj[u][pos];
                stack[top].2 += 1;
                if v == parent {
                    continue;
                }
                if disc[v] == usize::MAX {
                    disc[v] = timer;
                    low[v] = timer;
                    timer += 1;
                    stack.push((v, u, 0));
                } else {
                    low[u] = low[u].min(disc[v]);
                }
            } else {
                stack.pop();
                if parent != usize::MAX {
                    low[parent] = low[parent].min(low[u]);
                    if low[u] > disc[parent] {
                        out.push((parent.min(u), parent.max(u)));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Dense matrix of hop distances, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<usize>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn max(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn to_rows(&self) -> Vec<Vec<usize>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

/// All-pairs unweighted shortest paths by one BFS per node.
pub fn bfs_all_pairs(g: &Graph) -> Result<DistanceMatrix, GraphError> {
    let n = g.num_nodes();
    let adj = g.adjacency();
    let mut data = Vec::with_capacity(n * n);
    for s in 0..n {
        for (t, d) in bfs(&adj, s).into_iter().enumerate() {
            match d {
                Some(d) => data.push(d),
                None => return Err(GraphError::Disconnected { from: s, to: t }),
            }
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// Adds one node (label [`VIRTUAL_NODE_LABEL`]) joined to every original node
/// by an edge labeled [`VIRTUAL_EDGE_LABEL`]. Original indices are kept; the
/// virtual node is the last index.
pub fn add_virtual_node(g: &Graph) -> Graph {
    let n = g.num_nodes();
    let mut labels = g.node_labels.clone();
    labels.push(VIRTUAL_NODE_LABEL);
    let mut edges = g.edges.clone();
    edges.extend((0..n).map(|i| Edge { u: i, v: n, label: VIRTUAL_EDGE_LABEL }));
    Graph { node_labels: labels, edges }
}

/// Node of maximum eccentricity, lowest index among ties. Used as the
/// deterministic reference node of the hop-distance diagnostics.
pub fn peripheral_node(g: &Graph) -> Result<usize, GraphError> {
    if g.num_nodes() == 0 {
        return Err(GraphError::Empty);
    }
    let dist = bfs_all_pairs(g)?;
    let mut best = (0, 0);
    for i in 0..dist.size() {
        let ecc = dist.row(i).iter().copied().max().unwrap_or(0);
        if ecc > best.1 {
            best = (i, ecc);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_normalizes_and_validates() {
        let g = Graph::new(vec![6, 6, 8], [(1, 0, 0), (2, 1, 1)]).unwrap();
        assert_eq!(g.edges()[0], Edge { u: 0, v: 1, label: 0 });
        assert_eq!(
            Graph::new(vec![6, 6], [(0, 1, 0), (1, 0, 0)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert_eq!(Graph::new(vec![6], [(0, 0, 0)]), Err(GraphError::SelfLoop(0)));
        assert!(matches!(
            Graph::new(vec![6], [(0, 3, 0)]),
            Err(GraphError::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn bfs_path_and_triangle() {
        let d = bfs_all_pairs(&Graph::path(3)).unwrap();
        assert_eq!(d.to_rows(), vec![vec![0, 1, 2], vec![1, 0, 1], vec![2, 1, 0]]);
        let d = bfs_all_pairs(&Graph::cycle(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d.get(i, j), usize::from(i != j));
            }
        }
    }

    #[test]
    fn bfs_reports_unreachable_pair() {
        let g = Graph::new(vec![6, 6, 6], [(0, 1, 0)]).unwrap();
        assert_eq!(bfs_all_pairs(&g), Err(GraphError::Disconnected { from: 0, to: 2 }));
    }

    #[test]
    fn virtual_node_shortcuts_paths() {
        let g = add_virtual_node(&Graph::path(5));
        assert_eq!(g.num_nodes(), 6);
        let d = bfs_all_pairs(&g).unwrap();
        let max_orig = (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).map(|(i, j)| d.get(i, j)).max();
        assert_eq!(max_orig, Some(2));

        let single = add_virtual_node(&Graph::path(1));
        assert_eq!((single.num_nodes(), single.num_edges()), (2, 1));

        let benzene = add_virtual_node(&Graph::cycle(6));
        assert_eq!((benzene.num_nodes(), benzene.num_edges()), (7, 12));
        assert_eq!(benzene.node_labels()[6], VIRTUAL_NODE_LABEL);
    }

    #[test]
    fn bridges_of_ring_with_tail() {
        // triangle 0-1-2 with tail 2-3-4
        let g = Graph::new(vec![6; 5], [(0, 1, 0), (1, 2, 0), (0, 2, 0), (2, 3, 0), (3, 4, 0)]).unwrap();
        assert_eq!(bridges(&g), vec![(2, 3), (3, 4)]);
        assert!(bridges(&Graph::cycle(6)).is_empty());
        assert_eq!(bridges(&Graph::path(3)), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn peripheral_node_of_path_is_endpoint() {
        assert_eq!(peripheral_node(&Graph::path(7)).unwrap(), 0);
        assert_eq!(peripheral_node(&Graph::cycle(5)).unwrap(), 0);
    }

    #[test]
    fn permute_moves_labels_with_nodes() {
        let g = Graph::new(vec![6, 7, 8], [(0, 1, 0), (1, 2, 1)]).unwrap();
        let p = g.permute(&[2, 0, 1]);
        assert_eq!(p.node_labels(), &[7, 8, 6]);
        assert_eq!(p.edge_label(2, 0), Some(0));
        assert_eq!(p.edge_label(0, 1), Some(1));
    }
}
