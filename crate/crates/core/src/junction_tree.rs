//! Junction-tree coarse-graining of molecular graphs.
//!
//! Rings and non-ring bonds become clusters; an atom shared by more than two
//! clusters is split out as a singleton cluster (and removed from its bond
//! clusters); clusters sharing atoms are joined in a weighted cluster graph,
//! and a maximal spanning tree of that graph is the junction tree. The
//! binary assignment matrix `S` maps clusters (rows) to atoms (columns).

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AtomVocab;
use crate::graph::{Graph, GraphError};
use crate::smiles::NUM_BOND_KINDS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecompositionError {
    #[error("cannot decompose an empty graph")]
    Empty,
    #[error("cannot decompose a disconnected graph: {0}")]
    Disconnected(GraphError),
    #[error("cluster graph is disconnected ({components} components)")]
    DisconnectedClusterGraph { components: usize },
}

/// What a cluster represents, with the data its type code is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClusterKind {
    /// A ring (or a merged bridged ring system) with this many atoms.
    Ring { size: usize },
    /// A bond outside every ring, with its bond label.
    Bond { label: u32 },
    /// An atom shared by more than two clusters, with its atom label.
    Singleton { label: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    #[serde(flatten)]
    pub kind: ClusterKind,
    /// Sorted atom indices of the original graph.
    pub atoms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub clusters: Vec<Cluster>,
    pub tree_edges: Vec<(usize, usize)>,
    pub num_atoms: usize,
    /// Bond clusters that lost atoms to singleton extraction, before the
    /// extraction: `(cluster index, original atoms)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pre_extraction: Vec<(usize, Vec<usize>)>,
}

/// Dense categorical ids for [`ClusterKind`], used to embed tree tokens.
///
/// Layout: 0 unknown, then rings of size 3..=[`ClusterVocab::MAX_RING`]
/// (larger rings share the last id), then bond labels, then singleton atom
/// labels through the corpus atom vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterVocab {
    atoms: AtomVocab,
}

impl ClusterVocab {
    pub const MAX_RING: usize = 12;
    const RING_BASE: usize = 1;
    const BOND_BASE: usize = Self::RING_BASE + Self::MAX_RING - 2;
    const SINGLETON_BASE: usize = Self::BOND_BASE + NUM_BOND_KINDS;

    pub fn new(atoms: AtomVocab) -> Self {
        ClusterVocab { atoms }
    }

    pub fn size(&self) -> usize {
        Self::SINGLETON_BASE + self.atoms.size()
    }

    pub fn code(&self, kind: &ClusterKind) -> usize {
        match *kind {
            ClusterKind::Ring { size } if size >= 3 => {
                Self::RING_BASE + size.min(Self::MAX_RING) - 3
            }
            ClusterKind::Ring { .. } => 0,
            ClusterKind::Bond { label } if (label as usize) < NUM_BOND_KINDS => {
                Self::BOND_BASE + label as usize
            }
            ClusterKind::Bond { .. } => 0,
            ClusterKind::Singleton { label } => Self::SINGLETON_BASE + self.atoms.index(label),
        }
    }
}

impl Decomposition {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Dense `m x n` assignment matrix, row-major.
    pub fn assignment(&self) -> Vec<Vec<u8>> {
        let mut s = vec![vec![0u8; self.num_atoms]; self.clusters.len()];
        for (i, c) in self.clusters.iter().enumerate() {
            for &a in &c.atoms {
                s[i][a] = 1;
            }
        }
        s
    }

    /// `(cluster, atom)` pairs of the nonzero entries of `S`, row by row.
    pub fn assignment_pairs(&self) -> Vec<(usize, usize)> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.atoms.iter().map(move |&a| (i, a)))
            .collect()
    }

    /// The junction tree as a graph whose node labels are cluster type codes.
    pub fn tree_graph(&self, vocab: &ClusterVocab) -> Graph {
        let labels = self.clusters.iter().map(|c| vocab.code(&c.kind) as u32).collect();
        Graph::new(labels, self.tree_edges.iter().map(|&(a, b)| (a, b, 0)))
            .expect("tree edges are valid")
    }

    /// Tree structure with uniform labels.
    pub fn tree_topology(&self) -> Graph {
        Graph::new(
            vec![0; self.clusters.len()],
            self.tree_edges.iter().map(|&(a, b)| (a, b, 0)),
        )
        .expect("tree edges are valid")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "num_atoms": self.num_atoms,
            "clusters": self.clusters,
            "tree_edges": self.tree_edges,
            "assignment": self.clusters.iter().map(|c| c.atoms.clone()).collect::<Vec<_>>(),
        })
    }

    /// DOT rendering of the junction tree. `weights`, when given, colors each
    /// cluster node on a white-to-red ramp over `[0, max weight]`.
    pub fn to_dot(&self, weights: Option<&[f64]>) -> String {
        let mut out = String::from("graph junction_tree {\n  node [style=filled];\n");
        let max = weights.map_or(0.0, |w| w.iter().copied().fold(0.0, f64::max));
        for (i, c) in self.clusters.iter().enumerate() {
            let label = match c.kind {
                ClusterKind::Ring { size } => format!("R{size}"),
                ClusterKind::Bond { label } => format!("B{label}"),
                ClusterKind::Singleton { label } => format!("S{label}"),
            };
            let atoms: Vec<String> = c.atoms.iter().map(usize::to_string).collect();
            let color = weights.map_or_else(|| "\"#ffffff\"".to_string(), |w| color_ramp(w[i], max));
            let _ = writeln!(
                out,
                "  c{i} [label=\"{i}:{label}\\n{{{}}}\", fillcolor={color}];",
                atoms.join(",")
            );
        }
        for &(a, b) in &self.tree_edges {
            let _ = writeln!(out, "  c{a} -- c{b};");
        }
        out.push_str("}\n");
        out
    }
}

/// Linear white-to-red ramp: weight 0 maps to `#ffffff`, `max` to `#ff0000`.
pub fn color_ramp(value: f64, max: f64) -> String {
    let t = if max > 0.0 { (value / max).clamp(0.0, 1.0) } else { 0.0 };
    let gb = (255.0 * (1.0 - t)).round() as u8;
    format!("\"#ff{gb:02x}{gb:02x}\"")
}

// ---------------------------------------------------------------------------
// ring perception

struct EdgeIndex {
    index: HashMap<(usize, usize), usize>,
    ends: Vec<(usize, usize)>,
}

impl EdgeIndex {
    fn new(g: &Graph) -> Self {
        let ends: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.u, e.v)).collect();
        let index = ends.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        EdgeIndex { index, ends }
    }

    fn get(&self, a: usize, b: usize) -> usize {
        self.index[&(a.min(b), a.max(b))]
    }
}

/// Edge set over GF(2).
#[derive(Clone, PartialEq, Eq)]
struct EdgeSet(Vec<u64>);

impl EdgeSet {
    fn new(num_edges: usize) -> Self {
        EdgeSet(vec![0; num_edges.div_ceil(64)])
    }

    fn insert(&mut self, e: usize) {
        self.0[e / 64] ^= 1 << (e % 64);
    }

    fn xor(&self, other: &EdgeSet) -> EdgeSet {
        EdgeSet(self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect())
    }

    fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(w, &bits)| {
            (0..64).filter(move |b| bits >> b & 1 == 1).map(move |b| w * 64 + b)
        })
    }
}

/// Ordered node list if `set` is a single simple cycle.
fn as_simple_cycle(set: &EdgeSet, edges: &EdgeIndex) -> Option<Vec<usize>> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in set.iter() {
        let (u, v) = edges.ends[e];
        adj.entry(u).or_default().push(v);
        adj.entry(v).or_default().push(u);
    }
    if adj.len() < 3 || adj.values().any(|n| n.len() != 2) {
        return None;
    }
    let start = *adj.keys().min().unwrap();
    let mut first = adj[&start].clone();
    first.sort_unstable();
    let mut order = vec![start];
    let (mut prev, mut cur) = (start, first[0]);
    while cur != start {
        order.push(cur);
        let nb = &adj[&cur];
        let next = if nb[0] == prev { nb[1] } else { nb[0] };
        prev = cur;
        cur = next;
    }
    (order.len() == adj.len()).then_some(order)
}

/// Cycle basis of size `|E| - |V| + c` (c = number of components).
///
/// Fundamental cycles of a BFS spanning forest (roots at the lowest unvisited
/// node) are reduced pairwise: a cycle is replaced by its symmetric
/// difference with another basis cycle whenever that difference is a shorter
/// simple cycle. Cycles are returned as ordered node lists starting at their
/// smallest node, sorted by (length, node list).
pub fn cycle_basis(g: &Graph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let adj = g.adjacency();
    let edges = EdgeIndex::new(g);
    let mut parent = vec![usize::MAX; n];
    let mut depth = vec![usize::MAX; n];
    let mut tree = HashSet::new();
    for root in 0..n {
        if depth[root] != usize::MAX {
            continue;
        }
        depth[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    parent[v] = u;
                    tree.insert(edges.get(u, v));
                    queue.push_back(v);
                }
            }
        }
    }

    let mut basis: Vec<EdgeSet> = Vec::new();
    for (ei, &(u, v)) in edges.ends.iter().enumerate() {
        if tree.contains(&ei) {
            continue;
        }
        let mut set = EdgeSet::new(edges.ends.len());
        set.insert(ei);
        let (mut a, mut b) = (u, v);
        while a != b {
            if depth[a] >= depth[b] {
                set.insert(edges.get(a, parent[a]));
                a = parent[a];
            } else {
                set.insert(edges.get(b, parent[b]));
                b = parent[b];
            }
        }
        basis.push(set);
    }

    loop {
        let mut improved = false;
        for i in 0..basis.len() {
            for j in 0..basis.len() {
                if i == j {
                    continue;
                }
                let x = basis[i].xor(&basis[j]);
                if x.len() < basis[i].len() && as_simple_cycle(&x, &edges).is_some() {
                    basis[i] = x;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }

    let mut cycles: Vec<Vec<usize>> = basis
        .iter()
        .map(|s| as_simple_cycle(s, &edges).expect("basis cycles stay simple"))
        .collect();
    cycles.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    cycles
}

/// More simple cycles than this and ring perception falls back to the basis.
const MAX_ENUMERATED_CYCLES: usize = 20_000;

/// Simple cycles with at most `max_len` nodes, each starting at its smallest
/// node with the smaller neighbor second. `None` past `limit` cycles.
fn simple_cycles_up_to(adj: &[Vec<usize>], max_len: usize, limit: usize) -> Option<Vec<Vec<usize>>> {
    fn extend(adj: &[Vec<usize>], path: &mut Vec<usize>, on_path: &mut [bool], max_len: usize, out: &mut Vec<Vec<usize>>, limit: usize) -> bool {
        let (start, last) = (path[0], *path.last().unwrap());
        for &v in &adj[last] {
            if v == start && path.len() >= 3 && path[1] < last {
                out.push(path.clone());
                if out.len() > limit {
                    return false;
                }
            } else if v > start && !on_path[v] && path.len() < max_len {
                path.push(v);
                on_path[v] = true;
                let ok = extend(adj, path, on_path, max_len, out, limit);
                on_path[v] = false;
                path.pop();
                if !ok {
                    return false;
                }
            }
        }
        true
    }
    let mut out = Vec::new();
    let mut on_path = vec![false; adj.len()];
    for s in 0..adj.len() {
        let mut path = vec![s];
        on_path[s] = true;
        let ok = extend(adj, &mut path, &mut on_path, max_len, &mut out, limit);
        on_path[s] = false;
        if !ok {
            return None;
        }
    }
    Some(out)
}

/// GF(2) row echelon form; rows are reduced against earlier rows on insert.
struct Echelon(Vec<(usize, EdgeSet)>);

impl Echelon {
    fn reduce(&self, v: &EdgeSet) -> EdgeSet {
        let mut v = v.clone();
        for (pivot, row) in &self.0 {
            if v.0[pivot / 64] >> (pivot % 64) & 1 == 1 {
                v = v.xor(row);
            }
        }
        v
    }

    /// Adds `v` unless it is already spanned; returns whether it was added.
    fn insert(&mut self, v: &EdgeSet) -> bool {
        let r = self.reduce(v);
        let pivot = r.iter().next();
        match pivot {
            Some(pivot) => {
                self.0.push((pivot, r));
                true
            }
            None => false,
        }
    }
}

/// Relevant cycles: the union of all minimum cycle bases, i.e. every cycle
/// that is not a sum of strictly shorter cycles. Unlike a single basis this
/// set does not depend on node numbering (K4 yields all four triangles).
/// Same ordering as [`cycle_basis`]; falls back to the basis when the graph
/// has too many short cycles to enumerate.
pub fn relevant_cycles(g: &Graph) -> Vec<Vec<usize>> {
    let basis = cycle_basis(g);
    let Some(max_len) = basis.iter().map(Vec::len).max() else {
        return basis;
    };
    let Some(mut cycles) = simple_cycles_up_to(&g.adjacency(), max_len, MAX_ENUMERATED_CYCLES) else {
        log::warn!("more than {MAX_ENUMERATED_CYCLES} short cycles; using a single cycle basis");
        return basis;
    };
    cycles.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let edges = EdgeIndex::new(g);
    let as_set = |c: &[usize]| {
        let mut s = EdgeSet::new(edges.ends.len());
        for k in 0..c.len() {
            s.insert(edges.get(c[k], c[(k + 1) % c.len()]));
        }
        s
    };
    let mut shorter = Echelon(Vec::new());
    let mut relevant = Vec::new();
    let mut k = 0;
    while k < cycles.len() {
        let len = cycles[k].len();
        let end = cycles[k..].iter().position(|c| c.len() != len).map_or(cycles.len(), |p| k + p);
        let sets: Vec<EdgeSet> = cycles[k..end].iter().map(|c| as_set(c)).collect();
        for (c, s) in cycles[k..end].iter().zip(&sets) {
            if shorter.reduce(s).iter().next().is_some() {
                relevant.push(c.clone());
            }
        }
        for s in &sets {
            shorter.insert(s);
        }
        k = end;
    }
    relevant
}

// ---------------------------------------------------------------------------
// spanning tree

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // smaller root wins, keeping results independent of call order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

/// Maximal spanning tree by Kruskal over edges sorted by
/// `(-weight, min index, max index)`. Edges are `(a, b, weight)`.
pub fn maximal_spanning_tree(
    num_nodes: usize,
    weighted_edges: &[(usize, usize, usize)],
) -> Result<Vec<(usize, usize)>, DecompositionError> {
    let keyed: Vec<(usize, usize, usize, (usize, usize))> =
        weighted_edges.iter().map(|&(a, b, w)| (a, b, w, (0, 0))).collect();
    keyed_spanning_tree(num_nodes, &keyed)
}

/// Kruskal over `(a, b, weight, key)` sorted by `(-weight, key, min index,
/// max index)`.
fn keyed_spanning_tree(
    num_nodes: usize,
    weighted_edges: &[(usize, usize, usize, (usize, usize))],
) -> Result<Vec<(usize, usize)>, DecompositionError> {
    let mut cand: Vec<(usize, usize, usize, (usize, usize))> = weighted_edges
        .iter()
        .map(|&(a, b, w, key)| (a.min(b), a.max(b), w, key))
        .collect();
    cand.sort_by(|x, y| y.2.cmp(&x.2).then(x.3.cmp(&y.3)).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut uf = UnionFind::new(num_nodes);
    let mut tree = Vec::new();
    for (a, b, _, _) in cand {
        if uf.union(a, b) {
            tree.push((a, b));
        }
    }
    if num_nodes > 0 && tree.len() != num_nodes - 1 {
        let mut roots: Vec<usize> = (0..num_nodes).map(|i| uf.find(i)).collect();
        roots.sort_unstable();
        roots.dedup();
        return Err(DecompositionError::DisconnectedClusterGraph { components: roots.len() });
    }
    Ok(tree)
}

/// Tie-break keys for the cluster graph's edges: the sorted pair of the
/// endpoints' stable 1-WL colors, seeded by cluster kind and refined with
/// edge weights. Equal-weight edges are thereby ordered by what they connect
/// rather than by cluster numbering.
fn structural_keys(clusters: &[Cluster], edges: &[(usize, usize, usize)]) -> Vec<(usize, usize)> {
    let mut kinds: Vec<ClusterKind> = clusters.iter().map(|c| c.kind).collect();
    kinds.sort();
    kinds.dedup();
    let labels = clusters.iter().map(|c| kinds.binary_search(&c.kind).expect("kind present") as u32).collect();
    let cg = Graph::new(labels, edges.iter().map(|&(a, b, w)| (a, b, w as u32))).expect("cluster graph is simple");
    let colors = crate::wl::wl_refine(&cg, None, true).colors;
    edges.iter().map(|&(a, b, _)| (colors[a].min(colors[b]), colors[a].max(colors[b]))).collect()
}

// ---------------------------------------------------------------------------
// decomposition

fn merge_bridged_rings(rings: Vec<BTreeSet<usize>>) -> Vec<BTreeSet<usize>> {
    let mut uf = UnionFind::new(rings.len());
    for i in 0..rings.len() {
        for j in i + 1..rings.len() {
            if rings[i].intersection(&rings[j]).count() >= 3 {
                uf.union(i, j);
            }
        }
    }
    let mut groups: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for (i, r) in rings.into_iter().enumerate() {
        groups.entry(uf.find(i)).or_default().extend(r);
    }
    let mut merged: Vec<BTreeSet<usize>> = groups.into_values().collect();
    merged.sort();
    merged
}

/// Builds the junction tree of a connected molecular graph.
pub fn decompose(g: &Graph) -> Result<Decomposition, DecompositionError> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(DecompositionError::Empty);
    }
    crate::graph::bfs_all_pairs(g).map_err(DecompositionError::Disconnected)?;
    let labels = g.node_labels();

    // (1) rings and non-ring bonds
    let cycles = relevant_cycles(g);
    let mut ring_edges = HashSet::new();
    for c in &cycles {
        for k in 0..c.len() {
            let (a, b) = (c[k], c[(k + 1) % c.len()]);
            ring_edges.insert((a.min(b), a.max(b)));
        }
    }
    let rings = merge_bridged_rings(cycles.into_iter().map(|c| c.into_iter().collect()).collect());

    let mut clusters: Vec<Cluster> = rings
        .into_iter()
        .map(|r| Cluster { kind: ClusterKind::Ring { size: r.len() }, atoms: r.into_iter().collect() })
        .collect();
    for e in g.edges() {
        if !ring_edges.contains(&(e.u, e.v)) {
            clusters.push(Cluster { kind: ClusterKind::Bond { label: e.label }, atoms: vec![e.u, e.v] });
        }
    }
    if n == 1 {
        clusters.push(Cluster { kind: ClusterKind::Singleton { label: labels[0] }, atoms: vec![0] });
    }

    // (2) atoms in more than two clusters become singletons
    let mut membership = vec![Vec::new(); n];
    for (i, c) in clusters.iter().enumerate() {
        for &a in &c.atoms {
            membership[a].push(i);
        }
    }
    let hubs: Vec<usize> = (0..n).filter(|&a| membership[a].len() > 2).collect();
    let hub_set: HashSet<usize> = hubs.iter().copied().collect();
    let mut pre_extraction = Vec::new();
    for (i, c) in clusters.iter_mut().enumerate() {
        if matches!(c.kind, ClusterKind::Bond { .. }) && c.atoms.iter().any(|a| hub_set.contains(a)) {
            pre_extraction.push((i, c.atoms.clone()));
            c.atoms.retain(|a| !hub_set.contains(a));
        }
    }
    let first_singleton = clusters.len();
    for &a in &hubs {
        clusters.push(Cluster { kind: ClusterKind::Singleton { label: labels[a] }, atoms: vec![a] });
    }
    let singleton_of: HashMap<usize, usize> =
        hubs.iter().enumerate().map(|(k, &a)| (a, first_singleton + k)).collect();

    // (3) weighted cluster graph: shared atoms, singleton attachments, and
    // direct singleton-singleton links for bonds emptied by extraction
    let mut weights: HashMap<(usize, usize), usize> = HashMap::new();
    let link = |a: usize, b: usize, w: usize, weights: &mut HashMap<(usize, usize), usize>| {
        let key = (a.min(b), a.max(b));
        let slot = weights.entry(key).or_insert(0);
        *slot = (*slot).max(w);
    };
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            let shared = intersection_size(&clusters[i].atoms, &clusters[j].atoms);
            if shared > 0 {
                link(i, j, shared, &mut weights);
            }
        }
    }
    for &a in &hubs {
        for &c in &membership[a] {
            link(singleton_of[&a], c, 1, &mut weights);
        }
    }
    for (i, original) in &pre_extraction {
        if clusters[*i].atoms.is_empty() {
            link(singleton_of[&original[0]], singleton_of[&original[1]], 1, &mut weights);
        }
    }

    // drop emptied bond clusters and reindex
    let keep: Vec<usize> = (0..clusters.len()).filter(|&i| !clusters[i].atoms.is_empty()).collect();
    let mut new_index = vec![usize::MAX; clusters.len()];
    for (k, &i) in keep.iter().enumerate() {
        new_index[i] = k;
    }
    let mut edges: Vec<(usize, usize, usize)> = weights
        .into_iter()
        .filter(|((a, b), _)| new_index[*a] != usize::MAX && new_index[*b] != usize::MAX)
        .map(|((a, b), w)| (new_index[a], new_index[b], w))
        .collect();
    edges.sort_unstable();
    let pre_extraction = pre_extraction
        .into_iter()
        .filter(|(i, _)| new_index[*i] != usize::MAX)
        .map(|(i, atoms)| (new_index[i], atoms))
        .collect();
    let clusters: Vec<Cluster> = keep.into_iter().map(|i| clusters[i].clone()).collect();

    // (4) maximal spanning tree
    let keys = structural_keys(&clusters, &edges);
    let keyed: Vec<_> = edges.iter().zip(keys).map(|(&(a, b, w), k)| (a, b, w, k)).collect();
    let tree_edges = keyed_spanning_tree(clusters.len(), &keyed)?;
    Ok(Decomposition { clusters, tree_edges, num_atoms: n, pre_extraction })
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                k += 1;
                i += 1;
                j += 1;
            }
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    fn mol(s: &str) -> Graph {
        parse_smiles(s).unwrap()
    }

    #[test]
    fn acyclic_graph_has_no_cycles() {
        assert!(cycle_basis(&Graph::path(4)).is_empty());
    }

    #[test]
    fn benzene_has_one_six_cycle() {
        let c = cycle_basis(&mol("c1ccccc1"));
        assert_eq!(c, vec![vec![0, 1, 2, 3, 4, 5]]);
    }

    #[test]
    fn decalin_basis_is_two_six_cycles() {
        let c = cycle_basis(&mol("C1CCC2CCCCC2C1"));
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|r| r.len() == 6));
    }

    #[test]
    fn ethane_is_one_bond_cluster() {
        let d = decompose(&mol("CC")).unwrap();
        assert_eq!(d.clusters, vec![Cluster { kind: ClusterKind::Bond { label: 0 }, atoms: vec![0, 1] }]);
        assert!(d.tree_edges.is_empty());
    }

    #[test]
    fn decalin_is_two_rings() {
        let d = decompose(&mol("C1CCC2CCCCC2C1")).unwrap();
        assert_eq!(d.num_clusters(), 2);
        assert!(d.clusters.iter().all(|c| c.kind == ClusterKind::Ring { size: 6 }));
        assert_eq!(intersection_size(&d.clusters[0].atoms, &d.clusters[1].atoms), 2);
        assert_eq!(d.tree_edges, vec![(0, 1)]);
    }

    #[test]
    fn neopentane_center_becomes_singleton() {
        let d = decompose(&mol("C(C)(C)(C)C")).unwrap();
        assert_eq!(d.num_clusters(), 5);
        let s = d.clusters.iter().position(|c| matches!(c.kind, ClusterKind::Singleton { .. })).unwrap();
        assert_eq!(d.clusters[s].atoms, vec![0]);
        assert_eq!(d.tree_edges.len(), 4);
        assert!(d.tree_edges.iter().all(|&(a, b)| a == s || b == s));
        for (i, c) in d.clusters.iter().enumerate() {
            if i != s {
                assert_eq!(c.kind, ClusterKind::Bond { label: 0 });
                assert_eq!(c.atoms.len(), 1);
            }
        }
    }

    #[test]
    fn bicyclopentyl_tree_is_ring_bond_ring() {
        let d = decompose(&mol("C1CCC(C1)C1CCCC1")).unwrap();
        let kinds: Vec<ClusterKind> = d.clusters.iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            vec![ClusterKind::Ring { size: 5 }, ClusterKind::Ring { size: 5 }, ClusterKind::Bond { label: 0 }]
        );
        assert_eq!(d.tree_edges.len(), 2);
        assert!(d.tree_edges.iter().all(|&(a, b)| a == 2 || b == 2));
    }

    #[test]
    fn adamantane_rings_merge() {
        let d = decompose(&mol("C1C2CC3CC1CC(C2)C3")).unwrap();
        assert_eq!(d.clusters, vec![Cluster { kind: ClusterKind::Ring { size: 10 }, atoms: (0..10).collect() }]);
    }

    #[test]
    fn emptied_bond_links_its_singletons() {
        // 2,2,3,3-tetramethylbutane: the central bond loses both atoms
        let d = decompose(&mol("CC(C)(C)C(C)(C)C")).unwrap();
        assert!(d.clusters.iter().all(|c| !c.atoms.is_empty()));
        let singletons: Vec<usize> = (0..d.num_clusters())
            .filter(|&i| matches!(d.clusters[i].kind, ClusterKind::Singleton { .. }))
            .collect();
        assert_eq!(singletons.len(), 2);
        assert!(d.tree_edges.contains(&(singletons[0], singletons[1])));
        assert_eq!(d.tree_edges.len(), d.num_clusters() - 1);
    }

    #[test]
    fn single_atom_is_a_singleton() {
        let g = Graph::new(vec![8], []).unwrap();
        let d = decompose(&g).unwrap();
        assert_eq!(d.clusters, vec![Cluster { kind: ClusterKind::Singleton { label: 8 }, atoms: vec![0] }]);
    }

    #[test]
    fn rejects_disconnected_and_empty() {
        let g = Graph::new(vec![6, 6], []).unwrap();
        assert!(matches!(decompose(&g), Err(DecompositionError::Disconnected(_))));
        let g = Graph::new(vec![], []).unwrap();
        assert_eq!(decompose(&g), Err(DecompositionError::Empty));
    }

    #[test]
    fn spanning_tree_examples() {
        assert_eq!(maximal_spanning_tree(2, &[(0, 1, 1)]).unwrap(), vec![(0, 1)]);
        // weights (0,1)=2, (0,2)=1, (1,2)=1: the weight-2 edge plus (0,2)
        let t = maximal_spanning_tree(3, &[(1, 2, 1), (0, 2, 1), (0, 1, 2)]).unwrap();
        assert_eq!(t, vec![(0, 1), (0, 2)]);
        assert!(matches!(
            maximal_spanning_tree(3, &[(0, 1, 1)]),
            Err(DecompositionError::DisconnectedClusterGraph { components: 2 })
        ));
    }

    #[test]
    fn assignment_rows_match_clusters() {
        let d = decompose(&mol("c1ccccc1")).unwrap();
        assert_eq!(d.assignment(), vec![vec![1u8; 6]]);
        assert_eq!(d.assignment_pairs().len(), 6);
    }

    #[test]
    fn cluster_codes_are_dense_and_distinct() {
        let vocab = ClusterVocab::new(AtomVocab::from_labels(vec![6, 7, 8]));
        let kinds = [
            ClusterKind::Ring { size: 3 },
            ClusterKind::Ring { size: 12 },
            ClusterKind::Bond { label: 0 },
            ClusterKind::Bond { label: 3 },
            ClusterKind::Singleton { label: 6 },
            ClusterKind::Singleton { label: 8 },
        ];
        let codes: Vec<usize> = kinds.iter().map(|k| vocab.code(k)).collect();
        let unique: BTreeSet<usize> = codes.iter().copied().collect();
        assert_eq!(unique.len(), codes.len());
        assert!(codes.iter().all(|&c| c > 0 && c < vocab.size()));
        assert_eq!(vocab.code(&ClusterKind::Ring { size: 30 }), vocab.code(&ClusterKind::Ring { size: 12 }));
        assert_eq!(vocab.code(&ClusterKind::Bond { label: 9 }), 0);
    }

    #[test]
    fn dot_and_json_exports() {
        let d = decompose(&mol("C1CCC2CCCCC2C1")).unwrap();
        let dot = d.to_dot(Some(&[1.0, 0.5]));
        assert!(dot.contains("c0 -- c1"));
        assert!(dot.contains("#ff0000"));
        assert!(dot.contains("#ff8080"));
        let j = d.to_json();
        assert_eq!(j["tree_edges"], serde_json::json!([[0, 1]]));
        assert_eq!(j["clusters"][0]["kind"], "ring");
    }
}
