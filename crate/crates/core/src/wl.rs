//! 1-WL color refinement and the junction-tree-augmented separation test.
//!
//! Colors are canonical: each round, the signatures `(color, sorted neighbor
//! colors)` are sorted and replaced by their rank. Two graphs are compared by
//! refining their disjoint union, so color ids mean the same thing on both
//! sides.

use serde::{Deserialize, Serialize};

use crate::corpus::AtomVocab;
use crate::graph::Graph;
use crate::junction_tree::{decompose, ClusterVocab, DecompositionError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Coloring {
    pub colors: Vec<usize>,
    pub rounds: usize,
    pub stable: bool,
    /// Sorted `(color, count)` multiset.
    pub histogram: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Separated,
    Indistinguishable,
}

/// Outcome of comparing two graphs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairReport {
    pub wl: Verdict,
    pub jt_wl: Verdict,
    /// Refinement rounds of the graph-level comparison.
    pub rounds: usize,
}

fn rank<T: Ord + Clone>(keys: &[T]) -> Vec<usize> {
    let mut sorted = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter().map(|k| sorted.binary_search(k).expect("key present")).collect()
}

fn class_count(colors: &[usize]) -> usize {
    colors.iter().max().map_or(0, |m| m + 1)
}

fn histogram(colors: &[usize]) -> Vec<(usize, usize)> {
    let mut h: Vec<(usize, usize)> = Vec::new();
    let mut sorted = colors.to_vec();
    sorted.sort_unstable();
    for c in sorted {
        match h.last_mut() {
            Some((last, n)) if *last == c => *n += 1,
            _ => h.push((c, 1)),
        }
    }
    h
}

/// Refines over an adjacency list of `(neighbor, edge label)` pairs until the
/// partition stops splitting.
fn refine_adjacency(adj: &[Vec<(usize, u32)>], initial: &[u32], edge_labels: bool) -> Coloring {
    let n = adj.len();
    let mut colors = rank(initial);
    let mut rounds = 0;
    loop {
        let signatures: Vec<(usize, Vec<(usize, u32)>)> = (0..n)
            .map(|v| {
                let mut nb: Vec<(usize, u32)> =
                    adj[v].iter().map(|&(u, l)| (colors[u], if edge_labels { l } else { 0 })).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let next = rank(&signatures);
        rounds += 1;
        // refinement never merges classes, so equal counts mean an equal partition
        let stable = class_count(&next) == class_count(&colors);
        colors = next;
        if stable || rounds > n {
            return Coloring { histogram: histogram(&colors), colors, rounds, stable };
        }
    }
}

fn adjacency(g: &Graph) -> Vec<Vec<(usize, u32)>> {
    let mut adj = vec![Vec::new(); g.num_nodes()];
    for e in g.edges() {
        adj[e.u].push((e.v, e.label));
        adj[e.v].push((e.u, e.label));
    }
    adj
}

/// Colors `g` starting from `initial` (node labels when `None`).
pub fn wl_refine(g: &Graph, initial: Option<&[u32]>, edge_labels: bool) -> Coloring {
    let labels = initial.unwrap_or(g.node_labels());
    refine_adjacency(&adjacency(g), labels, edge_labels)
}

/// Refines the disjoint union and returns each side's histogram and the round count.
fn joint_histograms(a: &Graph, la: &[u32], b: &Graph, lb: &[u32], edge_labels: bool) -> (Vec<(usize, usize)>, Vec<(usize, usize)>, usize) {
    let n = a.num_nodes();
    let mut adj = adjacency(a);
    adj.extend(adjacency(b).into_iter().map(|row| row.into_iter().map(|(u, l)| (u + n, l)).collect()));
    let labels: Vec<u32> = la.iter().chain(lb).copied().collect();
    let c = refine_adjacency(&adj, &labels, edge_labels);
    (histogram(&c.colors[..n]), histogram(&c.colors[n..]), c.rounds)
}

fn verdict(separated: bool) -> Verdict {
    if separated { Verdict::Separated } else { Verdict::Indistinguishable }
}

/// 1-WL verdict with node labels as initial colors.
pub fn wl_distinguish(a: &Graph, b: &Graph, edge_labels: bool) -> (Verdict, usize) {
    if a.num_nodes() != b.num_nodes() {
        return (Verdict::Separated, 0);
    }
    let (ha, hb, rounds) = joint_histograms(a, a.node_labels(), b, b.node_labels(), edge_labels);
    (verdict(ha != hb), rounds)
}

/// Graph-level 1-WL, then 1-WL on the junction trees colored by cluster type.
pub fn jt_wl_distinguish(a: &Graph, b: &Graph, edge_labels: bool) -> Result<PairReport, DecompositionError> {
    let (wl, rounds) = wl_distinguish(a, b, edge_labels);
    let vocab = ClusterVocab::new(AtomVocab::from_graphs([a, b]));
    let (ta, tb) = (decompose(a)?, decompose(b)?);
    let (ga, gb) = (ta.tree_graph(&vocab), tb.tree_graph(&vocab));
    let tree_separated = ga.num_nodes() != gb.num_nodes() || {
        let (ha, hb, _) = joint_histograms(&ga, ga.node_labels(), &gb, gb.node_labels(), false);
        ha != hb
    };
    Ok(PairReport { wl, jt_wl: verdict(wl == Verdict::Separated || tree_separated), rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    fn mol(s: &str) -> Graph {
        parse_smiles(s).unwrap()
    }

    #[test]
    fn uniform_cycle_is_stable_at_once() {
        let c = wl_refine(&Graph::cycle(6), None, false);
        assert_eq!(c.histogram, vec![(0, 6)]);
        assert_eq!(c.rounds, 1);
        assert!(c.stable);
    }

    #[test]
    fn path_of_three_has_two_classes() {
        let c = wl_refine(&Graph::path(3), None, false);
        assert_eq!(c.colors, vec![0, 1, 0]);
    }

    #[test]
    fn witness_pair() {
        let decalin = mol("C1CCC2CCCCC2C1");
        let bicyclopentyl = mol("C1CCC(C1)C1CCCC1");
        assert_eq!(wl_distinguish(&decalin, &bicyclopentyl, false).0, Verdict::Indistinguishable);
        let r = jt_wl_distinguish(&decalin, &bicyclopentyl, false).unwrap();
        assert_eq!(r.jt_wl, Verdict::Separated);
        assert_eq!(wl_distinguish(&Graph::cycle(5), &Graph::path(5), false).0, Verdict::Separated);
    }

    #[test]
    fn size_mismatch_separates() {
        assert_eq!(wl_distinguish(&Graph::path(3), &Graph::path(4), false), (Verdict::Separated, 0));
    }

    #[test]
    fn edge_labels_are_optional() {
        let a = mol("C=CC");
        let b = mol("CCC");
        assert_eq!(wl_distinguish(&a, &b, false).0, Verdict::Indistinguishable);
        assert_eq!(wl_distinguish(&a, &b, true).0, Verdict::Separated);
    }
}
