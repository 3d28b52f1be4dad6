//! Junction-tree checks against brute-force references over the fixture
//! corpus: minimum cycle basis weight, coverage, and tree shape.

use std::collections::{BTreeSet, HashMap};

use subformer::corpus::parse_corpus;
use subformer::graph::Graph;
use subformer::junction_tree::{cycle_basis, decompose, relevant_cycles, ClusterKind};

/// All simple cycles of length at most `max_len`, as sorted edge-index sets.
fn simple_cycles(g: &Graph, max_len: usize) -> Vec<BTreeSet<usize>> {
    let adj = g.adjacency();
    let eidx: HashMap<(usize, usize), usize> =
        g.edges().iter().enumerate().map(|(i, e)| ((e.u, e.v), i)).collect();
    let edge = |a: usize, b: usize| eidx[&(a.min(b), a.max(b))];
    let mut found = BTreeSet::new();
    for s in 0..g.num_nodes() {
        // paths from s through nodes > s back to s
        let mut stack = vec![(s, vec![s])];
        while let Some((u, path)) = stack.pop() {
            for &v in &adj[u] {
                if v == s && path.len() >= 3 {
                    let mut set = BTreeSet::new();
                    for w in path.windows(2) {
                        set.insert(edge(w[0], w[1]));
                    }
                    set.insert(edge(u, s));
                    found.insert(set);
                } else if v > s && !path.contains(&v) && path.len() < max_len {
                    let mut p = path.clone();
                    p.push(v);
                    stack.push((v, p));
                }
            }
        }
    }
    found.into_iter().collect()
}

/// Total length of a minimum cycle basis: greedy over cycles by length,
/// keeping those independent over GF(2).
fn minimum_basis_weight(g: &Graph) -> usize {
    let rank = g.num_edges() + 1 - g.num_nodes();
    let mut cycles = simple_cycles(g, 12);
    cycles.sort_by_key(BTreeSet::len);
    let mut pivots: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    let mut total = 0;
    for c in cycles {
        let mut v = c.clone();
        for (p, row) in &pivots {
            if v.contains(p) {
                v = v.symmetric_difference(row).copied().collect();
            }
        }
        if let Some(&p) = v.iter().next() {
            pivots.push((p, v));
            total += c.len();
        }
        if pivots.len() == rank {
            break;
        }
    }
    assert_eq!(pivots.len(), rank, "cycle enumeration too short");
    total
}

fn independent(sets: &[&BTreeSet<usize>]) -> bool {
    let mut pivots: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    for c in sets {
        let mut v = (*c).clone();
        for (p, row) in &pivots {
            if v.contains(p) {
                v = v.symmetric_difference(row).copied().collect();
            }
        }
        match v.iter().next() {
            Some(&p) => pivots.push((p, v)),
            None => return false,
        }
    }
    true
}

/// Union of every minimum cycle basis, by trying all `rank`-subsets of the
/// simple cycles.
fn union_of_minimum_bases(g: &Graph) -> BTreeSet<BTreeSet<usize>> {
    let rank = g.num_edges() + 1 - g.num_nodes();
    let cycles = simple_cycles(g, g.num_nodes());
    let best = minimum_basis_weight(g);
    let mut union = BTreeSet::new();
    let mut pick = vec![0usize; rank];
    fn walk(start: usize, depth: usize, pick: &mut Vec<usize>, cycles: &[BTreeSet<usize>], best: usize, union: &mut BTreeSet<BTreeSet<usize>>) {
        if depth == pick.len() {
            let sets: Vec<&BTreeSet<usize>> = pick.iter().map(|&i| &cycles[i]).collect();
            if sets.iter().map(|c| c.len()).sum::<usize>() == best && independent(&sets) {
                union.extend(sets.into_iter().cloned());
            }
            return;
        }
        for i in start..cycles.len() {
            pick[depth] = i;
            walk(i + 1, depth + 1, pick, cycles, best, union);
        }
    }
    walk(0, 0, &mut pick, &cycles, best, &mut union);
    union
}

fn edge_sets(g: &Graph, cycles: &[Vec<usize>]) -> BTreeSet<BTreeSet<usize>> {
    let eidx: HashMap<(usize, usize), usize> = g.edges().iter().enumerate().map(|(i, e)| ((e.u, e.v), i)).collect();
    cycles
        .iter()
        .map(|c| (0..c.len()).map(|k| eidx[&(c[k].min(c[(k + 1) % c.len()]), c[k].max(c[(k + 1) % c.len()]))]).collect())
        .collect()
}

#[test]
fn relevant_cycles_are_the_union_of_minimum_bases() {
    let mut graphs = vec![Graph::complete(4), Graph::complete(5)];
    // small random graphs with up to four independent cycles
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = |m: usize| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % m as u64) as usize
    };
    for _ in 0..300 {
        let n = 3 + next(6);
        let mut edges: BTreeSet<(usize, usize)> = (1..n).map(|i| (next(i), i)).collect();
        let target = (n - 1 + next(5)).min(n * (n - 1) / 2);
        while edges.len() < target {
            let (a, b) = (next(n), next(n));
            if a != b {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        graphs.push(Graph::new(vec![6; n], edges.into_iter().map(|(a, b)| (a, b, 0))).unwrap());
    }
    for (i, g) in graphs.iter().enumerate() {
        assert_eq!(edge_sets(g, &relevant_cycles(g)), union_of_minimum_bases(g), "graph {i}");
    }
    assert_eq!(relevant_cycles(&Graph::complete(4)).len(), 4);
}

fn corpus_graphs() -> Vec<(String, Graph)> {
    let c = parse_corpus(include_str!("fixtures/corpus_1000.jsonl")).unwrap();
    c.records.into_iter().map(|r| (r.id, r.graph)).collect()
}

#[test]
fn cycle_basis_is_minimum() {
    for (id, g) in corpus_graphs() {
        let basis = cycle_basis(&g);
        assert_eq!(basis.len(), g.num_edges() + 1 - g.num_nodes(), "{id}");
        let weight: usize = basis.iter().map(Vec::len).sum();
        assert_eq!(weight, minimum_basis_weight(&g), "{id}");
    }
}

#[test]
fn decomposition_invariants_hold() {
    for (id, g) in corpus_graphs() {
        let d = decompose(&g).unwrap_or_else(|e| panic!("{id}: {e}"));
        let m = d.num_clusters();
        assert_eq!(d.tree_edges.len(), m - 1, "{id}");
        // tree is connected
        let t = d.tree_topology();
        assert!(t.is_connected(), "{id}");
        // every atom is covered
        let mut covered = vec![false; g.num_nodes()];
        for c in &d.clusters {
            assert!(!c.atoms.is_empty());
            assert!(c.atoms.windows(2).all(|w| w[0] < w[1]));
            for &a in &c.atoms {
                covered[a] = true;
            }
        }
        assert!(covered.iter().all(|&x| x), "{id}");
        // an atom left in more than two ring/bond clusters has a singleton
        let mut count = vec![0; g.num_nodes()];
        for c in &d.clusters {
            if !matches!(c.kind, ClusterKind::Singleton { .. }) {
                for &a in &c.atoms {
                    count[a] += 1;
                }
            }
        }
        let mut singleton = vec![false; g.num_nodes()];
        for c in &d.clusters {
            if let ClusterKind::Singleton { label } = c.kind {
                assert_eq!(label, g.node_labels()[c.atoms[0]]);
                singleton[c.atoms[0]] = true;
            }
        }
        for a in 0..g.num_nodes() {
            assert!(count[a] <= 2 || singleton[a], "{id}: atom {a}");
        }
        // ring sizes agree with atom counts
        for c in &d.clusters {
            if let ClusterKind::Ring { size } = c.kind {
                assert_eq!(size, c.atoms.len());
            }
        }
        // every bond outside all rings is its own cluster unless an endpoint was extracted
        let ring_atoms: Vec<BTreeSet<usize>> = d
            .clusters
            .iter()
            .filter(|c| matches!(c.kind, ClusterKind::Ring { .. }))
            .map(|c| c.atoms.iter().copied().collect())
            .collect();
        for e in g.edges() {
            let in_ring = ring_atoms.iter().any(|r| r.contains(&e.u) && r.contains(&e.v));
            let as_bond = d.clusters.iter().any(|c| c.atoms == vec![e.u, e.v]);
            let extracted = d.clusters.iter().any(|c| {
                matches!(c.kind, ClusterKind::Singleton { .. }) && (c.atoms[0] == e.u || c.atoms[0] == e.v)
            });
            assert!(in_ring || as_bond || extracted, "{id}: bond {}-{}", e.u, e.v);
        }
    }
}

#[test]
fn known_molecules() {
    let graphs: HashMap<String, Graph> = corpus_graphs().into_iter().collect();
    let kinds = |id: &str| -> Vec<ClusterKind> {
        let mut k: Vec<ClusterKind> = decompose(&graphs[id]).unwrap().clusters.iter().map(|c| c.kind).collect();
        k.sort();
        k
    };
    assert_eq!(kinds("naphthalene"), vec![ClusterKind::Ring { size: 6 }; 2]);
    assert_eq!(kinds("adamantane"), vec![ClusterKind::Ring { size: 10 }]);
    assert_eq!(kinds("norbornane"), vec![ClusterKind::Ring { size: 7 }]);
    // all six faces are relevant cycles and share two atoms pairwise, so they
    // stay separate; every corner sits in three faces and becomes a singleton
    let cubane = kinds("cubane");
    assert_eq!(cubane.iter().filter(|k| **k == ClusterKind::Ring { size: 4 }).count(), 6);
    assert_eq!(cubane.len(), 14);
    // the two inner atoms of pyrene sit in three rings each
    let pyrene = kinds("pyrene");
    assert_eq!(&pyrene[..4], &[ClusterKind::Ring { size: 6 }; 4]);
    assert_eq!(pyrene.len(), 6);
    assert_eq!(
        kinds("biphenyl"),
        vec![ClusterKind::Ring { size: 6 }, ClusterKind::Ring { size: 6 }, ClusterKind::Bond { label: 0 }]
    );
    let neo = kinds("neopentane");
    assert_eq!(neo.iter().filter(|k| matches!(k, ClusterKind::Singleton { .. })).count(), 1);
    assert_eq!(neo.len(), 5);
}
