//! Color refinement and graph utilities against brute-force oracles.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subformer::corpus::load_corpus;
use subformer::graph::{add_virtual_node, bfs_all_pairs, Graph};
use subformer::junction_tree::decompose;
use subformer::smiles::parse_smiles;
use subformer::wl::{jt_wl_distinguish, wl_distinguish, wl_refine, Verdict};

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn random_graph(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges: BTreeSet<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    let target = (n - 1 + extra).min(n * (n - 1) / 2);
    while edges.len() < target {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let labels = (0..n).map(|_| [6, 6, 6, 7, 8][rng.gen_range(0..5)]).collect();
    Graph::new(labels, edges.into_iter().map(|(a, b)| (a, b, 1))).unwrap()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Naive refinement: signatures are strings, renamed to their first-seen
/// index each round and compared only as partitions. Runs exactly `n`
/// rounds, which always reaches the stable partition.
fn naive_partition(g: &Graph, uniform: bool) -> BTreeSet<BTreeSet<usize>> {
    let n = g.num_nodes();
    let adj = g.adjacency();
    let mut colors: Vec<String> =
        (0..n).map(|v| if uniform { String::new() } else { g.node_labels()[v].to_string() }).collect();
    for _ in 0..n {
        let signatures: Vec<String> = (0..n)
            .map(|v| {
                let mut nb: Vec<&str> = adj[v].iter().map(|&u| colors[u].as_str()).collect();
                nb.sort_unstable();
                format!("{}|{}", colors[v], nb.join(","))
            })
            .collect();
        let mut names: BTreeMap<&str, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for s in &signatures {
            let next = names.len();
            order.push(*names.entry(s.as_str()).or_insert(next));
        }
        colors = order.iter().map(|i| format!("c{i}")).collect();
    }
    let mut classes: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (v, c) in colors.iter().enumerate() {
        classes.entry(c).or_default().insert(v);
    }
    classes.into_values().collect()
}

fn partition(colors: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let mut classes: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (v, &c) in colors.iter().enumerate() {
        classes.entry(c).or_default().insert(v);
    }
    classes.into_values().collect()
}

/// Naive union-refinement verdict, the oracle for `wl_distinguish`.
fn naive_separated(a: &Graph, b: &Graph, uniform: bool) -> bool {
    let n = a.num_nodes();
    let edges = a.edges().iter().map(|e| (e.u, e.v, e.label)).chain(b.edges().iter().map(|e| (e.u + n, e.v + n, e.label)));
    let labels = a.node_labels().iter().chain(b.node_labels()).copied().collect();
    let union = Graph::new(labels, edges).unwrap();
    naive_partition(&union, uniform).iter().any(|class| class.iter().filter(|&&v| v < n).count() * 2 != class.len())
}

#[test]
fn decalin_partition_matches_oracle() {
    let decalin = parse_smiles("C1CCC2CCCCC2C1").unwrap();
    let c = wl_refine(&decalin, None, false);
    assert!(c.stable);
    let ours = partition(&c.colors);
    assert_eq!(ours, naive_partition(&decalin, false));
    let mut sizes: Vec<usize> = ours.iter().map(BTreeSet::len).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![2, 4, 4]);
    let deg = decalin.degrees();
    let bridgeheads: BTreeSet<usize> = (0..10).filter(|&v| deg[v] == 3).collect();
    assert!(ours.contains(&bridgeheads));
}

#[test]
fn witness_pair_against_oracle() {
    let decalin = parse_smiles("C1CCC2CCCCC2C1").unwrap();
    let bicyclopentyl = parse_smiles("C1CCC(C1)C1CCCC1").unwrap();
    assert!(!naive_separated(&decalin, &bicyclopentyl, true));
    assert_eq!(wl_distinguish(&decalin, &bicyclopentyl, false).0, Verdict::Indistinguishable);
    let r = jt_wl_distinguish(&decalin, &bicyclopentyl, false).unwrap();
    assert_eq!((r.wl, r.jt_wl), (Verdict::Indistinguishable, Verdict::Separated));
    let (ta, tb) = (decompose(&decalin).unwrap(), decompose(&bicyclopentyl).unwrap());
    assert_eq!((ta.num_clusters(), tb.num_clusters()), (2, 3));

    let (c5, p5) = (Graph::cycle(5), Graph::path(5));
    assert!(naive_separated(&c5, &p5, true));
    assert_eq!(wl_distinguish(&c5, &p5, false).0, Verdict::Separated);
    assert_eq!(jt_wl_distinguish(&c5, &p5, false).unwrap().jt_wl, Verdict::Separated);
}

#[test]
fn refinement_is_isomorphism_invariant() {
    let corpus = load_corpus(fixture("corpus_1000.jsonl")).unwrap();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &corpus.records[rng.gen_range(0..corpus.records.len())].graph;
        let h = g.permute(&shuffled(g.num_nodes(), &mut rng));
        for edge_labels in [false, true] {
            let (cg, ch) = (wl_refine(g, None, edge_labels), wl_refine(&h, None, edge_labels));
            assert_eq!(cg.histogram, ch.histogram, "seed {seed}");
            assert_eq!(cg.rounds, ch.rounds);
        }
        assert_eq!(wl_distinguish(g, &h, true).0, Verdict::Indistinguishable);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn jt_wl_is_sound_on_isomorphic_pairs(n in 2usize..=10, extra in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, extra, &mut rng);
        let h = g.permute(&shuffled(n, &mut rng));
        let r = jt_wl_distinguish(&g, &h, false).unwrap();
        prop_assert_eq!(r.wl, Verdict::Indistinguishable);
        prop_assert_eq!(r.jt_wl, Verdict::Indistinguishable);
        prop_assert_eq!(jt_wl_distinguish(&g, &g, true).unwrap().jt_wl, Verdict::Indistinguishable);
    }

    #[test]
    fn wl_verdict_matches_naive_oracle(n in 2usize..=9, ea in 0usize..4, eb in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_graph(n, ea, &mut rng);
        let b = random_graph(n, eb, &mut rng);
        let ours = wl_distinguish(&a, &b, false).0 == Verdict::Separated;
        prop_assert_eq!(ours, naive_separated(&a, &b, false));
        let c = wl_refine(&a, None, false);
        prop_assert_eq!(partition(&c.colors), naive_partition(&a, false));
    }

    #[test]
    fn bfs_distances_are_a_metric(n in 1usize..=14, extra in 0usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, extra, &mut rng);
        let d = bfs_all_pairs(&g).unwrap();
        for i in 0..n {
            prop_assert_eq!(d.get(i, i), 0);
            for j in 0..n {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..n {
                    prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k));
                }
            }
        }
        for e in g.edges() {
            prop_assert_eq!(d.get(e.u, e.v), 1);
        }
    }

    #[test]
    fn decomposition_is_permutation_equivariant(n in 2usize..=10, extra in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(n, extra, &mut rng);
        let perm = shuffled(n, &mut rng);
        let (a, b) = (decompose(&g).unwrap(), decompose(&g.permute(&perm)).unwrap());
        let key = |kind: String, atoms: BTreeSet<usize>| (kind, atoms);
        let mapped: BTreeSet<_> = a.clusters.iter()
            .map(|c| key(format!("{:?}", c.kind), c.atoms.iter().map(|&v| perm[v]).collect()))
            .collect();
        let direct: BTreeSet<_> = b.clusters.iter().map(|c| key(format!("{:?}", c.kind), c.atoms.iter().copied().collect())).collect();
        prop_assert_eq!(mapped, direct);
        prop_assert_eq!(a.tree_edges.len(), b.tree_edges.len());
    }
}

#[test]
fn virtual_node_bounds_distances_on_corpus() {
    let corpus = load_corpus(fixture("corpus_1000.jsonl")).unwrap();
    assert!(corpus.records.len() >= 1000);
    for r in &corpus.records {
        let n = r.graph.num_nodes();
        let d = bfs_all_pairs(&add_virtual_node(&r.graph)).unwrap();
        let worst = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| d.get(i, j)).max().unwrap_or(0);
        assert!(worst <= 2, "{}: {worst}", r.id);
    }
}
