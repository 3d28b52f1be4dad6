use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subformer::graph::Graph;
use subformer::spectral::{fix_signs, jacobi_eigh, laplacian_pe, spd_pe, Matrix};

fn symmetric(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let x: f64 = rng.gen_range(-1.0..1.0);
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    m
}

fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Graph {
    let edges: Vec<(usize, usize, u32)> = (1..n).map(|i| (rng.gen_range(0..i), i, 0)).collect();
    Graph::new(vec![6; n], edges).unwrap()
}

fn random_connected(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    Graph::new(vec![6; n], edges.into_iter().map(|(a, b)| (a, b, 0))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eigensolver_reconstructs(n in 1usize..=50, seed in any::<u64>()) {
        let m = symmetric(n, seed);
        let e = jacobi_eigh(&m).unwrap();
        let v = &e.vectors;
        let recon = v.matmul(&Matrix::diag(&e.values)).matmul(&v.transpose());
        prop_assert!(recon.max_abs_diff(&m) < 1e-7);
        prop_assert!(v.transpose().matmul(v).max_abs_diff(&Matrix::identity(n)) < 1e-8);
        prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        // M v = λ v per column
        let mv = m.matmul(v);
        for j in 0..n {
            for i in 0..n {
                prop_assert!((mv[(i, j)] - e.values[j] * v[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sign_convention_is_idempotent(n in 1usize..=12, seed in any::<u64>()) {
        let mut once = jacobi_eigh(&symmetric(n, seed)).unwrap().vectors;
        fix_signs(&mut once);
        let mut twice = once.clone();
        fix_signs(&mut twice);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn laplacian_pe_columns_orthonormal(n in 2usize..=30, extra in 0usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_connected(n, extra, &mut rng);
        let k = 8;
        let pe = laplacian_pe(&g, k).unwrap();
        let live = (n - 1).min(k);
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = (0..n).map(|i| pe[(i, a)] * pe[(i, b)]).sum();
                let want = if a == b && a < live { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-6, "columns {a},{b}: {dot}");
            }
        }
    }
}

/// Relabeling a tree with simple distance spectrum permutes SPDE rows.
#[test]
fn spd_pe_permutation_equivariant_on_trees() {
    let mut tested = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(5..14);
        let g = random_tree(n, &mut rng);
        let m = {
            let d = subformer::graph::bfs_all_pairs(&g).unwrap();
            Matrix::from_rows(&d.to_rows().iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect::<Vec<_>>())
        };
        let vals = jacobi_eigh(&m).unwrap().values;
        let mut mags: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        if mags.windows(2).any(|w| w[1] - w[0] < 1e-6) {
            continue;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let h = g.permute(&perm);
        let k = 4;
        let a = spd_pe(&g, k).unwrap();
        let b = spd_pe(&h, k).unwrap();
        // equal up to a per-column sign: tied max-magnitude entries may
        // swap under relabeling
        for j in 0..k {
            let same = (0..n).all(|i| (a[(i, j)] - b[(perm[i], j)]).abs() < 1e-8);
            let flipped = (0..n).all(|i| (a[(i, j)] + b[(perm[i], j)]).abs() < 1e-8);
            assert!(same || flipped, "seed {seed}, column {j}");
        }
        tested += 1;
    }
    assert!(tested >= 5, "too few trees with simple spectrum: {tested}");
}
