use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgvae_core::kg::{DenseGraph, SparseGraph};
use rgvae_core::matching::{
    affinity_batch, apply_permutation, discretize, hungarian_assign, match_graphs, maxpool_similarity,
    AffinityPair, PermutationMatrix,
};
use rgvae_core::tensor::Tensor;

fn random_target(rng: &mut ChaCha8Rng, n: usize, de: usize, dr: usize) -> SparseGraph {
    let nodes = (0..n).map(|_| rng.random_range(0..de)).collect();
    let edges = (0..n * n)
        .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..dr)))
        .collect();
    SparseGraph::new(de, dr, nodes, edges).unwrap()
}

fn random_pred(rng: &mut ChaCha8Rng, k: usize, de: usize, dr: usize) -> DenseGraph {
    let mut simplex = |rows: usize, width: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(rows * width);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..width).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            v.extend(raw.iter().map(|x| x / s));
        }
        v
    };
    let e = simplex(k * k, dr);
    let f = simplex(k, de);
    let a = (0..k * k).map(|_| rng.random::<f64>()).collect();
    DenseGraph::new(k, de, dr, a, e, f).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Five-index loops over dense one-hot tensors with explicit diagonal masking.
fn affinity_oracle(t: &SparseGraph, p: &DenseGraph) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = (t.n(), p.k);
    let (de, dr) = (p.num_entities, p.num_relations);
    let a = t.adjacency();
    let e = t.edge_attributes();
    let f = t.node_attributes();
    let mut sr = vec![0.0; n * n * k * k];
    for i in 0..n {
        for j in 0..n {
            for aa in 0..k {
                for bb in 0..k {
                    let mask = if i == j || aa == bb { 0.0 } else { 1.0 };
                    let e_ij = &e.data()[(i * n + j) * dr..(i * n + j + 1) * dr];
                    sr[((i * n + j) * k + aa) * k + bb] = mask
                        * dot(e_ij, p.edge_row(aa, bb))
                        * a.at(&[i, j])
                        * p.adj(aa, bb)
                        * p.adj(aa, aa)
                        * p.adj(bb, bb);
                }
            }
        }
    }
    let mut se = vec![0.0; n * k];
    for i in 0..n {
        for aa in 0..k {
            se[i * k + aa] = dot(&f.data()[i * de..(i + 1) * de], p.node_row(aa)) * p.adj(aa, aa);
        }
    }
    (sr, se)
}

fn maxpool_oracle(sr: &[f64], se: &[f64], n: usize, k: usize, iters: usize) -> Vec<f64> {
    let mut x = vec![1.0; n * k];
    for _ in 0..iters {
        let mut next = vec![0.0; n * k];
        for i in 0..n {
            for a in 0..k {
                let mut v = x[i * k + a] * se[i * k + a];
                for j in 0..n {
                    let mut m = 0.0f64;
                    for b in 0..k {
                        m = m.max(x[j * k + b] * sr[((i * n + j) * k + a) * k + b]);
                    }
                    v += m;
                }
                next[i * k + a] = v;
            }
        }
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = next.iter().map(|v| v / norm).collect();
    }
    x
}

#[test]
fn affinity_and_maxpool_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..60 {
        let n = rng.random_range(1..=5);
        let k = rng.random_range(n..=5);
        let de = rng.random_range(1..=7);
        let dr = rng.random_range(1..=7);
        let b = rng.random_range(1..=3);
        let targets: Vec<_> = (0..b).map(|_| random_target(&mut rng, n, de, dr)).collect();
        let preds: Vec<_> = (0..b).map(|_| random_pred(&mut rng, k, de, dr)).collect();
        let aff = affinity_batch(&targets, &preds).unwrap();
        let sim = maxpool_similarity(&aff, 20).unwrap();
        for g in 0..b {
            let (sr, se) = affinity_oracle(&targets[g], &preds[g]);
            let blk = n * n * k * k;
            let got_sr = &aff.edge.data()[g * blk..(g + 1) * blk];
            let got_se = &aff.node.data()[g * n * k..(g + 1) * n * k];
            for (x, y) in got_sr.iter().zip(&sr).chain(got_se.iter().zip(&se)) {
                assert!((x - y).abs() < 1e-12);
            }
            if sim.degenerate[g] {
                continue;
            }
            let x = maxpool_oracle(&sr, &se, n, k, 20);
            let got = &sim.x.data()[g * n * k..(g + 1) * n * k];
            for (a, b) in got.iter().zip(&x) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            let norm: f64 = got.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(got.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn affinity_with_half_adjacency() {
    let t = SparseGraph::new(3, 2, vec![0, 2], vec![None, Some(1), Some(0), None]).unwrap();
    let mut p = DenseGraph::from_sparse(&t);
    p.adjacency = vec![0.5; 4];
    let aff = affinity_batch(std::slice::from_ref(&t), &[p.clone()]).unwrap();
    let (sr, se) = affinity_oracle(&t, &p);
    assert_eq!(aff.edge.data(), sr.as_slice());
    assert_eq!(aff.node.data(), se.as_slice());
    // Matching edge (0,1) to itself: 1 * 1 * 0.5^3.
    assert_eq!(aff.edge.at(&[0, 0, 1, 0, 1]), 0.125);
    assert_eq!(aff.node.at(&[0, 1, 1]), 0.5);
}

fn injective_maps(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    fn go(rows: usize, cols: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == rows {
            out.push(cur.clone());
            return;
        }
        for c in 0..cols {
            if !cur.contains(&c) {
                cur.push(c);
                go(rows, cols, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(rows, cols, &mut Vec::new(), &mut out);
    out
}

#[test]
fn hungarian_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cache: std::collections::HashMap<(usize, usize), Vec<Vec<usize>>> = Default::default();
    for trial in 0..1200 {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(rows..=6);
        let integer = trial % 2 == 0;
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if integer {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random::<f64>() * 10.0 - 5.0
                }
            })
            .collect();
        let maps = cache
            .entry((rows, cols))
            .or_insert_with(|| injective_maps(rows, cols));
        let total = |m: &[usize]| -> f64 { m.iter().enumerate().map(|(i, &c)| cost[i * cols + c]).sum() };
        // Enumeration is lexicographic, so the first strict minimum is the
        // lexicographically smallest optimal sequence.
        let mut best = maps[0].clone();
        for m in maps.iter() {
            if total(m) < total(&best) - 1e-12 {
                best = m.clone();
            }
        }
        let got = hungarian_assign(&cost, rows, cols).unwrap();
        assert!((got.total - total(&best)).abs() < 1e-9, "trial {trial}");
        if integer {
            assert_eq!(got.columns, best, "trial {trial}");
        }
    }
}

#[test]
fn five_by_five_integer_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cost: Vec<f64> = (0..25).map(|_| rng.random_range(0..100) as f64).collect();
    let brute = injective_maps(5, 5)
        .iter()
        .map(|m| m.iter().enumerate().map(|(i, &c)| cost[i * 5 + c]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(hungarian_assign(&cost, 5, 5).unwrap().total, brute);
}

/// Copy of a graph as a prediction whose nodes all exist.
fn as_prediction(g: &SparseGraph) -> DenseGraph {
    let mut d = DenseGraph::from_sparse(g);
    for a in 0..d.k {
        d.adjacency[a * d.k + a] = 1.0;
    }
    d
}

fn unique_nodes_graph(rng: &mut ChaCha8Rng, n: usize, de: usize, dr: usize) -> SparseGraph {
    let mut pool: Vec<usize> = (0..de).collect();
    let mut nodes = Vec::new();
    for _ in 0..n {
        nodes.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    let edges = (0..n * n)
        .map(|ij| (ij / n != ij % n && rng.random_bool(0.5)).then(|| rng.random_range(0..dr)))
        .collect();
    SparseGraph::new(de, dr, nodes, edges).unwrap()
}

#[test]
fn identical_graphs_match_to_identity() {
    // Every edge pattern for n = 2, 3, sampled patterns for n = 4.
    for n in 2..=3usize {
        let pairs: Vec<usize> = (0..n * n).filter(|ij| ij / n != ij % n).collect();
        for mask in 0..(1u32 << pairs.len()) {
            let mut edges = vec![None; n * n];
            for (bit, &ij) in pairs.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    edges[ij] = Some(0);
                }
            }
            let g = SparseGraph::new(n, 1, (0..n).rev().collect(), edges).unwrap();
            let aff = affinity_batch(std::slice::from_ref(&g), &[as_prediction(&g)]).unwrap();
            let sim = maxpool_similarity(&aff, 75).unwrap();
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|a| sim.x.at(&[0, i, a])).collect();
                assert_eq!(rgvae_core::kg::argmax(&row), i);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let g = unique_nodes_graph(&mut rng, 4, 9, 3);
        let p = match_graphs(std::slice::from_ref(&g), &[as_prediction(&g)], 75).unwrap();
        assert!(p[0].is_identity());
    }
}

#[test]
fn permuted_copy_recovers_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 200;
    let mut recovered = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=4);
        let g = unique_nodes_graph(&mut rng, n, 10, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pred = g.permute_nodes(&perm).unwrap();
        let x = &match_graphs(&[g], &[as_prediction(&pred)], 75).unwrap()[0];
        let mut inverse = vec![0; n];
        for (p, &old) in perm.iter().enumerate() {
            inverse[old] = p;
        }
        if x.columns() == inverse.as_slice() {
            recovered += 1;
        }
    }
    assert!(recovered as f64 >= 0.99 * trials as f64, "{recovered}/{trials}");
}

#[test]
fn degenerate_batches_keep_other_elements() {
    let zero = Tensor::zeros([1, 2, 2, 2, 2]);
    let mut edge = zero.data().to_vec();
    edge.extend(zero.data());
    let aff = AffinityPair {
        edge: Tensor::new([2, 2, 2, 2, 2], edge).unwrap(),
        node: Tensor::new([2, 2, 2], vec![0., 0., 0., 0., 0., 1., 1., 0.]).unwrap(),
    };
    let p = discretize(&maxpool_similarity(&aff, 10).unwrap()).unwrap();
    assert!(p[0].is_degenerate() && p[0].is_identity());
    assert_eq!(p[1].columns(), &[1, 0]);
}

fn relabel_oracle(x: &PermutationMatrix, t: &SparseGraph, p: &DenseGraph) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, k, de, dr) = (t.n(), p.k, p.num_entities, p.num_relations);
    let mut a = vec![0.0; k * k];
    for i in 0..n {
        for j in 0..n {
            if t.edge(i, j).is_some() {
                a[x.column(i) * k + x.column(j)] = 1.0;
            }
        }
    }
    let mut f = Vec::new();
    for i in 0..n {
        f.extend_from_slice(p.node_row(x.column(i)));
    }
    let mut e = Vec::new();
    for i in 0..n {
        for j in 0..n {
            e.extend_from_slice(p.edge_row(x.column(i), x.column(j)));
        }
    }
    assert_eq!(f.len(), n * de);
    assert_eq!(e.len(), n * n * dr);
    (a, e, f)
}

proptest! {
    #[test]
    fn apply_permutation_matches_relabeling(seed in 0u64..10_000, n in 1usize..5, extra in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n + extra;
        let t = random_target(&mut rng, n, 4, 3);
        let p = random_pred(&mut rng, k, 4, 3);
        let mut cols: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            cols.swap(i, rng.random_range(0..=i));
        }
        cols.truncate(n);
        let x = PermutationMatrix::from_columns(cols, k).unwrap();
        let out = apply_permutation(&x, &t, &p).unwrap();
        let (a, e, f) = relabel_oracle(&x, &t, &p);
        prop_assert_eq!(out.adjacency.data(), a.as_slice());
        prop_assert_eq!(out.edge_attributes.data(), e.as_slice());
        prop_assert_eq!(out.node_attributes.data(), f.as_slice());
        prop_assert_eq!(out.adjacency.sum(), t.adjacency().sum());

        let xm = x.to_tensor();
        for i in 0..n {
            prop_assert_eq!((0..k).map(|c| xm.at(&[i, c])).sum::<f64>(), 1.0);
        }
        if n == k {
            let xtx = xm.transpose2().unwrap().matmul(&xm).unwrap();
            for r in 0..k {
                for c in 0..k {
                    prop_assert_eq!(xtx.at(&[r, c]), if r == c { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn discretize_yields_partial_permutations(seed in 0u64..10_000, n in 1usize..5, extra in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = n + extra;
        let t = random_target(&mut rng, n, 5, 2);
        let p = random_pred(&mut rng, k, 5, 2);
        let x = &match_graphs(&[t], &[p], 10).unwrap()[0];
        let m = x.to_tensor();
        for c in 0..k {
            prop_assert!((0..n).map(|i| m.at(&[i, c])).sum::<f64>() <= 1.0);
        }
    }
}
