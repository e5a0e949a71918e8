use curvecov::graph::{
    balanced_forman_curvature, batch_average, bottleneck_scores, cheeger_brute, cut_conductance,
    diagnostics, reweight, scaled_kirchhoff, spectrum, symmetrize, Support, WeightedGraph,
};
use curvecov::linalg::sym_eigenvalues;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(seed: u64, n: usize, p: f64, connected: bool) -> WeightedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let tree_edge = connected && j == i + 1;
            if tree_edge || rng.random::<f64>() < p {
                let v = rng.random_range(0.1..2.0);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
    }
    // relabel so the spanning path is not always 0-1-2-...
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    WeightedGraph::new(DMatrix::from_fn(n, n, |i, j| w[(perm[i], perm[j])])).unwrap()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_rows_sum_to_zero_and_are_psd(seed in any::<u64>(), n in 1usize..15, p in 0.0..0.8f64) {
        let g = random_graph(seed, n, p, false);
        let l = g.laplacian();
        for i in 0..n {
            prop_assert!(l.row(i).sum().abs() < 1e-12);
        }
        prop_assert!(min_eig(&l) >= -1e-10 * (1.0 + l.norm()));
    }

    #[test]
    fn laplacian_is_additive_and_increment_is_psd(seed in any::<u64>(), n in 2usize..15) {
        let a = random_graph(seed, n, 0.4, false);
        let b = random_graph(seed ^ 0x9e37, n, 0.4, false);
        let sum = WeightedGraph::new(a.weights() + b.weights()).unwrap();
        let diff = sum.laplacian() - (a.laplacian() + b.laplacian());
        prop_assert!(diff.amax() <= 1e-12 * (1.0 + sum.laplacian().amax()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lb = b.laplacian();
        for _ in 0..100 {
            let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            prop_assert!(x.dot(&(&lb * &x)) >= -1e-12);
        }
    }

    #[test]
    fn reweighting_dominates_in_loewner_order(
        seed in any::<u64>(),
        n in 2usize..20,
        kappa0 in -2.0..1.0f64,
        tau in 0.1..10.0f64,
        lambda in 0.0..5.0f64,
    ) {
        let g = random_graph(seed, n, 0.3, true);
        let report = bottleneck_scores(&g, kappa0, tau).unwrap();
        let rewired = reweight(&g, &report, lambda).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (w, w2) = (g.weight(i, j), rewired.weight(i, j));
                prop_assert!(w2 >= w);
                prop_assert_eq!(w == 0.0, w2 == 0.0);
            }
        }
        let gap = rewired.laplacian() - g.laplacian();
        prop_assert!(min_eig(&gap) >= -1e-10);
        let s = spectrum(&g.laplacian()).unwrap();
        let s2 = spectrum(&rewired.laplacian()).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            prop_assert!(*b >= a - 1e-10);
        }
        let k = scaled_kirchhoff(&g.laplacian()).unwrap();
        let k2 = scaled_kirchhoff(&rewired.laplacian()).unwrap();
        prop_assert!(k2 <= k + 1e-10);
    }

    #[test]
    fn scores_follow_softplus(seed in any::<u64>(), n in 2usize..12, kappa0 in -2.0..1.0f64, tau in 0.1..10.0f64) {
        let g = random_graph(seed, n, 0.5, true);
        let report = bottleneck_scores(&g, kappa0, tau).unwrap();
        for e in &report.edges {
            let x: f64 = tau * (kappa0 - e.curvature);
            let expected = (1.0 + x.exp()).ln();
            prop_assert!(e.score >= 0.0);
            prop_assert!((e.score - expected).abs() <= 1e-12 * (1.0 + expected));
            prop_assert!(g.weight(e.i, e.j) > 0.0);
        }
    }

    #[test]
    fn boundary_strengthening_never_lowers_conductance(
        seed in any::<u64>(),
        n in 2usize..14,
        mask in any::<u16>(),
        factor in 1.0..4.0f64,
    ) {
        let g = random_graph(seed, n, 0.4, true);
        let s: Vec<usize> = (0..n).filter(|v| mask & (1 << v) != 0).collect();
        prop_assume!(!s.is_empty() && s.len() < n);
        let mut w = g.weights().clone();
        for i in 0..n {
            for j in 0..n {
                if s.contains(&i) != s.contains(&j) {
                    w[(i, j)] *= factor;
                }
            }
        }
        let strengthened = WeightedGraph::new(w).unwrap();
        let before = cut_conductance(&g, &s).unwrap();
        let after = cut_conductance(&strengthened, &s).unwrap();
        prop_assert!(after >= before - 1e-12);
    }

    #[test]
    fn cheeger_matches_direct_enumeration(seed in any::<u64>(), n in 2usize..9) {
        let g = random_graph(seed, n, 0.4, true);
        let (h, s) = cheeger_brute(&g).unwrap();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let subset: Vec<usize> = (0..n).filter(|v| mask & (1 << v) != 0).collect();
            best = best.min(cut_conductance(&g, &subset).unwrap());
        }
        prop_assert!((h - best).abs() <= 1e-12 * (1.0 + best));
        prop_assert!((cut_conductance(&g, &s).unwrap() - h).abs() <= 1e-15);
    }

    #[test]
    fn curvature_is_symmetric_in_the_edge(seed in any::<u64>(), n in 2usize..10) {
        let g = random_graph(seed, n, 0.5, true);
        for (i, j) in Support::new(&g, 1e-12).edges() {
            let a = balanced_forman_curvature(&g, (i, j)).unwrap();
            let b = balanced_forman_curvature(&g, (j, i)).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a >= -2.0 - 1e-12);
        }
    }

    #[test]
    fn curvature_ignores_weights(seed in any::<u64>(), n in 2usize..10, scale in 0.01..100.0f64) {
        let g = random_graph(seed, n, 0.5, true);
        let scaled = WeightedGraph::new(g.weights() * scale).unwrap();
        prop_assert_eq!(
            bottleneck_scores(&g, 0.0, 5.0).unwrap(),
            bottleneck_scores(&scaled, 0.0, 5.0).unwrap()
        );
    }

    #[test]
    fn symmetrize_is_half_sum_with_cleared_diagonal(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..3.0));
        let g = symmetrize(&a).unwrap();
        for i in 0..n {
            for j in 0..n {
                let expected = if i == j { 0.0 } else { 0.5 * (a[(i, j)] + a[(j, i)]) };
                prop_assert_eq!(g.weight(i, j), expected);
            }
        }
    }
}

#[test]
fn random_reweighting_lowers_kirchhoff_when_any_edge_strengthens() {
    for seed in 0..20 {
        let g = random_graph(seed, 12, 0.3, true);
        let report = bottleneck_scores(&g, 0.0, 5.0).unwrap();
        let rewired = reweight(&g, &report, 1.0).unwrap();
        let d = diagnostics(&g, &rewired, &[vec![0, 1, 2]]).unwrap();
        assert!(d.kirchhoff_after < d.kirchhoff_before);
        assert!(d.ratios.kirchhoff_pct < 100.0);
        assert!(d.eigenvalue_monotone);
    }
}

#[test]
fn batch_average_then_symmetrize_keeps_a_valid_graph() {
    let snapshots: Vec<_> = (0..4)
        .map(|s| random_graph(s, 6, 0.5, true).into_weights())
        .collect();
    let avg = batch_average(&snapshots).unwrap();
    let g = symmetrize(&avg).unwrap();
    for i in 0..6 {
        assert_eq!(g.weight(i, i), 0.0);
        for j in 0..6 {
            let mean: f64 = snapshots.iter().map(|m| m[(i, j)]).sum::<f64>() / 4.0;
            assert!((g.weight(i, j) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn single_node_cut_is_an_equality_case() {
    let g = WeightedGraph::from_edges(4, &[(0, 1, 0.5), (1, 2, 1.0), (2, 3, 1.0), (1, 3, 1.0)]).unwrap();
    let mut w = g.weights().clone();
    w[(0, 1)] = 1.5;
    w[(1, 0)] = 1.5;
    let strengthened = WeightedGraph::new(w).unwrap();
    assert_eq!(cut_conductance(&g, &[0]).unwrap(), 1.0);
    assert_eq!(cut_conductance(&strengthened, &[0]).unwrap(), 1.0);
}
