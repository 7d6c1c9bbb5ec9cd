use geodyn::graph::{build_template_graph, normalized_adjacency, FaceGraph, TemplateConfig};
use geodyn::tensor::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Straightforward `D^-1/2 ((A+I) * M) D^-1/2` with the degree floor.
fn oracle(n: usize, edges: &[(usize, usize)], mask: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in edges {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let m: Vec<f64> = a.iter().zip(mask).map(|(x, y)| x * y).collect();
    let deg: Vec<f64> = (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().sum::<f64>().max(1e-6))
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[i * n + j] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    out
}

fn ones(n: usize) -> Tensor<f64> {
    Tensor::full(&[n, n], 1.0)
}

fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..10).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let len = pairs.len();
        (Just(n), proptest::sample::subsequence(pairs, 0..=len))
    })
}

#[test]
fn two_node_fixture() {
    let g = FaceGraph::new(2, vec![(0, 1)], None).unwrap();
    let mask: Tensor<f64> = Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 2.0, 1.0]).unwrap();
    let out = normalized_adjacency(&g, &mask).unwrap();
    let want = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
    for (a, b) in out.matrix().data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn three_node_path_fixture() {
    let g = FaceGraph::new(3, vec![(0, 1), (1, 2)], None).unwrap();
    let out = normalized_adjacency(&g, &ones(3)).unwrap();
    let d = out.matrix().data();
    let s6 = 1.0 / 6f64.sqrt();
    let want = [0.5, s6, 0.0, s6, 1.0 / 3.0, s6, 0.0, s6, 0.5];
    for (a, b) in d.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_mask_row_stays_finite() {
    let g = FaceGraph::new(3, vec![(0, 1), (1, 2)], None).unwrap();
    let mut mask = ones(3);
    for j in 0..3 {
        mask.data_mut()[j] = 0.0;
        mask.data_mut()[j * 3] = 0.0;
    }
    let out = normalized_adjacency(&g, &mask).unwrap();
    assert!(out.matrix().all_finite());
    assert_eq!(out.matrix().data()[0], 0.0);
}

#[test]
fn templates_are_connected_and_sized() {
    for cfg in [TemplateConfig::desk(), TemplateConfig::full()] {
        let (g, pos) = build_template_graph(&cfg).unwrap();
        assert_eq!(g.num_nodes(), cfg.num_nodes);
        assert_eq!(pos.len(), cfg.num_nodes);
        assert!(g.is_connected());
    }
}

#[test]
fn template_with_wrong_total_is_rejected() {
    let mut cfg = TemplateConfig::desk();
    cfg.num_nodes -= 1;
    assert!(build_template_graph(&cfg).is_err());
}

#[test]
fn invalid_edges_rejected() {
    assert!(FaceGraph::new(3, vec![(0, 3)], None).is_err());
    assert!(FaceGraph::new(3, vec![(1, 1)], None).is_err());
    assert!(FaceGraph::new(3, vec![(0, 1), (1, 0)], None).is_err());
    assert!(FaceGraph::new(0, vec![], None).is_err());
}

#[test]
fn wrong_mask_shape_rejected() {
    let g = FaceGraph::new(3, vec![(0, 1)], None).unwrap();
    assert!(normalized_adjacency(&g, &ones(2)).is_err());
}

proptest! {
    #[test]
    fn matches_oracle((n, edges) in random_graph(), seed in any::<u64>()) {
        let g = FaceGraph::new(n, edges.clone(), None).unwrap();
        let mut mask = vec![0.0; n * n];
        let mut s = seed;
        for i in 0..n {
            for j in i..n {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = 0.25 + ((s >> 33) as f64 / (1u64 << 31) as f64) * 1.5;
                mask[i * n + j] = v;
                mask[j * n + i] = v;
            }
        }
        let out = normalized_adjacency(&g, &Tensor::new(vec![n, n], mask.clone()).unwrap()).unwrap();
        for (a, b) in out.matrix().data().iter().zip(oracle(n, &edges, &mask)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_mask_spectrum_in_unit_interval((n, edges) in random_graph()) {
        let g = FaceGraph::new(n, edges, None).unwrap();
        let out = normalized_adjacency(&g, &ones(n)).unwrap();
        let m = DMatrix::from_row_slice(n, n, out.matrix().data());
        prop_assert!((&m - m.transpose()).amax() < 1e-12);
        for ev in m.symmetric_eigenvalues().iter() {
            prop_assert!(*ev >= -1.0 - 1e-9 && *ev <= 1.0 + 1e-9, "eigenvalue {}", ev);
        }
    }

    #[test]
    fn permutation_equivariance((n, edges) in random_graph(), perm_seed in any::<u64>()) {
        let g = FaceGraph::new(n, edges, None).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let h = g.relabel(&perm).unwrap();
        let a = normalized_adjacency(&g, &ones(n)).unwrap();
        let b = normalized_adjacency(&h, &ones(n)).unwrap();
        for i in 0..n {
            for j in 0..n {
                let x = a.matrix().data()[i * n + j];
                let y = b.matrix().data()[perm[i] * n + perm[j]];
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
