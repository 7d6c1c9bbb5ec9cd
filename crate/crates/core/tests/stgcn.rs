mod common;

use geodyn::graph::{build_template_graph, TemplateConfig};
use geodyn::stgcn::{
    node_activations, sequences_to_tensor, stgcn_unit_forward, Pooling, StgcnConfig, StgcnModel,
};
use geodyn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn nested(x: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let (n, s, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..n)
        .map(|i| (0..s).map(|t| x.data()[(i * s + t) * c..(i * s + t + 1) * c].to_vec()).collect())
        .collect()
}

/// Reorders the node axis of `[B, N, ...]`: new node `perm[i]` holds old node `i`.
fn permute_nodes(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    let inner = x.len() / (b * n);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..n {
            let src = (bi * n + i) * inner;
            let dst = (bi * n + perm[i]) * inner;
            out[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn shuffled<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

#[test]
fn unit_matches_dense_loops_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let s = rng.random_range(1..=8);
        let ci = rng.random_range(1..=5);
        let co = rng.random_range(1..=6);
        let extra = rng.random_range(0..=n);
        let graph = common::random_graph(n, extra, &mut rng);
        let cfg = StgcnConfig {
            in_channels: ci,
            channels: vec![co],
            strides: vec![rng.random_range(1..=2)],
            kernel: [1, 3, 5][rng.random_range(0..3)],
            batch_norm: rng.random_bool(0.5),
            residual: rng.random_bool(0.7),
            relu: rng.random_bool(0.8),
            ..StgcnConfig::default()
        };
        let mut model = StgcnModel::<f64>::new(cfg, graph, &mut rng).unwrap();
        common::randomize(&mut model, &mut rng);
        let x = random_input(&[n, s, ci], &mut rng);
        let got = stgcn_unit_forward(&model, 0, &x).unwrap();
        let want = common::unit_forward(&model, 0, &nested(&x));
        let flat: Vec<f64> = want.into_iter().flatten().flatten().collect();
        assert_eq!(got.len(), flat.len());
        for (a, b) in got.data().iter().zip(&flat) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn f32_unit_tracks_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let graph = common::random_graph(6, 4, &mut rng);
    let mut model = StgcnModel::<f64>::new(common::small_config(vec![4, 4], vec![1, 2], 3), graph, &mut rng).unwrap();
    common::randomize(&mut model, &mut rng);
    let x = random_input(&[6, 7, 2], &mut rng);
    let want: Vec<f64> = common::unit_forward(&model, 0, &nested(&x)).into_iter().flatten().flatten().collect();
    let got = stgcn_unit_forward(&model.cast::<f32>(), 0, &x.cast::<f32>()).unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn geometric_feature_is_node_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let graph = common::random_graph(16, 10, &mut rng);
    for pooling in [Pooling::Mean, Pooling::Max] {
        let cfg = StgcnConfig {
            pooling,
            ..common::small_config(vec![8, 8, 16], vec![1, 2, 1], 3)
        };
        let mut model = StgcnModel::<f64>::new(cfg, graph.clone(), &mut rng).unwrap();
        common::randomize(&mut model, &mut rng);
        let x = random_input(&[2, 16, 6, 2], &mut rng);
        let (f, z) = model.forward(&x).unwrap();
        for _ in 0..20 {
            let perm = shuffled(16, &mut rng);
            let moved = model.relabel_nodes(&perm).unwrap();
            let (fp, zp) = moved.forward(&permute_nodes(&x, &perm)).unwrap();
            for (a, b) in f.data().iter().zip(fp.data()).chain(z.data().iter().zip(zp.data())) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn batch_members_are_independent_in_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graph = common::random_graph(5, 3, &mut rng);
    let mut model = StgcnModel::<f64>::new(common::small_config(vec![4, 6], vec![2, 1], 3), graph, &mut rng).unwrap();
    common::randomize(&mut model, &mut rng);
    let x = random_input(&[3, 5, 4, 2], &mut rng);
    let (f, _) = model.forward(&x).unwrap();
    let per = 5 * 4 * 2;
    for b in 0..3 {
        let one = Tensor::new(vec![1, 5, 4, 2], x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let (fb, _) = model.forward(&one).unwrap();
        assert_eq!(fb.data(), &f.data()[b * 6..(b + 1) * 6]);
    }
}

#[test]
fn output_length_follows_strides() {
    let cfg = StgcnConfig::default();
    assert_eq!(cfg.output_steps(64), 16);
    assert_eq!(cfg.output_steps(16), 4);
    assert_eq!(cfg.output_steps(5), 2);
    assert_eq!(cfg.feature_dim(), 256);
}

#[test]
fn invalid_configs_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = common::random_graph(3, 0, &mut rng);
    let bad = [
        common::small_config(vec![4], vec![3], 3),
        common::small_config(vec![4], vec![1], 4),
        common::small_config(vec![4, 4], vec![1], 3),
        common::small_config(vec![0], vec![1], 3),
        common::small_config(vec![], vec![], 3),
    ];
    for cfg in bad {
        assert!(StgcnModel::<f64>::new(cfg, graph.clone(), &mut rng).is_err());
    }
    let model = StgcnModel::<f64>::new(common::small_config(vec![4], vec![1], 3), graph, &mut rng).unwrap();
    assert!(model.forward(&Tensor::zeros(&[1, 4, 5, 2])).is_err());
    assert!(model.forward(&Tensor::zeros(&[1, 3, 5, 3])).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (graph, _) = build_template_graph(&TemplateConfig::desk()).unwrap();
    let mut model =
        StgcnModel::<f64>::new(common::small_config(vec![8, 16], vec![1, 2], 3), graph.clone(), &mut rng).unwrap();
    common::randomize(&mut model, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path, 7).unwrap();
    let (back, epoch) = StgcnModel::<f64>::load(&path, graph.clone()).unwrap();
    assert_eq!(epoch, 7);
    assert_eq!(back, model);
    for (a, b) in back.params().iter().zip(model.params().iter()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let mut f32_model = model.cast::<f32>();
    f32_model.running_stats_mut()[0].mean[0] = 0.1f32;
    let p32 = dir.path().join("m32.json");
    f32_model.save(&p32, 1).unwrap();
    assert_eq!(StgcnModel::<f32>::load(&p32, graph.clone()).unwrap().0, f32_model);

    let other = common::random_graph(48, 5, &mut rng);
    assert!(StgcnModel::<f64>::load(&path, other).is_err());
}

#[test]
fn activations_are_nonnegative_and_permute_with_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graph = common::random_graph(7, 5, &mut rng);
    let mut model = StgcnModel::<f64>::new(common::small_config(vec![4, 4], vec![1, 2], 3), graph, &mut rng).unwrap();
    common::randomize(&mut model, &mut rng);
    let x = random_input(&[7, 6, 2], &mut rng);
    let act = node_activations(&model, &x).unwrap();
    assert_eq!(act.shape(), &[7, 3]);
    assert!(act.data().iter().all(|&v| v >= 0.0));

    let perm = shuffled(7, &mut rng);
    let moved = model.relabel_nodes(&perm).unwrap();
    let xp = permute_nodes(&x.clone().reshape(&[1, 7, 6, 2]).unwrap(), &perm)
        .reshape(&[7, 6, 2])
        .unwrap();
    let act_p = node_activations(&moved, &xp).unwrap();
    for i in 0..7 {
        for t in 0..3 {
            let (a, b) = (act.data()[i * 3 + t], act_p.data()[perm[i] * 3 + t]);
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn sequences_stack_node_major() {
    use geodyn::landmarks::LandmarkSequence;
    let seq = LandmarkSequence {
        id: "a".into(),
        label: "live".into(),
        fps: 30.0,
        frames: vec![vec![[1.0, 2.0], [3.0, 4.0]], vec![[5.0, 6.0], [7.0, 8.0]]],
    };
    let t = sequences_to_tensor::<f64>(&[&seq]).unwrap();
    assert_eq!(t.shape(), &[1, 2, 2, 2]);
    assert_eq!(t.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    let mut short = seq.clone();
    short.frames.pop();
    assert!(sequences_to_tensor::<f64>(&[&seq, &short]).is_err());
}
