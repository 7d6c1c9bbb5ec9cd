use std::collections::BTreeMap;

use geodyn::fusion::{
    cross_attention, fusion_forward, load_photometric_features, write_photometric_features, FusionConfig,
    FusionInput, FusionModel, PhotometricFeature, TokenMode, TokenScaling,
};
use geodyn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn config(d_a: usize, tokens: TokenMode) -> FusionConfig {
    FusionConfig {
        attention_dim: d_a,
        tokens,
        standardize: false,
        ..FusionConfig::default()
    }
}

/// Explicit-loop `softmax(q kᵀ / √d) v`.
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], m: usize, n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; m * n];
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        for j in 0..n {
            weights[i * n + j] = exps[j] / total;
            for c in 0..d {
                out[i * d + c] += weights[i * n + j] * v[j * d + c];
            }
        }
    }
    (out, weights)
}

#[test]
fn single_token_interaction_is_value_projection_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let (dg, dp, da) = (rng.random_range(1..40), rng.random_range(1..40), rng.random_range(1..64));
        let model = FusionModel::<f64>::new(dg, dp, config(da, TokenMode::Single), &mut rng).unwrap();
        let input = FusionInput {
            geometric: random(&[1, dg], &mut rng),
            photometric: random(&[1, dp], &mut rng),
        };
        let (f_gp, f_pg) = model.interact(&input).unwrap();
        let want_gp = input.photometric.matmul(model.params().value("wv_p").unwrap()).unwrap();
        let want_pg = input.geometric.matmul(model.params().value("wv_g").unwrap()).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&f_gp), bits(&want_gp), "trial {trial}");
        assert_eq!(bits(&f_pg), bits(&want_pg), "trial {trial}");

        let q = random(&[1, da], &mut rng);
        let (_, w) = cross_attention(&q, &want_gp, &want_gp).unwrap();
        assert_eq!(w.data(), &[1.0]);
    }
}

#[test]
fn single_token_is_bitwise_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = FusionModel::<f32>::new(16, 12, config(32, TokenMode::Single), &mut rng).unwrap();
    let input = FusionInput {
        geometric: random(&[1, 16], &mut rng).cast::<f32>(),
        photometric: random(&[1, 12], &mut rng).cast::<f32>(),
    };
    let (f_gp, _) = model.interact(&input).unwrap();
    let want = input.photometric.matmul(model.params().value("wv_p").unwrap()).unwrap();
    assert!(f_gp.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn cross_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (m, n, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..8));
        let (q, k, v) = (random(&[m, d], &mut rng), random(&[n, d], &mut rng), random(&[n, d], &mut rng));
        let (out, w) = cross_attention(&q, &k, &v).unwrap();
        let (want_out, want_w) = attention_oracle(q.data(), k.data(), v.data(), m, n, d);
        for (a, b) in out.data().iter().zip(&want_out).chain(w.data().iter().zip(&want_w)) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in w.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_fixtures() {
    // equal scores split weight evenly
    let q = Tensor::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap();
    let k = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Tensor::from_f64(vec![2, 2], &[2.0, 0.0, 0.0, 4.0]).unwrap();
    let (out, w) = cross_attention::<f64>(&q, &k, &v).unwrap();
    assert_eq!(w.data(), &[0.5, 0.5]);
    assert_eq!(out.data(), &[1.0, 2.0]);
    // a dominant score concentrates the weight
    let q = Tensor::from_f64(vec![1, 2], &[100.0, 0.0]).unwrap();
    let (out, _) = cross_attention::<f64>(&q, &k, &v).unwrap();
    assert!((out.data()[0] - 2.0).abs() < 1e-12 && out.data()[1].abs() < 1e-12);
    assert!(cross_attention::<f64>(&q, &k, &Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn multi_token_interaction_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (dg, dp, da) = (5, 3, 4);
    let model = FusionModel::<f64>::new(dg, dp, config(da, TokenMode::Multi), &mut rng).unwrap();
    let input = FusionInput {
        geometric: random(&[3, dg], &mut rng),
        photometric: random(&[4, dp], &mut rng),
    };
    let w = |name: &str| model.params().value(name).unwrap().clone();
    let proj = |x: &Tensor<f64>, name: &str| {
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let wt = w(name);
        let mut out = vec![0.0; r * da];
        for i in 0..r {
            for o in 0..da {
                out[i * da + o] = (0..c).map(|j| x.data()[i * c + j] * wt.data()[j * da + o]).sum();
            }
        }
        out
    };
    let (g, p) = (&input.geometric, &input.photometric);
    let (want_gp, _) = attention_oracle(&proj(g, "wq_g"), &proj(p, "wk_p"), &proj(p, "wv_p"), 3, 4, da);
    let (want_pg, _) = attention_oracle(&proj(p, "wq_p"), &proj(g, "wk_g"), &proj(g, "wv_g"), 4, 3, da);
    let (f_gp, f_pg) = model.interact(&input).unwrap();
    assert_eq!(f_gp.shape(), &[3, da]);
    assert_eq!(f_pg.shape(), &[4, da]);
    for (a, b) in f_gp.data().iter().zip(&want_gp).chain(f_pg.data().iter().zip(&want_pg)) {
        assert!((a - b).abs() < 1e-12);
    }

    // classifier on the mean-pooled interactions
    let mean = |v: &[f64], rows: usize| (0..da).map(|c| (0..rows).map(|r| v[r * da + c]).sum::<f64>() / rows as f64).collect::<Vec<_>>();
    let mut joint = mean(&want_gp, 3);
    joint.extend(mean(&want_pg, 4));
    let (cw, cb) = (w("cls.weight"), w("cls.bias"));
    let logits: Vec<f64> = (0..3)
        .map(|k| cb.data()[k] + (0..2 * da).map(|i| joint[i] * cw.data()[i * 3 + k]).sum::<f64>())
        .collect();
    let (got, live) = fusion_forward(&model, &input).unwrap();
    for k in 0..3 {
        assert!((got[k] - logits[k]).abs() < 1e-12);
    }
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    assert!((live - logits[0].exp() / z).abs() < 1e-12);
}

#[test]
fn token_scaling_standardizes_training_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs: Vec<FusionInput<f64>> = (0..30)
        .map(|_| FusionInput {
            geometric: random(&[1, 3], &mut rng).map(|v| 5.0 + 3.0 * v),
            photometric: random(&[1, 2], &mut rng),
        })
        .collect();
    let sc = TokenScaling::fit(&inputs).unwrap();
    for c in 0..3 {
        let col: Vec<f64> = inputs.iter().map(|x| (x.geometric.data()[c] - sc.geometric_mean[c]) * sc.geometric_scale[c]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    let mut model = FusionModel::<f64>::new(3, 2, config(4, TokenMode::Single), &mut rng).unwrap();
    model.set_scaling(Some(sc.clone())).unwrap();
    let mut wrong = sc;
    wrong.geometric_mean.pop();
    assert!(model.set_scaling(Some(wrong)).is_err());
}

#[test]
fn checkpoint_round_trip_with_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = FusionModel::<f32>::new(6, 4, FusionConfig::default(), &mut rng).unwrap();
    let inputs: Vec<FusionInput<f32>> = (0..5)
        .map(|_| FusionInput {
            geometric: random(&[1, 6], &mut rng).cast(),
            photometric: random(&[1, 4], &mut rng).cast(),
        })
        .collect();
    model.set_scaling(Some(TokenScaling::fit(&inputs).unwrap())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fusion.json");
    model.save(&path, 3, "abc").unwrap();
    let (back, ck) = FusionModel::<f32>::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(ck.metadata["gcn_hash"], "abc");
    assert_eq!(back.predict(&inputs).unwrap(), model.predict(&inputs).unwrap());
}

#[test]
fn batch_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = FusionModel::<f64>::new(4, 3, config(4, TokenMode::Single), &mut rng).unwrap();
    let bad = FusionInput {
        geometric: random(&[1, 5], &mut rng),
        photometric: random(&[1, 3], &mut rng),
    };
    assert!(model.interact(&bad).is_err());
    assert!(model.predict(&[]).unwrap().is_empty());
    assert!(FusionModel::<f64>::new(0, 3, config(4, TokenMode::Single), &mut rng).is_err());
    assert!(FusionModel::<f64>::new(4, 3, config(0, TokenMode::Single), &mut rng).is_err());
}

#[test]
fn feature_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.jsonl");
    let feats = vec![
        PhotometricFeature {
            id: "a".into(),
            feature: vec![1.0, 2.0],
            frames: Some(vec![vec![0.0, 1.0], vec![2.0, 3.0]]),
        },
        PhotometricFeature {
            id: "b".into(),
            feature: vec![0.5, -1.0],
            frames: None,
        },
    ];
    write_photometric_features(&path, &feats).unwrap();
    let map: BTreeMap<String, PhotometricFeature> = load_photometric_features(&path).unwrap();
    assert_eq!(map.values().cloned().collect::<Vec<_>>(), feats);

    let bad_cases = [
        r#"{"id":"a","feature":[1.0,2.0]}
{"id":"a","feature":[1.0,2.0]}"#,
        r#"{"id":"a","feature":[1.0,2.0]}
{"id":"b","feature":[1.0]}"#,
        r#"{"id":"a","feature":[]}"#,
        r#"{"id":"a","feature":[1.0],"frames":[[0.0],[1.0]]}"#,
        r#"{"id":"a","feature":[1.0],"frames":[[1.0,2.0]]}"#,
        r#"{"id":"a","feature":[1.0],"extra":true}"#,
        r#"not json"#,
    ];
    for text in bad_cases {
        std::fs::write(&path, text).unwrap();
        assert!(load_photometric_features(&path).is_err(), "{text}");
    }
}
