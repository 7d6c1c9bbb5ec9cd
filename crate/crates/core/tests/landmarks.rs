use geodyn::landmarks::{
    flip, inference_window_start, load_sequences, mirror_pad, normalize_frame, rotate, select_inference_window,
    subsample_random, window_motion_score, write_sequences, FusionClass, LandmarkSequence, MovementClassMap, Point,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seq_of(frames: Vec<Vec<Point>>) -> LandmarkSequence {
    LandmarkSequence {
        id: "s".into(),
        label: "live".into(),
        fps: 30.0,
        frames,
    }
}

/// Frame `i` carries `i` in node 0's x so frame order can be read back.
fn tagged(t: usize, n: usize) -> LandmarkSequence {
    seq_of(
        (0..t)
            .map(|i| (0..n).map(|j| if j == 0 { [i as f64, 0.0] } else { [j as f64, 1.0] }).collect())
            .collect(),
    )
}

fn tags(seq: &LandmarkSequence) -> Vec<usize> {
    seq.frames.iter().map(|f| f[0][0] as usize).collect()
}

fn close(a: &[Point], b: &[Point], tol: f64) -> bool {
    a.iter().zip(b).all(|(p, q)| (p[0] - q[0]).abs() <= tol && (p[1] - q[1]).abs() <= tol)
}

fn frame_strategy() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0).prop_map(|(x, y)| [x, y]), 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn normalization_is_idempotent(frame in frame_strategy()) {
        let once = normalize_frame(&frame);
        let twice = normalize_frame(&once);
        prop_assert!(close(&once, &twice, 1e-9));
        for p in &once {
            prop_assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }
    }

    #[test]
    fn normalization_ignores_positive_axis_scaling(
        frame in frame_strategy(),
        sx in 0.01f64..50.0, sy in 0.01f64..50.0,
        tx in -1e3f64..1e3, ty in -1e3f64..1e3,
    ) {
        let moved: Vec<Point> = frame.iter().map(|p| [sx * p[0] + tx, sy * p[1] + ty]).collect();
        prop_assert!(close(&normalize_frame(&frame), &normalize_frame(&moved), 1e-9));
    }

    #[test]
    fn constant_axis_maps_to_half(frame in frame_strategy(), c in -50.0f64..50.0) {
        let flat: Vec<Point> = frame.iter().map(|p| [p[0], c]).collect();
        let out = normalize_frame(&flat);
        prop_assert!(out.iter().all(|p| p[1] == 0.5));
        prop_assert!(close(&out, &normalize_frame(&out), 1e-9));
    }
}

proptest! {
    #[test]
    fn mirror_pad_follows_reflection(t in 1usize..12, extra in 0usize..40) {
        let s = t + extra;
        let out = tags(&mirror_pad(&tagged(t, 2), s).unwrap());
        prop_assert_eq!(out.len(), s);
        // walk back and forth across 0..t, one step per frame
        let mut want = Vec::with_capacity(s);
        let (mut i, mut dir) = (0i64, 1i64);
        for _ in 0..s {
            want.push(i as usize);
            if t > 1 {
                if i + dir < 0 || i + dir >= t as i64 {
                    dir = -dir;
                }
                i += dir;
            }
        }
        prop_assert_eq!(out, want);
    }

    #[test]
    fn subsample_keeps_order_and_identity(t in 1usize..80, s in 1usize..40, seed in any::<u64>()) {
        let seq = tagged(t, 3);
        let out = subsample_random(&seq, s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.num_frames(), s);
        let order = tags(&out);
        if t >= s {
            prop_assert!(order.windows(2).all(|w| w[0] < w[1]));
        } else {
            prop_assert_eq!(out, mirror_pad(&seq, s).unwrap());
        }
    }

    #[test]
    fn window_start_matches_exhaustive_search(t in 1usize..30, s in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<Point>> = (0..t)
            .map(|_| (0..3).map(|_| [rand::Rng::random::<f64>(&mut rng), rand::Rng::random::<f64>(&mut rng)]).collect())
            .collect();
        let seq = seq_of(frames);
        let got = inference_window_start(&seq, s).unwrap();
        if t < s {
            prop_assert_eq!(got, None);
        } else {
            let scores: Vec<f64> = (0..=t - s).map(|k| window_motion_score(&seq, k, s)).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = scores.iter().position(|&v| v == best).unwrap();
            prop_assert_eq!(got, Some(first));
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances(theta in -3.2f64..3.2) {
        let seq = seq_of(vec![vec![[0.0, 0.0], [1.0, 2.0], [3.0, -1.0]], vec![[0.5, 0.1], [1.2, 2.2], [2.9, -0.8]]]);
        let out = rotate(&seq, theta);
        for (f, g) in seq.frames.iter().zip(&out.frames) {
            for i in 0..3 {
                for j in 0..3 {
                    let d = |a: Point, b: Point| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    prop_assert!((d(f[i], f[j]) - d(g[i], g[j])).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn mirror_pad_fixtures() {
    assert_eq!(tags(&mirror_pad(&tagged(3, 2), 7).unwrap()), vec![0, 1, 2, 1, 0, 1, 2]);
    assert_eq!(tags(&mirror_pad(&tagged(2, 2), 5).unwrap()), vec![0, 1, 0, 1, 0]);
    assert_eq!(tags(&mirror_pad(&tagged(1, 2), 3).unwrap()), vec![0, 0, 0]);
    assert_eq!(tags(&mirror_pad(&tagged(4, 2), 4).unwrap()), vec![0, 1, 2, 3]);
    assert!(mirror_pad(&tagged(4, 2), 3).is_err());
    assert!(mirror_pad(&tagged(4, 2), 0).is_err());
    assert!(mirror_pad(&seq_of(vec![]), 3).is_err());
}

#[test]
fn window_selection_fixtures() {
    // static except frames 20..24, where node 0 jumps
    let frames: Vec<Vec<Point>> = (0..40)
        .map(|t| {
            let x = if (20..24).contains(&t) { 1.0 } else { 0.0 };
            vec![[x, 0.0], [5.0, 5.0]]
        })
        .collect();
    let seq = seq_of(frames);
    // every window of 16 covering all four moving frames ties; the earliest starts at 8
    assert_eq!(inference_window_start(&seq, 16).unwrap(), Some(8));
    let picked = select_inference_window(&seq, 16).unwrap();
    assert_eq!(picked.frames, seq.frames[8..24].to_vec());

    // a single moving frame at the very end
    let mut frames = vec![vec![[0.0, 0.0]]; 10];
    frames[9] = vec![[3.0, 0.0]];
    assert_eq!(inference_window_start(&seq_of(frames), 4).unwrap(), Some(6));

    let short = tagged(5, 2);
    assert_eq!(select_inference_window(&short, 8).unwrap(), mirror_pad(&short, 8).unwrap());
}

#[test]
fn label_map_fixtures() {
    let map = MovementClassMap::default();
    let table = [
        ("live", 1, FusionClass::Live),
        ("replay", 1, FusionClass::SpoofNormalMovement),
        ("print", 0, FusionClass::SpoofAbnormalMovement),
        ("print_rigid", 0, FusionClass::SpoofAbnormalMovement),
        ("print_bent", 0, FusionClass::SpoofAbnormalMovement),
        ("mask_rigid", 0, FusionClass::SpoofAbnormalMovement),
        ("mask_bent", 0, FusionClass::SpoofAbnormalMovement),
    ];
    for (label, lg, class) in table {
        assert_eq!(map.movement_label(label).unwrap(), (lg, class), "{label}");
    }
    assert_eq!(FusionClass::Live.index(), 0);
    assert_eq!(FusionClass::SpoofNormalMovement.index(), 1);
    assert_eq!(FusionClass::SpoofAbnormalMovement.index(), 2);
    assert!(map.movement_label("Live").is_err());
    let mut bad = map.clone();
    bad.live_labels.insert("print".into());
    assert!(bad.validate().is_err());
}

#[test]
fn flip_with_permutation_relabels() {
    let seq = seq_of(vec![vec![[-1.0, 0.0], [1.0, 0.0], [0.0, 2.0]]]);
    let out = flip(&seq, Some(&[1, 0, 2])).unwrap();
    assert!(close(&out.frames[0], &seq.frames[0], 1e-12));
    assert!(flip(&seq, Some(&[0, 1])).is_err());
}

#[test]
fn sequence_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seqs.jsonl");
    let seqs = vec![tagged(3, 4), {
        let mut s = tagged(2, 4);
        s.id = "t".into();
        s
    }];
    write_sequences(&path, &seqs).unwrap();
    assert_eq!(load_sequences(&path, 4).unwrap(), seqs);
    assert!(load_sequences(&path, 5).is_err());
    std::fs::write(&path, "{\"id\":\"a\",\"label\":\"live\",\"fps\":30,\"frames\":[[[0,0]]],\"extra\":1}\n").unwrap();
    assert!(load_sequences(&path, 1).is_err());
    std::fs::write(&path, "{\"id\":\"a\",\"label\":\"live\",\"fps\":0,\"frames\":[[[0,0]]]}\n").unwrap();
    assert!(load_sequences(&path, 1).is_err());
    assert!(load_sequences(dir.path().join("missing"), 1).is_err());
}
