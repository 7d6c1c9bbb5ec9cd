use geodyn::gradcheck::{layer_suite, mini_stgcn_check};
use geodyn::stgcn::Pooling;

#[test]
fn every_layer_over_twenty_seeds() {
    let mut worst = (0.0, String::new());
    for seed in 0..20 {
        for c in layer_suite(seed).unwrap() {
            assert!(c.report.max_rel_error < 1e-4, "{} seed {seed}: {:?}", c.name, c.report);
            if c.report.max_rel_error > worst.0 {
                worst = (c.report.max_rel_error, c.name);
            }
        }
    }
    eprintln!("worst relative error {:.3e} in {}", worst.0, worst.1);
}

#[test]
fn mini_network_with_max_pooling() {
    for seed in 0..20 {
        let c = mini_stgcn_check(seed, Pooling::Max).unwrap();
        assert!(c.report.max_rel_error < 1e-4, "seed {seed}: {:?}", c.report);
    }
}

#[test]
fn suite_covers_expected_layers() {
    let names: Vec<String> = layer_suite(0).unwrap().into_iter().map(|c| c.name).collect();
    for expected in [
        "matmul", "relu", "graph_mix", "normalized_adjacency", "temporal_conv", "temporal_conv_stride2",
        "batch_norm_train", "batch_norm_eval", "mean_pool", "max_pool", "concat", "attention", "bce_mean",
        "cross_entropy_mean", "stgcn_mini", "fusion",
    ] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing");
    }
}

