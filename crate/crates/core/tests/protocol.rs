use std::path::Path;

use geodyn::fusion::{train_fusion, FusionConfig};
use geodyn::graph::{build_template_graph, TemplateConfig};
use geodyn::landmarks::{AugmentConfig, MovementClassMap, Split};
use geodyn::metrics::{auc, classification_rates, eer_threshold};
use geodyn::protocol::{
    run_protocol, score, write_report, write_scores, Dataset, ModelBundle, ProtocolConfig, ScoreSource,
    ThresholdPolicy, FUSION_FILE, GCN_FILE,
};
use geodyn::stgcn::{train_gcn, StgcnConfig, TrainGcnConfig};
use geodyn::synth::{generate_dataset, write_dataset, SequenceKind, SynthConfig};

const SEQ_LEN: usize = 8;

fn dataset(dir: &Path) -> Dataset {
    let cfg = SynthConfig {
        counts: SequenceKind::ALL.into_iter().map(|k| (k, 10)).collect(),
        frames: 12,
        seed: 5,
        ..SynthConfig::default()
    };
    write_dataset(dir, &cfg, &generate_dataset(&cfg).unwrap()).unwrap();
    Dataset::load(dir, 48).unwrap()
}

fn bundle(data: &Dataset) -> ModelBundle {
    let map = MovementClassMap::default();
    let (g, _) = build_template_graph(&TemplateConfig::desk()).unwrap();
    let config = TrainGcnConfig {
        epochs: 2,
        batch_size: 8,
        seq_len: SEQ_LEN,
        augment: AugmentConfig::disabled(),
        model: StgcnConfig {
            channels: vec![4, 8],
            strides: vec![1, 2],
            kernel: 3,
            ..StgcnConfig::default()
        },
        ..TrainGcnConfig::default()
    };
    let (gcn, hist) = train_gcn(&data.split(Split::Train), &data.split(Split::Dev), &g, &map, &config, 1).unwrap();
    let fusion_cfg = FusionConfig {
        attention_dim: 8,
        epochs: 3,
        lr: 0.01,
        ..FusionConfig::default()
    };
    let (fusion, fhist) = train_fusion(
        &gcn,
        data.features.as_ref().unwrap(),
        &data.split(Split::Train),
        &data.split(Split::Dev),
        &map,
        SEQ_LEN,
        &fusion_cfg,
        2,
    )
    .unwrap();
    ModelBundle {
        gcn,
        gcn_epoch: hist.best_epoch,
        fusion: Some(fusion),
        fusion_epoch: fhist.best_epoch,
        seq_len: SEQ_LEN,
    }
}

#[test]
fn pipeline_is_deterministic_and_consistent() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(&root.path().join("data"));
    let first = bundle(&data);
    let second = bundle(&data);
    let (d1, d2) = (root.path().join("b1"), root.path().join("b2"));
    first.save(&d1).unwrap();
    second.save(&d2).unwrap();
    for f in [GCN_FILE, FUSION_FILE] {
        assert_eq!(std::fs::read(d1.join(f)).unwrap(), std::fs::read(d2.join(f)).unwrap(), "{f}");
    }

    let loaded = ModelBundle::load(&d1).unwrap();
    // optimizer state is not persisted; weights and statistics are
    let values = |ps: &geodyn::optim::ParamSet<f32>| {
        ps.iter()
            .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    assert_eq!(values(loaded.gcn.params()), values(first.gcn.params()));
    assert_eq!(loaded.gcn.running_stats(), first.gcn.running_stats());
    let (lf, ff) = (loaded.fusion.as_ref().unwrap(), first.fusion.as_ref().unwrap());
    assert_eq!(values(lf.params()), values(ff.params()));
    assert_eq!(lf.scaling(), ff.scaling());
    let hashes = ModelBundle::hashes(&d1).unwrap();
    assert!(hashes.fusion.is_some());

    for source in [ScoreSource::Geometric, ScoreSource::Fusion] {
        let config = ProtocolConfig {
            score_source: source,
            ..ProtocolConfig::default()
        };
        let (report, scores) = run_protocol(&loaded, hashes.clone(), &data, &config).unwrap();
        let (again, scores2) = run_protocol(&loaded, hashes.clone(), &data, &config).unwrap();
        assert_eq!(report, again);
        assert_eq!(scores, scores2);

        assert_eq!(scores.len(), data.split(Split::Test).len());
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.score)));
        assert_eq!(report.auc, auc(&scores).unwrap());
        let dev = score(&loaded, &data.split(Split::Dev), data.features.as_ref(), source, &config.class_map).unwrap();
        let (t, eer) = eer_threshold(&dev).unwrap();
        assert_eq!(report.threshold.value, t);
        assert_eq!(report.threshold.eer, Some(eer));
        assert_eq!(report.threshold.fitted_on, Some(Split::Dev));
        let rates = classification_rates(&scores, t).unwrap();
        assert_eq!((report.apcer, report.bpcer, report.acer, report.hter), (rates.apcer, rates.bpcer, rates.acer, rates.hter));
        assert_eq!(report.landmarks_hash, data.landmarks_hash);
    }

    let out = root.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let (report, scores) = run_protocol(&loaded, hashes, &data, &ProtocolConfig::default()).unwrap();
    write_report(out.join("report.json"), &report).unwrap();
    write_scores(out.join("scores.csv"), &scores).unwrap();
    let text = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(text.lines().count(), scores.len());
    assert!(text.lines().all(|l| l.split(',').count() == 3));
}

#[test]
fn fixed_threshold_is_reported_verbatim() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(&root.path().join("data"));
    let b = bundle(&data);
    let dir = root.path().join("b");
    b.save(&dir).unwrap();
    let config = ProtocolConfig {
        threshold: ThresholdPolicy::Fixed { value: 0.37 },
        ..ProtocolConfig::default()
    };
    let (report, scores) = run_protocol(&b, ModelBundle::hashes(&dir).unwrap(), &data, &config).unwrap();
    assert_eq!(report.threshold.value, 0.37);
    assert_eq!(report.threshold.fitted_on, None);
    assert_eq!(report.threshold.eer, None);
    assert_eq!(report.bpcer, classification_rates(&scores, 0.37).unwrap().bpcer);

    let eer_test = ProtocolConfig {
        threshold: ThresholdPolicy::EerTest,
        ..ProtocolConfig::default()
    };
    let (report, scores) = run_protocol(&b, ModelBundle::hashes(&dir).unwrap(), &data, &eer_test).unwrap();
    assert_eq!(report.threshold.fitted_on, Some(Split::Test));
    assert_eq!(report.threshold.value, eer_threshold(&scores).unwrap().0);
}

#[test]
fn tampered_or_mismatched_inputs_are_rejected() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(&root.path().join("data"));
    let mut b = bundle(&data);
    let dir = root.path().join("b");
    b.save(&dir).unwrap();

    // the fusion head records the digest of the geometric checkpoint
    let gcn_path = dir.join(GCN_FILE);
    let mut text = std::fs::read_to_string(&gcn_path).unwrap();
    text.push('\n');
    std::fs::write(&gcn_path, text).unwrap();
    assert!(ModelBundle::load(&dir).is_err());

    let hashes = ModelBundle::hashes(&dir).unwrap();
    let bad_threshold = ProtocolConfig {
        threshold: ThresholdPolicy::Fixed { value: f64::NAN },
        ..ProtocolConfig::default()
    };
    assert!(run_protocol(&b, hashes.clone(), &data, &bad_threshold).is_err());

    let mut only_live = data.clone();
    for seq in only_live.sequences.iter_mut().filter(|s| only_live.splits[&s.id] == Split::Test) {
        seq.label = "live".into();
    }
    assert!(run_protocol(&b, hashes.clone(), &only_live, &ProtocolConfig::default()).is_err());

    let mut unknown = data.clone();
    unknown.sequences[0].label = "cartoon".into();
    assert!(run_protocol(&b, hashes.clone(), &unknown, &ProtocolConfig::default()).is_err());

    b.fusion = None;
    let fusion = ProtocolConfig {
        score_source: ScoreSource::Fusion,
        ..ProtocolConfig::default()
    };
    assert!(run_protocol(&b, hashes, &data, &fusion).is_err());
}

#[test]
fn dataset_manifest_must_match_landmarks() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("data");
    dataset(&dir);
    let manifest = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let dropped = lines.pop().unwrap().to_string();
    std::fs::write(&manifest, lines.join("\n")).unwrap();
    assert!(Dataset::load(&dir, 48).is_err());
    std::fs::write(&manifest, format!("{text}{dropped}\n")).unwrap();
    assert!(Dataset::load(&dir, 48).is_err());
    std::fs::write(&manifest, format!("{text}ghost train\n")).unwrap();
    assert!(Dataset::load(&dir, 48).is_err());
    std::fs::write(&manifest, text.replace(" train", " training")).unwrap();
    assert!(Dataset::load(&dir, 48).is_err());
}
