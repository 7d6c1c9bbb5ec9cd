//! Datasets on disk, trained model bundles, and the evaluation protocol that
//! turns a bundle and a split into scores and a report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{build_inputs, load_photometric_features, FusionModel, PhotometricFeature};
use crate::graph::{load_graph, write_graph, FaceGraph};
use crate::hash::{hex_digest, json_digest};
use crate::kernels::sigmoid;
use crate::landmarks::{load_manifest, load_sequences, LandmarkSequence, MovementClassMap, Split};
use crate::metrics::{auc, classification_rates, eer_threshold, ScoreRecord};
use crate::stgcn::{score_sequences, StgcnModel};

pub const LANDMARKS_FILE: &str = "landmarks.jsonl";
pub const FEATURES_FILE: &str = "features.jsonl";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub const BUNDLE_FILE: &str = "bundle.json";
pub const GCN_FILE: &str = "gcn.json";
pub const FUSION_FILE: &str = "fusion.json";
pub const BUNDLE_GRAPH_FILE: &str = "graph.json";

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// Landmark sequences with their split assignment and, optionally,
/// photometric features.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<LandmarkSequence>,
    pub splits: BTreeMap<String, Split>,
    pub features: Option<BTreeMap<String, PhotometricFeature>>,
    /// Digest of the landmark file.
    pub landmarks_hash: String,
}

impl Dataset {
    /// Loads `landmarks.jsonl`, `manifest.txt` and, when present,
    /// `features.jsonl` from `dir`. Every sequence must appear in the
    /// manifest exactly once and vice versa.
    pub fn load(dir: impl AsRef<Path>, num_nodes: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let landmarks = dir.join(LANDMARKS_FILE);
        let sequences = load_sequences(&landmarks, num_nodes)?;
        let manifest = load_manifest(dir.join(MANIFEST_FILE))?;
        let splits: BTreeMap<String, Split> = manifest.into_iter().collect();
        let mut seen = BTreeSet::new();
        for seq in &sequences {
            if !seen.insert(seq.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sequence id `{}`", seq.id)));
            }
            if !splits.contains_key(&seq.id) {
                return Err(Error::Dataset(format!("sequence `{}` is not in the manifest", seq.id)));
            }
        }
        if let Some(id) = splits.keys().find(|id| !seen.contains(id.as_str())) {
            return Err(Error::Dataset(format!("manifest id `{id}` has no landmark sequence")));
        }
        let features_path = dir.join(FEATURES_FILE);
        let features = if features_path.exists() {
            Some(load_photometric_features(&features_path)?)
        } else {
            None
        };
        Ok(Self {
            sequences,
            splits,
            features,
            landmarks_hash: file_digest(&landmarks)?,
        })
    }

    /// Sequences of `split` in file order.
    pub fn split(&self, split: Split) -> Vec<LandmarkSequence> {
        self.sequences
            .iter()
            .filter(|s| self.splits[&s.id] == split)
            .cloned()
            .collect()
    }

    /// Like [`Dataset::split`] but an empty split is an error.
    pub fn require_split(&self, split: Split) -> Result<Vec<LandmarkSequence>> {
        let seqs = self.split(split);
        if seqs.is_empty() {
            return Err(Error::Dataset(format!("split `{split}` is empty")));
        }
        Ok(seqs)
    }

    pub fn require_features(&self) -> Result<&BTreeMap<String, PhotometricFeature>> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("dataset has no `{FEATURES_FILE}`")))
    }

    /// Every label must belong to the class map.
    pub fn check_labels(&self, map: &MovementClassMap) -> Result<()> {
        for seq in &self.sequences {
            if !map.contains(&seq.label) {
                return Err(Error::Record {
                    id: seq.id.clone(),
                    message: format!("label `{}` is not in the movement class map", seq.label),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    seq_len: usize,
    has_fusion: bool,
    fusion_epoch: usize,
}

/// A trained geometric branch, optionally with a fusion head, plus the
/// window length both were trained with.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub gcn: StgcnModel<f32>,
    pub gcn_epoch: usize,
    pub fusion: Option<FusionModel<f32>>,
    pub fusion_epoch: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleHashes {
    pub gcn: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<String>,
}

impl ModelBundle {
    /// Writes `bundle.json`, `graph.json`, `gcn.json` and, with a fusion
    /// head, `fusion.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = BundleMeta {
            seq_len: self.seq_len,
            has_fusion: self.fusion.is_some(),
            fusion_epoch: self.fusion_epoch,
        };
        let path = dir.join(BUNDLE_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
        write_graph(dir.join(BUNDLE_GRAPH_FILE), self.gcn.graph())?;
        self.gcn.save(dir.join(GCN_FILE), self.gcn_epoch)?;
        if let Some(f) = &self.fusion {
            let gcn_hash = file_digest(&dir.join(GCN_FILE))?;
            f.save(dir.join(FUSION_FILE), self.fusion_epoch, &gcn_hash)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(BUNDLE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if meta.seq_len == 0 {
            return Err(Error::Checkpoint("bundle seq_len must be positive".into()));
        }
        let graph = load_graph(dir.join(BUNDLE_GRAPH_FILE))?;
        let (gcn, gcn_epoch) = StgcnModel::<f32>::load(dir.join(GCN_FILE), graph)?;
        let fusion = if meta.has_fusion {
            let (f, ck) = FusionModel::<f32>::load(dir.join(FUSION_FILE))?;
            let expected = file_digest(&dir.join(GCN_FILE))?;
            if ck.metadata["gcn_hash"].as_str() != Some(expected.as_str()) {
                return Err(Error::Checkpoint(
                    "fusion head was trained on a different geometric checkpoint".into(),
                ));
            }
            if f.dims().0 != gcn.feature_dim() {
                return Err(Error::Checkpoint("fusion geometric dimension does not match the network".into()));
            }
            Some(f)
        } else {
            None
        };
        Ok(Self {
            gcn,
            gcn_epoch,
            fusion,
            fusion_epoch: meta.fusion_epoch,
            seq_len: meta.seq_len,
        })
    }

    pub fn graph(&self) -> &FaceGraph {
        self.gcn.graph()
    }

    /// Digests of the checkpoint files in `dir`.
    pub fn hashes(dir: impl AsRef<Path>) -> Result<BundleHashes> {
        let dir = dir.as_ref();
        let fusion_path = dir.join(FUSION_FILE);
        Ok(BundleHashes {
            gcn: file_digest(&dir.join(GCN_FILE))?,
            fusion: if fusion_path.exists() {
                Some(file_digest(&fusion_path)?)
            } else {
                None
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Sigmoid of the geometric logit.
    Geometric,
    /// Live-class probability of the fusion head.
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", try_from = "RawThresholdPolicy")]
pub enum ThresholdPolicy {
    Fixed { value: f64 },
    EerDev,
    EerTest,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum PolicyKind {
    Fixed,
    EerDev,
    EerTest,
}

// tagged unit variants would silently accept a stray `value`
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThresholdPolicy {
    policy: PolicyKind,
    value: Option<f64>,
}

impl TryFrom<RawThresholdPolicy> for ThresholdPolicy {
    type Error = String;

    fn try_from(raw: RawThresholdPolicy) -> std::result::Result<Self, String> {
        match (raw.policy, raw.value) {
            (PolicyKind::Fixed, Some(value)) => Ok(Self::Fixed { value }),
            (PolicyKind::Fixed, None) => Err("policy `fixed` needs a `value`".into()),
            (PolicyKind::EerDev, None) => Ok(Self::EerDev),
            (PolicyKind::EerTest, None) => Ok(Self::EerTest),
            (_, Some(_)) => Err("only policy `fixed` takes a `value`".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub score_source: ScoreSource,
    pub threshold: ThresholdPolicy,
    pub split: Split,
    /// Split used by [`ThresholdPolicy::EerDev`].
    pub dev_split: Split,
    pub class_map: MovementClassMap,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            score_source: ScoreSource::Geometric,
            threshold: ThresholdPolicy::EerDev,
            split: Split::Test,
            dev_split: Split::Dev,
            class_map: MovementClassMap::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdPolicy::Fixed { value } = self.threshold {
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!("fixed threshold {value} is not finite")));
            }
        }
        self.class_map.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProvenance {
    pub policy: ThresholdPolicy,
    pub value: f64,
    /// Split the threshold was fitted on, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_on: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_source: ScoreSource,
    pub split: Split,
    pub threshold: ThresholdProvenance,
    pub auc: f64,
    pub apcer: f64,
    pub apcer_per_type: BTreeMap<String, f64>,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
    pub checkpoints: BundleHashes,
    pub landmarks_hash: String,
}

/// Scores `seqs` with the configured source; every score lies in `[0, 1]`.
pub fn score(
    bundle: &ModelBundle,
    seqs: &[LandmarkSequence],
    features: Option<&BTreeMap<String, PhotometricFeature>>,
    source: ScoreSource,
    class_map: &MovementClassMap,
) -> Result<Vec<ScoreRecord>> {
    let values: Vec<f64> = match source {
        ScoreSource::Geometric => score_sequences(&bundle.gcn, seqs, bundle.seq_len)?
            .into_iter()
            .map(|(_, z)| f64::from(sigmoid(z)))
            .collect(),
        ScoreSource::Fusion => {
            let fusion = bundle
                .fusion
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("bundle has no fusion head".into()))?;
            let features = features.ok_or_else(|| Error::Dataset("fusion scoring needs photometric features".into()))?;
            let inputs = build_inputs(&bundle.gcn, seqs, features, bundle.seq_len, fusion.config().tokens)?;
            fusion.predict(&inputs)?.into_iter().map(|(_, s)| f64::from(s)).collect()
        }
    };
    seqs.iter()
        .zip(values)
        .map(|(seq, s)| {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::NonFinite(format!("score of `{}`", seq.id)));
            }
            Ok(ScoreRecord::new(&seq.id, &seq.label, class_map.is_live(&seq.label), s))
        })
        .collect()
}

/// Checks everything [`run_protocol`] needs without scoring.
pub fn check_protocol(bundle: &ModelBundle, data: &Dataset, config: &ProtocolConfig) -> Result<()> {
    config.validate()?;
    data.check_labels(&config.class_map)?;
    let check_split = |split: Split| -> Result<()> {
        let seqs = data.require_split(split)?;
        let live = seqs.iter().filter(|s| config.class_map.is_live(&s.label)).count();
        if live == 0 || live == seqs.len() {
            return Err(Error::Dataset(format!("split `{split}` needs both live and spoof sequences")));
        }
        if config.score_source == ScoreSource::Fusion {
            let features = data.require_features()?;
            if let Some(s) = seqs.iter().find(|s| !features.contains_key(&s.id)) {
                return Err(Error::Dataset(format!("no photometric feature for `{}`", s.id)));
            }
        }
        Ok(())
    };
    check_split(config.split)?;
    if config.threshold == ThresholdPolicy::EerDev {
        check_split(config.dev_split)?;
    }
    if config.score_source == ScoreSource::Fusion && bundle.fusion.is_none() {
        return Err(Error::InvalidArgument("fusion scoring needs a bundle with a fusion head".into()));
    }
    Ok(())
}

/// Scores the evaluation split, picks the threshold by policy, and reports
/// every rate at that threshold. Returns the report and the test scores.
pub fn run_protocol(
    bundle: &ModelBundle,
    hashes: BundleHashes,
    data: &Dataset,
    config: &ProtocolConfig,
) -> Result<(EvalReport, Vec<ScoreRecord>)> {
    check_protocol(bundle, data, config)?;
    let features = data.features.as_ref();
    let run = |split: Split| {
        score(
            bundle,
            &data.require_split(split)?,
            features,
            config.score_source,
            &config.class_map,
        )
    };
    let scores = run(config.split)?;
    let threshold = match config.threshold {
        ThresholdPolicy::Fixed { value } => ThresholdProvenance {
            policy: config.threshold,
            value,
            fitted_on: None,
            eer: None,
        },
        ThresholdPolicy::EerDev | ThresholdPolicy::EerTest => {
            let split = if config.threshold == ThresholdPolicy::EerDev {
                config.dev_split
            } else {
                config.split
            };
            let fit = if split == config.split { scores.clone() } else { run(split)? };
            let (value, eer) = eer_threshold(&fit)?;
            ThresholdProvenance {
                policy: config.threshold,
                value,
                fitted_on: Some(split),
                eer: Some(eer),
            }
        }
    };
    let rates = classification_rates(&scores, threshold.value)?;
    let report = EvalReport {
        score_source: config.score_source,
        split: config.split,
        threshold,
        auc: auc(&scores)?,
        apcer: rates.apcer,
        apcer_per_type: rates.apcer_per_type,
        bpcer: rates.bpcer,
        acer: rates.acer,
        hter: rates.hter,
        counts: rates.counts,
        config_hash: json_digest(config),
        checkpoints: hashes,
        landmarks_hash: data.landmarks_hash.clone(),
    };
    Ok((report, scores))
}

/// Line-delimited `id,label,score`.
pub fn write_scores(path: impl AsRef<Path>, scores: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in scores {
        writeln!(w, "{},{},{}", r.id, r.label, r.score).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    std::fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&path, e))
}
