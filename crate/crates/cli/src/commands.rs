use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use geodyn::fusion::{check_fusion_inputs, train_fusion as fit_fusion, FusionConfig, TokenMode};
use geodyn::gradcheck::{layer_suite, LayerCheck};
use geodyn::graph::load_graph;
use geodyn::landmarks::{MovementClassMap, Split};
use geodyn::protocol::{
    check_protocol, run_protocol, write_report, write_scores, Dataset, ModelBundle, ProtocolConfig, ScoreSource,
    ThresholdPolicy,
};
use geodyn::stgcn::{
    check_gcn_inputs, node_activations_for_sequence, train_gcn as fit_gcn, write_activations_csv, TrainGcnConfig,
};
use geodyn::synth::{certify, generate_dataset, write_dataset, SynthConfig, GRAPH_FILE};

use crate::{logging, Common};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "run.log";
pub const BEST_DIR: &str = "best";

#[derive(Debug)]
pub enum CliError {
    /// Bad input: arguments, configuration or data files.
    Validation(String),
    Internal(String),
}

impl From<geodyn::Error> for CliError {
    fn from(e: geodyn::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Validation(format!("`{key}` must be given by flag or config")))
}

/// Creates the run directory, persists the resolved config and starts the
/// run log. Called only after all inputs have been validated.
fn start_run<T: Serialize>(out: &Path, resolved: &T) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Validation(format!("{}: {e}", out.display())))?;
    let text = serde_json::to_string_pretty(resolved).map_err(internal)? + "\n";
    std::fs::write(out.join(CONFIG_FILE), text).map_err(internal)?;
    logging::attach_file(&out.join(LOG_FILE)).map_err(internal)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(internal)? + "\n";
    std::fs::write(path, text).map_err(internal)
}

// ---------------------------------------------------------------- synth

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Sequences of every kind.
    #[arg(long)]
    per_class: Option<usize>,
    /// Raw frames per sequence.
    #[arg(long)]
    frames: Option<usize>,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut config: SynthConfig = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(n) = args.per_class {
        config.counts.values_mut().for_each(|c| *c = n);
    }
    if let Some(f) = args.frames {
        config.frames = f;
    }
    config.validate()?;
    let data = generate_dataset(&config)?;
    let cert = certify(&data.sequences(), &MovementClassMap::default())?;

    let out = &args.common.out;
    start_run(out, &config)?;
    write_dataset(out, &config, &data)?;
    write_json(&out.join("certification.json"), &cert)?;
    log::info!(
        "wrote {} sequences; residual AUC {:.6}, live/replay p {:.6}, certified {}",
        data.records.len(),
        cert.residual_auc,
        cert.live_replay_p,
        cert.passed()
    );
    Ok(())
}

// ---------------------------------------------------------------- train-gcn

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct TrainGcnRun {
    data: Option<PathBuf>,
    /// Defaults to the dataset's graph file.
    graph: Option<PathBuf>,
    seed: u64,
    class_map: MovementClassMap,
    train: TrainGcnConfig,
}

#[derive(Args)]
pub struct TrainGcnArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (landmarks, manifest).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
}

pub fn train_gcn(args: TrainGcnArgs) -> Result<(), CliError> {
    let mut run: TrainGcnRun = load_config(args.common.config.as_deref())?;
    if let Some(v) = args.data {
        run.data = Some(v);
    }
    if let Some(v) = args.graph {
        run.graph = Some(v);
    }
    if let Some(v) = args.common.seed {
        run.seed = v;
    }
    if let Some(v) = args.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        run.train.lr = v;
    }
    if let Some(v) = args.seq_len {
        run.train.seq_len = v;
    }
    let data_dir = require(&run.data, "data")?;
    let graph_path = run.graph.clone().unwrap_or_else(|| data_dir.join(GRAPH_FILE));
    run.graph = Some(graph_path.clone());

    let graph = load_graph(&graph_path)?;
    let data = Dataset::load(&data_dir, graph.num_nodes())?;
    data.check_labels(&run.class_map)?;
    let (train, dev) = (data.require_split(Split::Train)?, data.require_split(Split::Dev)?);
    check_gcn_inputs(&train, &dev, &graph, &run.class_map, &run.train)?;

    let out = &args.common.out;
    start_run(out, &run)?;
    log::info!("train {} / dev {} sequences, graph with {} nodes", train.len(), dev.len(), graph.num_nodes());
    let (model, history) = fit_gcn(&train, &dev, &graph, &run.class_map, &run.train, run.seed)?;
    let bundle = ModelBundle {
        gcn: model,
        gcn_epoch: history.best_epoch,
        fusion: None,
        fusion_epoch: 0,
        seq_len: run.train.seq_len,
    };
    bundle.save(out.join(BEST_DIR))?;
    write_json(&out.join("history.json"), &history)?;
    log::info!("best epoch {} dev AUC {:.6}", history.best_epoch, history.best_dev_auc);
    Ok(())
}

// ---------------------------------------------------------------- train-fusion

#[derive(Clone, Copy, ValueEnum)]
enum TokensArg {
    Single,
    Multi,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct TrainFusionRun {
    data: Option<PathBuf>,
    /// Bundle directory holding the trained graph network.
    checkpoint: Option<PathBuf>,
    seed: u64,
    class_map: MovementClassMap,
    fusion: FusionConfig,
}

#[derive(Args)]
pub struct TrainFusionArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (landmarks, manifest, features).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Bundle directory written by train-gcn.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    tokens: Option<TokensArg>,
}

pub fn train_fusion(args: TrainFusionArgs) -> Result<(), CliError> {
    let mut run: TrainFusionRun = load_config(args.common.config.as_deref())?;
    if let Some(v) = args.data {
        run.data = Some(v);
    }
    if let Some(v) = args.checkpoint {
        run.checkpoint = Some(v);
    }
    if let Some(v) = args.common.seed {
        run.seed = v;
    }
    if let Some(v) = args.epochs {
        run.fusion.epochs = v;
    }
    if let Some(v) = args.lr {
        run.fusion.lr = v;
    }
    if let Some(t) = args.tokens {
        run.fusion.tokens = match t {
            TokensArg::Single => TokenMode::Single,
            TokensArg::Multi => TokenMode::Multi,
        };
    }
    let data_dir = require(&run.data, "data")?;
    let ck_dir = require(&run.checkpoint, "checkpoint")?;
    let mut bundle = ModelBundle::load(&ck_dir)?;
    let data = Dataset::load(&data_dir, bundle.graph().num_nodes())?;
    data.check_labels(&run.class_map)?;
    let features = data.require_features()?;
    let (train, dev) = (data.require_split(Split::Train)?, data.require_split(Split::Dev)?);
    check_fusion_inputs(features, &train, &dev, &run.class_map, &run.fusion)?;

    let out = &args.common.out;
    start_run(out, &run)?;
    let (model, history) = fit_fusion(
        &bundle.gcn,
        features,
        &train,
        &dev,
        &run.class_map,
        bundle.seq_len,
        &run.fusion,
        run.seed,
    )?;
    bundle.fusion = Some(model);
    bundle.fusion_epoch = history.best_epoch;
    bundle.save(out.join(BEST_DIR))?;
    write_json(&out.join("history.json"), &history)?;
    log::info!(
        "best epoch {} dev accuracy {:.6}{}",
        history.best_epoch,
        history.best_dev_accuracy,
        if history.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    EerDev,
    EerTest,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Geometric,
    Fusion,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct EvalRun {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    protocol: ProtocolConfig,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Bundle directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Fixed decision threshold; overrides the policy.
    #[arg(long, conflicts_with = "policy")]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let mut run: EvalRun = load_config(args.common.config.as_deref())?;
    if args.common.seed.is_some() {
        return Err(CliError::Validation("eval takes no seed".into()));
    }
    if let Some(v) = args.data {
        run.data = Some(v);
    }
    if let Some(v) = args.checkpoint {
        run.checkpoint = Some(v);
    }
    if let Some(v) = args.split {
        run.protocol.split = v;
    }
    if let Some(value) = args.threshold {
        run.protocol.threshold = ThresholdPolicy::Fixed { value };
    }
    if let Some(p) = args.policy {
        run.protocol.threshold = match p {
            PolicyArg::EerDev => ThresholdPolicy::EerDev,
            PolicyArg::EerTest => ThresholdPolicy::EerTest,
        };
    }
    if let Some(s) = args.source {
        run.protocol.score_source = match s {
            SourceArg::Geometric => ScoreSource::Geometric,
            SourceArg::Fusion => ScoreSource::Fusion,
        };
    }
    let data_dir = require(&run.data, "data")?;
    let ck_dir = require(&run.checkpoint, "checkpoint")?;
    let bundle = ModelBundle::load(&ck_dir)?;
    let hashes = ModelBundle::hashes(&ck_dir)?;
    let data = Dataset::load(&data_dir, bundle.graph().num_nodes())?;
    check_protocol(&bundle, &data, &run.protocol)?;

    let out = &args.common.out;
    start_run(out, &run)?;
    let (report, scores) = run_protocol(&bundle, hashes, &data, &run.protocol)?;
    write_report(out.join("report.json"), &report)?;
    write_scores(out.join("scores.csv"), &scores)?;
    log::info!(
        "{} sequences: AUC {:.6}, threshold {:.6}, APCER {:.6}, BPCER {:.6}, ACER {:.6}, HTER {:.6}",
        scores.len(),
        report.auc,
        report.threshold.value,
        report.apcer,
        report.bpcer,
        report.acer,
        report.hter
    );
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GradcheckRun {
    seeds: usize,
    first_seed: u64,
    tolerance: f64,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            tolerance: 1e-4,
        }
    }
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Serialize)]
struct GradcheckReport {
    tolerance: f64,
    max_rel_error: f64,
    passed: bool,
    checks: Vec<LayerCheck>,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut run: GradcheckRun = load_config(args.common.config.as_deref())?;
    if let Some(v) = args.common.seed {
        run.first_seed = v;
    }
    if let Some(v) = args.seeds {
        run.seeds = v;
    }
    if let Some(v) = args.tolerance {
        run.tolerance = v;
    }
    if run.seeds == 0 || !(run.tolerance > 0.0) {
        return Err(CliError::Validation("seeds and tolerance must be positive".into()));
    }
    let out = &args.common.out;
    start_run(out, &run)?;
    let mut checks = Vec::new();
    for seed in run.first_seed..run.first_seed + run.seeds as u64 {
        for c in layer_suite(seed)? {
            log::info!(
                "seed {seed} {}: max relative error {:.3e} over {} entries",
                c.name,
                c.report.max_rel_error,
                c.report.checked
            );
            checks.push(c);
        }
    }
    let max_rel_error = checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let passed = max_rel_error < run.tolerance;
    write_json(
        &out.join("gradcheck.json"),
        &GradcheckReport {
            tolerance: run.tolerance,
            max_rel_error,
            passed,
            checks,
        },
    )?;
    log::info!("max relative error {max_rel_error:.3e}, tolerance {:.1e}", run.tolerance);
    if passed {
        Ok(())
    } else {
        Err(CliError::Internal(format!(
            "gradient check failed: {max_rel_error:.3e} >= {:.1e}",
            run.tolerance
        )))
    }
}

// ---------------------------------------------------------------- activations

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct ActivationsRun {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    /// Sequences to export; empty means every sequence of `split`.
    ids: Vec<String>,
    split: Option<Split>,
}

#[derive(Args)]
pub struct ActivationsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sequence id; repeatable.
    #[arg(long = "id")]
    ids: Vec<String>,
    #[arg(long)]
    split: Option<Split>,
}

fn safe_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

pub fn activations(args: ActivationsArgs) -> Result<(), CliError> {
    let mut run: ActivationsRun = load_config(args.common.config.as_deref())?;
    if args.common.seed.is_some() {
        return Err(CliError::Validation("activations takes no seed".into()));
    }
    if let Some(v) = args.data {
        run.data = Some(v);
    }
    if let Some(v) = args.checkpoint {
        run.checkpoint = Some(v);
    }
    if !args.ids.is_empty() {
        run.ids = args.ids;
    }
    if let Some(v) = args.split {
        run.split = Some(v);
    }
    let data_dir = require(&run.data, "data")?;
    let ck_dir = require(&run.checkpoint, "checkpoint")?;
    let bundle = ModelBundle::load(&ck_dir)?;
    let data = Dataset::load(&data_dir, bundle.graph().num_nodes())?;
    let by_id: BTreeMap<&str, _> = data.sequences.iter().map(|s| (s.id.as_str(), s)).collect();
    let selected: Vec<_> = if run.ids.is_empty() {
        let split = run.split.ok_or_else(|| CliError::Validation("give --id or --split".into()))?;
        data.require_split(split)?
    } else {
        run.ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| CliError::Validation(format!("unknown sequence id `{id}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let mut stems = BTreeMap::new();
    for s in &selected {
        if let Some(prev) = stems.insert(safe_file_stem(&s.id), &s.id) {
            return Err(CliError::Validation(format!(
                "ids `{prev}` and `{}` map to the same file name",
                s.id
            )));
        }
    }
    // windows are selected up front so a too-short sequence fails before output
    let maps = selected
        .iter()
        .map(|s| node_activations_for_sequence(&bundle.gcn, s, bundle.seq_len))
        .collect::<Result<Vec<_>, _>>()?;

    let out = &args.common.out;
    start_run(out, &run)?;
    for (s, map) in selected.iter().zip(&maps) {
        let path = out.join(format!("{}.csv", safe_file_stem(&s.id)));
        write_activations_csv(&path, map)?;
    }
    log::info!("wrote activation maps for {} sequences", selected.len());
    Ok(())
}
