//! Spatio-temporal graph convolution over landmark sequences: the geometric
//! liveness branch.

mod activations;
mod train;

pub use activations::{node_activations, node_activations_for_sequence, write_activations_csv};
pub use train::{
    check_gcn_inputs, prepare_eval_batch, score_sequences, train_gcn, GcnEpoch, GcnHistory, TrainGcnConfig,
};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::gradcheck::HasParams;
use crate::graph::{FaceGraph, DEGREE_EPS};
use crate::landmarks::LandmarkSequence;
use crate::optim::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_KIND: &str = "stgcn";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StgcnConfig {
    pub in_channels: usize,
    /// Output channels per unit.
    pub channels: Vec<usize>,
    /// Temporal stride per unit, 1 or 2.
    pub strides: Vec<usize>,
    /// Temporal kernel length (odd).
    pub kernel: usize,
    pub batch_norm: bool,
    pub residual: bool,
    pub relu: bool,
    pub pooling: Pooling,
    /// Differentiate through the mask-dependent degrees.
    pub degree_grad: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for StgcnConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            channels: vec![64, 64, 128, 128, 256, 256],
            strides: vec![1, 1, 2, 1, 2, 1],
            kernel: 9,
            batch_norm: true,
            residual: true,
            relu: true,
            pooling: Pooling::Mean,
            degree_grad: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl StgcnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad(format!(
                "{} unit channel widths but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.in_channels == 0 || self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return bad(format!("strides must be 1 or 2, got {:?}", self.strides));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("temporal kernel must be odd, got {}", self.kernel));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("batch-norm eps must be positive and momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.channels.len()
    }

    pub fn unit_in(&self, u: usize) -> usize {
        if u == 0 {
            self.in_channels
        } else {
            self.channels[u - 1]
        }
    }

    /// Width of the pooled geometric feature.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    fn needs_projection(&self, u: usize) -> bool {
        self.unit_in(u) != self.channels[u] || self.strides[u] != 1
    }

    /// Temporal length after every unit for input length `s`.
    pub fn output_steps(&self, s: usize) -> usize {
        self.strides.iter().fold(s, |acc, &st| acc.div_ceil(st))
    }
}

/// Running per-channel statistics used in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; returned for the running-average update.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Handles produced by one forward pass on a tape.
pub struct ForwardVars<T> {
    /// `[B, d_g]`
    pub features: Var,
    /// `[B]`
    pub logits: Var,
    /// Final unit output `[B, N, S', C]`.
    pub final_map: Var,
    pub batch_stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgcnModel<T> {
    config: StgcnConfig,
    graph: FaceGraph,
    base: Tensor<T>,
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
}

fn pname(u: usize, what: &str) -> String {
    format!("unit{u}.{what}")
}

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl<T: Scalar> StgcnModel<T> {
    /// Fresh model: masks at one, He-normal weights, unit batch-norm scale.
    pub fn new<R: Rng + ?Sized>(config: StgcnConfig, graph: FaceGraph, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = graph.num_nodes();
        let mut params = ParamSet::new();
        let mut running = Vec::new();
        for u in 0..config.num_units() {
            let (ci, co, k) = (config.unit_in(u), config.channels[u], config.kernel);
            params.insert(pname(u, "mask"), Tensor::full(&[n, n], T::one()))?;
            params.insert(pname(u, "spatial"), normal_tensor(&[ci, co], (2.0 / ci as f64).sqrt(), rng))?;
            params.insert(
                pname(u, "temporal"),
                normal_tensor(&[k, co, co], (2.0 / (k * co) as f64).sqrt(), rng),
            )?;
            if config.batch_norm {
                params.insert(pname(u, "bn_gamma"), Tensor::full(&[co], T::one()))?;
                params.insert(pname(u, "bn_beta"), Tensor::zeros(&[co]))?;
                running.push(RunningStats {
                    mean: vec![T::zero(); co],
                    var: vec![T::one(); co],
                });
            } else {
                // a bias right before batch norm would be redundant
                params.insert(pname(u, "temporal_bias"), Tensor::zeros(&[co]))?;
            }
            if config.residual && config.needs_projection(u) {
                params.insert(
                    pname(u, "residual"),
                    normal_tensor(&[1, ci, co], (2.0 / ci as f64).sqrt(), rng),
                )?;
            }
        }
        let d = config.feature_dim();
        params.insert("head.weight", normal_tensor(&[d, 1], 0.01, rng))?;
        params.insert("head.bias", Tensor::zeros(&[1]))?;
        let base = graph.adjacency_with_self_loops();
        Ok(Self {
            config,
            graph,
            base,
            params,
            running,
        })
    }

    pub fn config(&self) -> &StgcnConfig {
        &self.config
    }

    pub fn graph(&self) -> &FaceGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> StgcnModel<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            params
                .insert(p.name.clone(), p.value.cast())
                .expect("names are unique and values finite");
        }
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.to_f64_lossy())).collect();
        StgcnModel {
            config: self.config.clone(),
            graph: self.graph.clone(),
            base: self.base.cast(),
            params,
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
        }
    }

    /// The same model with nodes relabeled (`new_of_old[i]` is the new index
    /// of node `i`); masks are permuted along both axes.
    pub fn relabel_nodes(&self, new_of_old: &[usize]) -> Result<Self> {
        let graph = self.graph.relabel(new_of_old)?;
        let n = graph.num_nodes();
        let mut out = self.clone();
        out.base = graph.adjacency_with_self_loops();
        out.graph = graph;
        for u in 0..self.config.num_units() {
            let name = pname(u, "mask");
            let old = self.params.value(&name).expect("mask exists").data();
            let mut new = vec![T::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    new[new_of_old[i] * n + new_of_old[j]] = old[i * n + j];
                }
            }
            out.params.set_value(&name, Tensor::new(vec![n, n], new)?)?;
        }
        Ok(out)
    }

    /// One unit on the tape; `x` is `[B, N, S, C_in]`.
    pub fn unit_on_tape(
        &self,
        tape: &mut Tape<T>,
        u: usize,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let cfg = &self.config;
        let shape = tape.value(x).shape().to_vec();
        let (ci, co) = (cfg.unit_in(u), cfg.channels[u]);
        if shape.len() != 4 || shape[1] != self.num_nodes() || shape[3] != ci {
            return Err(Error::Shape(format!(
                "unit {u} expects [B, {}, S, {ci}], got {shape:?}",
                self.num_nodes()
            )));
        }
        let (b, n, s) = (shape[0], shape[1], shape[2]);
        let mask = tape.param(&self.params, &pname(u, "mask"))?;
        let adj = tape.normalized_adjacency(mask, &self.base, T::of(DEGREE_EPS), cfg.degree_grad)?;
        let w = tape.param(&self.params, &pname(u, "spatial"))?;
        // Mix nodes over whichever of C_in / C_out is narrower.
        let g = if co <= ci {
            let flat = tape.reshape(x, &[b * n * s, ci])?;
            let xw = tape.matmul(flat, w)?;
            let xw = tape.reshape(xw, &[b, n, s * co])?;
            tape.graph_mix(adj, xw)?
        } else {
            let flat = tape.reshape(x, &[b, n, s * ci])?;
            let mixed = tape.graph_mix(adj, flat)?;
            let mixed = tape.reshape(mixed, &[b * n * s, ci])?;
            tape.matmul(mixed, w)?
        };
        let g = tape.reshape(g, &[b, n, s, co])?;
        let kernel = tape.param(&self.params, &pname(u, "temporal"))?;
        let bias = if cfg.batch_norm {
            None
        } else {
            Some(tape.param(&self.params, &pname(u, "temporal_bias"))?)
        };
        let mut h = tape.temporal_conv(g, kernel, bias, cfg.strides[u])?;
        let mut stats = None;
        if cfg.batch_norm {
            let gamma = tape.param(&self.params, &pname(u, "bn_gamma"))?;
            let beta = tape.param(&self.params, &pname(u, "bn_beta"))?;
            let eps = T::of(cfg.bn_eps);
            let (out, st) = match mode {
                Mode::Train => tape.batch_norm(h, gamma, beta, eps, None)?,
                Mode::Eval => {
                    let r = &self.running[u];
                    tape.batch_norm(h, gamma, beta, eps, Some((&r.mean, &r.var)))?
                }
            };
            h = out;
            stats = st;
        }
        if cfg.residual {
            let res = if cfg.needs_projection(u) {
                let proj = tape.param(&self.params, &pname(u, "residual"))?;
                tape.temporal_conv(x, proj, None, cfg.strides[u])?
            } else {
                x
            };
            h = tape.add(h, res)?;
        }
        if cfg.relu {
            h = tape.relu(h)?;
        }
        Ok((h, stats))
    }

    /// Full forward on the tape for `x[B, N, S, C_in]`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardVars<T>> {
        let mut h = x;
        let mut batch_stats = Vec::new();
        for u in 0..self.config.num_units() {
            let (out, st) = self.unit_on_tape(tape, u, h, mode)?;
            h = out;
            batch_stats.extend(st);
        }
        let features = match self.config.pooling {
            Pooling::Mean => tape.mean_pool(h)?,
            Pooling::Max => tape.max_pool(h)?,
        };
        let w = tape.param(&self.params, "head.weight")?;
        let bias = tape.param(&self.params, "head.bias")?;
        let z = tape.matmul(features, w)?;
        let z = tape.add_bias(z, bias)?;
        let b = tape.value(z).shape()[0];
        let logits = tape.reshape(z, &[b])?;
        Ok(ForwardVars {
            features,
            logits,
            final_map: h,
            batch_stats,
        })
    }

    /// Evaluation-mode forward: `(f_g[B, d_g], logits[B])`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let out = self.forward_on_tape(&mut tape, xv, Mode::Eval)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.num_nodes() || s[3] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model input must be [B, {}, S, {}], got {s:?}",
                self.num_nodes(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        let m = T::of(self.config.bn_momentum);
        for (r, st) in self.running.iter_mut().zip(stats) {
            let unbias = if st.count > 1 {
                T::of(st.count as f64 / (st.count - 1) as f64)
            } else {
                T::one()
            };
            for c in 0..r.mean.len() {
                r.mean[c] = (T::one() - m) * r.mean[c] + m * st.mean[c];
                r.var[c] = (T::one() - m) * r.var[c] + m * st.var[c] * unbias;
            }
        }
    }

    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint<T> {
        let metadata = serde_json::json!({
            "graph_hash": self.graph.hash(),
            "num_nodes": self.num_nodes(),
            "config": self.config,
            "config_hash": crate::hash::json_digest(&self.config),
            "epoch": epoch,
        });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, metadata, &self.params);
        for (u, r) in self.running.iter().enumerate() {
            let rec = |v: &[T]| TensorRecord {
                shape: vec![v.len()],
                values: v.to_vec(),
            };
            ck.state.insert(pname(u, "bn_running_mean"), rec(&r.mean));
            ck.state.insert(pname(u, "bn_running_var"), rec(&r.var));
        }
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>, epoch: usize) -> Result<()> {
        self.to_checkpoint(epoch).save(path)
    }

    /// Rebuilds a model from a checkpoint; the graph must hash to the value
    /// recorded at save time.
    pub fn from_checkpoint(ck: &Checkpoint<T>, graph: FaceGraph) -> Result<Self> {
        let meta = &ck.metadata;
        let recorded = meta["graph_hash"].as_str().unwrap_or_default();
        if recorded != graph.hash() {
            return Err(Error::Checkpoint(
                "graph does not match the one the checkpoint was trained on".into(),
            ));
        }
        let config: StgcnConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(config, graph, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        ck.restore_params(&mut model.params)?;
        for u in 0..model.running.len() {
            model.running[u] = RunningStats {
                mean: ck.state_tensor(&pname(u, "bn_running_mean"))?.into_data(),
                var: ck.state_tensor(&pname(u, "bn_running_var"))?.into_data(),
            };
            let c = model.config.channels[u];
            if model.running[u].mean.len() != c || model.running[u].var.len() != c {
                return Err(Error::Checkpoint(format!("running statistics of unit {u}")));
            }
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>, graph: FaceGraph) -> Result<(Self, usize)> {
        let ck = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let epoch = ck.metadata["epoch"].as_u64().unwrap_or(0) as usize;
        Ok((Self::from_checkpoint(&ck, graph)?, epoch))
    }
}

impl HasParams for StgcnModel<f64> {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }
}

/// Evaluation-mode forward of a single unit on `f_in[N, S, C_in]`.
pub fn stgcn_unit_forward<T: Scalar>(model: &StgcnModel<T>, u: usize, f_in: &Tensor<T>) -> Result<Tensor<T>> {
    if u >= model.config.num_units() {
        return Err(Error::InvalidArgument(format!("no unit {u}")));
    }
    if f_in.rank() != 3 {
        return Err(Error::Shape(format!("unit input must be [N, S, C], got {:?}", f_in.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(f_in.shape());
    let mut tape = Tape::new();
    let x = tape.input(f_in.clone().reshape(&shape)?)?;
    let (out, _) = model.unit_on_tape(&mut tape, u, x, Mode::Eval)?;
    let s = tape.value(out).shape()[1..].to_vec();
    tape.value(out).clone().reshape(&s)
}

/// Mean binary cross-entropy of movement logits against `l_g` labels.
pub fn geometric_loss<T: Scalar>(logits: &[T], labels: &[T]) -> Result<T> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut acc = T::zero();
    for (&z, &l) in logits.iter().zip(labels) {
        acc += crate::kernels::bce_with_logits(z, l)?;
    }
    Ok(acc / T::of(logits.len() as f64))
}

/// Stacks equally long sequences into `[B, N, S, 2]` (frames are stored
/// time-major, the model wants node-major).
pub fn sequences_to_tensor<T: Scalar>(seqs: &[&LandmarkSequence]) -> Result<Tensor<T>> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (s, n) = (first.num_frames(), first.num_nodes());
    let mut data = Vec::with_capacity(seqs.len() * n * s * 2);
    for seq in seqs {
        if seq.num_frames() != s || seq.num_nodes() != n {
            return Err(Error::Record {
                id: seq.id.clone(),
                message: format!(
                    "shape {}x{} differs from the batch's {s}x{n}",
                    seq.num_frames(),
                    seq.num_nodes()
                ),
            });
        }
        for node in 0..n {
            for frame in &seq.frames {
                data.push(T::of(frame[node][0]));
                data.push(T::of(frame[node][1]));
            }
        }
    }
    Tensor::new(vec![seqs.len(), n, s, 2], data)
}
